"""Weakly-supervised video classification toolkit for transient-event detection.

Videos are treated as bags of frames with a single binary label. Training
samples one random frame per equal-size video block; inference runs every
block offset and takes a majority vote over the per-offset predictions.
"""

__version__ = "0.1.0"
