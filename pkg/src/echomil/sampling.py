"""Block partitioning, frame selection, and the majority-vote decision rule.

A video of T frames is split into N equal blocks by conceptually padding the
index range up to the next multiple of N (padded indices read the last real
frame). Training draws one random index per block; inference builds one
collection per within-block offset so every real frame is used exactly once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

TRAINING_RANDOM = "training_random"
INFERENCE_OFFSET = "inference_offset"


@dataclass(frozen=True)
class BlockPartition:
    """Equal-size block layout over a (padded) frame index range."""

    num_frames: int
    num_frames_padded: int
    num_blocks: int
    block_size: int
    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        if self.num_frames < 1:
            raise ValueError("partition needs at least one real frame")
        if self.num_blocks * self.block_size != self.num_frames_padded:
            raise ValueError("blocks do not tile the padded range")


@dataclass(frozen=True)
class FrameIndexCollection:
    """One frame index per block, in padded index space.

    Indices are strictly increasing because each block contributes exactly
    one index from its own range. Padded indices (>= the real frame count)
    are clamped to the last real frame at read time via :meth:`resolve`.
    """

    indices: tuple[int, ...]
    origin: str
    offset: int | None = None

    def __post_init__(self):
        if self.origin not in (TRAINING_RANDOM, INFERENCE_OFFSET):
            raise ValueError(f"unknown collection origin: {self.origin!r}")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise ValueError("collection indices must be strictly increasing")

    def resolve(self, num_frames: int) -> list[int]:
        """Map padded indices onto real frame indices (clamp to last frame)."""
        last = num_frames - 1
        return [min(i, last) for i in self.indices]


def partition_blocks(num_frames: int, n_blocks: int) -> BlockPartition:
    """Split ``num_frames`` into ``n_blocks`` equal blocks, padding by repeat.

    Padding is index-level only: the padded range is the next multiple of
    ``n_blocks`` and indices past the real end resolve to the final frame.
    """
    if num_frames < 1:
        raise ValueError(f"num_frames must be >= 1, got {num_frames}")
    if n_blocks < 1:
        raise ValueError(f"n_blocks must be >= 1, got {n_blocks}")
    if num_frames < n_blocks:
        logger.warning(
            "video has %d frames for %d blocks; trailing indices will repeat "
            "the last frame", num_frames, n_blocks,
        )
    padded = ((num_frames + n_blocks - 1) // n_blocks) * n_blocks
    block_size = padded // n_blocks
    bounds = tuple(
        (b * block_size, (b + 1) * block_size) for b in range(n_blocks)
    )
    return BlockPartition(
        num_frames=num_frames,
        num_frames_padded=padded,
        num_blocks=n_blocks,
        block_size=block_size,
        boundaries=bounds,
    )


def block_random_select(partition: BlockPartition, rng_seed: int) -> FrameIndexCollection:
    """Pick one uniformly random index from every block (training sampler)."""
    rng = np.random.default_rng(rng_seed)
    indices = tuple(int(rng.integers(lo, hi)) for lo, hi in partition.boundaries)
    return FrameIndexCollection(indices=indices, origin=TRAINING_RANDOM)


def block_first_select(partition: BlockPartition) -> FrameIndexCollection:
    """Deterministic fallback sampler: the first frame of every block."""
    indices = tuple(lo for lo, _ in partition.boundaries)
    return FrameIndexCollection(indices=indices, origin=TRAINING_RANDOM)


def block_inference_collections(partition: BlockPartition) -> list[FrameIndexCollection]:
    """Build the K per-offset collections covering every frame once.

    Collection o holds, for each block, the frame at position o within the
    block. Across all K collections each padded index appears exactly once,
    so the real frames are covered exactly once after clamp de-duplication.
    """
    k = partition.block_size
    out = []
    for offset in range(k):
        indices = tuple(lo + offset for lo, _ in partition.boundaries)
        out.append(
            FrameIndexCollection(indices=indices, origin=INFERENCE_OFFSET, offset=offset)
        )
    return out


def maximal_agreement_decision(votes: Sequence[int]) -> int:
    """Majority label over per-collection votes; ties resolve to +1.

    Erring positive on a tie is deliberate: a missed positive is the more
    costly mistake in the screening setting this rule serves.
    """
    if len(votes) == 0:
        raise ValueError("vote list must be non-empty")
    pos = 0
    neg = 0
    for v in votes:
        if v == 1:
            pos += 1
        elif v == -1:
            neg += 1
        else:
            raise ValueError(f"votes must be -1 or +1, got {v!r}")
    return 1 if pos >= neg else -1
