"""Dual-branch video classifier and whole-video inference.

One branch pools per-frame residual features with learned attention weights
(spatial); the other runs 3D residual stages over the stacked stage-2 maps
(temporal). The fused vector feeds a single-logit linear head. Whole-video
prediction scores every block-offset collection and takes the majority vote.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn

from .dataset import VideoSample, preprocess_frames
from .nets import AttentionPool, SpatialBackbone, TemporalBranch, attention_aggregate
from .sampling import (
    FrameIndexCollection,
    block_inference_collections,
    maximal_agreement_decision,
    partition_blocks,
)

__all__ = [
    "ModelConfig",
    "FeatureBundle",
    "Prediction",
    "AsdClassifier",
    "attention_aggregate",
    "build_model",
    "forward_collection",
    "predict_video",
    "write_checkpoint",
    "read_checkpoint",
    "load_model_from_checkpoint",
]

FUSIONS = ("concat", "sum")
BACKBONES = ("resnet18", "toy")
INFERENCE_RULES = ("mad", "middle")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; the ablation switches live here too."""

    num_frames: int = 16
    input_size: int = 224
    spatial_feature_dim: int = 512
    attention_hidden_dim: int = 1024
    temporal_feature_dim: int = 512
    backbone_depth: str = "resnet18"
    pretrained_backbone: bool = False
    fusion: str = "concat"
    use_temporal_branch: bool = True
    use_attention: bool = True
    inference_rule: str = "mad"

    def __post_init__(self):
        if min(
            self.num_frames,
            self.spatial_feature_dim,
            self.attention_hidden_dim,
            self.temporal_feature_dim,
        ) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.input_size < 8:
            raise ValueError(f"input_size must be >= 8, got {self.input_size}")
        if self.backbone_depth not in BACKBONES:
            raise ValueError(f"backbone_depth must be one of {BACKBONES}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}")
        if self.inference_rule not in INFERENCE_RULES:
            raise ValueError(f"inference_rule must be one of {INFERENCE_RULES}")
        if (
            self.fusion == "sum"
            and self.use_temporal_branch
            and self.spatial_feature_dim != self.temporal_feature_dim
        ):
            raise ValueError(
                "fusion=sum requires equal spatial and temporal feature dims, "
                f"got {self.spatial_feature_dim} and {self.temporal_feature_dim}"
            )

    @property
    def fused_dim(self) -> int:
        if not self.use_temporal_branch or self.fusion == "sum":
            return self.spatial_feature_dim
        return self.spatial_feature_dim + self.temporal_feature_dim

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class FeatureBundle:
    """All intermediate representations of one collection forward pass."""

    frame_features: torch.Tensor  # N x D
    stage2_maps: torch.Tensor  # N x C x h x w
    attention_weights: torch.Tensor  # N
    spatial_feature: torch.Tensor  # D
    temporal_feature: torch.Tensor | None
    fused: torch.Tensor

    def check(self, atol_sum: float = 1e-6, atol_lin: float = 1e-5) -> None:
        """Assert the bundle's structural invariants."""
        alpha = self.attention_weights
        if torch.any(alpha < 0):
            raise ValueError("attention weights must be non-negative")
        total = float(alpha.sum())
        if abs(total - 1.0) > atol_sum:
            raise ValueError(f"attention weights sum to {total}, not 1")
        recombined = (alpha.unsqueeze(1) * self.frame_features).sum(dim=0)
        err = float((recombined - self.spatial_feature).abs().max())
        if err > atol_lin:
            raise ValueError(
                f"spatial feature deviates from weighted frame sum by {err}"
            )


@dataclass
class Prediction:
    """Per-collection votes/scores with the majority-vote outcome."""

    collection_votes: list[int]
    collection_scores: list[float]
    final_label: int
    final_score: float

    def __post_init__(self):
        if len(self.collection_votes) != len(self.collection_scores):
            raise ValueError("votes and scores must align")
        for vote, score in zip(self.collection_votes, self.collection_scores):
            expected = 1 if score >= 0.5 else -1
            if vote != expected:
                raise ValueError(
                    f"vote {vote} inconsistent with score {score} at threshold 0.5"
                )
        if self.final_label != maximal_agreement_decision(self.collection_votes):
            raise ValueError("final label must be the majority vote")

    def as_dict(self) -> dict:
        return {
            "votes": self.collection_votes,
            "scores": self.collection_scores,
            "final_label": self.final_label,
            "final_score": self.final_score,
        }


class ForwardOutput(NamedTuple):
    logit: torch.Tensor  # (B,)
    probability: torch.Tensor  # (B,)
    frame_features: torch.Tensor  # (B, N, D)
    stage2_maps: torch.Tensor  # (B, N, C, h, w)
    attention_weights: torch.Tensor  # (B, N)
    spatial_feature: torch.Tensor  # (B, D)
    temporal_feature: torch.Tensor | None  # (B, Td)
    fused: torch.Tensor  # (B, F)
    final_maps: torch.Tensor  # (B, N, C4, h4, w4)


class AsdClassifier(nn.Module):
    """Spatial attention pooling plus optional 3D temporal branch."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone = SpatialBackbone(
            config.backbone_depth,
            config.spatial_feature_dim,
            pretrained=config.pretrained_backbone,
        )
        self.attention = (
            AttentionPool(config.spatial_feature_dim, config.attention_hidden_dim)
            if config.use_attention
            else None
        )
        self.temporal = None
        if config.use_temporal_branch:
            self.temporal = TemporalBranch(
                self.backbone.stage2_channels,
                config.temporal_feature_dim,
                blocks_per_stage=2 if config.backbone_depth == "resnet18" else 1,
            )
        self.head = nn.Linear(config.fused_dim, 1)

    def _check_frames(self, frames: torch.Tensor) -> None:
        if frames.dim() != 4 or frames.shape[1] != 3:
            raise ValueError(f"expected (N, 3, H, W) frames, got {tuple(frames.shape)}")
        if frames.shape[2] != self.config.input_size or frames.shape[3] != self.config.input_size:
            raise ValueError(
                f"frames are {tuple(frames.shape[2:])}, model expects "
                f"{self.config.input_size}x{self.config.input_size}"
            )

    def extract_frame_features(self, frames: torch.Tensor):
        """Per-frame pooled features plus the stage-2 activation maps."""
        self._check_frames(frames)
        feats, s2, _ = self.backbone(frames)
        return feats, s2

    def temporal_branch(self, stage2_maps: torch.Tensor) -> torch.Tensor:
        if self.temporal is None:
            raise RuntimeError("temporal branch is disabled in this configuration")
        return self.temporal(stage2_maps)

    def fuse_and_classify(
        self, spatial: torch.Tensor, temporal: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Fuse branch features and emit (fused, logit, probability)."""
        if temporal is None:
            fused = spatial
        elif self.config.fusion == "concat":
            fused = torch.cat([spatial, temporal], dim=1)
        else:
            if spatial.shape != temporal.shape:
                raise ValueError(
                    f"sum fusion needs equal shapes, got {tuple(spatial.shape)} "
                    f"and {tuple(temporal.shape)}"
                )
            fused = spatial + temporal
        logit = self.head(fused).squeeze(1)
        return fused, logit, torch.sigmoid(logit)

    def forward(self, clips: torch.Tensor) -> ForwardOutput:
        if clips.dim() != 5:
            raise ValueError(f"expected (B, N, 3, H, W) clips, got {tuple(clips.shape)}")
        b, n = clips.shape[:2]
        flat = clips.reshape(b * n, *clips.shape[2:])
        self._check_frames(flat)
        feats, s2, last = self.backbone(flat)
        frame_features = feats.reshape(b, n, -1)
        stage2_maps = s2.reshape(b, n, *s2.shape[1:])
        final_maps = last.reshape(b, n, *last.shape[1:])

        if self.attention is not None:
            spatial, alpha = self.attention(frame_features)
        else:
            alpha = torch.full((b, n), 1.0 / n, dtype=clips.dtype, device=clips.device)
            spatial = frame_features.mean(dim=1)

        temporal = self.temporal(stage2_maps) if self.temporal is not None else None
        fused, logit, prob = self.fuse_and_classify(spatial, temporal)
        return ForwardOutput(
            logit=logit,
            probability=prob,
            frame_features=frame_features,
            stage2_maps=stage2_maps,
            attention_weights=alpha,
            spatial_feature=spatial,
            temporal_feature=temporal,
            fused=fused,
            final_maps=final_maps,
        )


def build_model(config: ModelConfig, seed: int = 0) -> AsdClassifier:
    """Construct the classifier with seeded parameter initialization."""
    torch.manual_seed(seed)
    return AsdClassifier(config)


def collect_clip(
    video: VideoSample, collection: FrameIndexCollection, input_size: int
) -> torch.Tensor:
    """Gather, preprocess, and tensorize one collection's frames: (N, 3, S, S)."""
    indices = collection.resolve(video.num_frames)
    frames = video.frames[indices]
    pre = preprocess_frames(frames, input_size)
    return torch.from_numpy(pre).permute(0, 3, 1, 2).contiguous()


def forward_collection(
    model: AsdClassifier, collection: FrameIndexCollection, video: VideoSample
) -> tuple[float, FeatureBundle]:
    """Score one frame collection of a video, returning all internals."""
    clip = collect_clip(video, collection, model.config.input_size).unsqueeze(0)
    with torch.no_grad():
        out = model(clip)
    bundle = FeatureBundle(
        frame_features=out.frame_features[0],
        stage2_maps=out.stage2_maps[0],
        attention_weights=out.attention_weights[0],
        spatial_feature=out.spatial_feature[0],
        temporal_feature=None if out.temporal_feature is None else out.temporal_feature[0],
        fused=out.fused[0],
    )
    return float(out.probability[0]), bundle


def inference_collections(
    num_frames: int, config: ModelConfig
) -> list[FrameIndexCollection]:
    """The collections predict_video will score, per the inference rule."""
    partition = partition_blocks(num_frames, config.num_frames)
    collections = block_inference_collections(partition)
    if config.inference_rule == "middle":
        return [collections[partition.block_size // 2]]
    return collections


def predict_video(
    model: AsdClassifier, video: VideoSample, config: ModelConfig | None = None
) -> Prediction:
    """Score every inference collection, threshold at 0.5, majority-vote."""
    config = config or model.config
    model.eval()
    collections = inference_collections(video.num_frames, config)
    clips = torch.stack(
        [collect_clip(video, c, config.input_size) for c in collections]
    )
    with torch.no_grad():
        out = model(clips)
    scores = [float(p) for p in out.probability]
    votes = [1 if s >= 0.5 else -1 for s in scores]
    return Prediction(
        collection_votes=votes,
        collection_scores=scores,
        final_label=maximal_agreement_decision(votes),
        final_score=float(np.mean(scores)),
    )


# ---------------------------------------------------------------------------
# checkpoint files: binary blob + fixed-schema JSON sidecar


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".json")


def write_checkpoint(
    path: str | Path,
    state_dict: dict,
    model_config: ModelConfig,
    seed: int,
    epoch: int,
    extra: dict | None = None,
) -> None:
    """Save parameters plus a JSON sidecar with config, seed, and epoch."""
    path = Path(path)
    blob = {
        "state_dict": state_dict,
        "model_config": model_config.to_dict(),
        "seed": seed,
        "epoch": epoch,
    }
    if extra:
        blob.update(extra)
    torch.save(blob, path)
    with open(sidecar_path(path), "w") as fh:
        json.dump(
            {"config": model_config.to_dict(), "seed": seed, "epoch": epoch},
            fh,
            indent=2,
        )
        fh.write("\n")


def read_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def load_model_from_checkpoint(checkpoint) -> tuple[AsdClassifier, ModelConfig]:
    """Accept a checkpoint path or an in-memory checkpoint-like object."""
    if isinstance(checkpoint, (str, os.PathLike)):
        blob = read_checkpoint(checkpoint)
        config = ModelConfig.from_dict(blob["model_config"])
        state_dict = blob["state_dict"]
    elif hasattr(checkpoint, "model_config") and hasattr(checkpoint, "state_dict"):
        config = checkpoint.model_config
        state_dict = checkpoint.state_dict
    else:
        raise TypeError(
            "checkpoint must be a path or an object with model_config/state_dict"
        )
    model = AsdClassifier(config)
    model.load_state_dict(state_dict)
    model.eval()
    return model, config
