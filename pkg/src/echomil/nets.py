"""Network building blocks: 2D backbone, grafted 3D stages, attention pooling.

The spatial backbone is either a standard 18-layer residual network or a
reduced variant with the same stage layout at 1/4 width scale. The temporal
branch consumes the 2D stage-2 activation maps stacked along time and runs
three 3D residual stages whose widths mirror the 2D stages.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torchvision
from torchvision.models.resnet import BasicBlock, conv1x1


def attention_aggregate(
    frame_features: torch.Tensor, V: torch.Tensor, w: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Gated attention pooling over per-frame features.

    Scores are s_j = w . tanh(V h_j); weights are their softmax; the pooled
    feature is the weight-averaged sum of the h_j. Accepts (J, D) or
    batched (B, J, D) features; V is (M, D) and w is (M,).

    Returns (pooled_feature, weights) with shapes matching the input batch
    layout.
    """
    squeeze = frame_features.dim() == 2
    h = frame_features.unsqueeze(0) if squeeze else frame_features
    if h.dim() != 3:
        raise ValueError(f"expected (J, D) or (B, J, D) features, got {tuple(frame_features.shape)}")
    scores = torch.tanh(h @ V.T) @ w  # (B, J)
    alpha = torch.softmax(scores, dim=1)
    pooled = torch.einsum("bj,bjd->bd", alpha, h)
    if squeeze:
        return pooled.squeeze(0), alpha.squeeze(0)
    return pooled, alpha


class AttentionPool(nn.Module):
    """Learned softmax weighting of frame features (no bias terms)."""

    def __init__(self, feature_dim: int, hidden_dim: int):
        super().__init__()
        self.V = nn.Linear(feature_dim, hidden_dim, bias=False)
        self.w = nn.Linear(hidden_dim, 1, bias=False)

    def forward(self, frame_features: torch.Tensor):
        return attention_aggregate(
            frame_features, self.V.weight, self.w.weight.squeeze(0)
        )


class SpatialBackbone(nn.Module):
    """Per-frame residual feature extractor exposing intermediate maps.

    forward returns (pooled_features, stage2_maps, final_maps); the stage-2
    maps feed the temporal branch and the final maps feed activation-map
    visualization.
    """

    def __init__(self, depth: str, feature_dim: int, pretrained: bool = False):
        super().__init__()
        if depth == "resnet18":
            if feature_dim != 512:
                raise ValueError(
                    f"resnet18 backbone produces 512-d features, config says {feature_dim}"
                )
            weights = (
                torchvision.models.ResNet18_Weights.IMAGENET1K_V1 if pretrained else None
            )
            net = torchvision.models.resnet18(weights=weights)
            self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
            self.stage1 = net.layer1
            self.stage2 = net.layer2
            self.stage3 = net.layer3
            self.stage4 = net.layer4
            self.stage2_channels = 128
        elif depth == "toy":
            if pretrained:
                raise ValueError("no pretrained weights exist for the toy backbone")
            if feature_dim % 8 or feature_dim < 8:
                raise ValueError(
                    f"toy backbone width is feature_dim/8; feature_dim {feature_dim} "
                    "must be a positive multiple of 8"
                )
            w = feature_dim // 8
            self.stem = nn.Sequential(
                nn.Conv2d(3, w, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(inplace=True),
            )
            self.stage1 = self._make_stage(w, w, stride=1)
            self.stage2 = self._make_stage(w, 2 * w, stride=2)
            self.stage3 = self._make_stage(2 * w, 4 * w, stride=2)
            self.stage4 = self._make_stage(4 * w, 8 * w, stride=2)
            self.stage2_channels = 2 * w
        else:
            raise ValueError(f"unknown backbone depth {depth!r}")
        self.depth = depth
        self.feature_dim = feature_dim
        self.avgpool = nn.AdaptiveAvgPool2d(1)

    @staticmethod
    def _make_stage(in_ch: int, out_ch: int, stride: int) -> nn.Module:
        downsample = None
        if stride != 1 or in_ch != out_ch:
            downsample = nn.Sequential(
                conv1x1(in_ch, out_ch, stride), nn.BatchNorm2d(out_ch)
            )
        return BasicBlock(in_ch, out_ch, stride=stride, downsample=downsample)

    def forward(self, x: torch.Tensor):
        x = self.stem(x)
        x = self.stage1(x)
        s2 = self.stage2(x)
        x = self.stage3(s2)
        last = self.stage4(x)
        feat = torch.flatten(self.avgpool(last), 1)
        return feat, s2, last


class BasicBlock3d(nn.Module):
    """3D analogue of the 2-conv residual block."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class TemporalBranch(nn.Module):
    """3D residual stages over time-stacked 2D stage-2 maps.

    Stage widths are out_dim/4, out_dim/2, out_dim; the first stage keeps
    resolution, the later two stride by 2 in time and space. Global pooling
    yields a single out_dim vector per video.
    """

    def __init__(self, in_channels: int, out_dim: int, blocks_per_stage: int = 1):
        super().__init__()
        if out_dim % 4:
            raise ValueError(f"temporal feature dim must be divisible by 4, got {out_dim}")
        c = out_dim // 4
        self.stage2 = self._make_stage(in_channels, c, 1, blocks_per_stage)
        self.stage3 = self._make_stage(c, 2 * c, 2, blocks_per_stage)
        self.stage4 = self._make_stage(2 * c, 4 * c, 2, blocks_per_stage)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.out_dim = out_dim

    @staticmethod
    def _make_stage(in_ch: int, out_ch: int, stride: int, blocks: int) -> nn.Module:
        layers = [BasicBlock3d(in_ch, out_ch, stride=stride)]
        layers.extend(BasicBlock3d(out_ch, out_ch) for _ in range(blocks - 1))
        return nn.Sequential(*layers)

    def forward(self, stage2_maps: torch.Tensor) -> torch.Tensor:
        if stage2_maps.dim() != 5:
            raise ValueError(
                f"expected (B, N, C, h, w) stage-2 maps, got {tuple(stage2_maps.shape)}"
            )
        if stage2_maps.shape[1] < 2:
            raise ValueError("temporal branch needs at least 2 frames")
        x = stage2_maps.permute(0, 2, 1, 3, 4)  # B, C, N, h, w
        x = self.stage2(x)
        x = self.stage3(x)
        x = self.stage4(x)
        return torch.flatten(self.pool(x), 1)
