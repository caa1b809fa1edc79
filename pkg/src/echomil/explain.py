"""Gradient-based heatmaps showing which image regions drive a prediction.

Heatmaps come from the spatial backbone's last convolutional stage: channel
maps are weighted by the spatial mean of their gradients with respect to the
positive-class logit, summed, rectified, and upsampled to frame resolution.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F

from .dataset import VideoSample, write_video
from .model import collect_clip, load_model_from_checkpoint, predict_video
from .sampling import FrameIndexCollection, block_inference_collections, partition_blocks

OVERLAY_ALPHA = 0.4


@dataclass
class HeatmapResult:
    heatmaps: np.ndarray  # (N, H, W) float32 in [0, 1], frame resolution
    overlays: np.ndarray  # (N, H, W, 3) uint8 RGB
    collection: FrameIndexCollection
    predicted_label: int
    video_id: str

    def __post_init__(self):
        if self.heatmaps.ndim != 3:
            raise ValueError("heatmaps must be (N, H, W)")
        if self.overlays.shape != self.heatmaps.shape + (3,):
            raise ValueError("overlays must match heatmaps with a channel axis")
        if self.heatmaps.min() < 0 or self.heatmaps.max() > 1 + 1e-6:
            raise ValueError("heatmaps must lie in [0, 1]")


def _middle_collection(num_frames: int, frames_per_clip: int) -> FrameIndexCollection:
    partition = partition_blocks(num_frames, frames_per_clip)
    collections = block_inference_collections(partition)
    return collections[partition.block_size // 2]


def _colorize(heat: np.ndarray, frame: np.ndarray) -> np.ndarray:
    """Blend a [0,1] heatmap over an RGB uint8 frame with the jet palette."""
    heat_u8 = np.round(heat * 255).astype(np.uint8)
    color_bgr = cv2.applyColorMap(heat_u8, cv2.COLORMAP_JET)
    color = color_bgr[:, :, ::-1].astype(np.float32)
    blended = OVERLAY_ALPHA * color + (1 - OVERLAY_ALPHA) * frame.astype(np.float32)
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def generate_heatmap(checkpoint, video: VideoSample) -> HeatmapResult:
    """Compute per-frame heatmaps for the middle inference collection.

    Normalization uses the single maximum over the whole clip, so frames
    without evidence stay dark instead of being stretched to full range.
    """
    model, config = load_model_from_checkpoint(checkpoint)
    collection = _middle_collection(video.num_frames, config.num_frames)
    clip = collect_clip(video, collection, config.input_size)

    model.eval()
    captured: list[torch.Tensor] = []

    def keep(module, inputs, output):
        output.retain_grad()
        captured.append(output)

    # hook the stage output itself; the copy forward() returns is off-graph
    handle = model.backbone.stage4.register_forward_hook(keep)
    try:
        with torch.enable_grad():
            out = model(clip.unsqueeze(0))
            model.zero_grad(set_to_none=True)
            out.logit.sum().backward()
    finally:
        handle.remove()
    maps = captured[0]  # (N, C, h, w)
    grads = maps.grad
    if grads is None:
        raise RuntimeError("no gradient reached the final convolutional stage")

    weights = grads.mean(dim=(2, 3), keepdim=True)  # (N, C, 1, 1)
    cam = F.relu((weights * maps).sum(dim=1, keepdim=True))  # (N, 1, h, w)
    height, width = video.frames.shape[1:3]
    cam = F.interpolate(cam, size=(height, width), mode="bilinear", align_corners=False)
    cam = cam.squeeze(1).detach().numpy().astype(np.float32)

    peak = float(cam.max())
    if peak < 1e-12:
        cam = np.zeros_like(cam)  # nothing salient; keep the map honestly blank
    else:
        cam = cam / peak

    resolved = collection.resolve(video.num_frames)
    overlays = np.stack(
        [_colorize(cam[j], video.frames[resolved[j]]) for j in range(len(resolved))]
    )
    prediction = predict_video(model, video)
    return HeatmapResult(
        heatmaps=cam,
        overlays=overlays,
        collection=collection,
        predicted_label=prediction.final_label,
        video_id=video.id,
    )


def save_heatmap_outputs(result: HeatmapResult, out_dir: str | Path, fps: int = 10) -> list[Path]:
    """Write one overlay PNG per clip frame plus an overlay video; returns paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for j in range(result.overlays.shape[0]):
        path = out_dir / f"{result.video_id}_frame{j}.png"
        cv2.imwrite(str(path), result.overlays[j][:, :, ::-1])
        written.append(path)
    video_path = out_dir / f"{result.video_id}_overlay.avi"
    write_video(video_path, result.overlays, fps=fps)
    written.append(video_path)
    return written
