"""Video ingestion, preprocessing, synthetic data generation, fold splitting.

The synthetic generator stands in for private clinical data: negatives show
a noisy, sinusoidally deforming grayscale blob (cardiac-style motion) and
positives additionally carry a saturated colored patch for one contiguous
frame window, mimicking a flow signal that is only transiently visible.
Ground truth (event window and patch box) is written to a JSON sidecar.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

logger = logging.getLogger(__name__)

# Fixed channel standardization constants applied after scaling to [0, 1].
CHANNEL_MEAN = (0.45, 0.45, 0.45)
CHANNEL_STD = (0.225, 0.225, 0.225)

VIEW_TAGS = ("subAS", "LPS4C", "synthetic")

CACHE_ENV_VAR = "ECHOMIL_CACHE"


class VideoDecodeError(RuntimeError):
    """The container could not be opened or decoded."""


class EmptyVideoError(VideoDecodeError):
    """The container decoded to zero frames."""


class StratificationError(ValueError):
    """A class has too few samples for the requested fold count."""


@dataclass
class VideoSample:
    """A decoded video with its bag-level label and source metadata."""

    id: str
    frames: np.ndarray  # T x H x W x 3, uint8, RGB
    label: int  # -1 negative, +1 positive
    view_tag: str = "synthetic"
    source_path: str = ""

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be T x H x W x 3, got {self.frames.shape}")
        if self.frames.dtype != np.uint8:
            raise ValueError(f"frames must be uint8, got {self.frames.dtype}")
        if self.frames.shape[0] < 1:
            raise ValueError("video must contain at least one frame")
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label!r}")
        if self.view_tag not in VIEW_TAGS:
            raise ValueError(f"unknown view tag {self.view_tag!r}")

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: int
    view: str

    def __post_init__(self):
        if self.label not in (-1, 1):
            raise ValueError(f"label must be -1 or +1, got {self.label!r}")


@dataclass
class DatasetManifest:
    """Index of sample ids, file paths, and labels; paths resolve against root."""

    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest sample ids must be unique")

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {-1: 0, 1: 0}
        for e in self.entries:
            counts[e.label] += 1
        return counts

    def resolve_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "path", "label", "view"])
            for e in self.entries:
                writer.writerow([e.id, e.path, e.label, e.view])

    @classmethod
    def load_csv(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            expected = {"id", "path", "label", "view"}
            if reader.fieldnames is None or set(reader.fieldnames) != expected:
                raise ValueError(
                    f"manifest header must be id,path,label,view, got {reader.fieldnames}"
                )
            for row in reader:
                entries.append(
                    ManifestEntry(
                        id=row["id"],
                        path=row["path"],
                        label=int(row["label"]),
                        view=row["view"],
                    )
                )
        return cls(entries=entries, root=path.parent)


@dataclass
class FoldSplit:
    """Assignment of every sample id to one of k folds."""

    k: int
    assignments: dict[str, int]

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("fold count must be >= 2")
        bad = {i for i in self.assignments.values() if not 0 <= i < self.k}
        if bad:
            raise ValueError(f"fold indices out of range: {sorted(bad)}")

    def fold_ids(self, fold: int) -> list[str]:
        return sorted(sid for sid, f in self.assignments.items() if f == fold)

    def save_json(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump({"k": self.k, "assignments": self.assignments}, fh, indent=2)
            fh.write("\n")

    @classmethod
    def load_json(cls, path: str | Path) -> "FoldSplit":
        with open(path) as fh:
            data = json.load(fh)
        return cls(k=int(data["k"]), assignments=dict(data["assignments"]))


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic transient-event dataset."""

    num_positive: int
    num_negative: int
    frames_per_video: int = 48
    frame_size: int = 112
    event_window: tuple[int, int] = (10, 24)
    patch_region: tuple[float, float, float, float] = (0.25, 0.25, 0.5, 0.5)
    noise_level: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_positive < 0 or self.num_negative < 0:
            raise ValueError("sample counts must be >= 0")
        lo, hi = self.event_window
        if not (1 <= lo <= hi <= self.frames_per_video):
            raise ValueError(
                f"event window {self.event_window} must satisfy "
                f"1 <= min <= max <= {self.frames_per_video}"
            )
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must be in [0, 1]")
        x, y, w, h = self.patch_region
        if not (0 <= x < x + w <= 1 and 0 <= y < y + h <= 1):
            raise ValueError("patch_region must be a rectangle inside the unit square")

    def as_dict(self) -> dict:
        return {
            "num_positive": self.num_positive,
            "num_negative": self.num_negative,
            "frames_per_video": self.frames_per_video,
            "frame_size": self.frame_size,
            "event_window": list(self.event_window),
            "patch_region": list(self.patch_region),
            "noise_level": self.noise_level,
            "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# video I/O


def write_video(path: str | Path, frames: np.ndarray, fps: float = 30.0) -> None:
    """Write an RGB uint8 frame stack as an MJPG-encoded AVI."""
    path = str(path)
    h, w = frames.shape[1:3]
    writer = cv2.VideoWriter(path, cv2.VideoWriter_fourcc(*"MJPG"), fps, (w, h))
    if not writer.isOpened():
        raise OSError(f"cannot open video writer for {path}")
    try:
        for frame in frames:
            writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    finally:
        writer.release()


def _decode_video(path: Path) -> np.ndarray:
    cap = cv2.VideoCapture(str(path))
    if not cap.isOpened():
        raise VideoDecodeError(f"cannot decode video: {path}")
    frames = []
    try:
        while True:
            ok, frame = cap.read()
            if not ok:
                break
            frames.append(cv2.cvtColor(frame, cv2.COLOR_BGR2RGB))
    finally:
        cap.release()
    if not frames:
        raise EmptyVideoError(f"video has no frames: {path}")
    return np.stack(frames)


def _cached_decode(path: Path) -> np.ndarray:
    """Decode with an optional on-disk cache keyed by path and mtime."""
    cache_dir = os.environ.get(CACHE_ENV_VAR)
    if not cache_dir:
        return _decode_video(path)
    stat = path.stat()
    key = hashlib.sha256(
        f"{path.resolve()}:{stat.st_size}:{stat.st_mtime_ns}".encode()
    ).hexdigest()[:32]
    cache_path = Path(cache_dir) / f"{key}.npy"
    if cache_path.exists():
        return np.load(cache_path)
    frames = _decode_video(path)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    tmp = cache_path.with_suffix(".tmp.npy")
    np.save(tmp, frames)
    os.replace(tmp, cache_path)
    return frames


def load_video(
    path: str | Path,
    label: int = 1,
    view_tag: str = "synthetic",
    sample_id: str | None = None,
) -> VideoSample:
    """Decode a video container into a VideoSample.

    Label and view tag describe the sample, not the file; dataset loaders
    pass them from the manifest entry. The defaults only serve ad-hoc
    single-video prediction where no manifest exists.
    """
    path = Path(path)
    if not path.exists():
        raise VideoDecodeError(f"cannot decode video: {path} (no such file)")
    frames = _cached_decode(path)
    return VideoSample(
        id=sample_id if sample_id is not None else path.stem,
        frames=frames,
        label=label,
        view_tag=view_tag,
        source_path=str(path),
    )


def load_manifest_samples(
    manifest: DatasetManifest, ids: list[str] | None = None
) -> list[VideoSample]:
    """Load (a subset of) the manifest's videos, sorted by sample id."""
    wanted = None if ids is None else set(ids)
    samples = []
    for entry in manifest.entries:
        if wanted is not None and entry.id not in wanted:
            continue
        samples.append(
            load_video(
                manifest.resolve_path(entry),
                label=entry.label,
                view_tag=entry.view,
                sample_id=entry.id,
            )
        )
    samples.sort(key=lambda s: s.id)
    return samples


def preprocess_frames(frames: np.ndarray, target_size: int) -> np.ndarray:
    """Resize to target_size square, scale to [0,1], standardize per channel.

    Not idempotent: standardization is applied unconditionally, so running
    it twice shifts the distribution again.
    """
    if target_size < 8:
        raise ValueError(f"target_size must be >= 8, got {target_size}")
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected T x H x W x 3 frames, got {frames.shape}")
    out = np.empty(
        (frames.shape[0], target_size, target_size, 3), dtype=np.float32
    )
    for t, frame in enumerate(frames):
        resized = cv2.resize(
            frame.astype(np.float32),
            (target_size, target_size),
            interpolation=cv2.INTER_LINEAR,
        )
        out[t] = resized
    out /= 255.0
    mean = np.asarray(CHANNEL_MEAN, dtype=np.float32)
    std = np.asarray(CHANNEL_STD, dtype=np.float32)
    out -= mean
    out /= std
    return out


# ---------------------------------------------------------------------------
# synthetic generation


def _render_background(
    rng: np.random.Generator, num_frames: int, size: int, noise_level: float
) -> np.ndarray:
    """Noisy grayscale blob whose radius breathes sinusoidally."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    cx = size * rng.uniform(0.35, 0.65)
    cy = size * rng.uniform(0.35, 0.65)
    base_r = size * rng.uniform(0.22, 0.32)
    amp = rng.uniform(0.12, 0.22)
    period = rng.uniform(12.0, 24.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    aspect = rng.uniform(0.8, 1.25)
    brightness = rng.uniform(120.0, 170.0)
    noise_std = 48.0 * noise_level

    frames = np.empty((num_frames, size, size, 3), dtype=np.uint8)
    dist = np.sqrt(((xx - cx) * aspect) ** 2 + (yy - cy) ** 2)
    for t in range(num_frames):
        radius = base_r * (1.0 + amp * np.sin(2.0 * np.pi * t / period + phase))
        # soft-edged disk with a mild radial falloff
        body = np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0)
        gray = 30.0 + brightness * body
        if noise_std > 0:
            gray = gray + rng.normal(0.0, noise_std, size=gray.shape)
        gray = np.clip(gray, 0.0, 255.0).astype(np.uint8)
        frames[t] = gray[..., None]
    return frames


def _render_event_patch(
    rng: np.random.Generator,
    frames: np.ndarray,
    start: int,
    length: int,
    region: tuple[float, float, float, float],
) -> tuple[int, int, int, int]:
    """Paint a saturated elliptical color patch on frames [start, start+length).

    Returns the patch bounding box (x, y, w, h) in pixels.
    """
    size = frames.shape[1]
    rx, ry, rw, rh = region
    region_x0 = int(round(rx * size))
    region_y0 = int(round(ry * size))
    region_w = max(int(round(rw * size)), 8)
    region_h = max(int(round(rh * size)), 8)

    pw = max(int(region_w * rng.uniform(0.35, 0.55)), 6)
    ph = max(int(region_h * rng.uniform(0.35, 0.55)), 6)
    px = region_x0 + int(rng.integers(0, max(region_w - pw, 1)))
    py = region_y0 + int(rng.integers(0, max(region_h - ph, 1)))

    color = np.array(
        [rng.uniform(215, 245), rng.uniform(40, 70), rng.uniform(30, 60)],
        dtype=np.float32,
    )
    center = (px + pw // 2, py + ph // 2)
    axes = (max(pw // 2, 3), max(ph // 2, 3))
    mask = np.zeros(frames.shape[1:3], dtype=np.uint8)
    cv2.ellipse(mask, center, axes, 0.0, 0.0, 360.0, 255, thickness=-1)
    mask_bool = mask > 0

    for t in range(start, start + length):
        pulse = 0.85 + 0.15 * np.sin(np.pi * (t - start + 1) / (length + 1))
        frame = frames[t].astype(np.float32)
        frame[mask_bool] = np.clip(color * pulse, 0.0, 255.0)
        frames[t] = frame.astype(np.uint8)
    return px, py, pw, ph


def generate_synthetic_dataset(
    spec: SyntheticSpec, out_dir: str | Path
) -> DatasetManifest:
    """Write AVI videos, a CSV manifest, and a JSON ground-truth sidecar.

    Bit-identical output for identical spec (including seed). Negatives never
    contain the event patch; positives contain it in exactly one contiguous
    window whose start/length land in the sidecar together with the patch
    bounding box.
    """
    out_dir = Path(out_dir)
    video_dir = out_dir / "videos"
    video_dir.mkdir(parents=True, exist_ok=True)

    master = np.random.default_rng(spec.seed)
    total = spec.num_positive + spec.num_negative
    sample_seeds = master.integers(0, 2**63 - 1, size=max(total, 1))

    entries: list[ManifestEntry] = []
    sidecar: list[dict] = []
    labels = [1] * spec.num_positive + [-1] * spec.num_negative
    pos_i = neg_i = 0
    for idx, label in enumerate(labels):
        rng = np.random.default_rng(int(sample_seeds[idx]))
        if label == 1:
            sample_id = f"syn_pos_{pos_i:04d}"
            pos_i += 1
        else:
            sample_id = f"syn_neg_{neg_i:04d}"
            neg_i += 1
        frames = _render_background(
            rng, spec.frames_per_video, spec.frame_size, spec.noise_level
        )
        record = {"id": sample_id, "event_start": -1, "event_len": 0}
        if label == 1:
            lo, hi = spec.event_window
            length = int(rng.integers(lo, hi + 1))
            start = int(rng.integers(0, spec.frames_per_video - length + 1))
            px, py, pw, ph = _render_event_patch(
                rng, frames, start, length, spec.patch_region
            )
            record.update(
                {
                    "event_start": start,
                    "event_len": length,
                    "patch_x": px,
                    "patch_y": py,
                    "patch_w": pw,
                    "patch_h": ph,
                }
            )
        rel_path = f"videos/{sample_id}.avi"
        write_video(out_dir / rel_path, frames)
        entries.append(
            ManifestEntry(id=sample_id, path=rel_path, label=label, view="synthetic")
        )
        sidecar.append(record)

    manifest = DatasetManifest(entries=entries, root=out_dir)
    manifest.save_csv(out_dir / "manifest.csv")
    with open(out_dir / "ground_truth.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    logger.info(
        "wrote %d positives and %d negatives to %s",
        spec.num_positive, spec.num_negative, out_dir,
    )
    return manifest


def load_ground_truth(path: str | Path) -> dict[str, dict]:
    """Sidecar records keyed by sample id."""
    with open(path) as fh:
        records = json.load(fh)
    return {r["id"]: r for r in records}


# ---------------------------------------------------------------------------
# fold splitting


def make_fold_splits(manifest: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Stratified k-fold assignment: per-class round-robin after a shuffle."""
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    by_class: dict[int, list[str]] = {}
    for e in manifest.entries:
        by_class.setdefault(e.label, []).append(e.id)
    for label, ids in sorted(by_class.items()):
        if len(ids) < k:
            raise StratificationError(
                f"class {label} has {len(ids)} samples, fewer than {k} folds"
            )
    rng = np.random.default_rng(seed)
    assignments: dict[str, int] = {}
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            assignments[ids[idx]] = pos % k
    return FoldSplit(k=k, assignments=assignments)


def check_fold_split(split: FoldSplit, manifest: DatasetManifest) -> None:
    """Raise unless folds are disjoint, cover the manifest, and stratify."""
    all_ids = {e.id for e in manifest.entries}
    assigned = set(split.assignments)
    if assigned != all_ids:
        raise ValueError("fold assignments do not cover the manifest exactly")
    labels = {e.id: e.label for e in manifest.entries}
    for label in (-1, 1):
        class_ids = [i for i in all_ids if labels[i] == label]
        if not class_ids:
            continue
        per_fold = [0] * split.k
        for sid in class_ids:
            per_fold[split.assignments[sid]] += 1
        lo = len(class_ids) // split.k
        hi = lo + (1 if len(class_ids) % split.k else 0)
        for fold, count in enumerate(per_fold):
            if not lo <= count <= max(hi, lo):
                raise ValueError(
                    f"fold {fold} holds {count} samples of class {label}, "
                    f"expected {lo}..{max(hi, lo)}"
                )
