"""Training loop with per-epoch block-random sampling and k-fold CV.

Every epoch draws a fresh random frame per block for every video, with the
per-draw seed derived deterministically from (base seed, epoch, video id),
so runs are exactly reproducible while still varying the sampled frames.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import evaluation
from .dataset import DatasetManifest, FoldSplit, VideoSample, load_manifest_samples
from .model import (
    AsdClassifier,
    ModelConfig,
    build_model,
    collect_clip,
    predict_video,
    write_checkpoint,
)
from .sampling import block_first_select, block_random_select, partition_blocks

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd_momentum")
FRAME_SELECTIONS = ("block_random", "block_first")


class LeakageError(ValueError):
    """Train and validation sets share sample ids."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    optimizer: str = "sgd"
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 100
    seed: int = 0
    frame_selection: str = "block_random"
    augmentation: str = "none"  # fixed; no augmentation beyond frame sampling

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.frame_selection not in FRAME_SELECTIONS:
            raise ValueError(f"frame_selection must be one of {FRAME_SELECTIONS}")
        if self.augmentation != "none":
            raise ValueError("augmentation is fixed to 'none'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_metrics: evaluation.MetricsReport | None = None

    def __post_init__(self):
        if self.train_loss < 0:
            raise ValueError("train_loss must be >= 0")
        if not 0.0 <= self.train_accuracy <= 1.0:
            raise ValueError("train_accuracy must be in [0, 1]")

    def as_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "val_metrics": None if self.val_metrics is None else self.val_metrics.as_dict(),
        }


@dataclass
class Checkpoint:
    """In-memory training snapshot; save() writes blob plus JSON sidecar."""

    state_dict: dict
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    torch_rng_state: torch.Tensor | None = None

    def save(self, path: str | Path) -> None:
        write_checkpoint(
            path,
            self.state_dict,
            self.model_config,
            seed=self.train_config.seed,
            epoch=self.epoch,
            extra={
                "train_config": self.train_config.to_dict(),
                "torch_rng_state": self.torch_rng_state,
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        from .model import read_checkpoint

        blob = read_checkpoint(path)
        return cls(
            state_dict=blob["state_dict"],
            model_config=ModelConfig.from_dict(blob["model_config"]),
            train_config=TrainConfig.from_dict(blob["train_config"]),
            epoch=blob["epoch"],
            torch_rng_state=blob.get("torch_rng_state"),
        )


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (never the salted builtin hash)."""
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def compute_loss(logit: float, label: int) -> float:
    """Binary cross-entropy with logits, target (label+1)/2, overflow-safe."""
    if not math.isfinite(logit):
        raise ValueError(f"logit must be finite, got {logit}")
    if label not in (-1, 1):
        raise ValueError(f"label must be -1 or +1, got {label!r}")
    target = (label + 1) / 2
    return max(logit, 0.0) - logit * target + math.log1p(math.exp(-abs(logit)))


def _select_training_clip(
    sample: VideoSample, model_config: ModelConfig, train_config: TrainConfig, epoch: int
) -> torch.Tensor:
    partition = partition_blocks(sample.num_frames, model_config.num_frames)
    if train_config.frame_selection == "block_random":
        seed = derive_seed(train_config.seed, epoch, sample.id)
        collection = block_random_select(partition, seed)
    else:
        collection = block_first_select(partition)
    return collect_clip(sample, collection, model_config.input_size)


def _val_report(
    model: AsdClassifier, val_samples: list[VideoSample]
) -> evaluation.MetricsReport:
    truths, labels, scores = [], [], []
    for sample in sorted(val_samples, key=lambda s: s.id):
        pred = predict_video(model, sample)
        truths.append(sample.label)
        labels.append(pred.final_label)
        scores.append(pred.final_score)
    return evaluation.evaluate_predictions(truths, labels, scores)


def train_fold(
    train_samples: list[VideoSample],
    val_samples: list[VideoSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[Checkpoint, list[EpochRecord]]:
    """Train one model, validating each epoch; returns the best checkpoint.

    "Best" means highest validation accuracy (ties go to the earlier epoch).
    With an empty validation set, validation is skipped and the final epoch
    is returned; that mode exists for overfitting probes.
    """
    train_ids = {s.id for s in train_samples}
    overlap = train_ids & {s.id for s in val_samples}
    if overlap:
        raise LeakageError(f"train/val sets share ids: {sorted(overlap)[:5]}")
    if not train_samples:
        raise ValueError("train set is empty")

    model = build_model(model_config, seed=train_config.seed)
    params = model.parameters()
    momentum = train_config.momentum if train_config.optimizer == "sgd_momentum" else 0.0
    optimizer = torch.optim.SGD(params, lr=train_config.learning_rate, momentum=momentum)

    ordered = sorted(train_samples, key=lambda s: s.id)
    records: list[EpochRecord] = []
    best_acc = -1.0
    best_state = None
    best_epoch = 0
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(1, train_config.epochs + 1):
            model.train()
            order_rng = np.random.default_rng(
                derive_seed(train_config.seed, epoch, "__order__")
            )
            order = order_rng.permutation(len(ordered))
            clips = [
                _select_training_clip(ordered[i], model_config, train_config, epoch)
                for i in order
            ]
            targets = torch.tensor(
                [(ordered[i].label + 1) / 2 for i in order], dtype=torch.float32
            )

            loss_sum = 0.0
            correct = 0
            for start in range(0, len(clips), train_config.batch_size):
                batch = torch.stack(clips[start : start + train_config.batch_size])
                batch_targets = targets[start : start + train_config.batch_size]
                optimizer.zero_grad(set_to_none=True)
                out = model(batch)
                loss = F.binary_cross_entropy_with_logits(out.logit, batch_targets)
                loss.backward()
                optimizer.step()
                loss_sum += float(loss.detach()) * len(batch)
                correct += int(((out.logit > 0) == (batch_targets > 0.5)).sum())

            record = EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / len(clips),
                train_accuracy=correct / len(clips),
            )
            if val_samples:
                model.eval()
                record.val_metrics = _val_report(model, val_samples)
                val_acc = record.val_metrics.accuracy
                if val_acc is not None and val_acc > best_acc:
                    best_acc = val_acc
                    best_state = {
                        k: v.detach().clone() for k, v in model.state_dict().items()
                    }
                    best_epoch = epoch
            records.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record.as_dict()) + "\n")
                log_fh.flush()
            logger.debug(
                "epoch %d loss %.4f acc %.3f", epoch, record.train_loss,
                record.train_accuracy,
            )
    finally:
        if log_fh is not None:
            log_fh.close()

    if best_state is None:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_epoch = train_config.epochs
    checkpoint = Checkpoint(
        state_dict=best_state,
        model_config=model_config,
        train_config=train_config,
        epoch=best_epoch,
        torch_rng_state=torch.get_rng_state(),
    )
    return checkpoint, records


def _fold_seed(base_seed: int, repeat: int, fold: int) -> int:
    return derive_seed(base_seed, "repeat", repeat, "fold", fold)


def _run_single_fold(payload: dict) -> dict:
    """Train and evaluate one fold; module-level so it pickles for workers."""
    manifest: DatasetManifest = payload["manifest"]
    fold_split: FoldSplit = payload["fold_split"]
    model_config: ModelConfig = payload["model_config"]
    train_config: TrainConfig = payload["train_config"]
    fold = payload["fold"]
    repeat = payload["repeat"]
    log_dir = payload["log_dir"]

    torch.set_num_threads(payload.get("torch_threads", torch.get_num_threads()))
    val_ids = set(fold_split.fold_ids(fold))
    train_ids = [e.id for e in manifest.entries if e.id not in val_ids]
    train_samples = load_manifest_samples(manifest, train_ids)
    val_samples = load_manifest_samples(manifest, sorted(val_ids))

    fold_train_config = TrainConfig(
        **{**train_config.to_dict(), "seed": _fold_seed(train_config.seed, repeat, fold)}
    )
    log_path = None
    ckpt_path = None
    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        suffix = f"rep{repeat}_fold{fold}" if payload["repeats"] > 1 else f"fold{fold}"
        log_path = log_dir / f"train_log_{suffix}.jsonl"
        ckpt_path = log_dir / f"checkpoint_{suffix}.pt"

    checkpoint, records = train_fold(
        train_samples, val_samples, model_config, fold_train_config, log_path=log_path
    )
    if ckpt_path is not None:
        checkpoint.save(ckpt_path)
    report = evaluation.evaluate_model(checkpoint, val_samples)
    return {"fold": fold, "repeat": repeat, "report": report, "epochs": len(records)}


def run_cross_validation(
    manifest: DatasetManifest,
    fold_split: FoldSplit,
    model_config: ModelConfig,
    train_config: TrainConfig,
    repeats: int = 1,
    workers: int = 1,
    log_dir: str | Path | None = None,
) -> evaluation.CVReport:
    """Train/evaluate on every fold (optionally repeated) and aggregate.

    Each fold's model trains on all other folds and is scored on the held-out
    fold with full-video majority-vote inference. Folds may run in parallel
    processes; results are reduced in (repeat, fold) order either way.
    """
    manifest_ids = {e.id for e in manifest.entries}
    assigned = set(fold_split.assignments)
    if manifest_ids != assigned:
        raise ValueError("fold split does not cover the manifest exactly")

    payloads = [
        {
            "manifest": manifest,
            "fold_split": fold_split,
            "model_config": model_config,
            "train_config": train_config,
            "fold": fold,
            "repeat": repeat,
            "repeats": repeats,
            "log_dir": log_dir,
        }
        for repeat in range(repeats)
        for fold in range(fold_split.k)
    ]
    if workers > 1:
        # spawn avoids forking a process that already holds torch thread pools
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_single_fold, payloads))
    else:
        results = [_run_single_fold(p) for p in payloads]

    results.sort(key=lambda r: (r["repeat"], r["fold"]))
    fold_reports = [r["report"] for r in results]
    return evaluation.CVReport(fold_reports=fold_reports, k=fold_split.k, repeats=repeats)
