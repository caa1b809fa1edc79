"""Command-line entry points.

Subcommands cover the full workflow: generate a synthetic dataset, split it
into folds, train and cross-validate, evaluate checkpoints, predict single
videos, run the ablation grids, and render heatmaps. Errors surface as one
diagnostic line on stderr with exit code 1.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import config as config_mod
from . import dataset, evaluation, explain, training
from .dataset import DatasetManifest, FoldSplit, SyntheticSpec
from .model import load_model_from_checkpoint, predict_video

CV_REPORT_NAME = "cv_report.json"
TEXT_REPORT_NAME = "report.txt"
FOLDS_NAME = "folds.json"


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_run_config(getattr(args, "config", None))
    return config_mod.apply_overrides(
        cfg, seed=getattr(args, "seed", None), workers=getattr(args, "workers", None)
    )


def _resolve_data_paths(args, cfg) -> tuple[Path, Path | None]:
    manifest = getattr(args, "manifest", None) or cfg.data.manifest
    if manifest is None:
        raise ValueError("no manifest given (use --manifest or the config data section)")
    folds = getattr(args, "folds", None) or cfg.data.folds
    return Path(manifest), None if folds is None else Path(folds)


def _load_synth_spec(args) -> SyntheticSpec:
    """Merge an optional spec file with flags; flags win, unknown keys fail."""
    known = set(SyntheticSpec.__dataclass_fields__)
    values = {}
    if args.config is not None:
        raw = yaml.safe_load(Path(args.config).read_text()) or {}
        if not isinstance(raw, dict):
            raise ValueError("synth config must be a mapping of spec fields")
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        values.update(raw)
    flags = {
        "num_positive": args.positives,
        "num_negative": args.negatives,
        "frames_per_video": args.frames,
        "frame_size": args.size,
        "seed": args.seed,
    }
    values.update({key: val for key, val in flags.items() if val is not None})
    values.setdefault("num_positive", 30)
    values.setdefault("num_negative", 30)
    for key in ("event_window", "patch_region"):
        if isinstance(values.get(key), list):
            values[key] = tuple(values[key])
    return SyntheticSpec(**values)


def cmd_synth(args) -> int:
    out = _out_dir(args)
    spec = _load_synth_spec(args)
    manifest = dataset.generate_synthetic_dataset(spec, out)
    print(f"wrote {len(manifest.entries)} videos under {out} "
          f"({spec.num_positive} positive, {spec.num_negative} negative)")
    return 0


def cmd_split(args) -> int:
    out = _out_dir(args)
    manifest = DatasetManifest.load_csv(args.manifest)
    split = dataset.make_fold_splits(
        manifest, args.k, args.seed if args.seed is not None else 0
    )
    dataset.check_fold_split(split, manifest)
    path = out / FOLDS_NAME
    split.save_json(path)
    print(f"wrote {args.k}-fold split of {len(manifest.entries)} videos to {path}")
    return 0


def _load_split(manifest: DatasetManifest, folds_path, cfg, out: Path) -> FoldSplit:
    if folds_path is not None:
        split = FoldSplit.load_json(folds_path)
    else:
        split = dataset.make_fold_splits(manifest, k=5, seed=cfg.train.seed)
        split.save_json(out / FOLDS_NAME)
    dataset.check_fold_split(split, manifest)
    return split


def cmd_cv(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    manifest_path, folds_path = _resolve_data_paths(args, cfg)
    manifest = DatasetManifest.load_csv(manifest_path)
    split = _load_split(manifest, folds_path, cfg, out)
    config_mod.write_resolved(cfg, out)

    report = training.run_cross_validation(
        manifest, split, cfg.model, cfg.train,
        repeats=cfg.repeats, workers=cfg.workers, log_dir=out,
    )
    evaluation.write_json(report.as_dict(), out / CV_REPORT_NAME)
    text = report.render_text()
    (out / TEXT_REPORT_NAME).write_text(text)
    print(text, end="")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    manifest_path, folds_path = _resolve_data_paths(args, cfg)
    manifest = DatasetManifest.load_csv(manifest_path)
    config_mod.write_resolved(cfg, out)

    if folds_path is not None:
        split = FoldSplit.load_json(folds_path)
        dataset.check_fold_split(split, manifest)
        val_fold = args.fold if args.fold is not None else cfg.data.val_fold
        if val_fold is None:
            val_fold = 0
        val_ids = set(split.fold_ids(val_fold))
        train_samples = dataset.load_manifest_samples(
            manifest, [e.id for e in manifest.entries if e.id not in val_ids]
        )
        val_samples = dataset.load_manifest_samples(manifest, sorted(val_ids))
    else:
        # no folds: train on everything without validation (fitting probe)
        train_samples = dataset.load_manifest_samples(manifest)
        val_samples = []

    checkpoint, records = training.train_fold(
        train_samples, val_samples, cfg.model, cfg.train,
        log_path=out / "train_log.jsonl",
    )
    ckpt_path = out / "checkpoint.pt"
    checkpoint.save(ckpt_path)
    last = records[-1]
    print(f"trained {len(records)} epochs "
          f"(final loss {last.train_loss:.4f}, accuracy {last.train_accuracy:.3f}); "
          f"saved epoch {checkpoint.epoch} to {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    manifest_path, folds_path = _resolve_data_paths(args, cfg)
    manifest = DatasetManifest.load_csv(manifest_path)
    config_mod.write_resolved(cfg, out)
    ids = None
    if folds_path is not None:
        split = FoldSplit.load_json(folds_path)
        fold = args.fold if args.fold is not None else cfg.data.val_fold
        if fold is None:
            raise ValueError("--folds needs --fold to pick the held-out set")
        ids = split.fold_ids(fold)
    samples = dataset.load_manifest_samples(manifest, ids)

    rows = evaluation.collect_predictions(args.checkpoint, samples)
    report = evaluation.evaluate_predictions(
        [r["truth"] for r in rows], [r["label"] for r in rows], [r["score"] for r in rows]
    )
    evaluation.export_predictions_csv(rows, out / "predictions.csv")
    text = evaluation.render_report(report)
    (out / TEXT_REPORT_NAME).write_text(text)
    print(text, end="")
    return 0


def cmd_predict(args) -> int:
    model, _ = load_model_from_checkpoint(args.checkpoint)
    sample = dataset.load_video(args.video)
    prediction = predict_video(model, sample)
    payload = {"id": sample.id, **prediction.as_dict()}
    line = json.dumps(payload)
    print(line)
    if args.out is not None:
        out = _out_dir(args)
        (out / f"{sample.id}_prediction.json").write_text(line + "\n")
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    cfg = _load_config(args)
    manifest_path, folds_path = _resolve_data_paths(args, cfg)
    manifest = DatasetManifest.load_csv(manifest_path)
    split = _load_split(manifest, folds_path, cfg, out)
    config_mod.write_resolved(cfg, out)

    report = evaluation.run_ablation_grid(
        manifest, split, cfg.model, cfg.train,
        workers=cfg.workers, log_dir=out,
    )
    evaluation.write_json(report.as_dict(), out / "ablation.json")
    text = report.render_text()
    (out / "ablation.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_heatmap(args) -> int:
    out = _out_dir(args)
    sample = dataset.load_video(args.video)
    result = explain.generate_heatmap(args.checkpoint, sample)
    written = explain.save_heatmap_outputs(result, out)
    print(f"predicted label {result.predicted_label:+d}; "
          f"wrote {len(written)} files to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="echomil",
        description="Weakly-supervised video classification for transient events",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic labeled video dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="YAML file of generator fields")
    p.add_argument("--positives", type=int, default=None, help="default 30")
    p.add_argument("--negatives", type=int, default=None, help="default 30")
    p.add_argument("--frames", type=int, default=None, help="frames per video (48)")
    p.add_argument("--size", type=int, default=None, help="square frame size (112)")
    p.add_argument("--seed", type=int, default=None)

    p = add("split", cmd_split, "write a stratified k-fold split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("cv", cmd_cv, "run k-fold cross-validation")
    p.add_argument("--config", default=None, help="YAML run config")
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None, help="folds.json (made fresh if absent)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train one model on a manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=None, help="validation fold index")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="YAML run config (data section)")
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--fold", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "predict one video, print JSON")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", default=None)

    p = add("ablate", cmd_ablate, "cross-validate the component switch grids")
    p.add_argument("--config", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--folds", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", required=True)

    p = add("heatmap", cmd_heatmap, "render per-frame heatmaps for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--video", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
