"""Confusion-matrix metrics, rank-based AUC, and report generation.

Metrics with a zero denominator are reported as ``None`` and rendered as
an em-less dash ("-") so they never silently corrupt fold aggregates.
Aggregation across folds uses the population standard deviation; the text
reports carry a footer saying so.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

METRIC_COLUMNS = ("auc", "accuracy", "sensitivity", "specificity", "f1")
EXTRA_COLUMNS = ("ppv", "npv")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass
class MetricsReport:
    """Derived metrics in [0, 1]; ``None`` marks an undefined ratio."""

    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    f1: float | None
    ppv: float | None
    npv: float | None
    auc: float | None
    counts: ConfusionMatrix
    n: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "f1": self.f1,
            "ppv": self.ppv,
            "npv": self.npv,
            "auc": self.auc,
            "counts": {
                "tp": self.counts.tp,
                "tn": self.counts.tn,
                "fp": self.counts.fp,
                "fn": self.counts.fn,
            },
            "n": self.n,
        }


def confusion_matrix(predictions: Sequence[int], truths: Sequence[int]) -> ConfusionMatrix:
    """Count TP/TN/FP/FN with +1 as the positive class."""
    if len(predictions) != len(truths):
        raise ValueError(
            f"prediction/truth length mismatch: {len(predictions)} vs {len(truths)}"
        )
    if len(truths) == 0:
        raise ValueError("need at least one prediction")
    tp = tn = fp = fn = 0
    for p, t in zip(predictions, truths):
        if p not in (-1, 1) or t not in (-1, 1):
            raise ValueError(f"labels must be -1 or +1, got pred={p!r} truth={t!r}")
        if t == 1:
            if p == 1:
                tp += 1
            else:
                fn += 1
        else:
            if p == 1:
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, tn=tn, fp=fp, fn=fn)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den > 0 else None


def derive_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy, sensitivity, specificity, F1, PPV, NPV from raw counts.

    F1 uses the TP / (TP + (FP + FN) / 2) form; it equals the harmonic mean
    of PPV and sensitivity whenever both are defined.
    """
    if cm.total < 1:
        raise ValueError("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    sensitivity = _ratio(cm.tp, cm.tp + cm.fn)
    specificity = _ratio(cm.tn, cm.tn + cm.fp)
    denom_f1 = cm.tp + 0.5 * (cm.fp + cm.fn)
    f1 = cm.tp / denom_f1 if denom_f1 > 0 else None
    ppv = _ratio(cm.tp, cm.tp + cm.fp)
    npv = _ratio(cm.tn, cm.tn + cm.fn)
    return MetricsReport(
        accuracy=accuracy,
        sensitivity=sensitivity,
        specificity=specificity,
        f1=f1,
        ppv=ppv,
        npv=npv,
        auc=None,
        counts=cm,
        n=cm.total,
    )


def auc(scores: Sequence[float], truths: Sequence[int]) -> float:
    """Rank-based AUC: P(random positive outscores random negative), ties half.

    Equivalent to the trapezoidal area under the ROC curve.
    """
    if len(scores) != len(truths):
        raise ValueError("scores and truths must have equal length")
    truths_arr = np.asarray(truths)
    scores_arr = np.asarray(scores, dtype=float)
    pos = truths_arr == 1
    neg = truths_arr == -1
    if not np.array_equal(pos | neg, np.ones(len(truths_arr), dtype=bool)):
        raise ValueError("labels must be -1 or +1")
    n_pos = int(pos.sum())
    n_neg = int(neg.sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: both classes must be present")
    ranks = rankdata(scores_arr)
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def evaluate_predictions(
    truths: Sequence[int], labels: Sequence[int], scores: Sequence[float]
) -> MetricsReport:
    """Full report from hard labels plus scores; AUC left None for one class."""
    cm = confusion_matrix(labels, truths)
    report = derive_metrics(cm)
    classes = set(truths)
    if classes == {-1, 1}:
        report.auc = auc(scores, truths)
    return report


def evaluate_model(checkpoint, samples) -> MetricsReport:
    """Run full-video inference over ``samples`` and score the results."""
    rows = collect_predictions(checkpoint, samples)
    truths = [r["truth"] for r in rows]
    labels = [r["label"] for r in rows]
    scores = [r["score"] for r in rows]
    return evaluate_predictions(truths, labels, scores)


def collect_predictions(checkpoint, samples) -> list[dict]:
    """Per-sample (id, truth, score, label) rows, in stable id order."""
    from .model import load_model_from_checkpoint, predict_video

    if len(samples) == 0:
        raise ValueError("need at least one sample to evaluate")
    model, config = load_model_from_checkpoint(checkpoint)
    rows = []
    for sample in sorted(samples, key=lambda s: s.id):
        pred = predict_video(model, sample, config)
        rows.append(
            {
                "id": sample.id,
                "truth": sample.label,
                "score": pred.final_score,
                "label": pred.final_label,
            }
        )
    return rows


def export_predictions_csv(rows: Sequence[dict], path: str | Path) -> None:
    """CSV of per-sample scores for external ROC tooling."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "truth", "score", "label"])
        for r in rows:
            writer.writerow([r["id"], r["truth"], f"{r['score']:.6f}", r["label"]])


def or_aggregate(rows: Sequence[dict], group_of: dict[str, str]) -> list[dict]:
    """Collapse per-video rows to per-group rows: positive if any video is.

    Group score is the max member score; group truth is the OR of member
    truths. Videos missing from ``group_of`` form singleton groups.
    """
    groups: dict[str, list[dict]] = {}
    for r in rows:
        key = group_of.get(r["id"], r["id"])
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups):
        members = groups[key]
        out.append(
            {
                "id": key,
                "truth": 1 if any(m["truth"] == 1 for m in members) else -1,
                "score": max(m["score"] for m in members),
                "label": 1 if any(m["label"] == 1 for m in members) else -1,
            }
        )
    return out


# ---------------------------------------------------------------------------
# fold aggregation and rendering


def aggregate_metric(values: Sequence[float | None]) -> tuple[float, float] | None:
    """Mean and population std over folds where the metric is defined."""
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    arr = np.asarray(defined, dtype=float)
    return float(arr.mean()), float(arr.std())


@dataclass
class CVReport:
    """Per-fold reports plus mean/std aggregates across folds."""

    fold_reports: list[MetricsReport]
    k: int
    repeats: int = 1
    aggregate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = {
                name: aggregate_metric([getattr(r, name) for r in self.fold_reports])
                for name in METRIC_COLUMNS + EXTRA_COLUMNS
            }

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "repeats": self.repeats,
            "folds": [r.as_dict() for r in self.fold_reports],
            "aggregate": {
                name: None if agg is None else {"mean": agg[0], "std": agg[1]}
                for name, agg in self.aggregate.items()
            },
        }

    def render_text(self) -> str:
        return render_cv_table(self)


def _fmt_pct(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.2f}"


def _fmt_mean_std(agg: tuple[float, float] | None) -> str:
    if agg is None:
        return "-"
    return f"{100.0 * agg[0]:.2f}±{100.0 * agg[1]:.2f}"


def render_cv_table(report: CVReport) -> str:
    """Cross-validation table: one row per fold plus the aggregate row."""
    headers = ["Fold"] + [c.upper() if c in ("auc", "f1") else c.capitalize() for c in METRIC_COLUMNS]
    headers = [h + "(%)" if h != "Fold" else h for h in headers]
    rows = []
    for i, rep in enumerate(report.fold_reports):
        rows.append([str(i)] + [_fmt_pct(getattr(rep, c)) for c in METRIC_COLUMNS])
    rows.append(
        ["Mean±Std"] + [_fmt_mean_std(report.aggregate[c]) for c in METRIC_COLUMNS]
    )
    table = _render_aligned(headers, rows)
    return table + "\nStd is the population standard deviation across folds.\n"


def render_report(report: MetricsReport) -> str:
    """Single-run metrics as an aligned two-column table."""
    rows = [
        [name, _fmt_pct(getattr(report, name))]
        for name in METRIC_COLUMNS + EXTRA_COLUMNS
    ]
    rows.append(["n", str(report.n)])
    return _render_aligned(["Metric", "Value(%)"], rows)


def _render_aligned(headers: list[str], rows: list[list[str]]) -> str:
    widths = [
        max(len(headers[i]), *(len(r[i]) for r in rows)) for i in range(len(headers))
    ]
    def fmt_line(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt_line(headers), fmt_line(["-" * w for w in widths])]
    lines.extend(fmt_line(r) for r in rows)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablation


@dataclass
class AblationReport:
    """Two switch grids: {temporal fusion, attention} and {vote rule, sampler}."""

    fusion_rows: list[dict]
    sampling_rows: list[dict]

    def as_dict(self) -> dict:
        return {"fusion": self.fusion_rows, "sampling": self.sampling_rows}

    def render_text(self) -> str:
        def table(title: str, col_a: str, col_b: str, rows: list[dict]) -> str:
            headers = [col_a, col_b, "Accuracy(%)"]
            body = []
            for r in rows:
                body.append(
                    [
                        "yes" if r["switch_a"] else "no",
                        "yes" if r["switch_b"] else "no",
                        _fmt_mean_std(r["accuracy"]),
                    ]
                )
            return title + "\n" + _render_aligned(headers, body)

        return (
            table("Ablation: temporal fusion / attention pooling", "3D fusion", "AAM", self.fusion_rows)
            + "\n"
            + table("Ablation: vote rule / training sampler", "MAD", "BRS", self.sampling_rows)
            + "\nStd is the population standard deviation across folds.\n"
        )


def run_ablation_grid(
    manifest,
    fold_split,
    model_config,
    train_config,
    workers: int = 1,
    log_dir: str | Path | None = None,
) -> AblationReport:
    """Cross-validate the 4+4 switch combinations behind the two ablations.

    Grid 1 toggles the temporal branch and attention pooling (attention off
    falls back to uniform mean pooling). Grid 2 keeps the full model and
    toggles the inference vote rule (off = single middle-offset collection)
    and the training sampler (off = first frame of every block).
    """
    from .training import run_cross_validation

    def cv_accuracy(mc, tc, tag: str) -> dict:
        sub_dir = None
        if log_dir is not None:
            sub_dir = Path(log_dir) / tag
            sub_dir.mkdir(parents=True, exist_ok=True)
        report = run_cross_validation(
            manifest, fold_split, mc, tc, workers=workers, log_dir=sub_dir
        )
        return {
            "accuracy": report.aggregate["accuracy"],
            "per_fold": [r.accuracy for r in report.fold_reports],
        }

    fusion_rows = []
    for use_temporal in (False, True):
        for use_attention in (False, True):
            mc = replace(
                model_config,
                use_temporal_branch=use_temporal,
                use_attention=use_attention,
            )
            res = cv_accuracy(mc, train_config, f"fusion_t{int(use_temporal)}_a{int(use_attention)}")
            fusion_rows.append(
                {"switch_a": use_temporal, "switch_b": use_attention, **res}
            )

    sampling_rows = []
    for use_mad in (False, True):
        for use_brs in (False, True):
            mc = replace(
                model_config,
                inference_rule="mad" if use_mad else "middle",
            )
            tc = replace(
                train_config,
                frame_selection="block_random" if use_brs else "block_first",
            )
            res = cv_accuracy(mc, tc, f"sampling_m{int(use_mad)}_b{int(use_brs)}")
            sampling_rows.append({"switch_a": use_mad, "switch_b": use_brs, **res})

    return AblationReport(fusion_rows=fusion_rows, sampling_rows=sampling_rows)


def write_json(obj: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")
