"""Segmentation and tile-classification metrics, strong-plume strata, Table-style reports.

All percentages are kept at full precision; only the CSV rendering rounds to
two decimals. A ratio with a zero denominator is reported as 0.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .dataset import tile_label
from .errors import DivisionByZero, LengthMismatch, ShapeMismatch

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "pixel_metrics",
    "tile_metrics",
    "labels_from_masks",
    "select_stratum",
    "improvement",
    "table_improvements",
    "reports_to_csv",
    "improvements_to_csv",
    "TABLE_COLUMNS",
]

STRATA = ("all", "strong", "not-strong", "strong+negatives")
TABLE_COLUMNS = ("Task", "Model", "Threshold", "Precision", "Recall", "F1", "Accuracy", "IoU")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: ConfusionCounts) -> ConfusionCounts:
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_masks(cls, pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None) -> ConfusionCounts:
        pred = np.asarray(pred, dtype=bool)
        gt = np.asarray(gt, dtype=bool)
        if pred.shape != gt.shape:
            raise ShapeMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}", module="eval")
        if valid is not None:
            valid = np.asarray(valid, dtype=bool)
            if valid.shape != gt.shape:
                raise ShapeMismatch("validity mask shape differs", module="eval")
            pred = pred[valid]
            gt = gt[valid]
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, fn, int(pred.size) - tp - fp - fn)

    def to_dict(self) -> dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class MetricsReport:
    task: str
    stratum: str
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    accuracy: float | None = None
    iou: float | None = None
    model: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, counts: ConfusionCounts, task: str, stratum: str = "all", model: str = "") -> MetricsReport:
        p = _ratio(counts.tp, counts.tp + counts.fp)
        r = _ratio(counts.tp, counts.tp + counts.fn)
        f1 = _ratio(2 * p * r, p + r)
        acc = iou = None
        if task == "classification":
            acc = 100.0 * _ratio(counts.tp + counts.tn, counts.total)
        else:
            iou = 100.0 * _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
        return cls(task, stratum, counts, 100.0 * p, 100.0 * r, 100.0 * f1, acc, iou, model)

    def to_dict(self) -> dict[str, Any]:
        d = {
            "task": self.task,
            "stratum": self.stratum,
            "model": self.model,
            "counts": self.counts.to_dict(),
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "accuracy": self.accuracy,
            "iou": self.iou,
        }
        if self.extra:
            d["extra"] = self.extra
        return d


def select_stratum(strong_flags: Sequence[bool] | None, n: int, stratum: str,
                   gt_labels: Sequence[bool] | None = None) -> np.ndarray:
    """Boolean selector over ``n`` tiles.

    ``strong`` and ``not-strong`` partition the tiles by their strong flag;
    ``strong+negatives`` keeps strong-plume tiles plus every tile without a
    ground-truth plume.
    """
    if stratum not in STRATA:
        raise ValueError(f"unknown stratum {stratum!r}; expected one of {STRATA}")
    if stratum == "all":
        return np.ones(n, dtype=bool)
    if strong_flags is None:
        raise ValueError(f"stratum {stratum!r} needs per-tile strong flags")
    strong = np.asarray(strong_flags, dtype=bool)
    if strong.shape != (n,):
        raise LengthMismatch(f"{strong.shape[0]} strong flags for {n} tiles")
    if stratum == "strong":
        return strong
    if stratum == "not-strong":
        return ~strong
    if gt_labels is None:
        raise ValueError("stratum 'strong+negatives' needs ground-truth labels")
    return strong | ~np.asarray(gt_labels, dtype=bool)


def pixel_metrics(
    pred_masks: Sequence[np.ndarray],
    gt_masks: Sequence[np.ndarray],
    valid_masks: Sequence[np.ndarray] | None = None,
    strong_flags: Sequence[bool] | None = None,
    stratum: str = "all",
    aggregate: str = "micro",
    model: str = "",
) -> MetricsReport:
    """Segmentation metrics over the selected tiles.

    ``micro`` pools pixel counts over all tiles. ``macro`` averages per-tile
    precision, recall, F1 and IoU over the tiles where each is defined; tiles
    with no predicted and no true positive pixel contribute to neither.
    """
    if len(pred_masks) != len(gt_masks):
        raise LengthMismatch(f"{len(pred_masks)} predictions for {len(gt_masks)} ground-truth masks")
    if valid_masks is not None and len(valid_masks) != len(gt_masks):
        raise LengthMismatch("validity masks do not align with ground truth")
    gt_labels = [tile_label(g) for g in gt_masks] if stratum == "strong+negatives" else None
    sel = select_stratum(strong_flags, len(gt_masks), stratum, gt_labels)
    per_tile = [
        ConfusionCounts.from_masks(p, g, None if valid_masks is None else valid_masks[i])
        for i, (p, g) in enumerate(zip(pred_masks, gt_masks))
        if sel[i]
    ]
    total = sum(per_tile, ConfusionCounts())
    if aggregate == "micro":
        return MetricsReport.from_counts(total, "segmentation", stratum, model)
    if aggregate != "macro":
        raise ValueError(f"unknown aggregate {aggregate!r}")
    ps, rs, fs, ious = [], [], [], []
    for c in per_tile:
        if c.tp + c.fp:
            ps.append(c.tp / (c.tp + c.fp))
        if c.tp + c.fn:
            rs.append(c.tp / (c.tp + c.fn))
        if c.tp + c.fp + c.fn:
            fs.append(2 * c.tp / (2 * c.tp + c.fp + c.fn))
            ious.append(c.tp / (c.tp + c.fp + c.fn))

    def mean(v):
        return 100.0 * float(np.mean(v)) if v else 0.0

    return MetricsReport("segmentation", stratum, total, mean(ps), mean(rs), mean(fs), None, mean(ious),
                         model, {"aggregate": "macro"})


def labels_from_masks(masks: Sequence[np.ndarray], valid_masks: Sequence[np.ndarray] | None = None) -> list[bool]:
    """Tile labels by the at-least-one-positive-pixel rule."""
    if valid_masks is None:
        return [tile_label(m) for m in masks]
    return [tile_label(np.asarray(m, dtype=bool) & np.asarray(v, dtype=bool)) for m, v in zip(masks, valid_masks)]


def tile_metrics(
    pred_labels: Sequence,
    gt_labels: Sequence,
    strong_flags: Sequence[bool] | None = None,
    stratum: str = "all",
    model: str = "",
) -> MetricsReport:
    """Classification metrics over tiles. Entries may be booleans or masks
    (converted with the at-least-one-pixel rule)."""
    if len(pred_labels) != len(gt_labels):
        raise LengthMismatch(f"{len(pred_labels)} predictions for {len(gt_labels)} labels")
    pred = np.array([tile_label(p) if np.ndim(p) else bool(p) for p in pred_labels], dtype=bool)
    gt = np.array([tile_label(g) if np.ndim(g) else bool(g) for g in gt_labels], dtype=bool)
    sel = select_stratum(strong_flags, len(gt), stratum, gt)
    counts = ConfusionCounts.from_masks(pred[sel], gt[sel])
    return MetricsReport.from_counts(counts, "classification", stratum, model)


def improvement(a: float, b: float, kind: str = "relative") -> float:
    """``relative``: 100 (a - b) / b percent; ``points``: a - b percentage points."""
    if kind == "relative":
        if b == 0:
            raise DivisionByZero("relative improvement over a zero baseline")
        return 100.0 * (a - b) / b
    if kind == "points":
        return a - b
    raise ValueError(f"unknown improvement kind {kind!r}")


_TASK_ALIASES = {
    "img c": "classification", "classification": "classification", "image classification": "classification",
    "sem s": "segmentation", "segmentation": "segmentation", "semantic segmentation": "segmentation",
}


def _norm_task(task: str) -> str:
    try:
        return _TASK_ALIASES[task.strip().lower()]
    except KeyError as exc:
        raise ValueError(f"unknown task {task!r}") from exc


def table_improvements(rows: Sequence[dict[str, Any]], baseline: str = "mag1c") -> list[dict[str, Any]]:
    """Improvement rows derived from a results table.

    * IoU of every segmentation model relative to ``baseline`` at the same
      dataset and threshold (``relative``);
    * strong-stratum gain over the unstratified row for each dataset and
      model: IoU for segmentation, recall for classification (``points``).

    ``rows`` entries carry ``dataset``, ``task``, ``model``, ``threshold``
    (null for the unstratified row) and metric columns in percent.
    """
    norm = []
    for r in rows:
        r = dict(r)
        r["task"] = _norm_task(r["task"])
        r.setdefault("dataset", "")
        norm.append(r)
    index = {(r["dataset"], r["task"], r["model"], r.get("threshold")): r for r in norm}
    out = []
    for r in norm:
        if r["task"] != "segmentation" or r["model"] == baseline or r.get("iou") is None:
            continue
        base = index.get((r["dataset"], "segmentation", baseline, r.get("threshold")))
        if base is None or base.get("iou") is None:
            continue
        out.append({
            "kind": "relative", "metric": "iou", "dataset": r["dataset"], "task": "segmentation",
            "model": r["model"], "reference": baseline, "threshold": r.get("threshold"),
            "a": r["iou"], "b": base["iou"], "value": improvement(r["iou"], base["iou"], "relative"),
        })
    for r in norm:
        if r.get("threshold") is None:
            continue
        metric = "iou" if r["task"] == "segmentation" else "recall"
        ref = index.get((r["dataset"], r["task"], r["model"], None))
        if ref is None or r.get(metric) is None or ref.get(metric) is None:
            continue
        out.append({
            "kind": "points", "metric": metric, "dataset": r["dataset"], "task": r["task"],
            "model": r["model"], "reference": "unstratified", "threshold": r["threshold"],
            "a": r[metric], "b": ref[metric], "value": improvement(r[metric], ref[metric], "points"),
        })
    return out


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.2f}"


def reports_to_csv(reports: Sequence[MetricsReport], threshold_ppm_m: float) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE_COLUMNS)
    for rep in reports:
        task = "Img C" if rep.task == "classification" else "Sem S"
        thr = "N/A" if rep.stratum == "all" else f"{rep.stratum} (>= {threshold_ppm_m:g})"
        w.writerow([task, rep.model, thr, _fmt(rep.precision), _fmt(rep.recall), _fmt(rep.f1),
                    _fmt(rep.accuracy), _fmt(rep.iou)])
    return buf.getvalue()


def improvements_to_csv(items: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    cols = ["kind", "metric", "dataset", "task", "model", "reference", "threshold", "a", "b", "value"]
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for it in items:
        w.writerow([_fmt(it[c]) if c == "value" else ("" if it[c] is None else it[c]) for c in cols])
    return buf.getvalue()
