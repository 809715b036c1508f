"""Overlap, surface-distance and diagnostic classification metrics.

Undefined values (empty denominators, empty masks for HD) are returned as
NaN; aggregation helpers skip them and report how many were skipped.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import binary_erosion, generate_binary_structure
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .volume_io import CLASS_NAMES, DIAGNOSES, FOREGROUND

UNDEFINED = float("nan")


class Overlap(NamedTuple):
    dice: float
    iou: float
    both_empty: bool


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice_iou(pred_mask, gt_mask) -> Overlap:
    """Set-cardinality Dice and IoU.  Two empty masks count as perfect (flagged)."""
    a, b = _pair(pred_mask, gt_mask)
    inter = int(np.count_nonzero(a & b))
    sa, sb = int(a.sum()), int(b.sum())
    if sa + sb == 0:
        return Overlap(1.0, 1.0, True)
    union = sa + sb - inter
    return Overlap(2.0 * inter / (sa + sb), inter / union, False)


def precision_recall(pred_mask, gt_mask) -> tuple[float, float]:
    a, b = _pair(pred_mask, gt_mask)
    inter = int(np.count_nonzero(a & b))
    sa, sb = int(a.sum()), int(b.sum())
    precision = inter / sa if sa else UNDEFINED
    recall = inter / sb if sb else UNDEFINED
    return precision, recall


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-neighbour outside the mask (image border = outside)."""
    m = np.asarray(mask).astype(bool)
    structure = generate_binary_structure(m.ndim, 1)
    return m & ~binary_erosion(m, structure=structure, border_value=0)


def _physical(mask: np.ndarray, spacing: Sequence[float], thickness: float | None) -> np.ndarray:
    sx, sy = spacing
    scale = [sy, sx] + ([thickness if thickness is not None else 1.0] if mask.ndim == 3 else [])
    idx = np.argwhere(boundary(mask)).astype(np.float64)
    return idx * np.asarray(scale, dtype=np.float64)


def directed_distances(a, b, spacing=(1.0, 1.0), thickness: float | None = None) -> np.ndarray:
    """Distance (mm) from every boundary voxel of ``a`` to the boundary of ``b``."""
    pa = _physical(np.asarray(a), spacing, thickness)
    pb = _physical(np.asarray(b), spacing, thickness)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("empty mask has no boundary")
    d, _ = cKDTree(pb).query(pa, k=1)
    return d


def hausdorff(pred_mask, gt_mask, spacing=(1.0, 1.0), thickness: float | None = None,
              percentile: float = 100.0) -> float:
    """Symmetric Hausdorff distance at ``percentile`` of each directed set, in mm.

    NaN when either mask is empty.  Percentiles interpolate linearly between
    order statistics.
    """
    a, b = _pair(pred_mask, gt_mask)
    if not a.any() or not b.any():
        return UNDEFINED
    dab = directed_distances(a, b, spacing, thickness)
    dba = directed_distances(b, a, spacing, thickness)
    if percentile >= 100.0:
        return float(max(dab.max(), dba.max()))
    return float(max(np.percentile(dab, percentile), np.percentile(dba, percentile)))


def hd95(pred_mask, gt_mask, spacing=(1.0, 1.0), thickness: float | None = None) -> float:
    return hausdorff(pred_mask, gt_mask, spacing, thickness, 95.0)


def hd100(pred_mask, gt_mask, spacing=(1.0, 1.0), thickness: float | None = None) -> float:
    return hausdorff(pred_mask, gt_mask, spacing, thickness, 100.0)


# --------------------------------------------------------------------------
# per-structure segmentation scores


@dataclass
class StructureScore:
    dice: float
    iou: float
    precision: float
    recall: float
    hd95: float
    both_empty: bool = False


@dataclass
class SegScores:
    structures: dict[str, StructureScore]
    mean: dict[str, float] = field(default_factory=dict)
    undefined: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {name: asdict(s) for name, s in self.structures.items()}
        out["Mean"] = dict(self.mean)
        return out


def _nanmean(values) -> tuple[float, int]:
    v = np.asarray(values, dtype=np.float64)
    ok = ~np.isnan(v)
    return (float(v[ok].mean()) if ok.any() else UNDEFINED), int((~ok).sum())


def seg_scores(pred_labels, gt_labels, spacing=(1.0, 1.0), thickness: float | None = None) -> SegScores:
    """Scores for LV, Myo and RV from two label maps (2D or 3D)."""
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    structures = {}
    for c in FOREGROUND:
        p, g = pred == c, gt == c
        ov = dice_iou(p, g)
        pr, rc = precision_recall(p, g)
        structures[CLASS_NAMES[c]] = StructureScore(
            dice=ov.dice, iou=ov.iou, precision=pr, recall=rc,
            hd95=hd95(p, g, spacing, thickness), both_empty=ov.both_empty,
        )
    return aggregate([structures])


def aggregate(rows: Sequence[dict[str, StructureScore]]) -> SegScores:
    """Average per-structure scores over subject-phase rows, then across structures."""
    names = [CLASS_NAMES[c] for c in FOREGROUND]
    keys = ("dice", "iou", "precision", "recall", "hd95")
    structures, undefined = {}, {}
    for n in names:
        vals = {}
        for k in keys:
            vals[k], undefined[f"{n}.{k}"] = _nanmean([getattr(r[n], k) for r in rows])
        structures[n] = StructureScore(**vals, both_empty=all(r[n].both_empty for r in rows))
    mean = {k: _nanmean([getattr(structures[n], k) for n in names])[0] for k in keys}
    return SegScores(structures=structures, mean=mean, undefined=undefined)


def probs_to_labels(probs: np.ndarray, axis: int = 0) -> np.ndarray:
    """Argmax with ties resolved toward the lowest class index."""
    return np.argmax(np.asarray(probs), axis=axis)


# --------------------------------------------------------------------------
# classification


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(a: float, b: float) -> float:
    return a / b if b else UNDEFINED


def rates(c: ConfusionCounts) -> dict[str, float]:
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    if math.isnan(precision) or math.isnan(recall):
        f1 = UNDEFINED
    else:
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": _ratio(c.tp + c.tn, c.total),
        "precision": precision,
        "recall": recall,
        "sensitivity": recall,
        "specificity": _ratio(c.tn, c.tn + c.fp),
        "f1": f1,
    }


def one_vs_rest_auc(scores, positive) -> float:
    """Mann-Whitney AUC with midranks for ties; NaN if a class is missing."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return UNDEFINED
    ranks = rankdata(s)  # average ranks
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    m = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(m, (np.asarray(labels, int), np.asarray(preds, int)), 1)
    return m


def classification_metrics(
    preds, labels, probs=None, class_names: Sequence[str] = DIAGNOSES
) -> dict:
    """Per-class one-vs-rest metrics plus an ``Overall`` row.

    ``Overall.accuracy`` is the micro accuracy trace/n; the macro mean of the
    one-vs-rest accuracies is reported as ``Overall.ovr_accuracy``.  Other
    overall entries are macro means over classes with defined values.
    """
    preds = np.asarray(preds, int)
    labels = np.asarray(labels, int)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    k = len(class_names)
    cm = confusion_matrix(preds, labels, k)
    n = int(cm.sum())
    out: dict = {"confusion": cm.tolist(), "per_class": {}, "counts": {}, "undefined_auc": []}
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (len(labels), k):
            raise ValueError(f"probs must be ({len(labels)}, {k})")
    for c, name in enumerate(class_names):
        tp = int(cm[c, c])
        fn = int(cm[c].sum() - tp)
        fp = int(cm[:, c].sum() - tp)
        cc = ConfusionCounts(tp=tp, fp=fp, tn=n - tp - fn - fp, fn=fn)
        row = rates(cc)
        row["auc"] = one_vs_rest_auc(probs[:, c], labels == c) if probs is not None else UNDEFINED
        if math.isnan(row["auc"]):
            out["undefined_auc"].append(name)
        out["per_class"][name] = row
        out["counts"][name] = asdict(cc)
    keys = ("precision", "recall", "sensitivity", "specificity", "f1", "auc")
    overall = {key: _nanmean([out["per_class"][nm][key] for nm in class_names])[0] for key in keys}
    overall["accuracy"] = float(np.trace(cm) / n) if n else UNDEFINED
    overall["ovr_accuracy"] = _nanmean([out["per_class"][nm]["accuracy"] for nm in class_names])[0]
    out["overall"] = overall
    return out


# --------------------------------------------------------------------------
# report files


SEG_CSV_FIELDS = ("subject", "phase", "structure", "dice", "iou", "precision", "recall", "hd95")


def write_seg_csv(rows: Sequence[dict], summary: SegScores, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SEG_CSV_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in SEG_CSV_FIELDS})
        for name, s in summary.structures.items():
            w.writerow({"subject": "ALL", "phase": "ED+ES", "structure": name, **_fmt(asdict(s))})
        w.writerow({"subject": "ALL", "phase": "ED+ES", "structure": "Mean", **_fmt(summary.mean)})


def _fmt(d: dict) -> dict:
    return {k: d[k] for k in ("dice", "iou", "precision", "recall", "hd95")}


def _jsonable(x):
    if isinstance(x, float) and math.isnan(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer)):
        return _jsonable(x.item())
    return x


def dump_json(obj, path: Path) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True))
