"""Fusion image statistics and segmentation quality metrics.

Fusion metrics follow the common evaluation conventions for gray fused
images: entropy and standard deviation are computed on the 0-255 scale
(entropy over 256 histogram bins), spatial frequency is the RMS of
horizontal/vertical first differences, and the sum of correlations of
differences compares ``u - y`` against ``x`` and ``u - x`` against ``y``.

Segmentation metrics are derived from a (gt, pred) confusion matrix; per-class
accuracy is recall, and the means run over classes present in the ground
truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyMatrix, ShapeMismatch

__all__ = [
    "entropy",
    "sd",
    "sf",
    "scd",
    "fusion_metrics",
    "confusion",
    "ClassScores",
    "class_scores",
    "MetricReport",
]


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.int64)


def entropy(img: np.ndarray) -> float:
    """Shannon entropy in bits over 256 gray levels of an image in [0, 1]."""
    q = _quantize(img)
    counts = np.bincount(q.reshape(-1), minlength=256).astype(np.float64)
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def sd(img: np.ndarray) -> float:
    """Population standard deviation on the 0-255 scale of an image in [0, 1]."""
    x = np.asarray(img, dtype=np.float64) * 255.0
    return float(x.std())


def sf(img: np.ndarray) -> float:
    """Spatial frequency: RMS of row and column first differences.

    Operates on the raw array values; each directional term divides
    by its own number of difference terms.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"sf expects a 2-D image, got shape {x.shape}")
    dh = np.diff(x, axis=1)
    dv = np.diff(x, axis=0)
    rf = (dh**2).sum() / dh.size if dh.size else 0.0
    cf = (dv**2).sum() / dv.size if dv.size else 0.0
    return float(np.sqrt(rf + cf))


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a.reshape(-1).astype(np.float64)
    b = b.reshape(-1).astype(np.float64)
    da = a - a.mean()
    db = b - b.mean()
    va = (da * da).sum()
    vb = (db * db).sum()
    if va == 0.0 or vb == 0.0:
        return 0.0
    return float((da * db).sum() / np.sqrt(va * vb))


def scd(u: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Sum of correlations of differences: r(u - y, x) + r(u - x, y).

    Zero-variance inputs contribute 0 for the degenerate term.
    """
    u = np.asarray(u, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if not (u.shape == x.shape == y.shape):
        raise ShapeMismatch(f"scd shapes differ: {u.shape}, {x.shape}, {y.shape}")
    return _pearson(u - y, x) + _pearson(u - x, y)


def fusion_metrics(u: np.ndarray, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """All four fusion statistics for one [0, 1] image triple.

    sf is reported on the 0-255 scale so its magnitude is comparable with
    en/sd; scd is scale-invariant.
    """
    return {
        "en": entropy(u),
        "sd": sd(u),
        "sf": sf(np.asarray(u, dtype=np.float64) * 255.0),
        "scd": scd(u, x, y),
    }


def confusion(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    ignore_index: int = 255,
) -> np.ndarray:
    """(num_classes, num_classes) count matrix with ground truth on rows."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred shape {pred.shape} != gt shape {gt.shape}")
    mask = gt != ignore_index
    p = pred[mask].astype(np.int64)
    g = gt[mask].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes or g.min() < 0 or g.max() >= num_classes):
        raise ShapeMismatch("class ids outside [0, num_classes)")
    cm = np.bincount(g * num_classes + p, minlength=num_classes * num_classes)
    return cm.reshape(num_classes, num_classes)


@dataclass
class ClassScores:
    """Per-class accuracy (recall) and IoU, with means over gt-present classes."""

    acc: np.ndarray
    iou: np.ndarray
    present: np.ndarray
    mean_acc: float
    mean_iou: float


def class_scores(cm: np.ndarray) -> ClassScores:
    cm = np.asarray(cm, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ShapeMismatch(f"confusion matrix must be square, got {cm.shape}")
    total = cm.sum()
    if total == 0:
        raise EmptyMatrix("confusion matrix has no counted pixels")
    tp = np.diag(cm)
    gt_count = cm.sum(axis=1)
    pred_count = cm.sum(axis=0)
    present = gt_count > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(gt_count > 0, tp / gt_count, np.nan)
        union = gt_count + pred_count - tp
        iou = np.where(union > 0, tp / union, np.nan)
    return ClassScores(
        acc=acc,
        iou=iou,
        present=present,
        mean_acc=float(np.nanmean(acc[present])),
        mean_iou=float(np.nanmean(iou[present])),
    )


@dataclass
class MetricReport:
    """Collected evaluation results, serializable to the two CSV reports."""

    fusion_rows: list[dict] = field(default_factory=list)
    confusion_matrix: np.ndarray | None = None

    def add_fusion(self, image_id: str, values: dict[str, float]) -> None:
        row = {"id": image_id}
        row.update({k: float(values[k]) for k in ("en", "sd", "sf", "scd")})
        self.fusion_rows.append(row)

    def add_confusion(self, cm: np.ndarray) -> None:
        if self.confusion_matrix is None:
            self.confusion_matrix = np.array(cm, dtype=np.int64)
        else:
            self.confusion_matrix = self.confusion_matrix + cm

    def write_fusion_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["id", "en", "sd", "sf", "scd"])
            writer.writeheader()
            for row in self.fusion_rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})

    def write_segmentation_csv(self, path: str | Path) -> ClassScores:
        """One row per class plus a final ``mean`` row; returns the scores."""
        if self.confusion_matrix is None:
            raise EmptyMatrix("no segmentation results collected")
        scores = class_scores(self.confusion_matrix)
        gt_count = self.confusion_matrix.sum(axis=1)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "pixels", "acc", "iou"])
            for c in range(self.confusion_matrix.shape[0]):
                acc = "" if np.isnan(scores.acc[c]) else repr(float(scores.acc[c]))
                iou = "" if np.isnan(scores.iou[c]) else repr(float(scores.iou[c]))
                writer.writerow([c, int(gt_count[c]), acc, iou])
            writer.writerow(["mean", int(gt_count.sum()), repr(scores.mean_acc), repr(scores.mean_iou)])
        return scores
