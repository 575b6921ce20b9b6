"""Intersection-over-union evaluation for binary masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


@dataclass
class IoUResult:
    intersection: int
    union: int
    iou: float
    source: str = ""


def _as_array(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def iou(pred_probs, gt_mask, threshold=0.5, source="") -> IoUResult:
    """IoU between a thresholded prediction and a binary ground-truth mask.

    Both masks empty counts as perfect agreement (iou = 1).
    """
    pred = _as_array(pred_probs)
    gt = _as_array(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    uniq = np.unique(gt)
    if not np.all(np.isin(uniq, (0, 1))):
        raise ValueError("ground-truth mask must be binary {0, 1}")
    p = pred >= threshold
    g = gt > 0.5
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))
    value = 1.0 if union == 0 else inter / union
    return IoUResult(intersection=inter, union=union, iou=value, source=source)


def miou(results) -> float:
    """Unweighted mean of per-image IoU values."""
    results = list(results)
    if not results:
        raise ValueError("miou of an empty sequence")
    return float(np.mean([r.iou for r in results]))


def write_report(results, path):
    """Line-oriented report: one `stem<TAB>iou` line per image, then mIoU."""
    results = list(results)
    with open(path, "w") as f:
        for r in results:
            f.write(f"{r.source}\t{r.iou:.6f}\n")
        f.write(f"mIoU\t{miou(results):.6f}\n")
