"""Semantic and instance segmentation metrics.

Semantic: Dice, two-class mIoU, foreground F1, Hausdorff distance.
Instance: AJI and panoptic DQ/SQ/PQ on integer label maps (0 = background).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import directed_hausdorff

from .errors import ShapeError, ValidationError

# report column order: instance metrics first, then semantic
METRIC_COLUMNS = ("aji", "dq", "sq", "pq", "dice", "miou", "f1", "hd")

_STRUCTURE = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def _pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def connected_components(mask, connectivity: int = 8) -> np.ndarray:
    """Label foreground regions 1..n in row-major order of first pixel."""
    if connectivity not in _STRUCTURE:
        raise ValidationError(f"connectivity must be 4 or 8, got {connectivity}")
    # scipy scans in raster order, so labels already follow first encounter
    labels, _ = ndimage.label(np.asarray(mask, dtype=bool), structure=_STRUCTURE[connectivity])
    return labels.astype(np.int32)


def relabel_sequential(labels) -> np.ndarray:
    labels = np.asarray(labels)
    ids = np.unique(labels)
    ids = ids[ids != 0]
    lut = np.zeros(int(labels.max(initial=0)) + 1, dtype=np.int32)
    lut[ids] = np.arange(1, len(ids) + 1)
    return lut[labels]


def dice(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2 * np.logical_and(pred, gt).sum() / total)


def _iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def miou(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    return 0.5 * (_iou(pred, gt) + _iou(~pred, ~gt))


def f1(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    pred, gt = pred.astype(bool), gt.astype(bool)
    tp = np.logical_and(pred, gt).sum()
    if pred.sum() == 0 and gt.sum() == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / pred.sum(), tp / gt.sum()
    return float(2 * precision * recall / (precision + recall))


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-neighbour in the background or on the image edge."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_STRUCTURE[4], border_value=0)
    return mask & ~interior


def hausdorff(pred, gt) -> float:
    """Symmetric Hausdorff distance between boundary pixel sets; NaN if either is empty."""
    pred, gt = _pair(pred, gt)
    a, b = np.argwhere(boundary(pred)), np.argwhere(boundary(gt))
    if len(a) == 0 or len(b) == 0:
        return math.nan
    return float(max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0]))


def _overlaps(gt, pred):
    """Intersection table plus per-instance areas for labels 1..n."""
    n_gt, n_pred = int(gt.max(initial=0)), int(pred.max(initial=0))
    table = np.zeros((n_gt + 1, n_pred + 1), dtype=np.int64)
    np.add.at(table, (gt.ravel(), pred.ravel()), 1)
    gt_area = table.sum(axis=1)[1:]
    pred_area = table.sum(axis=0)[1:]
    return table[1:, 1:], gt_area, pred_area


def aji(gt, pred) -> float:
    """Aggregated Jaccard index.

    GT instances are visited by descending area (lowest label first on ties)
    and each takes the not-yet-used prediction of highest IoU, lowest label
    on ties.  Predictions left over add their area to the union.
    """
    gt, pred = _pair(gt, pred)
    gt, pred = relabel_sequential(gt), relabel_sequential(pred)
    inter, gt_area, pred_area = _overlaps(gt, pred)
    if len(gt_area) == 0 and len(pred_area) == 0:
        return 1.0
    union = gt_area[:, None] + pred_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    used = np.zeros(len(pred_area), dtype=bool)
    C = U = 0
    for g in sorted(range(len(gt_area)), key=lambda i: (-gt_area[i], i)):
        candidates = np.where(used, -1.0, iou[g])
        j = int(np.argmax(candidates)) if len(candidates) else -1
        if j >= 0 and candidates[j] > 0:
            used[j] = True
            C += inter[g, j]
            U += union[g, j]
        else:
            U += gt_area[g]
    U += pred_area[~used].sum()
    return float(C / U) if U else 1.0


def panoptic(gt, pred, iou_threshold: float = 0.5) -> tuple[float, float, float]:
    """Detection, segmentation and panoptic quality with matches at IoU > threshold.

    SQ is 1 by convention when nothing is matched; PQ is then 0 unless both maps are empty.
    """
    gt, pred = _pair(gt, pred)
    gt, pred = relabel_sequential(gt), relabel_sequential(pred)
    inter, gt_area, pred_area = _overlaps(gt, pred)
    union = gt_area[:, None] + pred_area[None, :] - inter
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    matched = iou[iou > iou_threshold]
    tp = len(matched)
    fp, fn = len(pred_area) - tp, len(gt_area) - tp
    if tp + fp + fn == 0:
        return 1.0, 1.0, 1.0
    dq = tp / (tp + 0.5 * fp + 0.5 * fn)
    sq = float(matched.mean()) if tp else 1.0
    return float(dq), sq, float(dq * sq)


def image_metrics(gt_instances, pred_instances) -> dict[str, float]:
    gt_instances, pred_instances = _pair(gt_instances, pred_instances)
    gt_sem, pred_sem = gt_instances > 0, pred_instances > 0
    dq, sq, pq = panoptic(gt_instances, pred_instances)
    if not gt_sem.any() and not pred_sem.any():
        hd = 0.0
    else:
        hd = hausdorff(pred_sem, gt_sem)
    return {
        "aji": aji(gt_instances, pred_instances),
        "dq": dq, "sq": sq, "pq": pq,
        "dice": dice(pred_sem, gt_sem),
        "miou": miou(pred_sem, gt_sem),
        "f1": f1(pred_sem, gt_sem),
        "hd": hd,
    }


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)   # one per image: id + METRIC_COLUMNS

    @classmethod
    def from_pairs(cls, pairs, ids=None) -> "MetricsReport":
        """Score ``(gt_instances, pred_instances)`` pairs."""
        rows = []
        for i, (gt, pred) in enumerate(pairs):
            row = {"id": ids[i] if ids is not None else str(i)}
            row.update(image_metrics(gt, pred))
            rows.append(row)
        if not rows:
            raise ValidationError("cannot build a metrics report from zero images")
        return cls(rows)

    def __len__(self):
        return len(self.rows)

    @property
    def hd_undefined(self) -> int:
        return sum(math.isnan(r["hd"]) for r in self.rows)

    @property
    def mean(self) -> dict[str, float]:
        out = {}
        for key in METRIC_COLUMNS:
            values = [r[key] for r in self.rows if not math.isnan(r[key])]
            out[key] = float(np.mean(values)) if values else math.nan
        return out

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("id",) + METRIC_COLUMNS)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("" if k != "id" and math.isnan(row[k]) else row[k])
                                 for k in writer.fieldnames})
            writer.writerow({"id": "mean", **{k: ("" if math.isnan(v) else v)
                                              for k, v in self.mean.items()}})
        return Path(path)

    def to_json(self, path, **extra):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        payload = {
            "columns": list(METRIC_COLUMNS),
            "mean": {k: clean(v) for k, v in self.mean.items()},
            "hd_undefined": self.hd_undefined,
            "images": [{k: clean(v) for k, v in r.items()} for r in self.rows],
            **extra,
        }
        Path(path).write_text(json.dumps(payload, indent=2))
        return Path(path)
