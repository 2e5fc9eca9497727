"""IoU, localization accuracy, average precision and precision@k."""

from __future__ import annotations

from collections import defaultdict
from typing import Iterable, Mapping, Sequence

import numpy as np

LOCALIZATION_THRESHOLDS = (0.5, 0.6, 0.7, 0.8, 0.9)


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between box arrays of shape (n, 4) and (m, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def localization_accuracy(predictions: Sequence, gts: Sequence, threshold: float) -> float:
    """Fraction of phrases whose top-1 box reaches ``threshold`` IoU."""
    if len(predictions) != len(gts):
        raise ValueError("predictions and ground truths are not aligned")
    if not gts:
        raise ValueError("empty phrase set")
    hits = sum(iou(p, g) >= threshold for p, g in zip(predictions, gts))
    return hits / len(gts)


def _group_gt(gt) -> dict[int, list]:
    if isinstance(gt, Mapping):
        return {int(k): [tuple(b) for b in v] for k, v in gt.items()}
    grouped = defaultdict(list)
    for image_id, box in gt:
        grouped[int(image_id)].append(tuple(box))
    return dict(grouped)


def match_ranked(ranked: Iterable, gt, iou_threshold: float = 0.5) -> np.ndarray:
    """Greedy one-to-one matching in rank order.

    ``ranked`` holds (image_id, region_id, box) entries (extra trailing
    fields are ignored); ``gt`` is either a mapping image_id -> boxes or an
    iterable of (image_id, box). Returns a boolean true-positive flag per
    ranked entry.
    """
    gt = _group_gt(gt)
    used = {k: [False] * len(v) for k, v in gt.items()}
    flags = []
    for entry in ranked:
        image_id, box = int(entry[0]), entry[2]
        hit = False
        boxes = gt.get(image_id)
        if boxes:
            best, best_j = -1.0, -1
            for j, g in enumerate(boxes):
                if used[image_id][j]:
                    continue
                o = iou(box, g)
                if o > best:
                    best, best_j = o, j
            if best_j >= 0 and best >= iou_threshold:
                used[image_id][best_j] = True
                hit = True
        flags.append(hit)
    return np.array(flags, dtype=bool)


def num_positives(gt) -> int:
    return sum(len(v) for v in _group_gt(gt).values())


def average_precision(ranked, gt, iou_threshold: float = 0.5) -> float:
    """Sum of precision at each true-positive rank divided by the positive count.

    No interpolation is applied.
    """
    total = num_positives(gt)
    if total == 0:
        raise ValueError("query has no positives")
    tp = match_ranked(ranked, gt, iou_threshold)
    if not tp.any():
        return 0.0
    ranks = np.flatnonzero(tp) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.sum() / total)


def precision_at_k(ranked, gt, k: int, iou_threshold: float = 0.5) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    tp = match_ranked(list(ranked)[:k], gt, iou_threshold)
    return float(tp.sum()) / k


def mean_average_precision(aps: Mapping[str, float | None]) -> float:
    """Unweighted mean over queries that have an AP (``None`` marks no positives)."""
    values = [v for v in aps.values() if v is not None]
    if not values:
        raise ValueError("no query has positives")
    return float(np.mean(values))
