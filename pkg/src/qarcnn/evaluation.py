"""Retrieval and localization report over an annotated region collection."""

from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from qarcnn.detector import GeneratorParams
from qarcnn.embedding import Phrase, WordVectorTable, head_noun
from qarcnn.ivfadc import IvfadcIndex
from qarcnn.metrics import (
    LOCALIZATION_THRESHOLDS,
    average_precision,
    iou_matrix,
    localization_accuracy,
    match_ranked,
    mean_average_precision,
    precision_at_k,
)
from qarcnn.retrieval import retrieve, top1_per_image
from qarcnn.store import Annotation, FeatureSet

BACKGROUND = "<background>"


def ground_truth(annotations: Sequence[Annotation], lexicon) -> dict[str, dict[int, list]]:
    """head noun -> image_id -> gt boxes."""
    gt: dict[str, dict[int, list]] = {}
    for a in annotations:
        noun = head_noun(a.phrase, lexicon)[1]
        gt.setdefault(noun, {}).setdefault(a.image_id, []).append(tuple(a.box))
    return gt


def region_category(hit, gt_by_image: dict[int, list[tuple[str, tuple]]], iou_threshold: float) -> str:
    """Category of the annotated object a region covers, or the background label."""
    best, label = 0.0, BACKGROUND
    for noun, box in gt_by_image.get(hit.image_id, ()):
        o = float(iou_matrix(np.array([tuple(hit.proposal_box)]), np.array([box]))[0, 0])
        if o >= iou_threshold and o > best:
            best, label = o, noun
    return label


def evaluate(
    params: GeneratorParams,
    words: WordVectorTable,
    annotations: Sequence[Annotation],
    queries: Sequence[str],
    features: FeatureSet | None = None,
    index: IvfadcIndex | None = None,
    nprobe: int = 1,
    iou_threshold: float = 0.5,
    lexicon=None,
    depth: int | None = None,
    confusion_depth: int = 100,
) -> dict:
    """AP, PR@10, PR@100 and top-``confusion_depth`` false alarms per query, plus localization.

    Regions are ranked over ``features`` exactly when given, otherwise over
    ``index``. Localization accuracy takes the top-1 region of each
    annotated phrase within its own image, with and without regression.
    """
    if features is None and index is None:
        raise ValueError("features or an index is required")
    query_nouns = {q: Phrase(q).tokens[-1] for q in queries}
    lexicon = frozenset(lexicon or ()) | frozenset(query_nouns.values())
    gt = ground_truth(annotations, lexicon)
    gt_by_image: dict[int, list] = {}
    for a in annotations:
        gt_by_image.setdefault(a.image_id, []).append((head_noun(a.phrase, lexicon)[1], tuple(a.box)))

    pool = features if features is not None else index.reconstruct_all()
    if depth is None:
        depth = len(pool)

    per_query = {}
    for q in queries:
        results = retrieve(index, params, words, q, topk=depth, nprobe=nprobe, exact_features=features)
        ranked = [(r.image_id, r.region_id, tuple(r.regressed_box)) for r in results]
        positives = gt.get(head_noun(Phrase(q), lexicon)[1], {})
        entry = {"positives": sum(len(v) for v in positives.values())}
        if entry["positives"]:
            entry["ap"] = average_precision(ranked, positives, iou_threshold)
            entry["pr@10"] = precision_at_k(ranked, positives, 10, iou_threshold)
            entry["pr@100"] = precision_at_k(ranked, positives, 100, iou_threshold)
        else:
            entry["ap"] = None
        tp = match_ranked(ranked[:confusion_depth], positives, iou_threshold)
        false_alarms = Counter(
            region_category(r, gt_by_image, iou_threshold)
            for r, hit in zip(results[:confusion_depth], tp)
            if not hit
        )
        entry["false_alarms"] = dict(sorted(false_alarms.items()))
        per_query[q] = entry

    aps = {q: e["ap"] for q, e in per_query.items()}
    report = {
        "queries": per_query,
        "map": mean_average_precision(aps) if any(v is not None for v in aps.values()) else None,
        "iou_threshold": iou_threshold,
    }
    report.update(localization_report(params, words, annotations, pool))
    return report


def localization_report(
    params: GeneratorParams,
    words: WordVectorTable,
    annotations: Sequence[Annotation],
    features: FeatureSet,
    thresholds: Sequence[float] = LOCALIZATION_THRESHOLDS,
) -> dict:
    groups = features.by_image()
    regressed, plain, gts = [], [], []
    for a in annotations:
        rows = groups.get(a.image_id)
        if rows is None:
            continue
        regressed.append(top1_per_image(params, words, a.phrase, features, rows, regress=True))
        plain.append(top1_per_image(params, words, a.phrase, features, rows, regress=False))
        gts.append(tuple(a.box))
    if not gts:
        return {"localization": {}, "localization_no_regression": {}}
    return {
        "localization": {f"{t:.1f}": localization_accuracy(regressed, gts, t) for t in thresholds},
        "localization_no_regression": {f"{t:.1f}": localization_accuracy(plain, gts, t) for t in thresholds},
    }
