"""Text query -> generated detector -> index search -> regressed boxes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from qarcnn.detector import Box, GeneratorParams, apply_deltas, generate_detector
from qarcnn.embedding import Phrase, WordVectorTable, embed_phrase
from qarcnn.ivfadc import IvfadcIndex, search, search_exact
from qarcnn.store import FeatureSet


@dataclass(frozen=True)
class QueryResult:
    image_id: int
    region_id: int
    score: float
    proposal_box: Box
    regressed_box: Box

    def to_json(self, rank: int) -> str:
        return json.dumps(
            {
                "rank": rank,
                "image_id": self.image_id,
                "region_id": self.region_id,
                "score": self.score,
                "box": [float(x) for x in self.regressed_box],
            }
        )


def retrieve(
    index: IvfadcIndex | None,
    params: GeneratorParams,
    words: WordVectorTable,
    query: str,
    topk: int = 100,
    nprobe: int = 1,
    exact_features: FeatureSet | None = None,
) -> list[QueryResult]:
    """Retrieve and localize regions matching ``query``.

    In approximate mode regression deltas come from the PQ reconstruction
    of each hit, so the index alone suffices. Passing ``exact_features``
    scans the raw features instead and regresses from them.
    """
    if topk < 1:
        raise ValueError("topk must be at least 1")
    det = generate_detector(params, embed_phrase(words, Phrase(query)))
    if exact_features is not None:
        hits = search_exact(exact_features, det.w_c, topk)
        feats = np.array([exact_features.features[h.offset] for h in hits], dtype=np.float64)
    else:
        if index is None:
            raise ValueError("an index or exact features are required")
        hits = search(index, det.w_c, topk, nprobe)
        feats = np.array([index.reconstruct(h.list_no, h.offset) for h in hits])
    if not hits:
        return []
    deltas = feats.reshape(len(hits), -1) @ det.w_r.T
    boxes = apply_deltas(np.array([tuple(h.box) for h in hits]), deltas)
    return [
        QueryResult(h.image_id, h.region_id, h.score, h.box, Box(*(float(v) for v in b)))
        for h, b in zip(hits, boxes)
    ]


def top1_per_image(
    params: GeneratorParams,
    words: WordVectorTable,
    phrase: Phrase | str,
    features: FeatureSet,
    rows: Sequence[int] | np.ndarray,
    regress: bool = True,
) -> Box:
    """Best-scoring region box among ``rows`` of one image, optionally regressed."""
    det = generate_detector(params, embed_phrase(words, phrase))
    rows = np.asarray(rows)
    f = features.features[rows].astype(np.float64)
    scores = f @ det.w_c
    best = int(np.lexsort((features.region_ids[rows], -scores))[0])
    box = Box(*(float(v) for v in features.boxes[rows[best]]))
    if regress:
        box = apply_deltas(box, det.regress(f[best]))
    return box
