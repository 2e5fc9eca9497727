import itertools
import json

import numpy as np
import pytest

from qarcnn.detector import GeneratorParams
from qarcnn.embedding import WordVectorTable
from qarcnn.ivfadc import build_index
from qarcnn.retrieval import retrieve
from qarcnn.store import FeatureSet


def _lattice():
    grid = np.array(list(itertools.product([0.0, 1.0, 2.0], repeat=4)))
    n = len(grid)
    xy = np.arange(n, dtype=np.float32)[:, None] * np.ones((1, 2), np.float32)
    boxes = np.concatenate([xy, xy + 10], axis=1)
    return FeatureSet(np.arange(n, dtype=np.uint64), np.ones(n, np.uint32), boxes, grid.astype(np.float32))


def _params(seed=0, zero_regressor=False):
    p = GeneratorParams.initialize(3, 4, 2, seed=seed, scale=0.5)
    if zero_regressor:
        p.H2[:] = 0
        p.b2[:] = 0
    return p


WORDS = WordVectorTable({"dog": [1, 0.5, -1], "a": [0, 1, 0]})


def test_zero_regressor_keeps_proposals():
    feats = _lattice()
    index = build_index(feats, nlist=1, m=4, ksub=3)
    for r in retrieve(index, _params(zero_regressor=True), WORDS, "a dog", topk=10):
        assert r.regressed_box == pytest.approx(r.proposal_box)


def test_topk_one_on_single_region():
    one = FeatureSet(np.array([5], np.uint64), np.array([2], np.uint32), np.array([[0, 0, 4, 4]], np.float32),
                     np.ones((1, 4), np.float32))
    index = build_index(one, nlist=1, m=2, ksub=1)
    (r,) = retrieve(index, _params(), WORDS, "dog", topk=1)
    assert (r.image_id, r.region_id) == (5, 2)


def test_exact_and_lossless_approximate_agree():
    feats = _lattice()
    index = build_index(feats, nlist=1, m=4, ksub=3)
    p = _params(seed=1)
    approx = retrieve(index, p, WORDS, "a dog", topk=30, nprobe=1)
    exact = retrieve(None, p, WORDS, "a dog", topk=30, exact_features=feats)
    assert [(r.image_id, r.region_id) for r in approx] == [(r.image_id, r.region_id) for r in exact]
    for a, e in zip(approx, exact):
        assert a.regressed_box == pytest.approx(e.regressed_box, rel=1e-5)


def test_result_json_line():
    feats = _lattice()
    (r,) = retrieve(None, _params(), WORDS, "dog", topk=1, exact_features=feats)
    obj = json.loads(r.to_json(1))
    assert set(obj) == {"rank", "image_id", "region_id", "score", "box"}
    assert obj["rank"] == 1 and len(obj["box"]) == 4


def test_retrieve_requires_a_source():
    with pytest.raises(ValueError):
        retrieve(None, _params(), WORDS, "dog")
