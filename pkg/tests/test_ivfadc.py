import itertools
import os

import numpy as np
import pytest

from conftest import random_features
from qarcnn.errors import FormatError
from qarcnn.ivfadc import (
    IvfadcIndex,
    ProductQuantizer,
    build_index,
    kmeans,
    posting_dtype,
    pq_decode,
    pq_encode,
    read_index,
    search,
    search_exact,
    train_pq,
    write_index,
)
from qarcnn.store import FeatureSet


def _features(x, image_ids=None):
    n = len(x)
    ids = np.arange(n, dtype=np.uint64) if image_ids is None else np.asarray(image_ids, np.uint64)
    boxes = np.tile(np.array([0, 0, 1, 1], np.float32), (n, 1))
    return FeatureSet(ids, np.zeros(n, np.uint32), boxes, np.asarray(x, np.float32))


def test_kmeans_separable():
    pts = np.array([[0, 0]] * 10 + [[10, 10]] * 10, dtype=float)
    res = kmeans(pts, 2, seed=0)
    assert sorted(map(tuple, res.centroids)) == [(0, 0), (10, 10)]
    assert res.distortions[-1] == 0.0


def test_kmeans_single_cluster_is_mean(rng):
    pts = rng.normal(size=(50, 3))
    np.testing.assert_allclose(kmeans(pts, 1).centroids[0], pts.mean(axis=0), atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_kmeans_distortion_monotone(seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(500, 4)) + rng.integers(0, 3, (500, 1)) * 3
    d = kmeans(pts, 8, iters=30, seed=seed).distortions
    assert all(b <= a * (1 + 1e-12) for a, b in zip(d, d[1:]))


def test_kmeans_fewer_distinct_points_than_k():
    pts = np.array([[0.0, 0]] * 5 + [[1.0, 1]] * 5)
    res = kmeans(pts, 4)
    assert res.degenerate
    assert res.centroids.shape == (4, 2)


def test_pq_exact_representability(rng):
    pq = ProductQuantizer(rng.normal(size=(3, 4, 2)))
    code = np.array([2, 0, 3], dtype=np.uint8)
    r = pq_decode(pq, code)
    np.testing.assert_array_equal(pq_encode(pq, r), code)
    np.testing.assert_array_equal(pq_decode(pq, pq_encode(pq, r)), r)


def test_pq_single_codeword(rng):
    pq = train_pq(rng.normal(size=(20, 4)), m=2, ksub=1)
    codes = pq_encode(pq, rng.normal(size=(5, 4)))
    assert not codes.any()
    np.testing.assert_array_equal(pq_decode(pq, codes[0]), pq.codebooks[:, 0].reshape(-1))


def test_pq_encode_is_optimal_code(rng):
    pq = ProductQuantizer(rng.normal(size=(2, 3, 2)))
    for r in rng.normal(size=(20, 4)):
        best = np.linalg.norm(r - pq_decode(pq, pq_encode(pq, r)))
        for code in itertools.product(range(3), repeat=2):
            assert best <= np.linalg.norm(r - pq_decode(pq, np.array(code))) + 1e-12


def test_pq_decode_rejects_bad_codes(rng):
    pq = ProductQuantizer(rng.normal(size=(2, 3, 2)))
    with pytest.raises(ValueError):
        pq_decode(pq, np.array([0, 3]))


def test_hand_scored_posting():
    """Centroid 0, codebooks {1, 2} and {3}, code (1, 0), w = (0.5, 2) -> 7."""
    pq = ProductQuantizer(np.array([[[1.0], [2.0]], [[3.0], [3.0]]]))
    post = np.zeros(1, dtype=posting_dtype(2))
    post["code"] = [1, 0]
    post["box"] = [0, 0, 1, 1]
    index = IvfadcIndex(np.zeros((1, 2)), pq, [post])
    (hit,) = search(index, np.array([0.5, 2.0]), topk=1, nprobe=1)
    assert hit.score == pytest.approx(7.0)


def test_lattice_is_lossless():
    grid = np.array(list(itertools.product([0.0, 1.0, 2.0], repeat=4)))
    feats = _features(grid)
    index = build_index(feats, nlist=1, m=4, ksub=3, seed=0)
    np.testing.assert_array_equal(index.reconstruct(0, np.arange(index.ntotal)), grid[index.lists[0]["image_id"].astype(int)])
    w = np.array([0.3, -1.0, 2.0, 0.7])
    approx = search(index, w, topk=20, nprobe=1)
    exact = search_exact(feats, w, topk=20)
    assert [(h.image_id, h.region_id) for h in approx] == [(h.image_id, h.region_id) for h in exact]


def test_orthogonal_vectors_one_per_list():
    index = build_index(_features(np.eye(4)), nlist=4, m=2, ksub=4, seed=0)
    assert sorted(index.list_sizes()) == [1, 1, 1, 1]


def test_partition_property():
    feats = random_features(600, 8, seed=2)
    index = build_index(feats, nlist=8, m=4, ksub=16, seed=0)
    assert index.list_sizes().sum() == len(feats)
    keys = sorted((int(i), int(r)) for post in index.lists for i, r in zip(post["image_id"], post["region_id"]))
    assert keys == sorted(zip(feats.image_ids.tolist(), feats.region_ids.tolist()))


def test_zero_query_breaks_ties_by_id():
    feats = random_features(300, 8, seed=3)
    index = build_index(feats, nlist=4, m=4, ksub=8, seed=0)
    hits = search(index, np.zeros(8), topk=10, nprobe=4)
    assert all(h.score == 0 for h in hits)
    assert [(h.image_id, h.region_id) for h in hits] == sorted(zip(feats.image_ids.tolist(), feats.region_ids.tolist()))[:10]


def test_full_probe_matches_reconstruction_oracle():
    feats = random_features(2000, 16, seed=4)
    index = build_index(feats, nlist=8, m=4, ksub=16, seed=0)
    rng = np.random.default_rng(9)
    for _ in range(5):
        w = rng.normal(size=16)
        hits = search(index, w, topk=100, nprobe=index.nlist)
        rows = []
        for l, post in enumerate(index.lists):
            rec = index.reconstruct(l, np.arange(len(post)))
            rows += [(-(float(s)), int(i), int(r)) for s, i, r in zip(rec @ w, post["image_id"], post["region_id"])]
        rows.sort()
        assert [(h.image_id, h.region_id) for h in hits] == [(i, r) for _, i, r in rows[:100]]


def test_search_exact_brute_force(rng):
    feats = random_features(1000, 12, seed=5)
    w = rng.normal(size=12)
    hits = search_exact(feats, w, 50)
    scores = feats.features.astype(np.float64) @ w
    expected = sorted(range(1000), key=lambda i: (-scores[i], int(feats.image_ids[i]), int(feats.region_ids[i])))[:50]
    assert [h.offset for h in hits] == expected


def test_search_exact_small():
    feats = _features(np.eye(2))
    assert search_exact(feats, np.array([1.0, 0]), 2)[0].offset == 0
    assert len(search_exact(_features([[3.0, 1.0]]), np.array([1.0, 0]), 5)) == 1


def test_search_validation():
    index = build_index(random_features(100, 4), nlist=2, m=2, ksub=4)
    with pytest.raises(ValueError):
        search(index, np.ones(4), 5, nprobe=3)
    with pytest.raises(ValueError):
        search(index, np.ones(3), 5, nprobe=1)


def test_index_round_trip(tmp_path):
    index = build_index(random_features(500, 8, seed=6), nlist=4, m=4, ksub=16, seed=0)
    write_index(tmp_path / "a.qarx", index)
    again = read_index(tmp_path / "a.qarx")
    write_index(tmp_path / "b.qarx", again)
    assert (tmp_path / "a.qarx").read_bytes() == (tmp_path / "b.qarx").read_bytes()
    assert os.path.getsize(tmp_path / "a.qarx") == index.layout_size()
    w = np.random.default_rng(0).normal(size=8)
    assert search(index, w, 20, 4) == search(again, w, 20, 4)


def test_index_truncated(tmp_path):
    index = build_index(random_features(200, 4, seed=6), nlist=2, m=2, ksub=4)
    path = tmp_path / "a.qarx"
    write_index(path, index)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        read_index(path)


def test_build_is_deterministic():
    feats = random_features(1500, 8, seed=7)
    a = build_index(feats, nlist=8, m=4, ksub=16, seed=3, max_points_per_centroid=64)
    b = build_index(feats, nlist=8, m=4, ksub=16, seed=3, max_points_per_centroid=64)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.pq.codebooks, b.pq.codebooks)
    assert all((x == y).all() for x, y in zip(a.lists, b.lists))
