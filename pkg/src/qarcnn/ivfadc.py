"""Inverted-file index with product-quantized residuals, searched by inner product.

Regions are partitioned by a k-means coarse quantizer; the residual of each
region to its coarse centroid is product-quantized. A query classifier
``w`` probes the lists whose centroids maximize ``w . centroid`` and scores
each posting with a per-subspace lookup table, which reproduces
``w . (centroid + decoded residual)`` exactly.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from qarcnn.detector import Box
from qarcnn.errors import DimensionError, FormatError
from qarcnn.store import FeatureSet

INDEX_MAGIC = b"QARX"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sIIIIIQ")
_CHUNK = 32768
THREADS_ENV = "QARCNN_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def posting_dtype(m: int) -> np.dtype:
    return np.dtype([("image_id", "<u8"), ("region_id", "<u4"), ("box", "<f4", (4,)), ("code", "u1", (m,))])


# ---------------------------------------------------------------------------
# k-means


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    distortions: list[float] = field(default_factory=list)
    degenerate: bool = False


def _sq_norms(x):
    return np.einsum("ij,ij->i", x, x)


def assign_nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the nearest centroid (Euclidean), lowest index on ties."""
    c_norm = _sq_norms(centroids)
    out = np.empty(len(points), dtype=np.int64)
    for start in range(0, len(points), _CHUNK):
        x = points[start : start + _CHUNK]
        d = c_norm[None, :] - 2.0 * (x @ centroids.T)
        out[start : start + _CHUNK] = np.argmin(d, axis=1)
    return out


def _distortion(points, centroids, assignment) -> tuple[float, np.ndarray]:
    per_point = np.empty(len(points))
    for start in range(0, len(points), _CHUNK):
        diff = points[start : start + _CHUNK] - centroids[assignment[start : start + _CHUNK]]
        per_point[start : start + _CHUNK] = _sq_norms(diff)
    return float(per_point.sum()), per_point


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # seeding only needs sampling weights; single precision halves the memory traffic
    p32 = points.astype(np.float32)
    norms = _sq_norms(p32)
    n = len(points)
    chosen = [int(rng.integers(n))]
    closest = np.maximum(norms - 2.0 * (p32 @ p32[chosen[0]]) + norms[chosen[0]], 0.0).astype(np.float64)
    for _ in range(1, k):
        cum = np.cumsum(closest)
        if cum[-1] <= 0:
            idx = int(rng.integers(n))
        else:
            idx = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")), n - 1)
        chosen.append(idx)
        d = norms - 2.0 * (p32 @ p32[idx]) + norms[idx]
        np.minimum(closest, np.maximum(d, 0.0), out=closest)
    return points[chosen].copy()


def kmeans(points, k: int, iters: int = 25, seed: int = 0) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``distortions[t]`` is the sum of squared distances after the t-th
    assignment step. Empty clusters are re-seeded at the points farthest
    from their centroids. With fewer than ``k`` distinct points the
    remaining centroids duplicate points and ``degenerate`` is set.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans needs a non-empty 2-d point array")
    if k < 1:
        raise ValueError("k must be at least 1")
    rng = np.random.default_rng(seed)

    distinct = np.unique(points, axis=0) if k > 1 else points[:1]
    if len(distinct) < k:
        reps = np.resize(np.arange(len(distinct)), k)
        centroids = distinct[reps].copy()
        assignment = assign_nearest(points, centroids)
        dist, _ = _distortion(points, centroids, assignment)
        return KMeansResult(centroids, assignment, [dist], degenerate=True)

    if k == 1:
        centroids = points.mean(axis=0, keepdims=True)
        assignment = np.zeros(len(points), dtype=np.int64)
        dist, _ = _distortion(points, centroids, assignment)
        return KMeansResult(centroids, assignment, [dist])

    centroids = _kmeans_pp(points, k, rng)
    assignment = assign_nearest(points, centroids)
    dist, per_point = _distortion(points, centroids, assignment)
    distortions = [dist]
    for _ in range(iters):
        counts = np.bincount(assignment, minlength=k)
        sums = np.zeros_like(centroids)
        _scatter_sum(sums, assignment, points)
        new = centroids.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            far = np.argsort(-per_point, kind="stable")
            taken = 0
            for c in empty:
                while taken < len(far) and np.any(np.all(new == points[far[taken]], axis=1)):
                    taken += 1
                new[c] = points[far[min(taken, len(far) - 1)]]
                taken += 1
        new_assignment = assign_nearest(points, new)
        new_dist, new_per_point = _distortion(points, new, new_assignment)
        if new_dist > dist:
            # rounding in the nearest-centroid search; keep the better state
            break
        centroids, per_point = new, new_per_point
        changed = not np.array_equal(new_assignment, assignment)
        assignment, dist = new_assignment, new_dist
        distortions.append(dist)
        if not changed and not len(empty):
            break
    return KMeansResult(centroids, assignment, distortions)


def _scatter_sum(sums, assignment, points):
    order = np.argsort(assignment, kind="stable")
    sorted_assign = assignment[order]
    bounds = np.flatnonzero(np.diff(sorted_assign)) + 1
    starts = np.concatenate([[0], bounds])
    sums[sorted_assign[starts]] = np.add.reduceat(points[order], starts, axis=0)


# ---------------------------------------------------------------------------
# product quantization


@dataclass
class ProductQuantizer:
    codebooks: np.ndarray  # (m, ksub, dsub)

    def __post_init__(self):
        if self.codebooks.ndim != 3:
            raise DimensionError("codebooks must have shape (m, ksub, dsub)")
        if not 1 <= self.ksub <= 256:
            raise ValueError("ksub must be in [1, 256]")

    @property
    def m(self) -> int:
        return self.codebooks.shape[0]

    @property
    def ksub(self) -> int:
        return self.codebooks.shape[1]

    @property
    def dsub(self) -> int:
        return self.codebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.m * self.dsub


def _as_f32_values(x) -> np.ndarray:
    """Round to single precision, keep float64 storage (what the file holds)."""
    return np.asarray(x, dtype=np.float32).astype(np.float64)


def train_pq(residuals: np.ndarray, m: int, ksub: int, iters: int = 25, seed: int = 0) -> ProductQuantizer:
    residuals = np.asarray(residuals, dtype=np.float64)
    d = residuals.shape[1]
    if d % m:
        raise DimensionError(f"m={m} does not divide D_feat={d}")
    dsub = d // m

    def fit(j):
        sub = residuals[:, j * dsub : (j + 1) * dsub]
        return kmeans(sub, ksub, iters, seed=np.random.SeedSequence([seed, j]).generate_state(1)[0]).centroids

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        books = list(pool.map(fit, range(m)))
    return ProductQuantizer(_as_f32_values(np.stack(books)))


def pq_encode(pq: ProductQuantizer, residual) -> np.ndarray:
    """Nearest codeword per subspace; accepts one vector or a (n, D) array."""
    r = np.asarray(residual, dtype=np.float64)
    single = r.ndim == 1
    r = r.reshape(-1, r.shape[-1])
    if r.shape[1] != pq.dim:
        raise DimensionError(f"residual has {r.shape[1]} components, expected {pq.dim}")
    codes = np.empty((len(r), pq.m), dtype=np.uint8)
    for j in range(pq.m):
        codes[:, j] = assign_nearest(r[:, j * pq.dsub : (j + 1) * pq.dsub], pq.codebooks[j])
    return codes[0] if single else codes


def pq_decode(pq: ProductQuantizer, code) -> np.ndarray:
    c = np.asarray(code)
    single = c.ndim == 1
    c = c.reshape(-1, pq.m).astype(np.int64)
    if c.size and (c.min() < 0 or c.max() >= pq.ksub):
        raise ValueError(f"code entry out of range [0, {pq.ksub})")
    out = pq.codebooks[np.arange(pq.m)[None, :], c].reshape(len(c), pq.dim)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# index


class Hit(NamedTuple):
    image_id: int
    region_id: int
    box: Box
    score: float
    list_no: int = -1
    offset: int = -1


@dataclass
class IvfadcIndex:
    centroids: np.ndarray  # (nlist, D)
    pq: ProductQuantizer
    lists: list[np.ndarray]  # structured posting arrays

    @property
    def nlist(self) -> int:
        return len(self.centroids)

    @property
    def d_feat(self) -> int:
        return self.centroids.shape[1]

    @property
    def ntotal(self) -> int:
        return sum(len(p) for p in self.lists)

    def list_sizes(self) -> np.ndarray:
        return np.array([len(p) for p in self.lists], dtype=np.int64)

    def reconstruct(self, list_no: int, offset) -> np.ndarray:
        """Coarse centroid plus decoded residual for postings of one list."""
        codes = self.lists[list_no]["code"][offset]
        return self.centroids[list_no] + pq_decode(self.pq, codes)

    def reconstruct_all(self) -> FeatureSet:
        parts = []
        for l, post in enumerate(self.lists):
            if len(post):
                parts.append((post, self.centroids[l] + pq_decode(self.pq, post["code"])))
        if not parts:
            return FeatureSet(np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros((0, self.d_feat)))
        return FeatureSet(
            np.concatenate([p["image_id"] for p, _ in parts]),
            np.concatenate([p["region_id"] for p, _ in parts]),
            np.concatenate([p["box"] for p, _ in parts]),
            np.concatenate([r for _, r in parts]),
        )

    def layout_size(self) -> int:
        """Byte size of the serialized index."""
        head = _INDEX_HEADER.size + 4 * (self.centroids.size + self.pq.codebooks.size)
        return head + 8 * self.nlist + self.ntotal * posting_dtype(self.pq.m).itemsize


def default_nlist(n: int) -> int:
    """sqrt(n) rounded to the nearest power of two."""
    return max(1, 2 ** round(math.log2(max(1.0, math.sqrt(n)))))


def _training_sample(n: int, cap: int | None, rng: np.random.Generator) -> np.ndarray:
    if cap is None or cap >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def build_index(
    features: FeatureSet,
    nlist: int,
    m: int = 8,
    ksub: int = 256,
    iters: int = 25,
    seed: int = 0,
    max_points_per_centroid: int | None = None,
) -> IvfadcIndex:
    """Train the coarse quantizer and PQ, then encode every region.

    With ``max_points_per_centroid`` set, the coarse quantizer trains on a
    seeded uniform sample of at most ``max_points_per_centroid * nlist``
    regions and the PQ on at most ``max_points_per_centroid * ksub``
    residuals; every region is still assigned and encoded.
    """
    n = len(features)
    if n == 0:
        raise ValueError("cannot index an empty feature set")
    if n < nlist or n < ksub:
        raise ValueError(f"need at least nlist={nlist} and ksub={ksub} points, got {n}")
    if features.d_feat % m:
        raise DimensionError(f"m={m} does not divide D_feat={features.d_feat}")
    rng = np.random.default_rng(seed)
    x = features.features.astype(np.float64)
    mpc = max_points_per_centroid

    sample = _training_sample(n, None if mpc is None else mpc * nlist, rng)
    centroids = _as_f32_values(kmeans(x[sample], nlist, iters, seed=seed).centroids)
    assignment = assign_nearest(x, centroids)

    residuals = x - centroids[assignment]
    sample = _training_sample(n, None if mpc is None else mpc * ksub, rng)
    pq = train_pq(residuals[sample], m, ksub, iters, seed=seed + 1)
    codes = np.empty((n, m), dtype=np.uint8)
    for start in range(0, n, _CHUNK):
        codes[start : start + _CHUNK] = pq_encode(pq, residuals[start : start + _CHUNK])

    dtype = posting_dtype(m)
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(nlist + 1))
    lists = []
    for l in range(nlist):
        rows = order[bounds[l] : bounds[l + 1]]
        post = np.empty(len(rows), dtype=dtype)
        post["image_id"] = features.image_ids[rows]
        post["region_id"] = features.region_ids[rows]
        post["box"] = features.boxes[rows]
        post["code"] = codes[rows]
        lists.append(post)
    return IvfadcIndex(centroids, pq, lists)


def adc_table(pq: ProductQuantizer, w: np.ndarray) -> np.ndarray:
    """T[j, i] = w restricted to subspace j, dotted with codeword i of subspace j."""
    return np.einsum("jkd,jd->jk", pq.codebooks, w.reshape(pq.m, pq.dsub))


def _top_order(scores, image_ids, region_ids, topk):
    if len(scores) > topk:
        kth = np.partition(scores, len(scores) - topk)[len(scores) - topk]
        keep = np.flatnonzero(scores >= kth)
    else:
        keep = np.arange(len(scores))
    order = np.lexsort((region_ids[keep], image_ids[keep], -scores[keep]))
    return keep[order[:topk]]


def search(index: IvfadcIndex, w_c, topk: int, nprobe: int) -> list[Hit]:
    """Approximate top-``topk`` postings by inner product with ``w_c``.

    Ties are broken by ascending (image_id, region_id).
    """
    if index.ntotal == 0:
        raise ValueError("index is empty")
    if not 1 <= nprobe <= index.nlist:
        raise ValueError(f"nprobe must be in [1, {index.nlist}]")
    w = np.asarray(w_c, dtype=np.float64)
    if w.shape != (index.d_feat,):
        raise DimensionError(f"query has shape {w.shape}, expected ({index.d_feat},)")
    if topk < 1:
        return []
    coarse = index.centroids @ w
    probe = np.lexsort((np.arange(index.nlist), -coarse))[:nprobe]
    table = adc_table(index.pq, w).ravel()
    offsets = np.arange(index.pq.m) * index.pq.ksub

    scores, lists, pos = [], [], []
    for l in probe:
        post = index.lists[l]
        if not len(post):
            continue
        scores.append(coarse[l] + table[post["code"].astype(np.intp) + offsets].sum(axis=1))
        lists.append(np.full(len(post), l))
        pos.append(np.arange(len(post)))
    if not scores:
        return []
    scores = np.concatenate(scores)
    lists = np.concatenate(lists)
    pos = np.concatenate(pos)
    image_ids = np.concatenate([index.lists[l]["image_id"] for l in probe if len(index.lists[l])])
    region_ids = np.concatenate([index.lists[l]["region_id"] for l in probe if len(index.lists[l])])
    hits = []
    for i in _top_order(scores, image_ids, region_ids, topk):
        p = index.lists[lists[i]][pos[i]]
        hits.append(
            Hit(int(p["image_id"]), int(p["region_id"]), Box(*(float(v) for v in p["box"])), float(scores[i]), int(lists[i]), int(pos[i]))
        )
    return hits


def search_exact(features: FeatureSet, w_c, topk: int) -> list[Hit]:
    """Full scan by ``w_c . f`` with the same tie-break as :func:`search`.

    ``offset`` of each hit is its row in ``features``.
    """
    w = np.asarray(w_c, dtype=np.float64)
    if w.shape != (features.d_feat,):
        raise DimensionError(f"query has shape {w.shape}, expected ({features.d_feat},)")
    scores = np.empty(len(features))
    for start in range(0, len(features), _CHUNK):
        scores[start : start + _CHUNK] = features.features[start : start + _CHUNK].astype(np.float64) @ w
    return [
        Hit(int(features.image_ids[i]), int(features.region_ids[i]), Box(*(float(v) for v in features.boxes[i])), float(scores[i]), -1, int(i))
        for i in _top_order(scores, features.image_ids, features.region_ids, topk)
    ]


# ---------------------------------------------------------------------------
# serialization


def write_index(path: str | Path, index: IvfadcIndex) -> None:
    with open(path, "wb") as fh:
        fh.write(
            _INDEX_HEADER.pack(
                INDEX_MAGIC, INDEX_VERSION, index.d_feat, index.nlist, index.pq.m, index.pq.ksub, index.ntotal
            )
        )
        fh.write(index.centroids.astype("<f4").tobytes())
        fh.write(index.pq.codebooks.astype("<f4").tobytes())
        for post in index.lists:
            fh.write(struct.pack("<Q", len(post)))
            fh.write(post.tobytes())


def read_index(path: str | Path) -> IvfadcIndex:
    data = Path(path).read_bytes()
    if len(data) < _INDEX_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, d_feat, nlist, m, ksub, ntotal = _INDEX_HEADER.unpack_from(data)
    if magic != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if m == 0 or d_feat % m:
        raise FormatError(f"{path}: m={m} does not divide D_feat={d_feat}")
    offset = _INDEX_HEADER.size

    def take(count, dtype):
        nonlocal offset
        dtype = np.dtype(dtype)
        end = offset + count * dtype.itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated payload at byte {offset}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset = end
        return arr

    centroids = take(nlist * d_feat, "<f4").astype(np.float64).reshape(nlist, d_feat)
    codebooks = take(m * ksub * (d_feat // m), "<f4").astype(np.float64).reshape(m, ksub, d_feat // m)
    dtype = posting_dtype(m)
    lists = []
    for _ in range(nlist):
        (length,) = take(1, "<u8")
        lists.append(take(int(length), dtype).copy())
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    index = IvfadcIndex(centroids, ProductQuantizer(codebooks), lists)
    if index.ntotal != ntotal:
        raise FormatError(f"{path}: header declares {ntotal} postings, lists hold {index.ntotal}")
    for post in lists:
        if len(post) and post["code"].max() >= ksub:
            raise FormatError(f"{path}: code entry out of range")
    return index
