"""Binary feature files and the text formats around them.

Feature file layout (little-endian)::

    magic "QARF" | version u32 | D_feat u32 | count u64
    count x (image_id u64, region_id u32, box 4 x f32, feature D_feat x f32)
"""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from qarcnn.detector import Box, RegionFeature
from qarcnn.embedding import Phrase
from qarcnn.errors import FormatError
from qarcnn.npa import CooccurrenceStats, Taxonomy

FEATURE_MAGIC = b"QARF"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIQ")


def record_dtype(d_feat: int) -> np.dtype:
    return np.dtype([("image_id", "<u8"), ("region_id", "<u4"), ("box", "<f4", (4,)), ("feature", "<f4", (d_feat,))])


@dataclass
class FeatureSet:
    """Column-oriented region features; iterating yields :class:`RegionFeature`."""

    image_ids: np.ndarray
    region_ids: np.ndarray
    boxes: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.image_ids = np.asarray(self.image_ids, dtype=np.uint64)
        self.region_ids = np.asarray(self.region_ids, dtype=np.uint32)
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        n = len(self.features)
        if not (len(self.image_ids) == len(self.region_ids) == len(self.boxes) == n):
            raise ValueError("feature columns differ in length")

    @property
    def d_feat(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.features)

    def __iter__(self) -> Iterator[RegionFeature]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i: int) -> RegionFeature:
        return RegionFeature(
            int(self.image_ids[i]),
            int(self.region_ids[i]),
            Box(*(float(x) for x in self.boxes[i])),
            self.features[i].astype(np.float64),
        )

    @classmethod
    def from_regions(cls, regions: Iterable[RegionFeature], d_feat: int | None = None) -> "FeatureSet":
        regions = list(regions)
        if not regions:
            if d_feat is None:
                raise ValueError("d_feat is required for an empty set")
            return cls(np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros((0, d_feat)))
        return cls(
            [r.image_id for r in regions],
            [r.region_id for r in regions],
            [tuple(r.box) for r in regions],
            np.stack([r.feature for r in regions]),
        )

    def by_image(self) -> dict[int, np.ndarray]:
        """image_id -> row indices, in file order."""
        groups: dict[int, list[int]] = defaultdict(list)
        for i, image_id in enumerate(self.image_ids.tolist()):
            groups[image_id].append(i)
        return {k: np.array(v) for k, v in groups.items()}

    def to_records(self) -> np.ndarray:
        rec = np.empty(len(self), dtype=record_dtype(self.d_feat))
        rec["image_id"] = self.image_ids
        rec["region_id"] = self.region_ids
        rec["box"] = self.boxes
        rec["feature"] = self.features
        return rec


def _check_boxes(boxes: np.ndarray, path, first_record: int, record_size: int) -> None:
    ok = np.isfinite(boxes).all(axis=1) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    if not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        offset = _FEATURE_HEADER.size + (first_record + i) * record_size
        raise FormatError(f"{path}: invalid box in record {first_record + i} at byte {offset}")


def write_feature_file(path: str | Path, features: FeatureSet) -> None:
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, features.d_feat, len(features)))
        fh.write(features.to_records().tobytes())


def _read_header(fh, path) -> tuple[int, int]:
    head = fh.read(_FEATURE_HEADER.size)
    if len(head) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(head)} bytes)")
    magic, version, d_feat, count = _FEATURE_HEADER.unpack(head)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    return d_feat, count


def iter_feature_file(path: str | Path, chunk: int = 65536) -> Iterator[FeatureSet]:
    """Stream a feature file in chunks of at most ``chunk`` records."""
    with open(path, "rb") as fh:
        d_feat, count = _read_header(fh, path)
        dtype = record_dtype(d_feat)
        done = 0
        while done < count:
            n = min(chunk, count - done)
            buf = fh.read(n * dtype.itemsize)
            if len(buf) < n * dtype.itemsize:
                offset = _FEATURE_HEADER.size + done * dtype.itemsize + len(buf)
                raise FormatError(
                    f"{path}: truncated payload at byte {offset} "
                    f"(expected {count} records of {dtype.itemsize} bytes)"
                )
            rec = np.frombuffer(buf, dtype=dtype)
            _check_boxes(rec["box"], path, done, dtype.itemsize)
            yield FeatureSet(rec["image_id"], rec["region_id"], rec["box"], rec["feature"])
            done += n
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after {count} records")


def read_feature_file(path: str | Path) -> FeatureSet:
    with open(path, "rb") as fh:
        d_feat, count = _read_header(fh, path)
    parts = list(iter_feature_file(path, chunk=max(count, 1)))
    if not parts:
        return FeatureSet(np.zeros(0), np.zeros(0), np.zeros((0, 4)), np.zeros((0, d_feat)))
    return parts[0]


@dataclass(frozen=True)
class Annotation:
    image_id: int
    phrase: Phrase
    box: Box


def read_annotations(path: str | Path) -> list[Annotation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                box = Box.checked(*obj["box"])
                out.append(Annotation(int(obj["image_id"]), Phrase(str(obj["phrase"])), box))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad annotation ({exc})") from None
    return out


def write_annotations(path: str | Path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            fh.write(json.dumps({"image_id": a.image_id, "phrase": a.phrase.raw, "box": [float(x) for x in a.box]}) + "\n")


def _read_tsv(path, ncols: int) -> list[list[str]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != ncols:
                raise FormatError(f"{path}:{lineno}: expected {ncols} tab-separated columns")
            rows.append(cols)
    return rows


def read_taxonomy(path: str | Path) -> Taxonomy:
    try:
        return Taxonomy((c.lower(), p.lower()) for c, p in _read_tsv(path, 2))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_taxonomy(path: str | Path, tax: Taxonomy) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for child, parent in tax.edges:
            fh.write(f"{child}\t{parent}\n")


def read_cooccurrence(totals_path: str | Path, pairs_path: str | Path) -> CooccurrenceStats:
    stats = CooccurrenceStats()
    try:
        for cat, n in _read_tsv(totals_path, 2):
            stats.total[cat.lower()] = int(n)
        for a, b, n in _read_tsv(pairs_path, 3):
            stats.add_pair(a.lower(), b.lower(), int(n))
    except ValueError as exc:
        raise FormatError(f"bad count in co-occurrence files: {exc}") from None
    return stats


def write_cooccurrence(totals_path: str | Path, pairs_path: str | Path, stats: CooccurrenceStats) -> None:
    with open(totals_path, "w", encoding="utf-8") as fh:
        for cat, n in sorted(stats.total.items()):
            fh.write(f"{cat}\t{n}\n")
    with open(pairs_path, "w", encoding="utf-8") as fh:
        for key, n in sorted(stats.pair.items(), key=lambda kv: sorted(kv[0])):
            a, b = sorted(key)
            fh.write(f"{a}\t{b}\t{n}\n")


def read_queries(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]
