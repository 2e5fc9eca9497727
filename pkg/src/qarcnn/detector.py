"""Detector generator and bounding-box regression algebra.

A phrase embedding ``v`` is mapped to a linear classifier ``w_c = W v`` and
four linear box regressors produced by a one-hidden-layer MLP whose hidden
layer is shared by the x, y, w and h heads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from qarcnn.errors import DimensionError, FormatError

COORDS = ("x", "y", "w", "h")


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def checked(cls, x1, y1, x2, y2) -> "Box":
        box = cls(float(x1), float(y1), float(x2), float(y2))
        if not box.is_valid():
            raise ValueError(f"invalid box {tuple(box)}")
        return box

    def is_valid(self) -> bool:
        return bool(np.isfinite(self).all()) and self.x2 > self.x1 and self.y2 > self.y1

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))


@dataclass(frozen=True)
class RegionFeature:
    image_id: int
    region_id: int
    box: Box
    feature: np.ndarray


@dataclass
class GeneratorParams:
    """Trainable weights of the detector generator.

    Shapes: ``W`` (d_feat, dim); ``H1`` (hidden, dim); ``b1`` (hidden,);
    ``H2`` (4, d_feat, hidden) stacked in x, y, w, h order; ``b2`` (4, d_feat).
    """

    W: np.ndarray
    H1: np.ndarray
    b1: np.ndarray
    H2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d_feat, dim = self.W.shape
        hidden = self.H1.shape[0]
        if hidden < 1:
            raise DimensionError("hidden_dim must be at least 1")
        expected = {
            "H1": (hidden, dim),
            "b1": (hidden,),
            "H2": (4, d_feat, hidden),
            "b2": (4, d_feat),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    @property
    def d_feat(self) -> int:
        return self.W.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.H1.shape[0]

    @classmethod
    def zeros(cls, dim: int, d_feat: int, hidden_dim: int = 16) -> "GeneratorParams":
        return cls(
            W=np.zeros((d_feat, dim)),
            H1=np.zeros((hidden_dim, dim)),
            b1=np.zeros(hidden_dim),
            H2=np.zeros((4, d_feat, hidden_dim)),
            b2=np.zeros((4, d_feat)),
        )

    @classmethod
    def initialize(cls, dim: int, d_feat: int, hidden_dim: int = 16, seed: int = 0, scale: float = 0.01):
        """Small Gaussian weights; the hidden bias starts positive so no unit is dead."""
        rng = np.random.default_rng(seed)
        return cls(
            W=rng.normal(0.0, scale, (d_feat, dim)),
            H1=rng.normal(0.0, 1.0 / np.sqrt(dim), (hidden_dim, dim)),
            b1=np.full(hidden_dim, 0.1),
            H2=rng.normal(0.0, scale, (4, d_feat, hidden_dim)),
            b2=np.zeros((4, d_feat)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(**{k: v.copy() for k, v in self.arrays().items()})

    def num_regressor_params(self) -> int:
        return self.H1.size + self.b1.size + self.H2.size + self.b2.size


def regressor_param_count(dim: int, hidden: int | None, d_feat: int, shared: bool = True) -> int:
    """Parameter count of a regressor generator architecture.

    ``hidden=None`` is a plain linear map per head; ``shared=False`` gives
    every head its own hidden layer.
    """
    if hidden is None:
        return 4 * (dim * d_feat + d_feat)
    head = hidden * d_feat + d_feat
    trunk = dim * hidden + hidden
    if shared:
        return trunk + 4 * head
    return 4 * (trunk + head)


@dataclass(frozen=True)
class Detector:
    w_c: np.ndarray
    w_r: np.ndarray  # (4, d_feat), rows x, y, w, h

    def regress(self, feature: np.ndarray) -> np.ndarray:
        return self.w_r @ np.asarray(feature, dtype=np.float64)


def generate_detector(params: GeneratorParams, v: np.ndarray) -> Detector:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (params.dim,):
        raise DimensionError(f"embedding has shape {v.shape}, expected ({params.dim},)")
    w_c = params.W @ v
    hidden = np.maximum(params.H1 @ v + params.b1, 0.0)
    w_r = params.H2 @ hidden + params.b2
    return Detector(w_c=w_c, w_r=w_r)


def score_region(det: Detector, feature: np.ndarray) -> float:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape != det.w_c.shape:
        raise DimensionError(f"feature has shape {feature.shape}, expected {det.w_c.shape}")
    return float(det.w_c @ feature)


def _split(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def regression_targets(proposal, gt) -> np.ndarray:
    """Deltas (t_x, t_y, t_w, t_h) taking ``proposal`` onto ``gt``.

    Works on single boxes or on arrays of shape (..., 4).
    """
    pcx, pcy, pw, ph = _split(proposal)
    gcx, gcy, gw, gh = _split(gt)
    return np.stack([(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)], axis=-1)


def apply_deltas(box, deltas):
    """Inverse of :func:`regression_targets`.

    A :class:`Box` input gives a :class:`Box` back; arrays give arrays.
    """
    pcx, pcy, pw, ph = _split(box)
    d = np.asarray(deltas, dtype=np.float64)
    cx = pcx + pw * d[..., 0]
    cy = pcy + ph * d[..., 1]
    w = pw * np.exp(d[..., 2])
    h = ph * np.exp(d[..., 3])
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if isinstance(box, Box):
        return Box(*(float(x) for x in out))
    return out


PARAMS_MAGIC = b"QARW"
PARAMS_VERSION = 1
_PARAMS_HEADER = struct.Struct("<4sIIII")


def save_params(params: GeneratorParams, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_PARAMS_HEADER.pack(PARAMS_MAGIC, PARAMS_VERSION, params.dim, params.d_feat, params.hidden_dim))
        for arr in params.arrays().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str | Path) -> GeneratorParams:
    data = Path(path).read_bytes()
    if len(data) < _PARAMS_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, dim, d_feat, hidden = _PARAMS_HEADER.unpack_from(data)
    if magic != PARAMS_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    shapes = [(d_feat, dim), (hidden, dim), (hidden,), (4, d_feat, hidden), (4, d_feat)]
    offset = _PARAMS_HEADER.size
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape))
        if offset + 4 * n > len(data):
            raise FormatError(f"{path}: truncated payload at byte {offset}")
        arrays.append(np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(np.float64).reshape(shape))
        offset += 4 * n
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return GeneratorParams(*arrays)
