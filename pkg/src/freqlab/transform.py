"""Orthonormal type-II 2D DCT and the log-scale / standardize feature pipeline.

All arithmetic is float64. Functions accept a single ``(N1, N2)`` matrix or a
stack ``(..., N1, N2)``; the transform always acts on the last two axes.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InsufficientData, InvalidInput, IoError, OracleSizeExceeded, ShapeError

LOG_EPS = 1e-12
STD_FLOOR = 1e-8
NAIVE_MAX_ELEMENTS = 64 * 64

CACHE_MAGIC = b"FQL1"
FEATURE_KINDS = {"pixel": 0, "dct": 1}


@functools.lru_cache(maxsize=32)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` with ``C[k, x] = w(k) cos(pi (x + 1/2) k / n)``.

    ``w(0) = sqrt(1/n)`` and ``w(k) = sqrt(2/n)`` otherwise, which makes ``C``
    orthogonal so the inverse is ``C.T``.
    """
    if n < 1:
        raise InvalidInput(f"DCT size must be positive, got {n}")
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.cos(np.pi / n * (x + 0.5) * k)
    mat *= np.sqrt(2.0 / n)
    mat[0] = np.sqrt(1.0 / n)
    mat.setflags(write=False)
    return mat


def _as_finite_matrix(a, name: str = "input") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] < 1 or arr.shape[-2] < 1:
        raise InvalidInput(f"{name} must have at least two non-empty axes, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite values")
    return arr


def dct2(img) -> np.ndarray:
    """Separable 2D DCT-II: a 1D transform down the columns, then along the rows."""
    x = _as_finite_matrix(img)
    c1 = dct_matrix(x.shape[-2])
    c2 = dct_matrix(x.shape[-1])
    return c1 @ x @ c2.T


def idct2(spec) -> np.ndarray:
    d = _as_finite_matrix(spec, "spectrum")
    c1 = dct_matrix(d.shape[-2])
    c2 = dct_matrix(d.shape[-1])
    return c1.T @ d @ c2


def dct2_naive(img) -> np.ndarray:
    """Direct evaluation of the double cosine sum, one coefficient at a time.

    This is the O(N^4) reference the fast path is tested against; it shares no
    code with :func:`dct_matrix`.
    """
    x = np.asarray(img, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"dct2_naive expects a single matrix, got shape {x.shape}")
    n1, n2 = x.shape
    if n1 * n2 > NAIVE_MAX_ELEMENTS:
        raise OracleSizeExceeded(f"{n1}x{n2} exceeds the oracle limit of {NAIVE_MAX_ELEMENTS} elements")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("input contains non-finite values")

    def weight(k, n):
        return np.sqrt(1.0 / n) if k == 0 else np.sqrt(2.0 / n)

    px = np.arange(n1)[:, None] + 0.5
    py = np.arange(n2)[None, :] + 0.5
    out = np.zeros((n1, n2))
    for kx in range(n1):
        for ky in range(n2):
            basis = np.cos(np.pi / n1 * px * kx) * np.cos(np.pi / n2 * py * ky)
            out[kx, ky] = weight(kx, n1) * weight(ky, n2) * np.sum(x * basis)
    return out


def log_scale(spec, eps: float = LOG_EPS) -> np.ndarray:
    """``log(|c| + eps)`` elementwise; the sign of each coefficient is discarded."""
    if not eps > 0:
        raise InvalidInput(f"eps must be positive, got {eps}")
    return np.log(np.abs(np.asarray(spec, dtype=np.float64)) + eps)


def log_dct(img, eps: float = LOG_EPS) -> np.ndarray:
    return log_scale(dct2(img), eps)


@dataclass(frozen=True)
class FeatureStats:
    """Per-coefficient mean and (floored) population std of a training split."""

    mean: np.ndarray
    std: np.ndarray
    epsilon_std: float = STD_FLOOR

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean.shape

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.mean, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.std, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def save_feature_stats(stats: FeatureStats, path, metadata: dict | None = None) -> None:
    from . import modelfile

    modelfile.save(path, "stats", [stats.mean, stats.std], {"epsilon_std": stats.epsilon_std, **(metadata or {})})


def load_feature_stats(path) -> FeatureStats:
    from . import modelfile

    kind, arrays, meta = modelfile.load(path)
    if kind != "stats":
        raise InvalidInput(f"{path} holds a {kind} model, not feature statistics")
    return FeatureStats(arrays[0], arrays[1], meta["epsilon_std"])


def fit_feature_stats(train_specs, epsilon_std: float = STD_FLOOR) -> FeatureStats:
    try:
        specs = np.asarray(train_specs, dtype=np.float64)
    except ValueError as exc:
        raise ShapeError("training spectra have mismatched shapes") from exc
    if specs.ndim != 3:
        raise ShapeError(f"expected a stack of matrices, got shape {specs.shape}")
    if specs.shape[0] < 2:
        raise InsufficientData("need at least 2 training spectra to fit feature statistics")
    mean = specs.mean(axis=0)
    std = np.maximum(specs.std(axis=0), epsilon_std)
    return FeatureStats(mean=mean, std=std, epsilon_std=epsilon_std)


def standardize(spec, stats: FeatureStats) -> np.ndarray:
    """Standardize and flatten row-major: ``(N1, N2) -> (N1*N2,)``, ``(B, N1, N2) -> (B, N1*N2)``."""
    s = np.asarray(spec, dtype=np.float64)
    if s.shape[-2:] != stats.mean.shape:
        raise ShapeError(f"spectrum shape {s.shape[-2:]} does not match stats shape {stats.mean.shape}")
    z = (s - stats.mean) / stats.std
    return z.reshape(*s.shape[:-2], -1)


def destandardize(features, stats: FeatureStats) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    n1, n2 = stats.mean.shape
    if f.shape[-1] != n1 * n2:
        raise ShapeError(f"feature length {f.shape[-1]} does not match stats size {n1 * n2}")
    return f.reshape(*f.shape[:-1], n1, n2) * stats.std + stats.mean


def pixel_features(img) -> np.ndarray:
    """Affine map of 8-bit intensities ``[0, 255] -> [-1, 1]``, flattened row-major.

    A stack ``(B, H, W)`` or ``(B, H, W, C)`` is flattened per sample.
    """
    x = np.asarray(img, dtype=np.float64) / 127.5 - 1.0
    if x.ndim <= 2:
        return x.reshape(-1)
    return x.reshape(x.shape[0], -1)


# -- feature cache ----------------------------------------------------------

_HEADER = struct.Struct("<4sIIIB")


def write_feature_cache(path, features, labels, kind: str, shape: tuple[int, int]) -> None:
    """Write features to the ``FQL1`` little-endian cache format atomically."""
    if kind not in FEATURE_KINDS:
        raise InvalidInput(f"unknown feature kind {kind!r}")
    n1, n2 = shape
    feats = np.asarray(features, dtype="<f8").reshape(-1, n1 * n2)
    labs = np.asarray(labels, dtype=np.uint8).reshape(-1)
    if feats.shape[0] != labs.shape[0]:
        raise ShapeError(f"{feats.shape[0]} feature rows but {labs.shape[0]} labels")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(CACHE_MAGIC, feats.shape[0], n1, n2, FEATURE_KINDS[kind]))
            fh.write(np.ascontiguousarray(feats).tobytes())
            fh.write(labs.tobytes())
        tmp.replace(path)
    except OSError as exc:
        raise IoError(f"cannot write feature cache {path}: {exc}") from exc


def read_feature_cache(path):
    """Return ``(features (count, N1*N2), labels (count,), kind, (N1, N2))``."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read feature cache {path}: {exc}") from exc
    if len(data) < _HEADER.size:
        raise IoError(f"{path} is too short to be a feature cache")
    magic, count, n1, n2, tag = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC:
        raise IoError(f"{path} has bad magic {magic!r}")
    kinds = {v: k for k, v in FEATURE_KINDS.items()}
    if tag not in kinds:
        raise IoError(f"{path} has unknown feature kind tag {tag}")
    nvals = count * n1 * n2
    expected = _HEADER.size + 8 * nvals + count
    if len(data) != expected:
        raise IoError(f"{path} has {len(data)} bytes, expected {expected}")
    feats = np.frombuffer(data, dtype="<f8", count=nvals, offset=_HEADER.size).reshape(count, n1 * n2)
    labels = np.frombuffer(data, dtype=np.uint8, count=count, offset=_HEADER.size + 8 * nvals)
    return feats.astype(np.float64), labels.copy(), kinds[tag], (n1, n2)
