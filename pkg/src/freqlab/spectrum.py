"""Corpus mean spectra, difference spectra and heatmap rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from .dataset import to_gray
from .errors import InsufficientData, InvalidInput, IoError, ShapeError
from .transform import LOG_EPS, dct2

LOG_AFTER_MEAN = "log-after-mean"
MEAN_AFTER_LOG = "mean-after-log"
ORDERS = (LOG_AFTER_MEAN, MEAN_AFTER_LOG)


@dataclass(frozen=True)
class MeanSpectrum:
    values: np.ndarray
    sample_count: int
    order: str = LOG_AFTER_MEAN

    @property
    def shape(self):
        return self.values.shape


class SpectrumAccumulator:
    """Streaming sum of per-image |DCT| (or log|DCT|) planes.

    Partial accumulators from parallel workers combine with :meth:`merge`;
    merge them in a fixed order to keep results reproducible.
    """

    def __init__(self, order: str = LOG_AFTER_MEAN, channel: int | None = None, eps: float = LOG_EPS):
        if order not in ORDERS:
            raise InvalidInput(f"order must be one of {ORDERS}, got {order!r}")
        self.order = order
        self.channel = channel
        self.eps = eps
        self.total: np.ndarray | None = None
        self.count = 0

    def _plane(self, img) -> np.ndarray:
        x = np.asarray(img)
        if self.channel is not None:
            if x.ndim != 3:
                raise ShapeError("channel mode needs (H, W, C) images")
            return x[..., self.channel].astype(np.float64)
        return to_gray(x)

    def add(self, img) -> None:
        coeffs = np.abs(dct2(self._plane(img)))
        if self.order == MEAN_AFTER_LOG:
            coeffs = np.log(coeffs + self.eps)
        if self.total is None:
            self.total = np.zeros_like(coeffs)
        elif coeffs.shape != self.total.shape:
            raise ShapeError(f"image spectrum {coeffs.shape} does not match corpus shape {self.total.shape}")
        self.total += coeffs
        self.count += 1

    def merge(self, other: "SpectrumAccumulator") -> None:
        if other.order != self.order:
            raise InvalidInput("cannot merge accumulators with different orders")
        if other.total is None:
            return
        if self.total is None:
            self.total = other.total.copy()
        elif other.total.shape != self.total.shape:
            raise ShapeError("partial spectra have different shapes")
        else:
            self.total += other.total
        self.count += other.count

    def result(self) -> MeanSpectrum:
        if self.count == 0:
            raise InsufficientData("cannot average an empty corpus")
        mean = self.total / self.count
        if self.order == LOG_AFTER_MEAN:
            mean = np.log(mean + self.eps)
        return MeanSpectrum(values=mean, sample_count=self.count, order=self.order)


def mean_spectrum(images: Iterable, order: str = LOG_AFTER_MEAN, channel: int | None = None) -> MeanSpectrum:
    """Mean log spectrum of a corpus in one pass.

    ``log-after-mean`` (default) is ``log(mean |DCT|)``; ``mean-after-log`` is
    ``mean(log |DCT|)``. With ``channel`` set, that color channel is
    transformed instead of the grayscale conversion.
    """
    acc = SpectrumAccumulator(order, channel)
    for img in images:
        acc.add(img)
    return acc.result()


def channel_spectra(images, order: str = LOG_AFTER_MEAN, channels: int = 3) -> list[MeanSpectrum]:
    images = list(images)
    return [mean_spectrum(images, order, channel=c) for c in range(channels)]


def _values(x) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, MeanSpectrum) else x, dtype=np.float64)


def abs_diff_spectrum(a, b) -> np.ndarray:
    va, vb = _values(a), _values(b)
    if va.shape != vb.shape:
        raise ShapeError(f"spectra have different shapes {va.shape} and {vb.shape}")
    return np.abs(va - vb)


# -- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class HeatmapSpec:
    clip_max: float | None = None
    colormap: str = "viridis"
    output_size: int | None = None

    def __post_init__(self):
        if self.clip_max is not None and not self.clip_max > 0:
            raise InvalidInput(f"clip_max must be positive, got {self.clip_max}")


def colorize(values, spec: HeatmapSpec = HeatmapSpec()) -> np.ndarray:
    """Map a matrix onto the palette as an ``(H, W, 3)`` uint8 array.

    Row 0 / column 0 (the lowest frequencies) stay at the top left.
    """
    from matplotlib import colormaps

    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"heatmap input must be a matrix, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidInput("heatmap input contains non-finite values")
    if spec.clip_max is not None:
        v = np.minimum(v, spec.clip_max)
    lo, hi = v.min(), v.max()
    unit = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    lut = (colormaps[spec.colormap](np.linspace(0.0, 1.0, 256))[:, :3] * 255).round().astype(np.uint8)
    return lut[np.rint(unit * 255).astype(np.intp)]


def render_heatmap(values, spec: HeatmapSpec, path, metadata: dict | None = None) -> Path:
    """Write a colorized PNG; ``metadata`` entries become PNG text chunks."""
    from PIL.PngImagePlugin import PngInfo

    rgb = colorize(values, spec)
    img = Image.fromarray(rgb)
    if spec.output_size:
        img = img.resize((spec.output_size, spec.output_size), Image.NEAREST)
    info = PngInfo()
    for key, value in sorted((metadata or {}).items()):
        info.add_text(str(key), str(value))
    path = Path(path)
    try:
        img.save(path, format="PNG", pnginfo=info)
    except OSError as exc:
        raise IoError(f"cannot write heatmap {path}: {exc}") from exc
    return path


def write_matrix_csv(values, path) -> None:
    v = np.asarray(values, dtype=np.float64)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in v:
                writer.writerow([repr(float(x)) for x in row])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_matrix_csv(path) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            return np.array([[float(x) for x in row] for row in csv.reader(fh) if row])
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


# -- weight maps ------------------------------------------------------------


def weight_heatmap(model, shape: tuple[int, int] | None = None, class_index: int | None = None) -> np.ndarray:
    """|weights| of a linear model mapped back onto the frequency grid (row-major).

    Multi-class weights are averaged in magnitude over classes unless
    ``class_index`` picks one.
    """
    w = np.asarray(model.weights, dtype=np.float64)
    shape = shape or getattr(model, "feature_shape", None)
    if shape is None:
        raise ShapeError("feature shape unknown; pass shape explicitly")
    if w.ndim == 2:
        w = w[:, class_index] if class_index is not None else np.abs(w).mean(axis=1)
    if w.size != shape[0] * shape[1]:
        raise ShapeError(f"{w.size} weights cannot be mapped onto a {shape[0]}x{shape[1]} grid")
    return np.abs(w).reshape(shape)


def top_mass_share(weight_map, mask, top: int = 100) -> float:
    """Share of the ``top`` largest |weights| mass falling inside ``mask``."""
    w = np.abs(np.asarray(weight_map, dtype=np.float64)).ravel()
    m = np.asarray(mask, dtype=bool).ravel()
    idx = np.argsort(-w, kind="stable")[:top]
    total = w[idx].sum()
    if total == 0:
        return 0.0
    return float(w[idx][m[idx]].sum() / total)
