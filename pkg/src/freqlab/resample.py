"""Fixed-kernel upsampling, box downsampling and synthetic "fake" generation.

Upsampling replicates each pixel ``factor`` times per axis and, for the
smoothed variants, convolves the result with a unit-sum separable kernel
(the outer product of a 1D binomial filter with itself). Borders use
half-sample symmetric reflection (``d c b a | a b c d``), under which the
symmetric kernels act diagonally on the DCT-II basis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidInput


class Upsampler(enum.Enum):
    NEAREST = "nn"
    BILINEAR = "bilinear"
    BINOMIAL = "binomial"

    @classmethod
    def parse(cls, value) -> "Upsampler":
        if isinstance(value, cls):
            return value
        aliases = {"nearest": "nn", "nearestneighbor": "nn", "binomial5": "binomial"}
        key = str(value).lower().replace("-", "").replace("_", "")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidInput(f"unknown upsampling kind {value!r}") from None


_TAPS = {
    Upsampler.NEAREST: None,
    Upsampler.BILINEAR: np.array([1.0, 2.0, 1.0]),
    Upsampler.BINOMIAL: np.array([1.0, 4.0, 6.0, 4.0, 1.0]),
}


@dataclass(frozen=True)
class UpsampleKind:
    tag: Upsampler = Upsampler.NEAREST
    factor: int = 2

    def __post_init__(self):
        object.__setattr__(self, "tag", Upsampler.parse(self.tag))


def kernel(tag) -> np.ndarray | None:
    """2D smoothing kernel ``m m^T / sum`` for ``tag``, or ``None`` for nearest neighbour."""
    taps = _TAPS[Upsampler.parse(tag)]
    if taps is None:
        return None
    k2 = np.outer(taps, taps)
    return k2 / k2.sum()


def _per_channel(img: np.ndarray, fn) -> np.ndarray:
    if img.ndim == 2:
        return fn(img)
    return np.stack([fn(img[..., c]) for c in range(img.shape[-1])], axis=-1)


def upsample(img, kind: UpsampleKind | str = UpsampleKind()) -> np.ndarray:
    if isinstance(kind, (str, Upsampler)):
        kind = UpsampleKind(kind)
    if kind.factor < 2:
        raise InvalidInput(f"upsampling factor must be >= 2, got {kind.factor}")
    x = np.asarray(img, dtype=np.float64)
    if x.ndim not in (2, 3):
        raise InvalidInput(f"expected (H, W) or (H, W, C) image, got shape {x.shape}")
    up = np.repeat(np.repeat(x, kind.factor, axis=0), kind.factor, axis=1)
    k = kernel(kind.tag)
    if k is None:
        return up
    return _per_channel(up, lambda ch: ndimage.convolve(ch, k, mode="reflect"))


def downsample(img, factor: int) -> np.ndarray:
    """Box average over non-overlapping ``factor x factor`` blocks.

    Trailing rows/columns that do not fill a whole block are dropped.
    """
    if factor < 1:
        raise InvalidInput(f"downsampling factor must be >= 1, got {factor}")
    x = np.asarray(img, dtype=np.float64)
    if factor == 1:
        return x.copy()
    h, w = (x.shape[0] // factor) * factor, (x.shape[1] // factor) * factor
    if h == 0 or w == 0:
        raise InvalidInput(f"image {x.shape[:2]} is smaller than the factor {factor}")
    x = x[:h, :w]
    blocks = x.reshape(h // factor, factor, w // factor, factor, *x.shape[2:])
    return blocks.mean(axis=(1, 3))


def synth_fake(img, kind: UpsampleKind | str = UpsampleKind(), rounds: int = 2) -> np.ndarray:
    """Emulate a generator's upsampling stack at the input resolution.

    The image is box-downsampled once by ``2**rounds`` and then upsampled
    ``rounds`` times by a factor of 2. 8-bit input is rounded back to 8 bits,
    like a generator's output written to disk; other input stays float64.
    """
    if isinstance(kind, (str, Upsampler)):
        kind = UpsampleKind(kind)
    if rounds < 0:
        raise InvalidInput(f"rounds must be non-negative, got {rounds}")
    src = np.asarray(img)
    if rounds == 0:
        return src.copy()
    scale = 2**rounds
    h, w = src.shape[:2]
    if h < scale or w < scale:
        raise InvalidInput(f"image {h}x{w} is too small for {rounds} rounds of 2x upsampling")
    x = downsample(src, scale)
    step = UpsampleKind(kind.tag, 2)
    for _ in range(rounds):
        x = upsample(x, step)
    if x.shape[:2] != (h, w):
        pad = [(0, h - x.shape[0]), (0, w - x.shape[1])] + [(0, 0)] * (x.ndim - 2)
        x = np.pad(x, pad, mode="symmetric")
    if src.dtype == np.uint8:
        return np.clip(np.rint(x), 0, 255).astype(np.uint8)
    return x


# -- constructed artifact metrics ---------------------------------------------


def grid_frequencies(n: int, rounds: int) -> np.ndarray:
    """Nonzero multiples of ``n / 2**rounds``: the DCT indices on which
    replication upsampling by ``2**rounds`` leaves exact zeros."""
    step = n // 2**rounds
    if step < 1:
        raise InvalidInput(f"size {n} too small for {rounds} rounds")
    return np.arange(step, n, step)


def grid_mask(shape: tuple[int, int], rounds: int) -> np.ndarray:
    """Boolean mask of grid lines: cells whose row or column index is a grid frequency."""
    n1, n2 = shape
    mask = np.zeros(shape, dtype=bool)
    mask[grid_frequencies(n1, rounds), :] = True
    mask[:, grid_frequencies(n2, rounds)] = True
    return mask


def base_band_mask(shape: tuple[int, int], rounds: int) -> np.ndarray:
    """Cells representable at the low resolution ``N / 2**rounds`` (top-left block)."""
    n1, n2 = shape
    mask = np.zeros(shape, dtype=bool)
    mask[: n1 // 2**rounds, : n2 // 2**rounds] = True
    return mask


def replica_energy_ratio(mean_abs_spectrum, rounds: int) -> float:
    """Mean |DCT| outside the low-resolution base band divided by the mean inside it.

    For upsampled images everything outside the base band is a spectral
    replica of the base band, attenuated by the interpolation kernel; larger
    kernels give smaller ratios.
    """
    s = np.asarray(mean_abs_spectrum, dtype=np.float64)
    base = base_band_mask(s.shape, rounds)
    base[0, 0] = False  # the DC term dwarfs everything else
    return float(s[~base_band_mask(s.shape, rounds)].mean() / s[base].mean())
