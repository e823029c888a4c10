"""Random image perturbations for robustness experiments.

Every perturbation is split into drawing its severity (:func:`sample_params`)
and applying it deterministically (:func:`apply`), so a run can be replayed
from its manifest. 8-bit input yields 8-bit output; float input stays float
(clamped to [0, 255] where the operation demands it).
"""

from __future__ import annotations

import enum
import hashlib
import io
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import InvalidInput, IoError

BLUR_SIZES = (3, 5, 7, 9)
CROP_PERCENT = (5.0, 20.0)
JPEG_QUALITY = (10, 75)
NOISE_VARIANCE = (5.0, 20.0)
MIN_CROP_SIDE = 32


class Perturbation(enum.Enum):
    BLUR = "blur"
    CROP = "crop"
    COMPRESS = "jpeg"
    NOISE = "noise"
    COMBINED = "combined"

    @classmethod
    def parse(cls, value) -> "Perturbation":
        if isinstance(value, cls):
            return value
        aliases = {"compress": "jpeg", "compression": "jpeg", "cropped": "crop"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise InvalidInput(f"unknown perturbation {value!r}") from None


# cycle order of the combined mode
CYCLE = (Perturbation.BLUR, Perturbation.CROP, Perturbation.COMPRESS, Perturbation.NOISE)


@dataclass(frozen=True)
class PerturbConfig:
    kind: Perturbation = Perturbation.COMBINED
    apply_prob: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Perturbation.parse(self.kind))
        if not 0.0 <= self.apply_prob <= 1.0:
            raise InvalidInput(f"apply_prob must be in [0, 1], got {self.apply_prob}")


def _restore(out: np.ndarray, like: np.ndarray) -> np.ndarray:
    if like.dtype == np.uint8:
        return np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return out


def gaussian_sigma(kernel_size: int) -> float:
    """Conventional sigma for a Gaussian kernel of the given odd size."""
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


def gaussian_kernel(kernel_size: int) -> np.ndarray:
    sigma = gaussian_sigma(kernel_size)
    r = np.arange(kernel_size) - (kernel_size - 1) / 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def apply_blur(img, kernel_size: int) -> np.ndarray:
    x = np.asarray(img)
    k = gaussian_kernel(kernel_size)
    out = x.astype(np.float64)
    for axis in (0, 1):
        out = ndimage.correlate1d(out, k, axis=axis, mode="reflect")
    return _restore(out, x)


def _resize_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize to ``(width, height)`` channel by channel in float32 precision."""

    def one(ch):
        return np.asarray(Image.fromarray(ch.astype(np.float32)).resize(size, Image.BILINEAR),
                          dtype=np.float64)

    if x.ndim == 2:
        return one(x)
    return np.stack([one(x[..., c]) for c in range(x.shape[2])], axis=-1)


def apply_crop(img, crop_rows: int, crop_cols: int, top: int, left: int) -> np.ndarray:
    x = np.asarray(img)
    h, w = x.shape[:2]
    if crop_rows == 0 and crop_cols == 0:
        return x.copy()
    window = x[top : top + h - crop_rows, left : left + w - crop_cols].astype(np.float64)
    return _restore(_resize_bilinear(window, (w, h)), x)


def apply_jpeg(img, quality: int) -> np.ndarray:
    x = np.asarray(img)
    pixels = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    squeeze = pixels.ndim == 3 and pixels.shape[2] == 1
    buf = io.BytesIO()
    try:
        Image.fromarray(pixels[..., 0] if squeeze else pixels).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with Image.open(buf) as im:
            out = np.asarray(im, dtype=np.uint8)
    except OSError as exc:
        raise IoError(f"JPEG round trip failed: {exc}") from exc
    if squeeze:
        out = out[..., None]
    return out if x.dtype == np.uint8 else out.astype(np.float64)


def apply_noise(img, variance: float, noise_seed: int) -> np.ndarray:
    x = np.asarray(img)
    if variance == 0:
        return x.copy()
    noise = np.random.default_rng(noise_seed).normal(0.0, np.sqrt(variance), size=x.shape)
    out = np.clip(np.rint(x.astype(np.float64) + noise), 0, 255)
    return out.astype(np.uint8) if x.dtype == np.uint8 else out


def sample_params(kind, rng: np.random.Generator, shape: tuple[int, ...]) -> dict:
    """Draw the random severity of one perturbation for an image of ``shape``."""
    kind = Perturbation.parse(kind)
    if kind is Perturbation.BLUR:
        return {"kernel_size": int(rng.choice(BLUR_SIZES))}
    if kind is Perturbation.CROP:
        h, w = shape[:2]
        if min(h, w) < MIN_CROP_SIDE:
            raise InvalidInput(f"crop needs at least {MIN_CROP_SIDE} px per side, got {h}x{w}")
        pr, pc = rng.uniform(*CROP_PERCENT, size=2)
        cr, cc = int(round(h * pr / 100)), int(round(w * pc / 100))
        return {
            "percent_rows": float(pr), "percent_cols": float(pc),
            "crop_rows": cr, "crop_cols": cc,
            "top": int(rng.integers(cr + 1)), "left": int(rng.integers(cc + 1)),
        }
    if kind is Perturbation.COMPRESS:
        return {"quality": int(rng.integers(JPEG_QUALITY[0], JPEG_QUALITY[1] + 1))}
    if kind is Perturbation.NOISE:
        return {"variance": float(rng.uniform(*NOISE_VARIANCE)), "noise_seed": int(rng.integers(2**63))}
    raise InvalidInput("combined mode has no single parameter set; pick a concrete kind")


def apply(kind, img, params: dict) -> np.ndarray:
    kind = Perturbation.parse(kind)
    if kind is Perturbation.BLUR:
        return apply_blur(img, params["kernel_size"])
    if kind is Perturbation.CROP:
        return apply_crop(img, params["crop_rows"], params["crop_cols"], params["top"], params["left"])
    if kind is Perturbation.COMPRESS:
        return apply_jpeg(img, params["quality"])
    if kind is Perturbation.NOISE:
        return apply_noise(img, params["variance"], params["noise_seed"])
    raise InvalidInput("combined mode has no single parameter set; pick a concrete kind")


def _check_min_side(img) -> None:
    h, w = np.asarray(img).shape[:2]
    if min(h, w) < MIN_CROP_SIDE:
        raise InvalidInput(f"crop needs at least {MIN_CROP_SIDE} px per side, got {h}x{w}")


def blur(img, rng: np.random.Generator) -> np.ndarray:
    return apply(Perturbation.BLUR, img, sample_params(Perturbation.BLUR, rng, np.shape(img)))


def crop_resize(img, rng: np.random.Generator) -> np.ndarray:
    _check_min_side(img)
    return apply(Perturbation.CROP, img, sample_params(Perturbation.CROP, rng, np.shape(img)))


def jpeg_compress(img, rng: np.random.Generator) -> np.ndarray:
    return apply(Perturbation.COMPRESS, img, sample_params(Perturbation.COMPRESS, rng, np.shape(img)))


def add_noise(img, rng: np.random.Generator) -> np.ndarray:
    return apply(Perturbation.NOISE, img, sample_params(Perturbation.NOISE, rng, np.shape(img)))


def stable_hash(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


def image_rng(seed: int, name: str) -> np.random.Generator:
    """Per-image stream keyed by the run seed and the file name, independent of processing order."""
    return np.random.default_rng([seed & (2**64 - 1), stable_hash(name)])


def perturb_one(img, name: str, index: int, config: PerturbConfig):
    """Perturb the ``index``-th image of a corpus; returns ``(image, record)``."""
    rng = image_rng(config.rng_seed, name)
    kind = CYCLE[index % len(CYCLE)] if config.kind is Perturbation.COMBINED else config.kind
    record = {"file": name, "applied": [], "params": {}}
    if rng.random() < config.apply_prob:
        params = sample_params(kind, rng, np.shape(img))
        record["applied"].append(kind.value)
        record["params"][kind.value] = params
        return apply(kind, img, params), record
    return np.array(img, copy=True), record


def perturb_dataset(images, names, config: PerturbConfig, threads: int = 1):
    """Perturb a corpus; returns ``(images, manifest_records)`` in input order.

    In combined mode the kind pointer advances with every image, whether or
    not that image's coin flip applied a perturbation.
    """
    names = list(names)
    if len(names) != len(images):
        raise InvalidInput(f"{len(images)} images but {len(names)} names")
    jobs = list(enumerate(zip(images, names)))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda j: perturb_one(j[1][0], j[1][1], j[0], config), jobs))
    else:
        results = [perturb_one(img, name, i, config) for i, (img, name) in jobs]
    return [r[0] for r in results], [r[1] for r in results]
