"""Image ingestion, manifests, stratified splitting and feature caches."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from fnmatch import fnmatch
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InsufficientData, InvalidInput, IoError

log = logging.getLogger(__name__)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
IMAGE_SUFFIXES = {".png": "PNG", ".jpg": "JPEG", ".jpeg": "JPEG"}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class RasterImage:
    pixels: np.ndarray  # (H, W, C) uint8, C in {1, 3}
    path: str = ""
    fmt: str = "PNG"

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def load_image(path) -> RasterImage:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            fmt = im.format or IMAGE_SUFFIXES.get(path.suffix.lower(), "PNG")
            if im.mode == "L":
                arr = np.asarray(im, dtype=np.uint8)[..., None]
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise IoError(f"cannot decode {path}: {exc}") from exc
    return RasterImage(pixels=arr, path=str(path), fmt=fmt)


def save_image(pixels, path) -> None:
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    try:
        Image.fromarray(arr).save(path, format="PNG")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def to_gray(img) -> np.ndarray:
    """Luma-weighted grayscale as float64 in [0, 255]; 1-channel input passes through."""
    x = img.pixels if isinstance(img, RasterImage) else np.asarray(img)
    if x.ndim == 2:
        return x.astype(np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        return x[..., 0].astype(np.float64)
    if x.ndim == 3 and x.shape[2] == 3:
        return x.astype(np.float64) @ np.array(GRAY_WEIGHTS)
    raise InvalidInput(f"cannot convert image of shape {x.shape} to grayscale")


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- manifests ----------------------------------------------------------------


@dataclass
class Entry:
    path: str
    label: int
    digest: str
    split: str | None = None


@dataclass
class DatasetManifest:
    entries: list[Entry]
    class_names: list[str]
    ratios: list[float] | None = None
    rng_seed: int | None = None
    root: str = "."

    def to_json(self) -> str:
        payload = {
            "class_names": self.class_names,
            "ratios": self.ratios,
            "rng_seed": self.rng_seed,
            "entries": [asdict(e) for e in self.entries],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_text(self.to_json())
            tmp.replace(path)
        except OSError as exc:
            raise IoError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise IoError(f"cannot read manifest {path}: {exc}") from exc
        return cls(
            entries=[Entry(**e) for e in data["entries"]],
            class_names=list(data["class_names"]),
            ratios=data.get("ratios"),
            rng_seed=data.get("rng_seed"),
            root=str(path.parent),
        )

    def select(self, split: str | None = None) -> list[Entry]:
        return [e for e in self.entries if split is None or e.split == split]

    def labels(self, split: str | None = None) -> np.ndarray:
        return np.array([e.label for e in self.select(split)], dtype=np.int64)

    def load_pixels(self, split: str | None = None) -> list[np.ndarray]:
        return [load_image(Path(self.root) / e.path).pixels for e in self.select(split)]


@dataclass
class IngestReport:
    accepted: int = 0
    skipped: list[str] = field(default_factory=list)


def _label_for(rel: str, rules) -> str | None:
    if rules is None:
        parts = Path(rel).parts
        return parts[0] if len(parts) > 1 else "unlabeled"
    if callable(rules):
        return rules(rel)
    for pattern, name in rules.items():
        if fnmatch(rel, pattern):
            return name
    return None


def ingest(directory, label_rules=None) -> tuple[DatasetManifest, IngestReport]:
    """Enumerate decodable images below ``directory`` in lexicographic order.

    By default the first subdirectory names the class. ``label_rules`` may be
    a ``{glob: class_name}`` mapping or a callable on the relative path; files
    no rule matches are ignored. Undecodable files are skipped and listed in
    the report.
    """
    root = Path(directory)
    if not root.is_dir():
        raise InsufficientData(f"{root} is not a directory")
    candidates = sorted(
        (p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES),
        key=lambda p: p.relative_to(root).as_posix(),
    )
    report = IngestReport()
    found: list[tuple[str, str, str]] = []
    for p in candidates:
        rel = p.relative_to(root).as_posix()
        name = _label_for(rel, label_rules)
        if name is None:
            continue
        try:
            load_image(p)
        except IoError:
            log.warning("skipping undecodable file %s", rel)
            report.skipped.append(rel)
            continue
        found.append((rel, name, file_digest(p)))
    if not found:
        raise InsufficientData(f"no decodable images found in {root}")
    class_names = sorted({name for _, name, _ in found})
    index = {name: i for i, name in enumerate(class_names)}
    entries = [Entry(path=rel, label=index[name], digest=d) for rel, name, d in found]
    report.accepted = len(entries)
    return DatasetManifest(entries=entries, class_names=class_names, root=str(root)), report


def split_counts(n: int, ratios) -> list[int]:
    """Largest-remainder allocation of ``n`` items; ties go to the later split."""
    raw = [n * r for r in ratios]
    counts = [int(np.floor(x + 1e-9)) for x in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(ratios)), key=lambda i: (-(raw[i] - counts[i]), -i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def _check_ratios(ratios) -> list[float]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise InvalidInput(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    return ratios


def _by_class(entries):
    groups: dict[int, list[Entry]] = {}
    for e in sorted(entries, key=lambda e: e.path):
        groups.setdefault(e.label, []).append(e)
    return groups


def split(manifest: DatasetManifest, ratios=(0.625, 0.0625, 0.3125), seed: int = 0) -> DatasetManifest:
    """Per-class stratified, seeded assignment to train/val/test."""
    ratios = _check_ratios(ratios)
    assigned: dict[str, str] = {}
    for label, group in sorted(_by_class(manifest.entries).items()):
        counts = split_counts(len(group), ratios)
        if any(c == 0 and r > 0 for c, r in zip(counts, ratios)):
            raise InsufficientData(
                f"class {manifest.class_names[label]!r} has {len(group)} samples, too few for ratios {ratios}"
            )
        order = np.random.default_rng([seed, label]).permutation(len(group))
        start = 0
        for name, c in zip(SPLITS, counts):
            for j in order[start : start + c]:
                assigned[group[j].path] = name
            start += c
    entries = [replace(e, split=assigned[e.path]) for e in manifest.entries]
    return replace(manifest, entries=entries, ratios=ratios, rng_seed=seed)


def split_indices(labels, ratios=(0.625, 0.0625, 0.3125), seed: int = 0) -> dict[str, np.ndarray]:
    """Array analog of :func:`split`: stratified index sets for train/val/test.

    Samples are ranked per class by position, so the same labels, ratios and
    seed always give the same partition.
    """
    ratios = _check_ratios(ratios)
    labels = np.asarray(labels)
    parts: dict[str, list] = {name: [] for name in SPLITS}
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        counts = split_counts(len(idx), ratios)
        if any(c == 0 and r > 0 for c, r in zip(counts, ratios)):
            raise InsufficientData(f"class {label} has {len(idx)} samples, too few for ratios {ratios}")
        order = idx[np.random.default_rng([seed, int(label)]).permutation(len(idx))]
        start = 0
        for name, c in zip(SPLITS, counts):
            parts[name].append(order[start : start + c])
            start += c
    return {name: np.sort(np.concatenate(p)) for name, p in parts.items()}


def subsample(manifest: DatasetManifest, fraction: float, seed: int = 0, splits=None) -> DatasetManifest:
    """Keep ``fraction`` of each class (and of each split when split), nested across fractions.

    Entries in splits not listed in ``splits`` are kept unchanged. Smaller
    fractions select prefixes of the same seeded permutation, so
    ``subsample(m, 0.2)`` is contained in ``subsample(m, 0.4)``.
    """
    if not 0 < fraction <= 1:
        raise InvalidInput(f"fraction must be in (0, 1], got {fraction}")
    keep: set[str] = set()
    groups: dict[tuple, list[Entry]] = {}
    for e in sorted(manifest.entries, key=lambda e: e.path):
        if splits is not None and e.split not in splits:
            keep.add(e.path)
            continue
        groups.setdefault((e.label, SPLITS.index(e.split) if e.split else -1), []).append(e)
    for (label, split_idx), group in sorted(groups.items()):
        order = np.random.default_rng([seed, label, split_idx + 1]).permutation(len(group))
        n = max(1, int(round(fraction * len(group))))
        keep.update(group[j].path for j in order[:n])
    return replace(manifest, entries=[e for e in manifest.entries if e.path in keep])


def subsample_indices(labels, fraction: float, seed: int = 0) -> np.ndarray:
    """Array analog of :func:`subsample`: sorted indices of a nested per-class subset."""
    labels = np.asarray(labels)
    if not 0 < fraction <= 1:
        raise InvalidInput(f"fraction must be in (0, 1], got {fraction}")
    chosen = []
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        order = np.random.default_rng([seed, int(label)]).permutation(len(idx))
        chosen.append(idx[order[: max(1, int(round(fraction * len(idx))))]])
    return np.sort(np.concatenate(chosen))


# -- feature caches -----------------------------------------------------------


def extract_features(images, feature_kind: str, stats=None) -> np.ndarray:
    """Grayscale feature rows for a list of images: ``pixel`` or standardized log-DCT ``dct``."""
    from .transform import log_dct, pixel_features, standardize

    grays = np.stack([to_gray(img) for img in images]) if len(images) else np.zeros((0, 0, 0))
    if feature_kind == "pixel":
        return pixel_features(grays).reshape(len(images), -1)
    if feature_kind == "dct":
        if stats is None:
            raise InvalidInput("dct features need fitted FeatureStats")
        return standardize(log_dct(grays), stats).reshape(len(images), -1)
    raise InvalidInput(f"unknown feature kind {feature_kind!r}")


def build_feature_cache(manifest: DatasetManifest, path, feature_kind: str, stats=None, split_name=None,
                        shape: tuple[int, int] | None = None) -> Path:
    """Write the features of one split to a cache file, skipping the write
    when a cache built from the same inputs already exists."""
    from .transform import write_feature_cache

    entries = manifest.select(split_name)
    h = hashlib.sha256()
    h.update(feature_kind.encode())
    h.update((stats.digest() if stats is not None else "-").encode())
    for e in entries:
        h.update(f"{e.path}\0{e.digest}\0{e.label}\n".encode())
    key = h.hexdigest()
    path = Path(path)
    key_path = path.with_name(path.name + ".key")
    if path.exists() and key_path.exists() and key_path.read_text().strip() == key:
        return path
    images = [load_image(Path(manifest.root) / e.path) for e in entries]
    if images:
        shape = to_gray(images[0]).shape
    elif shape is None:
        shape = stats.shape if stats is not None else (0, 0)
    feats = extract_features(images, feature_kind, stats)
    write_feature_cache(path, feats, [e.label for e in entries], feature_kind, shape)
    try:
        key_path.write_text(key + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {key_path}: {exc}") from exc
    return path


# -- desk-scale photo corpus -------------------------------------------------

PHOTO_SOURCES = (
    "astronaut", "coffee", "chelsea", "camera", "rocket", "hubble_deep_field", "retina",
    "grass", "gravel", "brick", "moon", "coins", "immunohistochemistry", "cell",
)


def _source_photos() -> list[np.ndarray]:
    from skimage import data

    photos = [getattr(data, name)() for name in PHOTO_SOURCES]
    photos.append(data.stereo_motorcycle()[0])
    return [p if p.ndim == 3 else np.repeat(p[..., None], 3, axis=2) for p in photos]


def photo_corpus(n: int, size: int = 128, seed: int = 0, color: bool = False) -> np.ndarray:
    """Random rescaled crops of the photographs bundled with scikit-image.

    Each crop draws a source photo, a square window spanning ``u ~ U(0.3, 1)``
    of its short side (but at least ``size`` pixels) at a uniform offset,
    a Lanczos downscale of that window to ``size`` and a horizontal flip
    coin. Returns ``(n, size, size)`` uint8 grayscale or
    ``(n, size, size, 3)`` with ``color=True``.
    """
    rng = np.random.default_rng(seed)
    sources = [Image.fromarray(p) for p in _source_photos()]
    out = np.empty((n, size, size, 3) if color else (n, size, size), dtype=np.uint8)
    for i in range(n):
        src = sources[rng.integers(len(sources))]
        w, h = src.size
        # square source window covering u of the short side, never smaller than the output
        side = min(max(rng.uniform(0.3, 1.0) * min(w, h), size), w, h)
        left = rng.uniform(0, w - side)
        top = rng.uniform(0, h - side)
        crop = np.asarray(src.resize((size, size), Image.LANCZOS, box=(left, top, left + side, top + side)))
        if rng.random() < 0.5:
            crop = crop[:, ::-1]
        out[i] = crop if color else np.clip(np.rint(to_gray(crop)), 0, 255).astype(np.uint8)
    return out
