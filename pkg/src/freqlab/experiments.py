"""Named experiment recipes: detection, upsampling comparison, source
attribution, reduced training data, convergence speed and robustness.

Every recipe takes a grayscale :class:`Corpus`, writes its artifacts into an
output directory and returns a JSON-serializable report. Reports and model
files contain no timestamps, so identical inputs and seed reproduce them
byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, cnn, dataset, linear, perturb, resample, spectrum, transform
from .errors import ConfigError, InvalidInput
from .optim import TrainConfig

log = logging.getLogger(__name__)

RECIPES = ("detect", "upsampling", "attribute", "lowdata", "converge", "robustness")
FEATURE_KINDS = ("pixel", "dct")
DETECT_RATIOS = (0.625, 0.0625, 0.3125)
ATTRIBUTE_RATIOS = (0.7, 0.1, 0.2)
ATTRIBUTE_CLASSES = ("real", "nn", "bilinear", "binomial", "jpeg30")
UPSAMPLING_CLASSES = ("real", "nn", "bilinear", "binomial")
PERTURBATIONS = ("blur", "crop", "jpeg", "noise", "combined")
LASSO_HEATMAP_CLIP = 0.04


# -- corpora ------------------------------------------------------------------


@dataclass
class Corpus:
    images: np.ndarray  # (N, H, W) uint8 grayscale
    labels: np.ndarray
    class_names: list[str]
    names: list[str]

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:3]

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(np.asarray(self.labels, dtype="<i8").tobytes())
        h.update("\n".join(self.class_names + self.names).encode())
        return h.hexdigest()

    def take(self, idx) -> "Corpus":
        idx = np.asarray(idx)
        return Corpus(self.images[idx], self.labels[idx], list(self.class_names), [self.names[i] for i in idx])

    def binary(self, negative: str, positive: str) -> "Corpus":
        """Two-class sub-corpus relabelled 0 (``negative``) / 1 (``positive``)."""
        a, b = self.class_names.index(negative), self.class_names.index(positive)
        idx = np.flatnonzero((self.labels == a) | (self.labels == b))
        sub = self.take(idx)
        sub.labels = (sub.labels == b).astype(np.int64)
        sub.class_names = [negative, positive]
        return sub


def derive_class_images(kind: str, photos: np.ndarray, rounds: int = 2) -> np.ndarray:
    """Turn photo crops into one synthetic source.

    ``real`` returns the crops; ``nn``/``bilinear``/``binomial`` pass them
    through :func:`resample.synth_fake`; ``jpegQ`` JPEG-compresses them at
    quality ``Q``.
    """
    if kind == "real":
        return photos.copy()
    if kind.startswith("jpeg"):
        quality = int(kind[4:] or 30)
        return np.stack([perturb.apply_jpeg(p, quality) for p in photos])
    up = resample.Upsampler.parse(kind)
    return np.stack([resample.synth_fake(p, up, rounds) for p in photos])


def make_class_images(kind: str, n: int, size: int = 128, seed=0, rounds: int = 2) -> np.ndarray:
    """``n`` grayscale images of one synthetic source drawn from fresh photo crops."""
    return derive_class_images(kind, dataset.photo_corpus(n, size, seed=seed), rounds)


def synthetic_corpus(classes=("real", "nn"), n_per_class: int = 1000, size: int = 128, seed: int = 0,
                     rounds: int = 2, paired: bool = False) -> Corpus:
    """Desk-scale corpus.

    By default every class draws its crops from an independent stream. With
    ``paired`` all non-real classes are derived from one shared set of crops
    (still disjoint from the real ones), so they differ only in processing.
    """
    images, labels, names = [], [], []
    shared = dataset.photo_corpus(n_per_class, size, seed=[seed, 7919, 1]) if paired else None
    for i, kind in enumerate(classes):
        if paired and kind != "real":
            images.append(derive_class_images(kind, shared, rounds))
        else:
            images.append(make_class_images(kind, n_per_class, size, seed=[seed, 7919, i], rounds=rounds))
        labels.append(np.full(n_per_class, i, dtype=np.int64))
        names += [f"{kind}/{j:05d}.png" for j in range(n_per_class)]
    return Corpus(np.concatenate(images), np.concatenate(labels), list(classes), names)


def corpus_from_manifest(manifest: dataset.DatasetManifest) -> Corpus:
    entries = manifest.select()
    images = [dataset.load_image(Path(manifest.root) / e.path) for e in entries]
    shapes = {img.pixels.shape[:2] for img in images}
    if len(shapes) != 1:
        raise InvalidInput(f"corpus images have differing sizes: {sorted(shapes)}")
    gray = np.stack([np.clip(np.rint(dataset.to_gray(img)), 0, 255).astype(np.uint8) for img in images])
    return Corpus(gray, manifest.labels(), list(manifest.class_names), [e.path for e in entries])


def write_corpus(corpus: Corpus, directory) -> None:
    root = Path(directory)
    for img, name in zip(corpus.images, corpus.names):
        path = root / name
        path.parent.mkdir(parents=True, exist_ok=True)
        dataset.save_image(img, path)


# -- features -----------------------------------------------------------------

_LOGDCT_CACHE: dict[str, np.ndarray] = {}


def log_dct_planes(images, chunk: int = 256, key: str | None = None) -> np.ndarray:
    """log|DCT| of every image as float32, computed in chunks."""
    if key is not None and key in _LOGDCT_CACHE:
        return _LOGDCT_CACHE[key]
    out = np.empty(images.shape, dtype=np.float32)
    for s in range(0, len(images), chunk):
        out[s : s + chunk] = transform.log_dct(images[s : s + chunk].astype(np.float64))
    if key is not None:
        _LOGDCT_CACHE.clear()
        _LOGDCT_CACHE[key] = out
    return out


def prepare_features(corpus: Corpus, kind: str, train_idx) -> tuple[np.ndarray, transform.FeatureStats | None]:
    """Feature planes ``(N, H, W)`` float32: pixels in [-1, 1] or log-DCT
    standardized with statistics of the training rows only."""
    if kind == "pixel":
        return (corpus.images.astype(np.float32) / np.float32(127.5) - np.float32(1.0)), None
    if kind != "dct":
        raise InvalidInput(f"unknown feature kind {kind!r}")
    logd = log_dct_planes(corpus.images, key=corpus.digest())
    stats = transform.fit_feature_stats(logd[train_idx].astype(np.float64))
    mean = stats.mean.astype(np.float32)
    std = stats.std.astype(np.float32)
    return (logd - mean) / std, stats


def flat(planes, idx) -> np.ndarray:
    return planes[idx].reshape(len(idx), -1).astype(np.float64)


# -- CNN runs -------------------------------------------------------------------

_CNN_CACHE: dict[str, cnn.TrainResult] = {}


@dataclass(frozen=True)
class CnnSettings:
    batch_size: int = 64
    max_steps: int = 440
    eval_every: int = 20
    patience: int = 6
    learning_rate: float = 1e-3
    target_accuracy: float | None = None

    def config(self, seed: int) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, max_epochs=10**6,
                           early_stop_patience=self.patience, rng_seed=seed, eval_every=self.eval_every,
                           max_steps=self.max_steps, target_accuracy=self.target_accuracy)


def train_cnn(planes, labels, train_idx, val_idx, n_classes: int, settings: CnnSettings, seed: int,
              data_key: str) -> cnn.TrainResult:
    """Train (or fetch the memoized result of) one deterministic CNN run."""
    h = hashlib.sha256()
    h.update(data_key.encode())
    h.update(np.asarray(train_idx, dtype="<i8").tobytes())
    h.update(np.asarray(val_idx, dtype="<i8").tobytes())
    h.update(repr((settings, seed, n_classes)).encode())
    key = h.hexdigest()
    if key in _CNN_CACHE:
        cached = _CNN_CACHE[key]
        return replace(cached, model=cached.model.copy(), history=list(cached.history))
    model = cnn.CnnModel.init((*planes.shape[1:3], 1), n_classes, seed=seed)
    result = cnn.train(model, planes[train_idx], labels[train_idx], planes[val_idx], labels[val_idx],
                       settings.config(seed))
    _CNN_CACHE[key] = replace(result, model=result.model.copy(), history=list(result.history))
    return result


def clear_caches() -> None:
    _CNN_CACHE.clear()
    _LOGDCT_CACHE.clear()


# -- reporting --------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable) + "\n")


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _provenance(corpus: Corpus, seed: int) -> dict:
    return {"tool_version": __version__, "seed": seed, "corpus_digest": corpus.digest()}


def _linear_cfg(seed: int, epochs: int = 40) -> TrainConfig:
    return TrainConfig(batch_size=64, max_epochs=epochs, early_stop_patience=5, rng_seed=seed)


def _pct(x: float) -> float:
    return round(100.0 * x, 4)


# -- recipes ------------------------------------------------------------------


def detect(corpus: Corpus, out_dir, seed: int = 0, ratios=DETECT_RATIOS, lambda_grid=linear.LAMBDA_GRID,
           feature_kinds=FEATURE_KINDS, **_) -> dict:
    """Ridge-logistic real-vs-fake detection on pixels and on log-DCT features."""
    out = Path(out_dir)
    split = dataset.split_indices(corpus.labels, ratios, seed)
    tr, va, te = split["train"], split["val"], split["test"]
    methods = {}
    for kind in feature_kinds:
        planes, stats = prepare_features(corpus, kind, tr)
        lam, model, scores = linear.grid_search_lambda(
            (flat(planes, tr), corpus.labels[tr]), (flat(planes, va), corpus.labels[va]), lambda_grid, "L2",
            _linear_cfg(seed), feature_kind=kind, feature_shape=corpus.shape)
        metrics = linear.evaluate(model, flat(planes, te), corpus.labels[te])
        model.save(out / f"ridge-{kind}.fqlm", {**_provenance(corpus, seed),
                                                 "stats_digest": stats.digest() if stats else None})
        methods[f"ridge-{kind}"] = {"accuracy": metrics["accuracy"], "lambda": lam,
                                    "val_scores": {repr(k): v for k, v in scores.items()},
                                    "confusion": metrics["confusion"]}
        if kind == "dct":
            spectrum.render_heatmap(spectrum.weight_heatmap(model), spectrum.HeatmapSpec(),
                                    out / "ridge-dct-weights.png", _provenance(corpus, seed))
    results = {"methods": methods}
    if "ridge-pixel" in methods and "ridge-dct" in methods:
        results["gain"] = methods["ridge-dct"]["accuracy"] - methods["ridge-pixel"]["accuracy"]
    write_table(out / "detect.csv", ["method", "accuracy_pct", "gain_pct"],
                [[m, _pct(v["accuracy"]), _pct(results["gain"]) if m == "ridge-dct" and "gain" in results else ""]
                 for m, v in methods.items()])
    return results


def random_band(shape, size: int, seed: int, exclude=None) -> np.ndarray:
    """Uniformly random cell set of a given size (optionally avoiding ``exclude``)."""
    candidates = np.arange(shape[0] * shape[1])
    if exclude is not None:
        candidates = candidates[~np.asarray(exclude).ravel()]
    pick = np.random.default_rng(seed).choice(candidates, size=size, replace=False)
    mask = np.zeros(shape[0] * shape[1], dtype=bool)
    mask[pick] = True
    return mask.reshape(shape)


def lasso_locality(corpus: Corpus, positive: str, seed: int, rounds: int = 2, ratios=DETECT_RATIOS,
                   lambda_grid=linear.LAMBDA_GRID, top: int = 100):
    """One seeded LASSO run on ``real`` vs ``positive``; returns (model, stats dict)."""
    sub = corpus.binary("real", positive)
    split = dataset.split_indices(sub.labels, ratios, seed)
    tr, va, te = split["train"], split["val"], split["test"]
    planes, _ = prepare_features(sub, "dct", tr)
    lam, model, scores = linear.grid_search_lambda(
        (flat(planes, tr), sub.labels[tr]), (flat(planes, va), sub.labels[va]), lambda_grid, "L1",
        _linear_cfg(seed), feature_kind="dct", feature_shape=sub.shape)
    wmap = spectrum.weight_heatmap(model)
    grid = resample.grid_mask(sub.shape, rounds)
    band = random_band(sub.shape, int(grid.sum()), seed=[seed, 104729], exclude=grid)
    return model, {
        "seed": seed,
        "lambda": lam,
        "test_accuracy": linear.evaluate(model, flat(planes, te), sub.labels[te])["accuracy"],
        "zero_fraction": float(np.mean(model.weights == 0.0)),
        "grid_top_mass": spectrum.top_mass_share(wmap, grid, top),
        "random_top_mass": spectrum.top_mass_share(wmap, band, top),
    }


def upsampling(corpus: Corpus, out_dir, seed: int = 0, rounds: int = 2, ratios=DETECT_RATIOS,
               lambda_grid=linear.LAMBDA_GRID, lasso_runs: int = 1, lasso_kinds=None, feature_kinds=FEATURE_KINDS,
               **_) -> dict:
    """Per-kind detection accuracy, LASSO weight maps, mean/difference spectra
    and the replica-energy ratio of each upsampling kind.

    ``lasso_runs`` seeded LASSO fits (seeds ``seed, seed + 1, ...``) are made
    for every kind in ``lasso_kinds`` (default: all fake kinds).
    """
    out = Path(out_dir)
    kinds = [c for c in corpus.class_names if c != "real"]
    if "real" not in corpus.class_names or not kinds:
        raise InvalidInput("upsampling recipe needs a 'real' class and at least one fake class")
    spec_dir = out / "spectra"
    spec_dir.mkdir(parents=True, exist_ok=True)
    mean_specs, ratios_by_class = {}, {}
    for i, name in enumerate(corpus.class_names):
        acc = spectrum.SpectrumAccumulator(spectrum.LOG_AFTER_MEAN)
        for img in corpus.images[corpus.labels == i]:
            acc.add(img)
        mean_specs[name] = acc.result()
        ratios_by_class[name] = resample.replica_energy_ratio(acc.total / acc.count, rounds)
        spectrum.render_heatmap(mean_specs[name].values, spectrum.HeatmapSpec(), spec_dir / f"mean-{name}.png",
                                _provenance(corpus, seed))
        spectrum.write_matrix_csv(mean_specs[name].values, spec_dir / f"mean-{name}.csv")
    per_kind = {}
    rows = []
    for kind in kinds:
        diff = spectrum.abs_diff_spectrum(mean_specs["real"], mean_specs[kind])
        spectrum.render_heatmap(diff, spectrum.HeatmapSpec(), spec_dir / f"absdiff-real-{kind}.png",
                                _provenance(corpus, seed))
        sub = corpus.binary("real", kind)
        det = detect(sub, _subdir(out, f"detect-{kind}"), seed, ratios, lambda_grid, feature_kinds)
        runs = []
        for r in range(lasso_runs if lasso_kinds is None or kind in lasso_kinds else 1):
            model, info = lasso_locality(corpus, kind, seed + r, rounds, ratios, lambda_grid)
            runs.append(info)
            if r == 0:
                model.save(out / f"lasso-{kind}.fqlm", _provenance(corpus, seed))
                spectrum.render_heatmap(spectrum.weight_heatmap(model), spectrum.HeatmapSpec(clip_max=LASSO_HEATMAP_CLIP),
                                        out / f"lasso-{kind}-weights.png", _provenance(corpus, seed))
        grid = resample.grid_mask(corpus.shape, rounds)
        per_kind[kind] = {
            "accuracy": {k: v["accuracy"] for k, v in det["methods"].items()},
            "gain": det.get("gain"),
            "replica_energy_ratio": ratios_by_class[kind],
            "absdiff_grid_mean": float(diff[grid].mean()),
            "absdiff_offgrid_mean": float(diff[~grid].mean()),
            "lasso_runs": runs,
        }
        rows.append([kind] + [_pct(det["methods"][f"ridge-{k}"]["accuracy"]) for k in feature_kinds]
                    + [ratios_by_class[kind]])
    write_table(out / "upsampling.csv", ["kind"] + [f"ridge-{k}_pct" for k in feature_kinds]
                + ["replica_energy_ratio"], rows)
    return {"kinds": per_kind, "replica_energy_ratio": ratios_by_class}


def _subdir(out: Path, name: str) -> Path:
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def _cnn_run(corpus, kind, planes, split, settings, seed, out: Path | None, tag: str, train_idx=None):
    tr = split["train"] if train_idx is None else train_idx
    data_key = f"{corpus.digest()}:{kind}:{hashlib.sha256(np.asarray(split['train']).tobytes()).hexdigest()}"
    result = train_cnn(planes[..., None], corpus.labels, tr, split["val"], len(corpus.class_names),
                       settings, seed, data_key)
    acc = cnn.accuracy(result.model, planes[split["test"]][..., None], corpus.labels[split["test"]])
    if out is not None:
        result.write_history_csv(out / f"history-{tag}.csv")
        result.model.save(out / f"{tag}.fqlm", {**_provenance(corpus, seed), "feature_kind": kind})
    return result, acc


def attribute(corpus: Corpus, out_dir, seed: int = 0, ratios=ATTRIBUTE_RATIOS, cnn_settings=CnnSettings(),
              classical_train_limit: int | None = None, feature_kinds=FEATURE_KINDS, **_) -> dict:
    """Source identification with kNN, Eigenfaces (PCA + linear SVM) and the CNN."""
    out = Path(out_dir)
    split = dataset.split_indices(corpus.labels, ratios, seed)
    tr, va, te = split["train"], split["val"], split["test"]
    tr_classical = tr
    if classical_train_limit and classical_train_limit < len(tr):
        keep = dataset.subsample_indices(corpus.labels[tr], classical_train_limit / len(tr), seed)
        tr_classical = tr[keep]
    methods = {}
    for kind in feature_kinds:
        planes, _ = prepare_features(corpus, kind, tr)
        train = (flat(planes, tr_classical), corpus.labels[tr_classical])
        val = (flat(planes, va), corpus.labels[va])
        k, knn, kscores = linear.grid_search_knn(train, val)
        methods[f"knn-{kind}"] = {"accuracy": linear.evaluate(knn, flat(planes, te), corpus.labels[te])["accuracy"],
                                  "k": k}
        del knn
        (v, C), eig, _ = linear.grid_search_eigenfaces(train, val, cfg=_linear_cfg(seed, 60), feature_kind=kind)
        methods[f"eigenfaces-{kind}"] = {
            "accuracy": linear.evaluate(eig, flat(planes, te), corpus.labels[te])["accuracy"],
            "variance_threshold": v, "C": C, "components": int(eig.basis.components.shape[1])}
        del train, val, eig
        result, acc = _cnn_run(corpus, kind, planes, split, cnn_settings, seed, out, f"cnn-{kind}")
        methods[f"cnn-{kind}"] = {"accuracy": acc, "best_step": result.best_step,
                                  "steps_to_95": result.steps_to(0.95), "n_params": result.model.n_params}
    gains = {}
    for method in ("knn", "eigenfaces", "cnn"):
        if f"{method}-pixel" in methods and f"{method}-dct" in methods:
            gains[method] = methods[f"{method}-dct"]["accuracy"] - methods[f"{method}-pixel"]["accuracy"]
    write_table(out / "attribute.csv", ["method", "accuracy_pct", "gain_pct"],
                [[m, _pct(v["accuracy"]), _pct(gains[m.split("-")[0]]) if m.endswith("dct") and m.split("-")[0] in gains else ""]
                 for m, v in methods.items()])
    return {"methods": methods, "gain": gains}


def lowdata(corpus: Corpus, out_dir, seed: int = 0, fraction: float = 0.2, ratios=ATTRIBUTE_RATIOS,
            cnn_settings=CnnSettings(), feature_kinds=FEATURE_KINDS, **_) -> dict:
    """CNN accuracy with the full training split and with a stratified fraction of it."""
    out = Path(out_dir)
    split = dataset.split_indices(corpus.labels, ratios, seed)
    tr = split["train"]
    reduced = tr[dataset.subsample_indices(corpus.labels[tr], fraction, seed)]
    methods, rows = {}, []
    for kind in feature_kinds:
        planes, _ = prepare_features(corpus, kind, tr)
        _, full_acc = _cnn_run(corpus, kind, planes, split, cnn_settings, seed, None, f"cnn-{kind}")
        _, low_acc = _cnn_run(corpus, kind, planes, split, cnn_settings, seed, out, f"cnn-{kind}-reduced",
                              train_idx=reduced)
        methods[f"cnn-{kind}"] = {"full_accuracy": full_acc, "reduced_accuracy": low_acc,
                                  "loss": low_acc - full_acc, "train_size": int(len(reduced))}
        rows.append([f"cnn-{kind}", _pct(low_acc), _pct(low_acc - full_acc)])
    write_table(out / "lowdata.csv", ["method", "accuracy_pct", "loss_pct"], rows)
    return {"fraction": fraction, "methods": methods}


def converge(corpus: Corpus, out_dir, seed: int = 0, seeds=None, threshold: float = 0.95,
             ratios=ATTRIBUTE_RATIOS, cnn_settings=CnnSettings(), feature_kinds=FEATURE_KINDS, **_) -> dict:
    """Gradient steps until the validation accuracy first reaches ``threshold``.

    A run that never gets there within its step budget reports ``None`` and
    the budget it exhausted.
    """
    out = Path(out_dir)
    seeds = list(seeds) if seeds is not None else [seed, seed + 1, seed + 2]
    split = dataset.split_indices(corpus.labels, ratios, seed)
    runs: dict[str, list] = {k: [] for k in feature_kinds}
    for kind in feature_kinds:
        planes, _ = prepare_features(corpus, kind, split["train"])
        for s in seeds:
            result, acc = _cnn_run(corpus, kind, planes, split, cnn_settings, s, None, f"cnn-{kind}")
            result.write_history_csv(out / f"history-cnn-{kind}-seed{s}.csv")
            runs[kind].append({"seed": s, "steps_to_threshold": result.steps_to(threshold),
                               "steps_run": result.history[-1]["step"], "test_accuracy": acc})
    write_table(out / "converge.csv", ["feature", "seed", "steps_to_threshold", "steps_run"],
                [[k, r["seed"], r["steps_to_threshold"], r["steps_run"]] for k in feature_kinds for r in runs[k]])
    return {"threshold": threshold, "runs": runs}


def robustness(corpus: Corpus, out_dir, seed: int = 0, perturbations=PERTURBATIONS, apply_prob: float = 0.5,
               ratios=ATTRIBUTE_RATIOS, cnn_settings=CnnSettings(), feature_kinds=FEATURE_KINDS, **_) -> dict:
    """Clean-data (CD) vs perturbed-data (PD) training, both tested on perturbed data.

    Each perturbed corpus is produced before splitting; the split itself uses
    the same seeded stratified assignment as the clean corpus.
    """
    out = Path(out_dir)
    split = dataset.split_indices(corpus.labels, ratios, seed)
    te = split["test"]
    clean_models = {}
    for kind in feature_kinds:
        planes, stats = prepare_features(corpus, kind, split["train"])
        result, acc = _cnn_run(corpus, kind, planes, split, cnn_settings, seed, None, f"cnn-{kind}")
        clean_models[kind] = (result.model, stats, acc)
    grid, rows = {}, []
    for name in perturbations:
        cfg = perturb.PerturbConfig(name, apply_prob, seed)
        images, records = perturb.perturb_dataset(list(corpus.images), corpus.names, cfg)
        pcorpus = Corpus(np.stack(images), corpus.labels, corpus.class_names, corpus.names)
        write_json(out / f"perturb-{cfg.kind.value}.json", {"config": {"kind": cfg.kind.value, "apply_prob": apply_prob,
                   "rng_seed": seed}, "records": records})
        cell = {}
        for kind in feature_kinds:
            model, stats, _ = clean_models[kind]
            if kind == "dct":
                logd = log_dct_planes(pcorpus.images, key=pcorpus.digest())
                cd_planes = ((logd[te] - stats.mean) / stats.std).astype(np.float32)
            else:
                cd_planes, _ = prepare_features(pcorpus, kind, split["train"])
                cd_planes = cd_planes[te]
            cd = cnn.accuracy(model, cd_planes[..., None], corpus.labels[te])
            pd_planes, _ = prepare_features(pcorpus, kind, split["train"])
            _, pd = _cnn_run(pcorpus, kind, pd_planes, split, cnn_settings, seed, out, f"cnn-{kind}-{cfg.kind.value}")
            cell[kind] = {"CD": cd, "PD": pd}
            rows.append([cfg.kind.value, f"cnn-{kind}", _pct(cd), _pct(pd)])
        grid[cfg.kind.value] = cell
    write_table(out / "robustness.csv", ["perturbation", "method", "CD_pct", "PD_pct"], rows)
    return {"clean_accuracy": {k: v[2] for k, v in clean_models.items()}, "grid": grid}


_RECIPES = {
    "detect": detect,
    "upsampling": upsampling,
    "attribute": attribute,
    "lowdata": lowdata,
    "converge": converge,
    "robustness": robustness,
}

DEFAULT_CLASSES = {
    "detect": ("real", "nn"),
    "upsampling": UPSAMPLING_CLASSES,
    "attribute": ATTRIBUTE_CLASSES,
    "lowdata": ATTRIBUTE_CLASSES,
    "converge": ATTRIBUTE_CLASSES,
    "robustness": ATTRIBUTE_CLASSES,
}


@dataclass
class ExperimentSpec:
    recipe: str
    out_dir: str
    seed: int = 0
    manifest: str | None = None
    synthetic_per_class: int | None = None
    classes: tuple[str, ...] | None = None
    size: int = 128
    feature_kinds: tuple[str, ...] = FEATURE_KINDS
    options: dict = field(default_factory=dict)


def load_corpus(spec: ExperimentSpec) -> tuple[Corpus, dict]:
    if spec.manifest:
        path = Path(spec.manifest)
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        manifest = dataset.DatasetManifest.load(path)
        missing = [e.path for e in manifest.entries if not (Path(manifest.root) / e.path).exists()]
        if missing:
            raise ConfigError(f"manifest references missing file: {Path(manifest.root) / missing[0]}")
        return corpus_from_manifest(manifest), {"manifest": str(path), "manifest_digest": dataset.file_digest(path)}
    if spec.synthetic_per_class:
        classes = tuple(spec.classes or DEFAULT_CLASSES[spec.recipe])
        paired = spec.recipe == "upsampling"
        corpus = synthetic_corpus(classes, spec.synthetic_per_class, spec.size, spec.seed, paired=paired)
        return corpus, {"synthetic": {"classes": list(classes), "per_class": spec.synthetic_per_class,
                                      "size": spec.size, "paired": paired}}
    raise ConfigError("experiment needs either a manifest or a synthetic corpus size")


def run(spec: ExperimentSpec, corpus: Corpus | None = None) -> dict:
    """Run one recipe and write ``report.json`` (plus the recipe's tables) to ``spec.out_dir``."""
    if spec.recipe not in _RECIPES:
        raise ConfigError(f"unknown recipe {spec.recipe!r}; choose from {', '.join(RECIPES)}")
    inputs = {}
    if corpus is None:
        corpus, inputs = load_corpus(spec)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".lock"
    try:
        fd = lock.open("x")
    except FileExistsError:
        raise ConfigError(f"output directory {out} is locked by another run (remove {lock} if stale)") from None
    try:
        results = _RECIPES[spec.recipe](corpus, out, seed=spec.seed, feature_kinds=tuple(spec.feature_kinds),
                                        **spec.options)
    finally:
        fd.close()
        lock.unlink()
    report = {
        "recipe": spec.recipe,
        **_provenance(corpus, spec.seed),
        "inputs": inputs,
        "classes": corpus.class_names,
        "samples": len(corpus),
        "options": {k: (repr(v) if not isinstance(v, (int, float, str, bool, list, type(None))) else v)
                    for k, v in sorted(spec.options.items())},
        "results": results,
    }
    write_json(out / "report.json", report)
    return report
