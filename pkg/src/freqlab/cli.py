"""``freqlab`` command-line front end.

Exit codes: 0 on success, 1 on a runtime error (bad or missing input), 2 on
a usage error. ``FREQLAB_SEED`` overrides the default seed of every command.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, cnn, dataset, experiments, linear, modelfile, perturb, resample, spectrum, transform
from .errors import ConfigError, FreqlabError, InvalidInput
from .optim import TrainConfig

log = logging.getLogger("freqlab")

MODELS = ("ridge", "lasso", "svm", "knn", "eigenfaces", "cnn")


def _default_seed() -> int:
    raw = os.environ.get("FREQLAB_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"freqlab: error: FREQLAB_SEED must be an integer, got {raw!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _require(path, what: str = "input") -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"missing {what}: {p}")
    return p


def _provenance(args, **digests) -> dict:
    return {"tool_version": __version__, "seed": args.seed, **{k: v for k, v in digests.items() if v is not None}}


def _dump(payload, path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, default=experiments._jsonable) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _gray_u8(img: dataset.RasterImage) -> np.ndarray:
    return np.clip(np.rint(dataset.to_gray(img)), 0, 255).astype(np.uint8)


def _load_manifest(path) -> dataset.DatasetManifest:
    return dataset.DatasetManifest.load(_require(path, "manifest"))


def _ensure_splits(manifest, args) -> dataset.DatasetManifest:
    if all(e.split for e in manifest.entries):
        return manifest
    return dataset.split(manifest, experiments.DETECT_RATIOS, args.seed)


def _split_arrays(manifest, name):
    entries = manifest.select(name)
    images = np.stack([_gray_u8(dataset.load_image(Path(manifest.root) / e.path)) for e in entries]) if entries \
        else None
    return images, manifest.labels(name)


def _features(images, kind, stats):
    if kind == "pixel":
        return images.astype(np.float64) / 127.5 - 1.0
    return transform.standardize(experiments.log_dct_planes(images).astype(np.float64), stats).reshape(images.shape)


# -- commands ---------------------------------------------------------------------


def cmd_ingest(args) -> int:
    rules = None
    if args.label_rule:
        rules = {}
        for rule in args.label_rule:
            pattern, _, name = rule.partition("=")
            if not name:
                raise InvalidInput(f"label rule must look like GLOB=CLASS, got {rule!r}")
            rules[pattern] = name
    manifest, report = dataset.ingest(_require(args.directory, "directory"), rules)
    out = Path(args.out or Path(args.directory) / "manifest.json")
    base = out.resolve().parent
    root = Path(args.directory).resolve()
    if base != root:
        # entry paths are stored relative to the manifest's own directory
        for e in manifest.entries:
            e.path = Path(os.path.relpath(root / e.path, base)).as_posix()
        manifest.root = str(base)
    manifest.save(out)
    print(f"accepted {report.accepted} images, skipped {len(report.skipped)}")
    for name in report.skipped:
        print(f"skipped: {name}")
    return 0


def cmd_split(args) -> int:
    manifest = _load_manifest(args.manifest)
    result = dataset.split(manifest, args.ratios, args.seed)
    if args.subsample is not None:
        result = dataset.subsample(result, args.subsample, args.seed)
    out = Path(args.out or args.manifest)
    if out.resolve().parent != Path(manifest.root).resolve():
        raise InvalidInput("the split manifest must live next to the original (paths are relative to it)")
    result.save(out)
    counts = {s: len(result.select(s)) for s in dataset.SPLITS}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def _manifest_for(source, seed: int) -> dataset.DatasetManifest:
    p = _require(source)
    if p.is_dir():
        manifest, _ = dataset.ingest(p)
        return manifest
    return dataset.DatasetManifest.load(p)


def cmd_transform(args) -> int:
    manifest = _manifest_for(args.source, args.seed)
    out = Path(args.out or "features.fqf")
    stats = None
    if args.features == "dct":
        if args.stats:
            stats = transform.load_feature_stats(_require(args.stats, "statistics file"))
        else:
            fit_on = manifest.select("train") or manifest.select()
            specs = [transform.log_dct(dataset.to_gray(dataset.load_image(Path(manifest.root) / e.path)))
                     for e in fit_on]
            stats = transform.fit_feature_stats(specs)
            stats_path = out.with_name(out.name + ".stats")
            transform.save_feature_stats(stats, stats_path, _provenance(args))
            print(f"statistics fitted on {len(fit_on)} images -> {stats_path}")
    path = dataset.build_feature_cache(manifest, out, args.features, stats, args.split)
    print(f"wrote {path}")
    return 0


def cmd_stats(args) -> int:
    manifest = _manifest_for(args.source, args.seed)
    acc = spectrum.SpectrumAccumulator(args.order)
    for e in manifest.select(args.split):
        acc.add(dataset.load_image(Path(manifest.root) / e.path).pixels)
    result = acc.result()
    out = Path(args.out or "spectrum")
    spectrum.write_matrix_csv(result.values, out.with_suffix(".csv"))
    spectrum.render_heatmap(result.values, spectrum.HeatmapSpec(colormap=args.colormap), out.with_suffix(".png"),
                            _provenance(args, samples=result.sample_count))
    print(f"mean spectrum of {result.sample_count} images -> {out.with_suffix('.csv')}, {out.with_suffix('.png')}")
    return 0


def _matrix_from(path, class_index=None) -> np.ndarray:
    p = _require(path)
    if p.suffix.lower() == ".csv":
        return spectrum.read_matrix_csv(p)
    return spectrum.weight_heatmap(linear.LinearModel.load(p), class_index=class_index)


def cmd_heatmap(args) -> int:
    values = _matrix_from(args.matrix, args.class_index)
    out = Path(args.out or Path(args.matrix).with_suffix(".png"))
    spec = spectrum.HeatmapSpec(clip_max=args.clip, colormap=args.colormap, output_size=args.size)
    spectrum.render_heatmap(values, spec, out, _provenance(args, input_digest=dataset.file_digest(args.matrix)))
    print(f"wrote {out}")
    return 0


def cmd_weights(args) -> int:
    model = linear.LinearModel.load(_require(args.model, "model"))
    values = spectrum.weight_heatmap(model, class_index=args.class_index)
    out = Path(args.out or Path(args.model).with_suffix(""))
    meta = _provenance(args, model_digest=dataset.file_digest(args.model))
    spectrum.write_matrix_csv(values, out.with_suffix(".csv"))
    spectrum.render_heatmap(values, spectrum.HeatmapSpec(clip_max=args.clip, colormap=args.colormap),
                            out.with_suffix(".png"), meta)
    zeros = float(np.mean(np.asarray(model.weights) == 0.0))
    print(f"exact-zero weights: {100 * zeros:.2f}% -> {out.with_suffix('.png')}")
    return 0


def _image_files(directory: Path) -> list[Path]:
    return sorted((p for p in directory.rglob("*") if p.is_file() and p.suffix.lower() in dataset.IMAGE_SUFFIXES),
                  key=lambda p: p.relative_to(directory).as_posix())


def cmd_synth(args) -> int:
    src = _require(args.in_dir, "input directory")
    out = Path(args.out_dir or args.out or "synth")
    files = _image_files(src)
    if not files:
        raise InvalidInput(f"no images in {src}")
    kind = resample.Upsampler.parse(args.kind)
    for p in files:
        img = dataset.load_image(p).pixels
        fake = resample.synth_fake(img[..., 0] if img.shape[2] == 1 else img, kind, args.rounds)
        target = (out / p.relative_to(src)).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        dataset.save_image(fake, target)
    print(f"wrote {len(files)} images to {out}")
    return 0


def cmd_perturb(args) -> int:
    src = _require(args.in_dir, "input directory")
    out = Path(args.out_dir or args.out or "perturbed")
    files = _image_files(src)
    if not files:
        raise InvalidInput(f"no images in {src}")
    names = [p.relative_to(src).as_posix() for p in files]
    images = [dataset.load_image(p).pixels for p in files]
    images = [img[..., 0] if img.shape[2] == 1 else img for img in images]
    config = perturb.PerturbConfig(args.kind, args.prob, args.seed)
    outputs, records = perturb.perturb_dataset(images, names, config, threads=args.threads)
    for img, name in zip(outputs, names):
        target = (out / name).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        dataset.save_image(img, target)
    manifest = {
        **_provenance(args),
        "config": {"kind": config.kind.value, "apply_prob": config.apply_prob, "rng_seed": config.rng_seed},
        "input_digests": {n: dataset.file_digest(p) for n, p in zip(names, files)},
        "records": records,
    }
    _dump(manifest, out / "perturbations.json")
    applied = sum(bool(r["applied"]) for r in records)
    print(f"perturbed {applied} of {len(records)} images -> {out}")
    return 0


def _train_one(args, grid: list[float] | None):
    manifest = _ensure_splits(_load_manifest(args.manifest), args)
    tr_img, y_tr = _split_arrays(manifest, "train")
    va_img, y_va = _split_arrays(manifest, "val")
    if tr_img is None or va_img is None:
        raise InvalidInput("manifest needs non-empty train and val splits")
    stats = None
    if args.features == "dct":
        stats = transform.fit_feature_stats(experiments.log_dct_planes(tr_img).astype(np.float64))
    F_tr, F_va = _features(tr_img, args.features, stats), _features(va_img, args.features, stats)
    shape = tr_img.shape[1:]
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs, rng_seed=args.seed,
                      learning_rate=args.learning_rate)
    flat_tr, flat_va = F_tr.reshape(len(F_tr), -1), F_va.reshape(len(F_va), -1)
    scores: dict = {}
    if args.model in ("ridge", "lasso"):
        reg = "L2" if args.model == "ridge" else "L1"
        grid = grid or [args.reg_lambda]
        lam, model, scores = linear.grid_search_lambda((flat_tr, y_tr), (flat_va, y_va), grid, reg, cfg,
                                                       feature_kind=args.features, feature_shape=shape)
        model.metadata["lambda"] = lam
    elif args.model == "svm":
        Cs = grid or [args.C]
        best = None
        for C in sorted(Cs):
            m = linear.train_linear_svm(flat_tr, y_tr, C, cfg, flat_va, y_va, feature_kind=args.features)
            scores[C] = float(np.mean(m.predict(flat_va) == y_va))
            if best is None or scores[C] > scores[best.metadata["C"]]:
                best = m
        model = best
        model.feature_shape = shape
    elif args.model == "knn":
        k, model, scores = linear.grid_search_knn((flat_tr, y_tr), (flat_va, y_va),
                                                  [int(g) for g in grid] if grid else linear.KNN_GRID)
    elif args.model == "eigenfaces":
        _, model, scores = linear.grid_search_eigenfaces((flat_tr, y_tr), (flat_va, y_va),
                                                         grid or linear.PCA_THRESHOLDS, cfg=cfg,
                                                         feature_kind=args.features)
    else:
        settings = experiments.CnnSettings(batch_size=args.batch_size, max_steps=args.max_steps,
                                           eval_every=args.eval_every, patience=args.patience,
                                           learning_rate=args.learning_rate)
        init = cnn.CnnModel.init((*shape, 1), len(manifest.class_names), seed=args.seed)
        result = cnn.train(init, F_tr[..., None].astype(np.float32), y_tr, F_va[..., None].astype(np.float32),
                           y_va, settings.config(args.seed))
        model = result.model
        scores = {"best_step": result.best_step, "best_val_acc": result.best_val_acc}
        if args.out:
            result.write_history_csv(Path(args.out).with_suffix(".history.csv"))
    return manifest, model, stats, scores


def _save_model(args, manifest, model, stats, scores) -> Path:
    out = Path(args.out or f"{args.model}-{args.features}.fqlm")
    extra = _provenance(args, manifest_digest=dataset.file_digest(args.manifest), feature_kind=args.features,
                        model=args.model, class_names=manifest.class_names,
                        stats_digest=stats.digest() if stats is not None else None,
                        grid_scores={repr(k): v for k, v in scores.items()})
    model.save(out, extra)
    if stats is not None:
        transform.save_feature_stats(stats, out.with_name(out.name + ".stats"), _provenance(args))
    return out


def cmd_train(args) -> int:
    manifest, model, stats, scores = _train_one(args, args.grid)
    out = _save_model(args, manifest, model, stats, scores)
    chosen = getattr(model, "reg_lambda", None) if args.model in ("ridge", "lasso") else None
    print(f"wrote {out}" + (f" (lambda={chosen:g})" if chosen is not None else ""))
    return 0


def cmd_gridsearch(args) -> int:
    if not args.grid and args.model in ("ridge", "lasso"):
        args.grid = list(linear.LAMBDA_GRID)
    if not args.grid and args.model == "svm":
        args.grid = list(linear.SVM_C_GRID)
    manifest, model, stats, scores = _train_one(args, args.grid)
    out = _save_model(args, manifest, model, stats, scores)
    _dump({**_provenance(args), "model": args.model, "features": args.features,
           "validation_accuracy": {repr(k): v for k, v in scores.items()}},
          out.with_suffix(".grid.json"))
    for k, v in scores.items():
        print(f"{k!r}\t{v}")
    print(f"wrote {out}")
    return 0


def _load_any(path):
    kind, _, meta = modelfile.load(path)
    return (cnn.CnnModel.load(path) if kind == "cnn" else linear.load_model(path)), meta


def cmd_eval(args) -> int:
    model_path = _require(args.model, "model")
    manifest = _load_manifest(args.manifest)
    model, meta = _load_any(model_path)
    kind = meta.get("feature_kind", "dct")
    split_name = args.split if any(e.split for e in manifest.entries) else None
    images, y = _split_arrays(manifest, split_name)
    if images is None:
        raise InvalidInput(f"manifest has no entries in split {split_name!r}")
    stats = None
    if kind == "dct":
        stats = transform.load_feature_stats(_require(Path(str(model_path) + ".stats"), "statistics file"))
    F = _features(images, kind, stats)
    X = F[..., None].astype(np.float32) if isinstance(model, cnn.CnnModel) else F.reshape(len(F), -1)
    metrics = linear.evaluate(model, X, y, n_classes=len(manifest.class_names))
    report = {**_provenance(args, model_digest=dataset.file_digest(model_path),
                            manifest_digest=dataset.file_digest(args.manifest)),
              "split": split_name, **metrics}
    _dump(report, args.out)
    if args.out:
        print(f"accuracy {metrics['accuracy']:.4f} -> {args.out}")
    return 0


def cmd_run(args) -> int:
    options = {}
    if args.lasso_runs is not None:
        options["lasso_runs"] = args.lasso_runs
    if args.recipe in ("attribute", "lowdata", "converge", "robustness"):
        options["cnn_settings"] = experiments.CnnSettings(batch_size=args.batch_size, max_steps=args.max_steps,
                                                          eval_every=args.eval_every, patience=args.patience)
    if args.seeds:
        options["seeds"] = args.seeds
    if args.perturbations:
        options["perturbations"] = args.perturbations
    if args.manifest:
        _require(args.manifest, "manifest")
    spec = experiments.ExperimentSpec(
        recipe=args.recipe, out_dir=args.out or f"runs/{args.recipe}", seed=args.seed, manifest=args.manifest,
        synthetic_per_class=args.synthetic, classes=tuple(args.classes) if args.classes else None,
        size=args.size, feature_kinds=tuple(args.features), options=options)
    report = experiments.run(spec)
    print(f"{args.recipe}: report written to {Path(spec.out_dir) / 'report.json'}")
    summary = report["results"].get("gain")
    if summary is not None:
        print(f"gain: {json.dumps(summary, sort_keys=True)}")
    return 0


def cmd_photos(args) -> int:
    out = Path(args.out or "photos")
    images = dataset.photo_corpus(args.count, args.size, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        dataset.save_image(img, out / f"{i:05d}.png")
    print(f"wrote {len(images)} images to {out}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=_default_seed(),
                        help="random seed (default: $FREQLAB_SEED or 0)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker threads; 1 forces a fully serial run (default: available CPUs)")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="freqlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"freqlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=fn)
        return p

    p = add("ingest", cmd_ingest, "scan an image directory into a JSON manifest")
    p.add_argument("directory")
    p.add_argument("--label-rule", action="append", metavar="GLOB=CLASS",
                   help="assign CLASS to files matching GLOB (repeatable; default: first subdirectory)")

    p = add("split", cmd_split, "assign stratified train/val/test splits to a manifest")
    p.add_argument("manifest")
    p.add_argument("--ratios", type=_float_list, default=list(experiments.DETECT_RATIOS),
                   help="train,val,test fractions (default: 0.625,0.0625,0.3125)")
    p.add_argument("--subsample", type=float, default=None, metavar="FRACTION",
                   help="keep only this stratified fraction of every split")

    p = add("transform", cmd_transform, "write a feature cache (pixel or standardized log-DCT)")
    p.add_argument("source", help="image directory or manifest")
    p.add_argument("--features", choices=experiments.FEATURE_KINDS, default="dct")
    p.add_argument("--split", choices=dataset.SPLITS, default=None, help="only this split")
    p.add_argument("--stats", default=None, help="statistics file to reuse instead of fitting")

    p = add("stats", cmd_stats, "mean log-DCT spectrum of a corpus as CSV and PNG")
    p.add_argument("source", help="image directory or manifest")
    p.add_argument("--order", choices=(spectrum.LOG_AFTER_MEAN, spectrum.MEAN_AFTER_LOG),
                   default=spectrum.LOG_AFTER_MEAN)
    p.add_argument("--split", choices=dataset.SPLITS, default=None)
    p.add_argument("--colormap", default="viridis")

    p = add("heatmap", cmd_heatmap, "render a matrix CSV or a linear model's |weights| as a PNG")
    p.add_argument("matrix")
    p.add_argument("--clip", type=float, default=None, help="clip values above this before scaling")
    p.add_argument("--colormap", default="viridis")
    p.add_argument("--size", type=int, default=None, help="output side length in pixels")
    p.add_argument("--class-index", type=int, default=None)

    p = add("synth", cmd_synth, "create synthetic fakes by down- then upsampling every image")
    p.add_argument("in_dir")
    p.add_argument("out_dir", nargs="?")
    p.add_argument("--kind", choices=[u.value for u in resample.Upsampler], default="nn")
    p.add_argument("--rounds", type=int, default=2)

    p = add("perturb", cmd_perturb, "apply random blur/crop/JPEG/noise perturbations")
    p.add_argument("in_dir")
    p.add_argument("out_dir", nargs="?")
    p.add_argument("--kind", choices=[k.value for k in perturb.Perturbation], default="combined")
    p.add_argument("--prob", type=float, default=0.5, help="per-image application probability")

    for name, fn, text in (("train", cmd_train, "train a classifier on a split manifest"),
                           ("gridsearch", cmd_gridsearch, "train over a hyper-parameter grid and report scores")):
        p = add(name, fn, text)
        p.add_argument("manifest")
        p.add_argument("--model", choices=MODELS, default="ridge")
        p.add_argument("--features", choices=experiments.FEATURE_KINDS, default="dct")
        p.add_argument("--lambda-grid", "--grid", dest="grid", type=_float_list, default=None,
                       help="comma-separated lambdas (ridge/lasso), C values (svm), k values (knn) "
                            "or variance thresholds (eigenfaces)")
        p.add_argument("--lambda", dest="reg_lambda", type=float, default=1e-3)
        p.add_argument("--C", type=float, default=1e-2)
        p.add_argument("--epochs", type=int, default=40)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--learning-rate", type=float, default=1e-3)
        p.add_argument("--max-steps", type=int, default=440)
        p.add_argument("--eval-every", type=int, default=20)
        p.add_argument("--patience", type=int, default=6)

    p = add("eval", cmd_eval, "evaluate a model file on a manifest split")
    p.add_argument("model")
    p.add_argument("manifest")
    p.add_argument("--split", choices=dataset.SPLITS, default="test")

    p = add("weights", cmd_weights, "export a linear model's |weights| as CSV and PNG")
    p.add_argument("model")
    p.add_argument("--clip", type=float, default=None)
    p.add_argument("--colormap", default="viridis")
    p.add_argument("--class-index", type=int, default=None)

    p = add("run", cmd_run, "run a named experiment recipe")
    p.add_argument("recipe", choices=experiments.RECIPES)
    p.add_argument("--manifest", default=None, help="use this corpus instead of a synthetic one")
    p.add_argument("--synthetic", type=int, default=None, metavar="N", help="synthetic images per class")
    p.add_argument("--classes", type=lambda s: s.split(","), default=None,
                   help="synthetic classes, e.g. real,nn,bilinear")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--features", type=lambda s: s.split(","), default=list(experiments.FEATURE_KINDS))
    p.add_argument("--seeds", type=_int_list, default=None, help="seeds for the converge recipe")
    p.add_argument("--perturbations", type=lambda s: s.split(","), default=None)
    p.add_argument("--lasso-runs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--max-steps", type=int, default=440)
    p.add_argument("--eval-every", type=int, default=20)
    p.add_argument("--patience", type=int, default=6)

    p = add("photos", cmd_photos, "write the bundled natural-photo stand-in corpus")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except FreqlabError as exc:
        print(f"freqlab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
