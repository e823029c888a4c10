"""End-to-end acceptance checks.

Every check prints one PASS/FAIL line in the terminal summary. The experiment
checks are marked ``slow``; deselect them with ``-m "not slow"``.
"""

import filecmp
import time

import numpy as np
import pytest

from freqlab import cnn, experiments, linear, transform

RESULTS: list[str] = []

SIZE = 128
PER_CLASS = 1000
UPSAMPLING_SEEDS = (0, 1, 2)
LASSO_RUNS = 10


def _record(name: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def _rel_err(a, b):
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


# -- exact oracles ------------------------------------------------------------

def test_dct_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        h, w = rng.integers(1, 33, size=2)
        x = rng.normal(size=(h, w))
        worst = max(worst, np.max(np.abs(transform.dct2(x) - transform.dct2_naive(x))))
    x = rng.normal(size=(SIZE, SIZE))
    c = transform.dct2(x)
    roundtrip = np.max(np.abs(transform.idct2(c) - x))
    parseval = abs(np.sum(c**2) - np.sum(x**2)) / np.sum(x**2)
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and roundtrip < 1e-9 and parseval < 1e-6 and elapsed < 10
    _record("dct oracle", ok, f"max|dct2-naive|={worst:.2e} roundtrip={roundtrip:.2e} "
            f"parseval={parseval:.2e} time={elapsed:.1f}s")
    assert ok


def _max_fd_error(f, params, rng, picks, h=1e-6):
    _, grads = f()
    worst = 0.0
    for p, g in zip(params, grads):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        for i in rng.choice(flat.size, size=min(picks, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = f()[0]
            flat[i] = old - h
            down = f()[0]
            flat[i] = old
            worst = max(worst, _rel_err((up - down) / (2 * h), gflat[i]))
    return worst


def test_gradient_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    X = rng.normal(size=(40, 6))
    y = rng.integers(0, 3, size=40)
    w, b = rng.normal(size=(6, 3)), rng.normal(size=3)

    def logistic():
        loss, gw, gb = linear.logistic_loss_grad(w, b, X, y, "L2", 0.05)
        return loss, [gw, gb]

    yb = y % 2
    wb, bb = rng.normal(size=6), np.zeros(1)

    def binary():
        loss, gw, gb = linear.logistic_loss_grad(wb, bb.reshape(()), X, yb, "L2", 0.05)
        return loss, [gw, np.atleast_1d(gb)]

    model = cnn.CnnModel.init((8, 8, 1), 5, seed=3, dtype=np.float64)
    for p in model.params[1::2]:
        p[...] = rng.normal(scale=0.1, size=p.shape)
    Xc = rng.normal(size=(5, 8, 8, 1))
    yc = np.arange(5)

    def network():
        return cnn.loss_and_grads(model, Xc, yc)

    errs = {"logistic": max(_max_fd_error(logistic, [w, b], rng, 18), _max_fd_error(binary, [wb, bb], rng, 7)),
            "cnn": _max_fd_error(network, model.params, rng, 12)}
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-4 and elapsed < 120
    _record("gradient oracles", ok, f"logistic={errs['logistic']:.1e} cnn={errs['cnn']:.1e} time={elapsed:.1f}s")
    assert ok


def test_cnn_parameter_count():
    n = cnn.param_count((SIZE, SIZE, 3), 5)
    built = cnn.CnnModel.init((SIZE, SIZE, 3), 5).n_params
    ok = n == built and abs(n - 170_000) <= 0.05 * 170_000
    _record("cnn parameter count", ok, f"{n} parameters (target 170000 +/- 5%)")
    assert ok


# -- synthetic experiments ---------------------------------------------------

@pytest.mark.slow
def test_detection(tmp_path):
    t0 = time.perf_counter()
    corpus = experiments.synthetic_corpus(("real", "nn"), PER_CLASS, SIZE, seed=0)
    res = experiments.detect(corpus, tmp_path, seed=0)
    elapsed = time.perf_counter() - t0
    dct = res["methods"]["ridge-dct"]["accuracy"]
    pix = res["methods"]["ridge-pixel"]["accuracy"]
    ok = dct >= 0.98 and dct - pix >= 0.10 and elapsed < 600
    _record("synthetic detection", ok, f"ridge-dct={dct:.4f} ridge-pixel={pix:.4f} "
            f"gain={100 * (dct - pix):.1f}pts time={elapsed:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def upsampling_runs(tmp_path_factory):
    runs = {}
    for seed in UPSAMPLING_SEEDS:
        corpus = experiments.synthetic_corpus(experiments.UPSAMPLING_CLASSES, PER_CLASS, SIZE, seed, paired=True)
        runs[seed] = experiments.upsampling(
            corpus, tmp_path_factory.mktemp(f"upsampling{seed}"), seed,
            lasso_runs=LASSO_RUNS if seed == UPSAMPLING_SEEDS[0] else 1, lasso_kinds=("nn",))
        experiments.clear_caches()
    return runs


@pytest.mark.slow
def test_upsampling_ordering(upsampling_runs):
    ok, parts = True, []
    for seed, res in upsampling_runs.items():
        acc = [res["kinds"][k]["accuracy"]["ridge-dct"] for k in ("nn", "bilinear", "binomial")]
        ratio = [res["replica_energy_ratio"][k] for k in ("nn", "bilinear", "binomial")]
        acc_ok = acc[0] >= acc[1] >= acc[2]
        ratio_ok = ratio[0] > ratio[1] > ratio[2]
        ok &= acc_ok and ratio_ok
        parts.append(f"seed{seed} acc={'/'.join(f'{a:.4f}' for a in acc)}{'' if acc_ok else '(!)'} "
                     f"ratio={'/'.join(f'{r:.4f}' for r in ratio)}{'' if ratio_ok else '(!)'}")
    _record("upsampling ordering", ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_lasso_sparsity_and_locality(upsampling_runs):
    runs = upsampling_runs[UPSAMPLING_SEEDS[0]]["kinds"]["nn"]["lasso_runs"]
    zeros = [r["zero_fraction"] for r in runs]
    local = sum(r["grid_top_mass"] > r["random_top_mass"] for r in runs)
    ok = len(runs) == LASSO_RUNS and min(zeros) >= 0.5 and local >= 9
    _record("lasso sparsity/locality", ok, f"min zero fraction={min(zeros):.3f} "
            f"grid beats random band in {local}/{len(runs)} runs")
    assert ok


@pytest.fixture(scope="module")
def attribution_corpus():
    return experiments.synthetic_corpus(experiments.ATTRIBUTE_CLASSES, PER_CLASS, SIZE, seed=0)


@pytest.fixture(scope="module")
def attribution(attribution_corpus, tmp_path_factory):
    t0 = time.perf_counter()
    res = experiments.attribute(attribution_corpus, tmp_path_factory.mktemp("attribute"), seed=0)
    return res, time.perf_counter() - t0


@pytest.mark.slow
def test_source_identification(attribution):
    res, elapsed = attribution
    m = res["methods"]
    ok = (m["cnn-dct"]["accuracy"] >= 0.95 and m["knn-dct"]["accuracy"] > m["knn-pixel"]["accuracy"]
          and m["eigenfaces-dct"]["accuracy"] > m["eigenfaces-pixel"]["accuracy"] and elapsed < 1800)
    _record("source identification", ok, " ".join(f"{k}={v['accuracy']:.3f}" for k, v in sorted(m.items()))
            + f" time={elapsed / 60:.1f}min")
    assert ok


@pytest.mark.slow
def test_low_data(attribution, attribution_corpus, tmp_path):
    res = experiments.lowdata(attribution_corpus, tmp_path, seed=0, fraction=0.2)["methods"]
    drop = {k: res[f"cnn-{k}"]["full_accuracy"] - res[f"cnn-{k}"]["reduced_accuracy"] for k in ("dct", "pixel")}
    ok = drop["dct"] < drop["pixel"]
    _record("low data", ok, " ".join(f"{k}: {100 * res[f'cnn-{k}']['full_accuracy']:.1f}->"
                                     f"{100 * res[f'cnn-{k}']['reduced_accuracy']:.1f} (drop {100 * drop[k]:.1f}pts)"
                                     for k in ("dct", "pixel")))
    assert ok


@pytest.mark.slow
def test_convergence(attribution, attribution_corpus, tmp_path):
    runs = experiments.converge(attribution_corpus, tmp_path, seed=0)["runs"]

    def steps(r):
        return r["steps_to_threshold"] if r["steps_to_threshold"] is not None else float("inf")

    pairs = [(steps(d), steps(p)) for d, p in zip(runs["dct"], runs["pixel"])]
    ok = len(pairs) == 3 and all(d < p for d, p in pairs)
    _record("convergence", ok, " ".join(f"seed{r['seed']}: dct={d} pixel={p}"
                                        for r, (d, p) in zip(runs["dct"], pairs)))
    assert ok


@pytest.mark.slow
def test_robustness(attribution, attribution_corpus, tmp_path):
    grid = experiments.robustness(attribution_corpus, tmp_path, seed=0)["grid"]
    experiments.clear_caches()
    ok, parts = True, []
    for pert, cell in grid.items():
        pd_ok = all(cell[k]["PD"] > cell[k]["CD"] for k in ("dct", "pixel"))
        dct_ok = pert == "noise" or cell["dct"]["PD"] >= cell["pixel"]["PD"]
        ok &= pd_ok and dct_ok
        parts.append(f"{pert}: " + " ".join(f"{k} CD={cell[k]['CD']:.3f} PD={cell[k]['PD']:.3f}"
                                            for k in ("dct", "pixel")) + ("" if pd_ok and dct_ok else " (!)"))
    _record("robustness", ok, "; ".join(parts))
    assert ok


@pytest.mark.slow
def test_determinism(tmp_path):
    spec = dict(synthetic_per_class=40, size=32, options={"cnn_settings": experiments.CnnSettings(max_steps=40)})
    for recipe in ("detect", "lowdata"):
        for rep in ("a", "b"):
            experiments.clear_caches()
            experiments.run(experiments.ExperimentSpec(recipe, tmp_path / recipe / rep, seed=3, **spec))
    experiments.clear_caches()
    mismatched, compared = [], 0
    for recipe in ("detect", "lowdata"):
        a, b = tmp_path / recipe / "a", tmp_path / recipe / "b"
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != ".lock")
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != ".lock")
        for rel in files:
            compared += 1
            if not filecmp.cmp(a / rel, b / rel, shallow=False):
                mismatched.append(f"{recipe}/{rel}")
    ok = not mismatched and compared > 0
    _record("determinism", ok, f"{compared} files compared, {len(mismatched)} differ {mismatched[:3]}")
    assert ok
