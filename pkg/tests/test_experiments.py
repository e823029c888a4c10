import json

import numpy as np
import pytest

from freqlab import dataset, experiments
from freqlab.errors import ConfigError, InvalidInput
from freqlab.experiments import CnnSettings, ExperimentSpec

TINY_CNN = CnnSettings(batch_size=16, max_steps=6, eval_every=3, patience=2)


@pytest.fixture(scope="module")
def five_class():
    return experiments.synthetic_corpus(experiments.ATTRIBUTE_CLASSES, 20, size=32, seed=0)


def test_synthetic_corpus_layout(five_class):
    c = five_class
    assert c.images.shape == (100, 32, 32) and c.images.dtype == np.uint8
    assert np.bincount(c.labels).tolist() == [20] * 5
    assert c.names[20] == "nn/00000.png"
    again = experiments.synthetic_corpus(experiments.ATTRIBUTE_CLASSES, 20, size=32, seed=0)
    assert again.digest() == c.digest()
    # every class draws distinct photo crops
    assert not np.array_equal(c.images[0], c.images[20])


def test_binary_relabels(five_class):
    sub = five_class.binary("real", "binomial")
    assert sub.class_names == ["real", "binomial"] and np.bincount(sub.labels).tolist() == [20, 20]


def test_fake_classes_carry_grid_zeros():
    imgs = experiments.make_class_images("nn", 3, size=32, seed=1)
    spec = np.abs(np.stack([experiments.transform.dct2(i.astype(float)) for i in imgs])).mean(axis=0)
    # 8-bit rounding leaves only quantization noise on the grid lines
    assert spec[8, 1:].mean() < 0.05 * spec[1:8, 1:].mean()


def test_dct_features_use_train_statistics_only(five_class):
    split = dataset.split_indices(five_class.labels, experiments.ATTRIBUTE_RATIOS, 0)
    planes, stats = experiments.prepare_features(five_class, "dct", split["train"])
    tr = planes[split["train"]].astype(np.float64)
    assert np.allclose(tr.mean(axis=0), 0.0, atol=1e-4)
    assert abs(planes[split["test"]].mean()) > 1e-4
    pix, none = experiments.prepare_features(five_class, "pixel", split["train"])
    assert none is None and pix.min() >= -1 and pix.max() <= 1
    with pytest.raises(InvalidInput):
        experiments.prepare_features(five_class, "wavelet", split["train"])


def _files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_detect_recipe_is_byte_deterministic(tmp_path):
    corpus = experiments.synthetic_corpus(("real", "nn"), 24, size=32, seed=3)
    spec_a = ExperimentSpec("detect", str(tmp_path / "a"), seed=3)
    spec_b = ExperimentSpec("detect", str(tmp_path / "b"), seed=3)
    ra = experiments.run(spec_a, corpus)
    experiments.run(spec_b, corpus)
    assert _files(tmp_path / "a") == _files(tmp_path / "b")
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["seed"] == 3 and report["tool_version"] and report["corpus_digest"] == corpus.digest()
    assert set(ra["results"]["methods"]) == {"ridge-pixel", "ridge-dct"}
    assert (tmp_path / "a" / "detect.csv").read_text().startswith("method,accuracy_pct,gain_pct")


def test_cnn_recipes_share_memoized_runs(tmp_path, five_class):
    experiments.clear_caches()
    opts = {"cnn_settings": TINY_CNN, "classical_train_limit": 40}
    att = experiments.run(ExperimentSpec("attribute", str(tmp_path / "att"), options=opts), five_class)
    methods = att["results"]["methods"]
    assert {"knn-pixel", "knn-dct", "eigenfaces-pixel", "eigenfaces-dct", "cnn-pixel", "cnn-dct"} == set(methods)
    assert set(att["results"]["gain"]) == {"knn", "eigenfaces", "cnn"}
    assert (tmp_path / "att" / "history-cnn-dct.csv").exists()
    cached = len(experiments._CNN_CACHE)
    low = experiments.run(ExperimentSpec("lowdata", str(tmp_path / "low"), options={"cnn_settings": TINY_CNN}),
                          five_class)
    # the full-data runs come from the memo, only the reduced runs are new
    assert len(experiments._CNN_CACHE) == cached + 2
    assert low["results"]["methods"]["cnn-dct"]["train_size"] == 15
    conv = experiments.run(ExperimentSpec("converge", str(tmp_path / "conv"),
                                          options={"cnn_settings": TINY_CNN, "seeds": [0, 1]}), five_class)
    assert [r["seed"] for r in conv["results"]["runs"]["dct"]] == [0, 1]


def test_robustness_recipe_grid(tmp_path, five_class):
    rep = experiments.run(ExperimentSpec("robustness", str(tmp_path / "rob"),
                                         options={"cnn_settings": TINY_CNN, "perturbations": ("blur", "combined")}),
                          five_class)
    grid = rep["results"]["grid"]
    assert set(grid) == {"blur", "combined"}
    assert set(grid["blur"]["dct"]) == {"CD", "PD"}
    manifest = json.loads((tmp_path / "rob" / "perturb-combined.json").read_text())
    assert len(manifest["records"]) == len(five_class)


def test_upsampling_recipe_small(tmp_path):
    corpus = experiments.synthetic_corpus(experiments.UPSAMPLING_CLASSES, 24, size=32, seed=0)
    rep = experiments.run(ExperimentSpec("upsampling", str(tmp_path / "up"), options={"lasso_runs": 2,
                                                                                      "lasso_kinds": ("nn",)}),
                          corpus)
    kinds = rep["results"]["kinds"]
    assert list(kinds) == ["nn", "bilinear", "binomial"]
    assert len(kinds["nn"]["lasso_runs"]) == 2 and len(kinds["binomial"]["lasso_runs"]) == 1
    assert (tmp_path / "up" / "lasso-nn-weights.png").exists()
    assert (tmp_path / "up" / "spectra" / "absdiff-real-nn.png").exists()


def test_run_errors(tmp_path):
    with pytest.raises(ConfigError, match="missing.json"):
        experiments.run(ExperimentSpec("detect", str(tmp_path / "o"), manifest=str(tmp_path / "missing.json")))
    with pytest.raises(ConfigError):
        experiments.run(ExperimentSpec("tables", str(tmp_path / "o"), synthetic_per_class=4))
    with pytest.raises(ConfigError):
        experiments.run(ExperimentSpec("detect", str(tmp_path / "o")))


def test_output_directory_lock(tmp_path):
    out = tmp_path / "locked"
    out.mkdir()
    (out / ".lock").write_text("")
    corpus = experiments.synthetic_corpus(("real", "nn"), 16, size=32)
    with pytest.raises(ConfigError, match="locked"):
        experiments.run(ExperimentSpec("detect", str(out)), corpus)


def test_manifest_corpus_and_missing_file(tmp_path):
    corpus = experiments.synthetic_corpus(("real", "nn"), 16, size=32)
    experiments.write_corpus(corpus, tmp_path / "data")
    manifest, _ = dataset.ingest(tmp_path / "data")
    manifest.save(tmp_path / "data" / "manifest.json")
    spec = ExperimentSpec("detect", str(tmp_path / "out"), manifest=str(tmp_path / "data" / "manifest.json"))
    loaded, inputs = experiments.load_corpus(spec)
    assert np.array_equal(np.sort(loaded.images.reshape(32, -1), axis=0),
                          np.sort(corpus.images.reshape(32, -1), axis=0))
    assert inputs["manifest_digest"]
    (tmp_path / "data" / "nn" / "00003.png").unlink()
    with pytest.raises(ConfigError, match="00003.png"):
        experiments.load_corpus(spec)
