import numpy as np
import pytest

from freqlab import cnn
from freqlab.errors import InvalidInput, ShapeError
from freqlab.optim import TrainConfig


def naive_conv(x, w, b):
    """Direct loop 3x3 same cross-correlation (NHWC)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[-1]))
    for i in range(h):
        for j in range(wd):
            patch = xp[:, i : i + 3, j : j + 3, :]
            out[:, i, j, :] = np.einsum("nklc,klco->no", patch, w) + b
    return out


def test_param_count_matches_closed_form():
    assert cnn.param_count((128, 128, 3), 5) == 169_961
    assert cnn.param_count((128, 128, 1), 5) == 169_907
    model = cnn.CnnModel.init((128, 128, 3), 5)
    assert model.n_params == 169_961


def test_conv_forward_matches_naive(rng):
    x = rng.normal(size=(2, 5, 6, 3))
    w = rng.normal(size=(3, 3, 3, 4))
    b = rng.normal(size=4)
    out, _ = cnn.conv_forward(x, w, b)
    assert np.allclose(out, naive_conv(x, w, b), atol=1e-12)


def test_conv_backward_matches_naive_adjoint(rng):
    x = rng.normal(size=(2, 4, 4, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    dout = rng.normal(size=(2, 4, 4, 3))
    _, cols = cnn.conv_forward(x, w, np.zeros(3))
    dx, dw, db = cnn.conv_backward(dout, cols, x.shape, w)
    # <dout, conv(x)> is bilinear, so its gradients are the adjoint maps
    f = lambda xx, ww: np.sum(dout * naive_conv(xx, ww, np.zeros(3)))  # noqa: E731
    eps = 1e-6
    for idx in [(0, 1, 2, 1), (1, 3, 0, 0)]:
        e = np.zeros_like(x)
        e[idx] = eps
        assert (f(x + e, w) - f(x - e, w)) / (2 * eps) == pytest.approx(dx[idx], rel=1e-6)
    for idx in [(0, 0, 1, 2), (2, 1, 0, 0)]:
        e = np.zeros_like(w)
        e[idx] = eps
        assert (f(x, w + e) - f(x, w - e)) / (2 * eps) == pytest.approx(dw[idx], rel=1e-6)
    assert np.allclose(db, dout.sum(axis=(0, 1, 2)))


def test_pooling_adjoint(rng):
    x = rng.normal(size=(1, 4, 6, 2))
    d = rng.normal(size=(1, 2, 3, 2))
    assert np.sum(cnn.avgpool_forward(x) * d) == pytest.approx(np.sum(x * cnn.avgpool_backward(d)))


def test_full_network_gradient_check(rng):
    model = cnn.CnnModel.init((8, 8, 1), 3, seed=2, dtype=np.float64)
    for p in model.params[1::2]:
        p[...] = rng.normal(scale=0.1, size=p.shape)
    X = rng.normal(size=(4, 8, 8, 1))
    y = np.array([0, 1, 2, 1])
    _, grads = cnn.loss_and_grads(model, X, y)
    h = 1e-6
    worst = 0.0
    for p, g in zip(model.params, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in rng.choice(flat.size, size=min(10, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            up = cnn.loss_and_grads(model, X, y)[0]
            flat[i] = old - h
            down = cnn.loss_and_grads(model, X, y)[0]
            flat[i] = old
            num = (up - down) / (2 * h)
            worst = max(worst, abs(num - gflat[i]) / max(1e-8, abs(num) + abs(gflat[i])))
    assert worst < 1e-4


def test_init_is_seeded_and_validated():
    a = cnn.CnnModel.init((16, 16, 1), 2, seed=4)
    b = cnn.CnnModel.init((16, 16, 1), 2, seed=4)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert all(np.all(p == 0) for p in a.params[1::2])
    with pytest.raises(ShapeError):
        cnn.CnnModel.init((10, 16, 1), 2)


def test_input_and_label_validation():
    model = cnn.CnnModel.init((8, 8, 1), 2)
    with pytest.raises(ShapeError):
        model.predict(np.zeros((1, 8, 4, 1)))
    with pytest.raises(InvalidInput):
        cnn.loss_and_grads(model, np.zeros((1, 8, 8, 1)), [2])
    assert model.predict(np.zeros((3, 8, 8))).shape == (3,)


def _toy_task(rng, n=96):
    # class 1 carries a vertical stripe pattern, class 0 is plain noise
    X = rng.normal(size=(n, 8, 8, 1)).astype(np.float32)
    y = np.arange(n) % 2
    X[y == 1, :, ::2, 0] += 1.5
    return X, y


def test_training_learns_and_is_deterministic(rng, tmp_path):
    X, y = _toy_task(rng)
    cfg = TrainConfig(batch_size=16, max_epochs=30, eval_every=6, early_stop_patience=20, rng_seed=1,
                      target_accuracy=1.0)
    r1 = cnn.train(cnn.CnnModel.init((8, 8, 1), 2, seed=0), X, y, X, y, cfg)
    r2 = cnn.train(cnn.CnnModel.init((8, 8, 1), 2, seed=0), X, y, X, y, cfg)
    assert r1.best_val_acc >= 0.95
    assert r1.history == r2.history
    assert all(np.array_equal(p, q) for p, q in zip(r1.model.params, r2.model.params))
    assert cnn.accuracy(r1.model, X, y) == r1.best_val_acc
    r1.write_history_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().startswith("step,train_loss,val_acc")
    r1.model.save(tmp_path / "m.fqlm", {"seed": 1})
    back = cnn.CnnModel.load(tmp_path / "m.fqlm")
    assert np.array_equal(back.predict(X), r1.model.predict(X)) and back.metadata["seed"] == 1


def test_max_steps_and_steps_to(rng):
    X, y = _toy_task(rng, 64)
    cfg = TrainConfig(batch_size=16, max_epochs=100, eval_every=3, early_stop_patience=100, max_steps=7)
    result = cnn.train(cnn.CnnModel.init((8, 8, 1), 2), X, y, X, y, cfg)
    assert [h["step"] for h in result.history] == [3, 6, 7]
    history = [{"step": 5, "val_acc": 0.5}, {"step": 10, "val_acc": 0.96}, {"step": 15, "val_acc": 0.97}]
    assert cnn.steps_to_accuracy(history, 0.95) == 10
    assert cnn.steps_to_accuracy(history, 0.99) is None
