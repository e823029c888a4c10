"""A shallow four-convolution CNN with hand-written backpropagation.

Architecture for an ``S x S x C`` input (``S`` divisible by 4)::

    conv3x3(C->3) relu  conv3x3(3->8) relu  avgpool2
    conv3x3(8->16) relu  avgpool2  conv3x3(16->32) relu  dense(S/4*S/4*32 -> K)

Convolutions use stride 1 and zero "same" padding. Tensors are NHWC; the
dense layer sees the last feature map flattened row-major.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import modelfile
from .errors import InvalidInput, ShapeError
from .optim import Adam, TrainConfig

log = logging.getLogger(__name__)

CONV_CHANNELS = (3, 8, 16, 32)
POOL_AFTER = (False, True, True, False)
PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "conv3_w", "conv3_b",
               "conv4_w", "conv4_b", "dense_w", "dense_b")


@dataclass
class CnnModel:
    params: list[np.ndarray]
    input_shape: tuple[int, int, int] = (128, 128, 1)
    n_classes: int = 5
    activation: str = "relu"
    metadata: dict = field(default_factory=dict)

    @classmethod
    def init(cls, input_shape=(128, 128, 1), n_classes: int = 5, seed: int = 0, dtype=np.float32):
        """Fan-in scaled uniform weights (limit ``sqrt(6 / fan_in)``), zero biases."""
        h, w, c = input_shape
        if h % 4 or w % 4:
            raise ShapeError(f"input height and width must be divisible by 4, got {h}x{w}")
        rng = np.random.default_rng(seed)
        params = []
        cin = c
        for cout in CONV_CHANNELS:
            fan_in = 9 * cin
            lim = np.sqrt(6.0 / fan_in)
            params.append(rng.uniform(-lim, lim, size=(3, 3, cin, cout)).astype(dtype))
            params.append(np.zeros(cout, dtype=dtype))
            cin = cout
        fan_in = (h // 4) * (w // 4) * CONV_CHANNELS[-1]
        lim = np.sqrt(6.0 / fan_in)
        params.append(rng.uniform(-lim, lim, size=(fan_in, n_classes)).astype(dtype))
        params.append(np.zeros(n_classes, dtype=dtype))
        return cls(params=params, input_shape=tuple(input_shape), n_classes=n_classes)

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params))

    def astype(self, dtype) -> "CnnModel":
        return CnnModel([p.astype(dtype) for p in self.params], self.input_shape, self.n_classes,
                        self.activation, dict(self.metadata))

    def copy(self) -> "CnnModel":
        return self.astype(self.params[0].dtype)

    def predict(self, X, batch_size: int = 128) -> np.ndarray:
        return np.argmax(predict_logits(self, X, batch_size), axis=1)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"input_shape": list(self.input_shape), "n_classes": self.n_classes,
                "activation": self.activation, **self.metadata, **(extra or {})}
        modelfile.save(path, "cnn", self.params, meta)

    @classmethod
    def load(cls, path, dtype=np.float32) -> "CnnModel":
        kind, arrays, meta = modelfile.load(path)
        if kind != "cnn":
            raise InvalidInput(f"{path} holds a {kind} model, not a CNN")
        known = {"input_shape", "n_classes", "activation"}
        return cls([a.astype(dtype) for a in arrays], tuple(meta["input_shape"]), meta["n_classes"],
                   meta["activation"], {k: v for k, v in meta.items() if k not in known})


def param_count(input_shape=(128, 128, 3), n_classes: int = 5) -> int:
    """Closed-form parameter count of the architecture."""
    h, w, c = input_shape
    total, cin = 0, c
    for cout in CONV_CHANNELS:
        total += 9 * cin * cout + cout
        cin = cout
    return total + (h // 4) * (w // 4) * cin * n_classes + n_classes


# -- layers -------------------------------------------------------------------


def conv_forward(x, w, b):
    """3x3 same convolution (cross-correlation) via im2col; returns (out, cols)."""
    n, h, wd, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(xp, (3, 3), axis=(1, 2)).reshape(n * h * wd, c * 9)
    # sliding_window_view orders each patch as (c, ky, kx)
    wmat = w.transpose(2, 0, 1, 3).reshape(c * 9, -1)
    out = (cols @ wmat).reshape(n, h, wd, -1) + b
    return out, cols


def conv_backward(dout, cols, x_shape, w, need_dx: bool = True):
    n, h, wd, c = x_shape
    cout = w.shape[-1]
    g = dout.reshape(-1, cout)
    dw = (cols.T @ g).reshape(c, 3, 3, cout).transpose(1, 2, 0, 3)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dw, db
    # transposed convolution as nine shifted matmuls
    dxp = np.zeros((n, h + 2, wd + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + wd, :] += (g @ w[i, j].T).reshape(n, h, wd, c)
    return dxp[:, 1:-1, 1:-1, :], dw, db


def avgpool_forward(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool_backward(dout):
    return np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2) * 0.25


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(dout, x):
    return dout * (x > 0)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return float(loss), d / n


# -- network ------------------------------------------------------------------


def _check_input(model: CnnModel, X) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.shape[1:] != tuple(model.input_shape):
        raise ShapeError(f"model expects inputs of shape {model.input_shape}, got {X.shape[1:]}")
    return X.astype(model.params[0].dtype, copy=False)


def forward(model: CnnModel, X, keep_cache: bool = False):
    X = _check_input(model, X)
    p = model.params
    cache = []
    a = X
    for layer in range(4):
        z, cols = conv_forward(a, p[2 * layer], p[2 * layer + 1])
        out = relu_forward(z)
        cache.append((a.shape, cols, z))
        if POOL_AFTER[layer]:
            out = avgpool_forward(out)
        a = out
    flat = a.reshape(a.shape[0], -1)
    logits = flat @ p[8] + p[9]
    if keep_cache:
        return logits, (cache, flat, a.shape)
    return logits


def predict_logits(model: CnnModel, X, batch_size: int = 128) -> np.ndarray:
    X = np.asarray(X)
    out = [forward(model, X[s : s + batch_size]) for s in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.n_classes))


def loss_and_grads(model: CnnModel, X, labels):
    """Mean softmax cross-entropy and exact gradients, ordered like ``model.params``."""
    labels = np.asarray(labels).astype(np.int64)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.n_classes:
        raise InvalidInput(f"labels must lie in 0..{model.n_classes - 1}")
    p = model.params
    logits, (cache, flat, last_shape) = forward(model, X, keep_cache=True)
    loss, dlogits = softmax_cross_entropy(logits, labels)
    dlogits = dlogits.astype(flat.dtype)
    grads: list = [None] * len(p)
    grads[8] = flat.T @ dlogits
    grads[9] = dlogits.sum(axis=0)
    da = (dlogits @ p[8].T).reshape(last_shape)
    for layer in reversed(range(4)):
        x_shape, cols, z = cache[layer]
        if POOL_AFTER[layer]:
            da = avgpool_backward(da)
        dz = relu_backward(da, z)
        da, grads[2 * layer], grads[2 * layer + 1] = conv_backward(dz, cols, x_shape, p[2 * layer],
                                                                    need_dx=layer > 0)
    return loss, grads


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    model: CnnModel
    history: list[dict]
    best_step: int
    best_val_acc: float
    seconds: float

    def steps_to(self, accuracy: float) -> int | None:
        return steps_to_accuracy(self.history, accuracy)

    def write_history_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "train_loss", "val_acc"])
            for row in self.history:
                writer.writerow([row["step"], repr(row["train_loss"]), repr(row["val_acc"])])


def steps_to_accuracy(history, accuracy: float) -> int | None:
    """First logged gradient step whose validation accuracy reaches ``accuracy``."""
    for row in history:
        if row["val_acc"] >= accuracy:
            return row["step"]
    return None


def accuracy(model: CnnModel, X, y, batch_size: int = 128) -> float:
    return float(np.mean(model.predict(X, batch_size) == np.asarray(y)))


def train(model: CnnModel, X, y, X_val, y_val, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Mini-batch Adam on softmax cross-entropy with early stopping.

    Validation accuracy is measured every ``cfg.eval_every`` steps (once per
    epoch when 0). Training stops after ``cfg.early_stop_patience`` checks
    without improvement, after ``cfg.max_steps`` steps, or once
    ``cfg.target_accuracy`` is reached; the best checkpoint is restored.
    """
    t0 = time.perf_counter()
    X = _check_input(model, X)
    X_val = _check_input(model, X_val)
    y = np.asarray(y).astype(np.int64)
    y_val = np.asarray(y_val).astype(np.int64)
    n = X.shape[0]
    steps_per_epoch = -(-n // cfg.batch_size)
    eval_every = cfg.eval_every or steps_per_epoch
    opt = Adam(model.params, cfg)
    rng = np.random.default_rng(cfg.rng_seed)
    history: list[dict] = []
    best_acc, best_step, best_params = -1.0, 0, [q.copy() for q in model.params]
    stale, step, running, running_n = 0, 0, 0.0, 0
    done = False
    for _ in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start : start + cfg.batch_size])
            loss, grads = loss_and_grads(model, X[idx], y[idx])
            opt.step(grads)
            step += 1
            running += loss
            running_n += 1
            if step % eval_every == 0 or (cfg.max_steps is not None and step >= cfg.max_steps):
                val_acc = accuracy(model, X_val, y_val)
                history.append({"step": step, "train_loss": running / running_n, "val_acc": val_acc})
                log.info("step %d loss %.4f val_acc %.4f", step, running / running_n, val_acc)
                running, running_n = 0.0, 0
                if val_acc > best_acc:
                    best_acc, best_step, best_params, stale = val_acc, step, [q.copy() for q in model.params], 0
                else:
                    stale += 1
                if (stale >= cfg.early_stop_patience
                        or (cfg.target_accuracy is not None and val_acc >= cfg.target_accuracy)
                        or (cfg.max_steps is not None and step >= cfg.max_steps)):
                    done = True
                    break
        if done:
            break
    if not history:
        val_acc = accuracy(model, X_val, y_val)
        history.append({"step": step, "train_loss": running / max(running_n, 1), "val_acc": val_acc})
        best_acc, best_step, best_params = val_acc, step, [q.copy() for q in model.params]
    for q, b in zip(model.params, best_params):
        q[...] = b
    return TrainResult(model, history, best_step, best_acc, time.perf_counter() - t0)
