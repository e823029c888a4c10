"""Linear and instance-based classifiers: l1/l2 logistic regression, linear
SVM, kNN and PCA ("Eigenfaces") + SVM, plus their grid searches."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import modelfile
from .errors import DegenerateLabels, InvalidInput, ShapeError
from .optim import Adam, TrainConfig

log = logging.getLogger(__name__)

LAMBDA_GRID = (1e-1, 1e-2, 1e-3, 1e-4)
SVM_C_GRID = (1e-4, 1e-3, 1e-2, 1e-1)
PCA_THRESHOLDS = (0.25, 0.5, 0.95)
KNN_GRID = (1,) + tuple(2**k + 1 for k in range(1, 11))


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"features {X.shape} do not match {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise InvalidInput("need at least two samples")
    if not np.all(np.isfinite(X)):
        raise InvalidInput("features contain non-finite values")
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("training labels contain a single class")
    if y.min() < 0:
        raise InvalidInput("labels must be non-negative integers")
    return X, y


@dataclass
class LinearModel:
    weights: np.ndarray  # (D,) for binary logistic, (D, K) otherwise
    bias: np.ndarray
    reg_kind: str = "L2"
    reg_lambda: float = 0.0
    feature_kind: str = "dct"
    model_kind: str = "logistic"
    n_classes: int = 2
    feature_shape: tuple[int, int] | None = None
    history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.weights.shape[0]:
            raise ShapeError(f"model expects {self.weights.shape[0]} features, got {X.shape[-1]}")
        return X @ self.weights + self.bias

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        if scores.ndim == 1:
            return (scores > 0).astype(np.int64)
        return np.argmax(scores, axis=1)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {
            "model_kind": self.model_kind,
            "reg_kind": self.reg_kind,
            "reg_lambda": self.reg_lambda,
            "feature_kind": self.feature_kind,
            "n_classes": self.n_classes,
            "feature_shape": list(self.feature_shape) if self.feature_shape else None,
            **self.metadata,
            **(extra or {}),
        }
        modelfile.save(path, self.model_kind, [self.weights, np.atleast_1d(self.bias)], meta)

    @classmethod
    def load(cls, path) -> "LinearModel":
        kind, arrays, meta = modelfile.load(path)
        if kind not in ("logistic", "svm"):
            raise InvalidInput(f"{path} holds a {kind} model, not a linear one")
        weights, bias = arrays
        if weights.ndim == 1:
            bias = bias.reshape(())
        known = {"reg_kind", "reg_lambda", "feature_kind", "n_classes", "feature_shape", "model_kind"}
        shape = meta.get("feature_shape")
        return cls(
            weights=weights, bias=bias, reg_kind=meta["reg_kind"], reg_lambda=meta["reg_lambda"],
            feature_kind=meta["feature_kind"], model_kind=kind, n_classes=meta["n_classes"],
            feature_shape=tuple(shape) if shape else None,
            metadata={k: v for k, v in meta.items() if k not in known},
        )


# -- logistic regression ----------------------------------------------------


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss_grad(w, b, X, y, reg: str = "L2", lam: float = 0.0):
    """Mean cross-entropy (+ ``lam * sum(w**2)`` for L2) and its gradient.

    Binary models take ``w`` of shape (D,) and a scalar ``b``; multinomial
    models take (D, K) and (K,). The l1 term is not included: it is handled
    by the proximal step of the optimizer.
    """
    n = X.shape[0]
    z = X @ w + b
    if w.ndim == 1:
        # log(1 + exp(z)) - y z, computed stably
        loss = np.mean(np.logaddexp(0.0, z) - y * z)
        r = (_sigmoid(z) - y) / n
    else:
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        loss = -np.mean(logp[np.arange(n), y])
        r = np.exp(logp)
        r[np.arange(n), y] -= 1.0
        r /= n
    gw = X.T @ r
    gb = r.sum(axis=0)
    if reg == "L2" and lam:
        loss += lam * np.sum(w * w)
        gw = gw + 2.0 * lam * w
    elif reg == "L1" and lam:
        loss += lam * np.sum(np.abs(w))
    return float(loss), gw, gb


def _accuracy(model, X, y) -> float:
    return float(np.mean(model.predict(X) == y))


def _fit_adam(model: LinearModel, loss_grad, X, y, cfg: TrainConfig, l1: float, X_val, y_val):
    """Mini-batch Adam with validation-based early stopping (best snapshot restored)."""
    params = [model.weights, model.bias]
    opt = Adam(params, cfg, l1={0: l1} if l1 else None)
    rng = np.random.default_rng(cfg.rng_seed)
    n = X.shape[0]
    has_val = X_val is not None and len(X_val) > 0
    best_key, best = None, None
    stale = 0
    history = []
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, gw, gb = loss_grad(model.weights, model.bias, X[idx], y[idx])
            opt.step([gw, gb])
        train_loss = loss_grad(model.weights, model.bias, X, y)[0]
        if has_val:
            val_loss = loss_grad(model.weights, model.bias, X_val, y_val)[0]
            val_acc = _accuracy(model, X_val, y_val)
            key = (val_acc, -val_loss)
        else:
            val_acc = None
            key = (0.0, -train_loss)
        history.append({"epoch": epoch + 1, "train_loss": train_loss, "val_acc": val_acc})
        if best_key is None or key > best_key:
            best_key, best, stale = key, (model.weights.copy(), model.bias.copy()), 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                break
    model.weights[...], model.bias[...] = best
    model.history = history
    return model


def train_logistic(X, y, reg: str = "L2", lam: float = 1e-3, cfg: TrainConfig = TrainConfig(),
                   X_val=None, y_val=None, feature_kind: str = "dct", feature_shape=None) -> LinearModel:
    """Cross-entropy logistic regression with an l2 ("ridge") or l1 (LASSO) penalty.

    Two classes use a single sigmoid output; more use softmax. Weights start
    at zero, so runs are deterministic given ``cfg.rng_seed`` (batch order).
    """
    reg = reg.upper()
    if reg not in ("L1", "L2"):
        raise InvalidInput(f"reg must be L1 or L2, got {reg!r}")
    if lam < 0:
        raise InvalidInput(f"lambda must be non-negative, got {lam}")
    X, y = _check_xy(X, y)
    k = int(y.max()) + 1
    binary = k == 2
    w = np.zeros(X.shape[1]) if binary else np.zeros((X.shape[1], k))
    b = np.zeros(()) if binary else np.zeros(k)
    model = LinearModel(weights=w, bias=b, reg_kind=reg, reg_lambda=lam, feature_kind=feature_kind,
                        model_kind="logistic", n_classes=k, feature_shape=feature_shape)

    def loss_grad(w, b, Xb, yb):
        return logistic_loss_grad(w, b, Xb, yb, reg, lam)

    if X_val is not None:
        X_val = np.asarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val).astype(np.int64)
    model = _fit_adam(model, loss_grad, X, y, cfg, lam if reg == "L1" else 0.0, X_val, y_val)
    model.metadata["seed"] = cfg.rng_seed
    return model


def grid_search_lambda(train, val, grid=LAMBDA_GRID, reg: str = "L2", cfg: TrainConfig = TrainConfig(), **kw):
    """Fit one model per lambda and keep the best validation accuracy.

    Returns ``(best_lambda, best_model, {lambda: val_accuracy})``; ties go to
    the larger lambda.
    """
    grid = sorted({float(g) for g in grid}, reverse=True)
    if not grid:
        raise InvalidInput("empty lambda grid")
    X_tr, y_tr = train
    X_va, y_va = val
    scores, best = {}, None
    for lam in grid:
        model = train_logistic(X_tr, y_tr, reg, lam, cfg, X_va, y_va, **kw)
        scores[lam] = _accuracy(model, np.asarray(X_va, dtype=np.float64), np.asarray(y_va))
        log.info("%s lambda=%g val_acc=%.4f", reg, lam, scores[lam])
        if best is None or scores[lam] > scores[best[0]]:
            best = (lam, model)
    best[1].metadata["lambda_scores"] = {repr(k): v for k, v in scores.items()}
    return best[0], best[1], scores


# -- linear SVM -----------------------------------------------------------------


def hinge_loss_grad(w, b, X, t, reg_scale: float):
    """One-vs-rest hinge loss ``mean(max(0, 1 - t f)) + |w|^2 / (2 reg_scale)``.

    ``t`` holds +/-1 targets of shape (n, K).
    """
    n = X.shape[0]
    margin = t * (X @ w + b)
    active = (margin < 1.0).astype(np.float64)
    loss = np.sum(np.maximum(0.0, 1.0 - margin)) / n + np.sum(w * w) / (2.0 * reg_scale)
    r = -(active * t) / n
    gw = X.T @ r + w / reg_scale
    gb = r.sum(axis=0)
    return float(loss), gw, gb


def train_linear_svm(X, y, C: float = 1e-2, cfg: TrainConfig = TrainConfig(), X_val=None, y_val=None,
                     feature_kind: str = "dct") -> LinearModel:
    """One-vs-rest linear SVM trained with Adam on the (sub)gradient of the hinge objective.

    The objective is ``C * sum(hinge) + |w|^2 / 2``, divided by ``C * n`` so the
    data term is a mean.
    """
    if not C > 0:
        raise InvalidInput(f"C must be positive, got {C}")
    X, y = _check_xy(X, y)
    n = X.shape[0]
    k = int(y.max()) + 1
    cols = 1 if k == 2 else k

    def targets(labels):
        if cols == 1:
            return np.where(labels == 1, 1.0, -1.0)[:, None]
        t = -np.ones((len(labels), k))
        t[np.arange(len(labels)), labels] = 1.0
        return t

    model = LinearModel(weights=np.zeros((X.shape[1], cols)), bias=np.zeros(cols), reg_kind="L2",
                        reg_lambda=1.0 / (2.0 * C * n), feature_kind=feature_kind, model_kind="svm",
                        n_classes=k)
    model.metadata["C"] = C

    def loss_grad(w, b, Xb, yb):
        # regularizer scaled per batch so each mini-batch estimates the full objective
        return hinge_loss_grad(w, b, Xb, targets(yb), C * n)

    if X_val is not None:
        X_val = np.asarray(X_val, dtype=np.float64)
        y_val = np.asarray(y_val).astype(np.int64)
    model = _fit_adam(model, loss_grad, X, y, cfg, 0.0, X_val, y_val)
    if cols == 1:
        model.weights = model.weights[:, 0]
        model.bias = model.bias.reshape(())
    return model


# -- evaluation ---------------------------------------------------------------


def evaluate(model, X, y, n_classes: int | None = None) -> dict:
    """Accuracy, per-class accuracy and confusion matrix (rows = true class)."""
    y = np.asarray(y).astype(np.int64)
    pred = np.asarray(model.predict(X) if hasattr(model, "predict") else model).astype(np.int64)
    if pred.shape != y.shape:
        raise ShapeError(f"{pred.shape[0]} predictions for {y.shape[0]} labels")
    k = n_classes or getattr(model, "n_classes", None) or int(max(y.max(), pred.max())) + 1
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    per_class = [float(confusion[c, c] / confusion[c].sum()) if confusion[c].sum() else None for c in range(k)]
    return {
        "accuracy": float(np.mean(pred == y)) if len(y) else 0.0,
        "per_class_accuracy": per_class,
        "confusion": confusion.tolist(),
    }


# -- k nearest neighbours ------------------------------------------------------


def _sq_distances(A, B, chunk: int = 512) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    bb = np.einsum("ij,ij->i", B, B)
    out = np.empty((A.shape[0], B.shape[0]))
    for s in range(0, A.shape[0], chunk):
        a = A[s : s + chunk]
        d = np.einsum("ij,ij->i", a, a)[:, None] + bb[None, :] - 2.0 * a @ B.T
        out[s : s + chunk] = np.maximum(d, 0.0)
    return out


def _vote(neighbor_labels, neighbor_dists, n_classes: int) -> np.ndarray:
    """Majority vote per row; ties go to the label with the smallest summed distance."""
    q = neighbor_labels.shape[0]
    counts = np.zeros((q, n_classes))
    dsum = np.zeros((q, n_classes))
    rows = np.repeat(np.arange(q), neighbor_labels.shape[1])
    np.add.at(counts, (rows, neighbor_labels.ravel()), 1)
    np.add.at(dsum, (rows, neighbor_labels.ravel()), neighbor_dists.ravel())
    dsum[counts == 0] = np.inf
    best = counts.max(axis=1, keepdims=True)
    dsum[counts < best] = np.inf
    return np.argmin(dsum, axis=1)


def _neighbors(train_X, query_X, k_max: int):
    d2 = _sq_distances(query_X, train_X)
    order = np.argsort(d2, axis=1, kind="stable")[:, :k_max]
    return order, np.sqrt(np.take_along_axis(d2, order, axis=1))


def knn_classify(train_X, train_y, query_X, k: int) -> np.ndarray:
    """Euclidean k-nearest-neighbour majority vote."""
    train_y = np.asarray(train_y).astype(np.int64)
    if not 1 <= k <= len(train_y):
        raise InvalidInput(f"k={k} must be between 1 and the training size {len(train_y)}")
    order, dist = _neighbors(train_X, query_X, k)
    return _vote(train_y[order], dist, int(train_y.max()) + 1)


@dataclass
class KnnModel:
    train_X: np.ndarray
    train_y: np.ndarray
    k: int
    n_classes: int

    def predict(self, X) -> np.ndarray:
        return knn_classify(self.train_X, self.train_y, X, self.k)

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"k": self.k, "n_classes": self.n_classes, **(extra or {})}
        modelfile.save(path, "knn", [self.train_X, self.train_y.astype(np.float64)], meta)

    @classmethod
    def load(cls, path) -> "KnnModel":
        kind, (X, y), meta = modelfile.load(path)
        if kind != "knn":
            raise InvalidInput(f"{path} holds a {kind} model, not kNN")
        return cls(X, y.astype(np.int64), int(meta["k"]), int(meta["n_classes"]))


def grid_search_knn(train, val, grid=KNN_GRID):
    """Pick ``k`` by validation accuracy (ties go to the smaller k); neighbours are sorted once."""
    X_tr, y_tr = train
    X_va, y_va = val
    y_tr = np.asarray(y_tr).astype(np.int64)
    y_va = np.asarray(y_va).astype(np.int64)
    grid = sorted({int(k) for k in grid if 1 <= k <= len(y_tr)})
    if not grid:
        raise InvalidInput("no admissible k in grid")
    order, dist = _neighbors(X_tr, X_va, grid[-1])
    n_classes = int(max(y_tr.max(), y_va.max())) + 1
    scores = {}
    for k in grid:
        pred = _vote(y_tr[order[:, :k]], dist[:, :k], n_classes)
        scores[k] = float(np.mean(pred == y_va))
    best_k = max(grid, key=lambda k: (scores[k], -k))
    return best_k, KnnModel(np.asarray(X_tr, dtype=np.float64), y_tr, best_k, n_classes), scores


# -- PCA / Eigenfaces -------------------------------------------------------------


@dataclass
class PcaBasis:
    components: np.ndarray  # (D, M), orthonormal columns
    mean: np.ndarray  # (D,)
    variance_threshold: float
    explained_variance_ratio: np.ndarray  # (M,)

    @property
    def retained(self) -> float:
        return float(self.explained_variance_ratio.sum())


def pca_fit(X, variance_threshold: float = 0.95) -> PcaBasis:
    """Principal components whose cumulative explained variance first reaches the threshold.

    Uses the eigendecomposition of the covariance when ``D <= n`` and of the
    Gram matrix ``Xc Xc^T`` otherwise; both are exact.
    """
    if not 0 < variance_threshold <= 1:
        raise InvalidInput(f"variance threshold must be in (0, 1], got {variance_threshold}")
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise InvalidInput("PCA needs at least two samples")
    mean = X.mean(axis=0)
    Xc = X - mean
    if d <= n:
        evals, evecs = np.linalg.eigh(Xc.T @ Xc)
        evals, evecs = evals[::-1], evecs[:, ::-1]
    else:
        evals, u = np.linalg.eigh(Xc @ Xc.T)
        evals, u = evals[::-1], u[:, ::-1]
        keep = evals > evals[0] * 1e-12
        evals, u = evals[keep], u[:, keep]
        evecs = Xc.T @ u / np.sqrt(evals)
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 0:
        raise InvalidInput("data has zero variance")
    rank = int(np.sum(evals > evals[0] * 1e-12))
    ratio = evals[:rank] / total
    m = int(np.searchsorted(np.cumsum(ratio), variance_threshold - 1e-12) + 1)
    m = min(m, rank)
    comps = evecs[:, :m]
    # deterministic sign: largest-magnitude entry of each component positive
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(m)])
    comps = comps * np.where(flip == 0, 1.0, flip)
    return PcaBasis(components=comps, mean=mean, variance_threshold=variance_threshold,
                    explained_variance_ratio=ratio[:m])


def pca_project(basis: PcaBasis, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != basis.mean.shape[0]:
        raise ShapeError(f"basis expects {basis.mean.shape[0]} features, got {X.shape[-1]}")
    return (X - basis.mean) @ basis.components


def pca_reconstruct(basis: PcaBasis, Z) -> np.ndarray:
    return np.asarray(Z) @ basis.components.T + basis.mean


@dataclass
class EigenfacesModel:
    basis: PcaBasis
    svm: LinearModel

    @property
    def n_classes(self) -> int:
        return self.svm.n_classes

    def predict(self, X) -> np.ndarray:
        return self.svm.predict(pca_project(self.basis, X))

    def save(self, path, extra: dict | None = None) -> None:
        b, s = self.basis, self.svm
        meta = {"variance_threshold": b.variance_threshold, "C": s.metadata.get("C"), "n_classes": s.n_classes,
                "feature_kind": s.feature_kind, **(extra or {})}
        arrays = [b.components, b.mean, b.explained_variance_ratio, s.weights, np.atleast_1d(s.bias)]
        modelfile.save(path, "eigenfaces", arrays, meta)

    @classmethod
    def load(cls, path) -> "EigenfacesModel":
        kind, arrays, meta = modelfile.load(path)
        if kind != "eigenfaces":
            raise InvalidInput(f"{path} holds a {kind} model, not Eigenfaces")
        comps, mean, ratio, w, b = arrays
        if w.ndim == 1:
            b = b.reshape(())
        svm = LinearModel(weights=w, bias=b, reg_kind="L2", reg_lambda=0.0, feature_kind=meta["feature_kind"],
                          model_kind="svm", n_classes=meta["n_classes"], metadata={"C": meta["C"]})
        return cls(PcaBasis(comps, mean, meta["variance_threshold"], ratio), svm)


def load_model(path):
    """Load any linear, kNN or Eigenfaces model file."""
    kind, _, _ = modelfile.load(path)
    if kind == "knn":
        return KnnModel.load(path)
    if kind == "eigenfaces":
        return EigenfacesModel.load(path)
    if kind in ("logistic", "svm"):
        return LinearModel.load(path)
    raise InvalidInput(f"{path} holds a {kind} model")


def grid_search_eigenfaces(train, val, thresholds=PCA_THRESHOLDS, Cs=SVM_C_GRID, cfg: TrainConfig = TrainConfig(),
                           feature_kind: str = "dct"):
    """Joint search over the PCA variance threshold and the SVM ``C`` on validation accuracy."""
    X_tr, y_tr = train
    X_va, y_va = val
    y_va = np.asarray(y_va).astype(np.int64)
    full = pca_fit(X_tr, max(thresholds))
    scores, best = {}, None
    for v in sorted(thresholds):
        m = int(np.searchsorted(np.cumsum(full.explained_variance_ratio), v - 1e-12) + 1)
        m = min(m, full.components.shape[1])
        basis = replace(full, components=full.components[:, :m], variance_threshold=v,
                        explained_variance_ratio=full.explained_variance_ratio[:m])
        Z_tr, Z_va = pca_project(basis, X_tr), pca_project(basis, X_va)
        for C in sorted(Cs):
            svm = train_linear_svm(Z_tr, y_tr, C, cfg, Z_va, y_va, feature_kind=feature_kind)
            acc = float(np.mean(svm.predict(Z_va) == y_va))
            scores[(v, C)] = acc
            if best is None or acc > scores[best[0]]:
                best = ((v, C), EigenfacesModel(basis, svm))
    return best[0], best[1], scores
