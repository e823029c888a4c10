"""Adam with an optional proximal l1 step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    rng_seed: int = 0
    eval_every: int = 0  # gradient steps between validation checks; 0 = once per epoch
    target_accuracy: float | None = None  # stop as soon as validation accuracy reaches this
    max_steps: int | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise InvalidInput(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InvalidInput(f"batch_size must be >= 1, got {self.batch_size}")


class Adam:
    """Adam over a fixed list of parameter arrays, updated in place.

    ``l1`` maps parameter index to a penalty weight; after each update those
    parameters are soft-thresholded in Adam's per-coordinate metric, i.e. by
    ``lr * l1 / (sqrt(v_hat) + eps)``, which leaves a coordinate at zero
    exactly when its averaged gradient magnitude stays below ``l1``.
    """

    def __init__(self, params, cfg: TrainConfig, l1: dict[int, float] | None = None):
        self.params = params
        self.cfg = cfg
        self.l1 = l1 or {}
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1**self.t
        c2 = 1.0 - cfg.beta2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            m, v = self.m[i], self.v[i]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            scale = cfg.learning_rate / (np.sqrt(v / c2) + cfg.eps)
            p -= scale * (m / c1)
            lam = self.l1.get(i)
            if lam:
                np.copyto(p, np.sign(p) * np.maximum(np.abs(p) - scale * lam, 0.0))

    def state(self):
        return {"m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v], "t": self.t}
