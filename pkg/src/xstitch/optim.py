"""Adam with bias correction over a ParamStore."""

from __future__ import annotations

import numpy as np

from .tensor import ParamStore


class MissingGradient(KeyError):
    pass


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8 by default).

    Moments and the bias-correction step count are kept per parameter, so a
    tensor that starts training late (e.g. after a freeze) gets a properly
    corrected first update.  ``t`` counts calls to :meth:`step`.
    """

    def __init__(self, lr: float = 1e-5, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}

    def step(self, params: ParamStore) -> None:
        self.t += 1
        for name, p in params.items():
            if not p.trainable:
                continue
            g = p.grad
            if g is None:
                raise MissingGradient(f"no gradient for parameter {name!r}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)
                self.steps[name] = 0
            self.steps[name] += 1
            k = self.steps[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** k)
            v_hat = v / (1.0 - self.beta2 ** k)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        params.zero_grad()

    def state_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "t": self.t, "steps": dict(self.steps)}
