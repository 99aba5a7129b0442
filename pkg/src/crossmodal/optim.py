"""First-order parameter updates: plain SGD and bias-corrected Adam."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor


class SGD:
    """p <- p - lr * g."""

    kind = "sgd"

    def __init__(self, params: list[Tensor], lr: float):
        if lr < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.step_count = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError("optimizer step with missing gradient")
            p.data -= self.lr * p.grad
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    kind = "adam"

    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                raise ContractError("optimizer step with missing gradient")
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i in range(len(self.params)):
            out[f"m.{i}"] = self.m[i]
            out[f"v.{i}"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            m, v = arrays[f"m.{i}"], arrays[f"v.{i}"]
            if m.shape != p.data.shape or v.shape != p.data.shape:
                raise ContractError(
                    f"optimizer state shape {m.shape} does not match parameter {p.data.shape}")
            self.m[i] = m.copy()
            self.v[i] = v.copy()


def make_optimizer(kind: str, params: list[Tensor], lr: float):
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ConfigError(f"unknown optimizer kind {kind!r} (expected 'sgd' or 'adam')")
