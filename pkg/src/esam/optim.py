"""Gradient-descent parameter updates: plain SGD and bias-corrected Adam."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import DimensionError
from .tensor import Tensor


def _check(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for k, g in grads.items():
        if k not in params:
            raise DimensionError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise DimensionError(f"{k}: gradient shape {np.shape(g)} != parameter shape {np.shape(params[k])}")


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    _check(params, grads)
    return {k: p - lr * grads[k] if k in grads else p for k, p in params.items()}


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t), "hyper": np.array([self.lr, self.beta1, self.beta2, self.eps])}
        out.update({f"m/{k}": a for k, a in self.m.items()})
        out.update({f"v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "AdamState":
        lr, b1, b2, eps = (float(x) for x in arrays["hyper"])
        st = cls(lr, b1, b2, eps, int(arrays["t"]))
        st.m = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("m/")}
        st.v = {k[2:]: np.array(a) for k, a in arrays.items() if k.startswith("v/")}
        return st


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState) -> dict[str, np.ndarray]:
    """One Adam update.  ``state`` is advanced in place; new parameter arrays are returned."""
    _check(params, grads)
    for k, g in grads.items():
        if k in state.m and state.m[k].shape != np.shape(g):
            raise DimensionError(f"{k}: optimizer state shape {state.m[k].shape} != gradient shape {np.shape(g)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    out = dict(params)
    for k, g in grads.items():
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = params[k] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return dict(grads)
    return {k: g * (max_norm / total) for k, g in grads.items()}


class Optimizer:
    """Applies an update rule to the ``grad`` slots of named parameter tensors."""

    def __init__(self, params: Mapping[str, Tensor], clip_norm: float | None = None):
        self.params = dict(params)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _grads(self) -> dict[str, np.ndarray]:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if self.clip_norm is not None:
            grads = clip_grad_norm(grads, self.clip_norm)
        return grads

    def _apply(self, new: Mapping[str, np.ndarray]) -> None:
        for k, arr in new.items():
            self.params[k].values = arr

    def step(self) -> None:
        raise NotImplementedError

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        pass


class SGD(Optimizer):
    def __init__(self, params, lr: float = 1e-2, clip_norm: float | None = None):
        super().__init__(params, clip_norm)
        self.lr = lr

    def step(self) -> None:
        grads = self._grads()
        values = {k: self.params[k].values for k in grads}
        self._apply(sgd_step(values, grads, self.lr))


class Adam(Optimizer):
    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, clip_norm: float | None = None):
        super().__init__(params, clip_norm)
        self.state = AdamState(lr, beta1, beta2, eps)

    def step(self) -> None:
        grads = self._grads()
        values = {k: self.params[k].values for k in grads}
        self._apply(adam_step(values, grads, self.state))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self.state.to_arrays()

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.state = AdamState.from_arrays(arrays)
