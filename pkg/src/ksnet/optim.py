"""Gradient-descent optimizers over named parameter sets."""

from typing import Dict, Iterable, Tuple

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam with bias correction; first and second moments persist per parameter."""

    def __init__(self, params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params}
        self.v: Dict[str, np.ndarray] = {
            name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            mhat = m / b1t
            vhat = v / b2t
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(np.float32)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, tensors: Dict[str, np.ndarray], t: int) -> None:
        self.t = int(t)
        for name in self.m:
            self.m[name] = tensors[f"opt.m.{name}"].copy()
            self.v[name] = tensors[f"opt.v.{name}"].copy()


class SGD:
    """Plain stochastic gradient descent, no momentum."""

    def __init__(self, params: Iterable[Tuple[str, Tensor]], lr: float = 1e-3):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self) -> None:
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
            p.data -= (self.lr * p.grad).astype(np.float32)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        return {}

    def load_state(self, tensors, t: int) -> None:
        self.t = int(t)


def make_optimizer(kind: str, params, lr: float):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ContractError(f"unknown optimizer {kind!r}")
