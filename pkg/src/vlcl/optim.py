"""AdamW with decoupled weight decay and a cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractViolation
from .tensor import Tensor


@dataclass
class OptimConfig:
    lr: float = 1.25e-3          # base learning rate (cosine starts here)
    weight_decay: float = 0.05   # decoupled, applied as lr_t * wd * theta
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_steps: int = 0      # cosine horizon in steps; 0 keeps lr constant

    def validate(self) -> None:
        if self.lr <= 0:
            raise ContractViolation("lr must be positive")
        if not (0 <= self.weight_decay):
            raise ContractViolation("weight_decay must be non-negative")
        if self.schedule_steps < 0:
            raise ContractViolation("schedule_steps must be >= 0")


def cosine_lr(base_lr: float, t: int, horizon: int) -> float:
    """base_lr * 0.5 * (1 + cos(pi * t / horizon)); t past the horizon gives 0."""
    if horizon <= 0:
        return base_lr
    t = min(t, horizon)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / horizon))


class AdamW:
    """Steps only the tensors handed to it; everything else is untouched."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig):
        cfg.validate()
        params = list(params)
        if not params:
            raise ContractViolation("optimizer needs at least one parameter")
        for p in params:
            if not p.requires_grad:
                raise ContractViolation("optimizer was given a frozen parameter")
        if len({id(p) for p in params}) != len(params):
            raise ContractViolation("duplicate parameter passed to optimizer")
        self.params = params
        self.cfg = cfg
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in params]
        self._v = [np.zeros_like(p.data) for p in params]

    def current_lr(self) -> float:
        return cosine_lr(self.cfg.lr, self.t, self.cfg.schedule_steps)

    def step(self) -> None:
        lr = self.current_lr()
        b1, b2, eps, wd = self.cfg.beta1, self.cfg.beta2, self.cfg.eps, self.cfg.weight_decay
        t1 = self.t + 1
        bc1 = 1.0 - b1 ** t1
        bc2 = 1.0 - b2 ** t1
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractViolation("parameter has no gradient; call backward first")
            g = p.grad
            m = self._m[i]
            v = self._v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + eps)
            if wd:
                update = update + wd * p.data
            p.data -= lr * update
        self.t = t1

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"step": np.asarray([self.t], dtype=np.int64)}
        for i in range(len(self.params)):
            out[f"m{i}"] = self._m[i]
            out[f"v{i}"] = self._v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["step"][0])
        for i in range(len(self.params)):
            self._m[i] = arrays[f"m{i}"].copy()
            self._v[i] = arrays[f"v{i}"].copy()
