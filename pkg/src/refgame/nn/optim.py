"""Adam optimizer with bias correction.

Defaults follow the training setup used throughout: lr 0.001, beta1 0.7,
beta2 0.999, eps 1e-8.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeMismatch
from .autograd import Tensor


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.7
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict[str, np.ndarray] = field(default_factory=dict)
    _v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        """Apply one update from each parameter's accumulated gradient."""
        self.step_count += 1
        t = self.step_count
        for name, p in params.items():
            grad = p.grad
            if grad is None:
                continue
            if grad.shape != p.data.shape:
                raise ShapeMismatch(f"{name}: grad {grad.shape} vs param {p.data.shape}")
            if not np.all(np.isfinite(grad)):
                raise NonFiniteGradient(f"non-finite gradient for {name}")
            if name not in self._m:
                self._m[name] = np.zeros_like(p.data, dtype=np.float64)
                self._v[name] = np.zeros_like(p.data, dtype=np.float64)
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * np.square(grad)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self, params: dict[str, Tensor]) -> None:
        for p in params.values():
            p.zero_grad()
