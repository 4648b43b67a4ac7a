"""Finite-difference verification of reverse-mode gradients.

The check perturbs every parameter element by +-eps (central differences) in
double precision and compares against the tape's gradients. Relative error
uses a 1e-3 floor in the denominator so near-zero gradient pairs are judged
on absolute error instead of noise ratios.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor


def gradient_check(
    params: dict[str, Tensor],
    loss_fn: Callable[[], Tensor],
    eps: float = 1e-5,
) -> float:
    """Return the max relative error between analytic and central-difference
    gradients over every element of every parameter."""
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            up = float(loss_fn().data)
            flat[i] = original - eps
            down = float(loss_fn().data)
            flat[i] = original
            fd = (up - down) / (2 * eps)
            a = grad_flat[i]
            rel = abs(a - fd) / max(abs(a) + abs(fd), 1e-3)
            worst = max(worst, rel)
    return worst
