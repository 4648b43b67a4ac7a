"""Parameterized layers built on the autograd tape.

The gated recurrent cell is the standard LSTM formulation; with input x_t,
previous hidden h, previous cell c, fused preactivation
z = x_t @ Wx + h @ Wh + b split into quarters (i, f, g, o):

    i = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
    c' = f * c + i * g
    h' = o * tanh(c')

This gate order is part of the checkpoint contract.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from . import autograd as ag
from .autograd import Tensor


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


class Linear:
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int, dtype=np.float32):
        self.w = Tensor(glorot(rng, in_dim, out_dim, dtype), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.matmul(x, self.w), self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class Embedding:
    def __init__(self, rng: np.random.Generator, n_tokens: int, dim: int, dtype=np.float32):
        self.table = Tensor(
            rng.normal(0.0, 0.1, size=(n_tokens, dim)).astype(dtype), requires_grad=True
        )

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ag.rows(self.table, ids)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table}


class LSTMCell:
    def __init__(self, rng: np.random.Generator, input_dim: int, hidden_dim: int, dtype=np.float32):
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.wx = Tensor(glorot(rng, input_dim, 4 * hidden_dim, dtype), requires_grad=True)
        self.wh = Tensor(glorot(rng, hidden_dim, 4 * hidden_dim, dtype), requires_grad=True)
        bias = np.zeros(4 * hidden_dim, dtype=dtype)
        bias[hidden_dim:2 * hidden_dim] = 1.0  # forget-gate bias keeps memory early on
        self.b = Tensor(bias, requires_grad=True)

    def zero_state(self, batch: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
        h = Tensor(np.zeros((batch, self.hidden_dim), dtype=dtype))
        c = Tensor(np.zeros((batch, self.hidden_dim), dtype=dtype))
        return h, c

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple[Tensor, Tensor]:
        if x.shape[1] != self.input_dim:
            raise ShapeMismatch(f"cell expects input dim {self.input_dim}, got {x.shape[1]}")
        hd = self.hidden_dim
        z = ag.add(ag.add(ag.matmul(x, self.wx), ag.matmul(h, self.wh)), self.b)
        i = ag.sigmoid(ag.narrow(z, 1, 0, hd))
        f = ag.sigmoid(ag.narrow(z, 1, hd, hd))
        g = ag.tanh(ag.narrow(z, 1, 2 * hd, hd))
        o = ag.sigmoid(ag.narrow(z, 1, 3 * hd, hd))
        c_new = ag.add(ag.mul(f, c), ag.mul(i, g))
        h_new = ag.mul(o, ag.tanh(c_new))
        return h_new, c_new

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wx": self.wx, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}


class BatchNorm1d:
    """Optional parity-mode normalization for the speaker image head."""

    def __init__(self, dim: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=np.float64)
        self.running_var = np.ones(dim, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            out, mu, var = ag.batch_norm(x, self.gamma, self.beta, self.eps)
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mu
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            return out
        scale = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.data.dtype)
        shift = (-self.running_mean / np.sqrt(self.running_var + self.eps)).astype(x.data.dtype)
        return ag.add(ag.mul(ag.add(ag.mul(x, scale), shift), self.gamma), self.beta)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype=np.float32) -> np.ndarray:
    """Inverted dropout mask; rate is the drop probability."""
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


def encode_sequence(
    cell: LSTMCell,
    embedding: Embedding,
    ids: np.ndarray,
    lengths: np.ndarray | None = None,
) -> Tensor:
    """Run the cell over a padded id batch (B, T) and return each row's final
    hidden state, taken at its own true length."""
    ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
    batch, steps = ids.shape
    if lengths is None:
        lengths = np.full(batch, steps, dtype=np.int64)
    dtype = embedding.table.data.dtype
    h, c = cell.zero_state(batch, dtype)
    final = None
    for t in range(steps):
        x = embedding(ids[:, t])
        h, c = cell.step(x, h, c)
        picked = (lengths == t + 1).astype(dtype)[:, None]
        contrib = ag.mul(h, picked)
        final = contrib if final is None else ag.add(final, contrib)
    return final
