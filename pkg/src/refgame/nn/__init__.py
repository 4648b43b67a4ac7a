"""Differentiable numerical substrate: autograd tape, layers, optimizer,
checkpointing, and the finite-difference gradient checker."""

from . import autograd
from .autograd import Tensor, no_grad
from .checkpoint import load_checkpoint, restore_params, save_checkpoint
from .gradcheck import gradient_check
from .layers import BatchNorm1d, Embedding, Linear, LSTMCell, dropout_mask, encode_sequence
from .optim import Adam

__all__ = [
    "Adam",
    "BatchNorm1d",
    "Embedding",
    "Linear",
    "LSTMCell",
    "Tensor",
    "autograd",
    "dropout_mask",
    "encode_sequence",
    "gradient_check",
    "load_checkpoint",
    "no_grad",
    "restore_params",
    "save_checkpoint",
]
