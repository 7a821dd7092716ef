"""Minimal float64 reverse-mode neural-network toolkit."""

from .functional import activation, affine_forward, dropout, l2_penalty, mse_loss
from .gradcheck import grad_check
from .optim import OptState, optimizer_step
from .params import ParamSet, glorot_uniform
from .tensor import ShapeMismatch, Tensor

__all__ = [
    "OptState", "ParamSet", "ShapeMismatch", "Tensor", "activation", "affine_forward",
    "dropout", "glorot_uniform", "grad_check", "l2_penalty", "mse_loss", "optimizer_step",
]
