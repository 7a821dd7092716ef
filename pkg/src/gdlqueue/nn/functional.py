"""Layers, activations, losses and regularizers on top of :mod:`.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import ShapeMismatch, Tensor, as_tensor


def affine_forward(W, x, b) -> Tensor:
    """``W x + b``; ``x`` may carry leading batch axes as row vectors (``x @ W.T``)."""
    W, x, b = as_tensor(W), as_tensor(x), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"W {W.shape}, x {x.shape}, b {b.shape}")
    if x.ndim == 1:
        return T.matmul(W, x) + b
    return T.matmul(x, T.transpose(W)) + b


_ACTIVATIONS = {
    "relu": T.relu,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softmax": T.softmax,
    "identity": lambda z: as_tensor(z),
    "leaky_relu": T.leaky_relu,
}


def activation(kind: str, z) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(z)


def mse_loss(pred, target) -> Tensor:
    """Mean of the squared differences over every element."""
    pred = as_tensor(pred)
    target = np.asarray(target.value if isinstance(target, Tensor) else target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} vs {target.shape}")
    return T.mean(T.square(pred - target))


def l2_penalty(weights, lam: float) -> Tensor:
    """``lam * 1/2 * sum ||W||^2`` over the given weight tensors."""
    if lam < 0:
        raise ValueError("L2 strength must be non-negative")
    total = Tensor(0.0)
    for w in weights:
        total = total + T.tsum(T.square(w))
    return total * (0.5 * lam)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors by ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = rng.random(x.shape) >= rate
    return T.apply_mask(x, keep / (1.0 - rate))
