"""Shared small fixtures for the test modules."""

from __future__ import annotations

import numpy as np

from gdlqueue.nn import OptState, ParamSet, affine_forward, glorot_uniform, mse_loss, optimizer_step
from gdlqueue.nn import tensor as T

XOR_X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
XOR_Y = np.array([[0.0], [1.0], [1.0], [0.0]])
XOR_SEED = 7


def xor_params(seed: int) -> ParamSet:
    rng = np.random.default_rng(seed)
    ps = ParamSet()
    ps.add("W1", glorot_uniform(rng, (2, 2)))
    ps.add("b1", np.zeros(2), weight=False)
    ps.add("W2", glorot_uniform(rng, (1, 2)))
    ps.add("b2", np.zeros(1), weight=False)
    return ps


def xor_loss(ps: ParamSet):
    hidden = T.relu(affine_forward(ps["W1"], XOR_X, ps["b1"]))
    return mse_loss(affine_forward(ps["W2"], hidden, ps["b2"]), XOR_Y)


def fit_xor(seed: int = XOR_SEED, steps: int = 5000, lr: float = 0.1) -> tuple[list[float], ParamSet]:
    """Full-batch SGD on the four XOR points with two hidden ReLU units; returns the loss trace."""
    ps = xor_params(seed)
    state = OptState("sgd", lr)
    trace = []
    for _ in range(steps):
        ps.zero_grad()
        loss = xor_loss(ps)
        loss.backward()
        trace.append(float(loss.value))
        if trace[-1] < 0.01:
            break
        optimizer_step(ps, ps.grads(), state)
    return trace, ps
