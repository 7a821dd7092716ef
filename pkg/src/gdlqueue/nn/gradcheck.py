"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import Tensor


def grad_check(
    loss_fn: Callable[[], Tensor], params: ParamSet, eps: float = 1e-5, max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Largest relative error between analytic and numeric partial derivatives.

    ``loss_fn`` must rebuild the graph from the current parameter values each
    call. With ``max_entries`` only a random subset of entries per parameter is
    perturbed.
    """
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.value))
                for n, t in params.items()}
    worst = 0.0
    for name, t in params.items():
        flat = t.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        ga = analytic[name].reshape(-1)
        for k in idx:
            old = flat[k]
            flat[k] = old + eps
            up = float(loss_fn().value)
            flat[k] = old - eps
            down = float(loss_fn().value)
            flat[k] = old
            num = (up - down) / (2 * eps)
            denom = max(abs(ga[k]), abs(num), 1e-12)
            worst = max(worst, abs(ga[k] - num) / denom)
    params.zero_grad()
    return worst
