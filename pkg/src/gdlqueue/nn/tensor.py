"""Array-level reverse-mode automatic differentiation.

Every :class:`Tensor` produced by an operation remembers its parents and a
closure that maps the output gradient to parent gradients. ``backward`` walks
the recorded graph in reverse topological order and accumulates into
``.grad``. Everything is float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class Tensor:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")
    __array_priority__ = 100  # make ndarray (op) Tensor defer to Tensor

    def __init__(self, value, requires_grad: bool = False, name: str = "",
                 parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)) and requires_grad and not parents:
            raise ValueError("parameter values must be finite")
        self.grad: np.ndarray | None = None
        self.parents = parents  # tuple of (Tensor, fn: out_grad -> parent_grad)
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.name = name

    # -- basics --------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    def zero_grad(self):
        self.grad = None

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``.grad``."""
        if seed is None:
            if self.value.size != 1:
                raise ShapeMismatch("backward without a seed needs a scalar output")
            seed = np.ones_like(self.value)
        order = _topological(self)
        grads = {id(self): np.asarray(seed, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, fn in node.parents:
                if not parent.requires_grad:
                    continue
                pg = fn(g)
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _make(value, *parents) -> Tensor:
    live = tuple((p, fn) for p, fn in parents if p.requires_grad)
    return Tensor(value, parents=live)


# --------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value - b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value ** 2, (a, lambda g: 2.0 * a.value * g))


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy semantics for 1-D and batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value @ b.value
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    av, bv = a.value, b.value

    def ga(g):
        if bv.ndim == 1:
            r = np.multiply.outer(g, bv) if av.ndim > 1 else g * bv
        else:
            gg = g if av.ndim > 1 else g[..., None, :]
            r = gg @ np.swapaxes(bv, -1, -2)
            if av.ndim == 1:
                r = r[..., 0, :]
        return _unbroadcast(r, av.shape)

    def gb(g):
        if av.ndim == 1:
            r = np.multiply.outer(av, g) if bv.ndim > 1 else g * av
        else:
            gg = g if bv.ndim > 1 else g[..., None]
            r = np.swapaxes(av, -1, -2) @ gg
            if bv.ndim == 1:
                r = r[..., 0]
        return _unbroadcast(r, bv.shape)

    return _make(out, (a, ga), (b, gb))


# --------------------------------------------------------------------------
# nonlinearities


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return _make(y, (a, lambda g: g * (1.0 - y * y)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))  # overflow-free logistic
    return _make(y, (a, lambda g: g * y * (1.0 - y)))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a, lambda g: g * mask))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.value > 0, 1.0, slope)
    return _make(a.value * factor, (a, lambda g: g * factor))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.value)
    return _make(y, (a, lambda g: g * y))


def softmax(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0.

    Every slice must keep at least one unmasked entry.
    """
    a = as_tensor(a)
    z = a.value
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not np.all(mask.any(axis=axis)):
            raise ValueError("softmax slice with every entry masked")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _make(y, (a, back))


# --------------------------------------------------------------------------
# reductions and shape ops


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a, back))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.value.reshape(shape), (a, lambda g: g.reshape(old)))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a, lambda g: np.transpose(g, inv)))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts)

    def back(g):
        out = np.zeros(shape)
        if basic:  # no repeated targets, plain assignment is enough
            out[index] = g
        else:
            np.add.at(out, index, g)
        return out

    return _make(a.value[index], (a, back))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.value for t in ts], axis=axis)

    def piece(k):
        def back(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[k], bounds[k + 1])
            return g[tuple(sl)]
        return back

    return _make(out, *((t, piece(k)) for k, t in enumerate(ts)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.value for t in ts], axis=axis)

    def piece(k):
        return lambda g: np.take(g, k, axis=axis)

    return _make(out, *((t, piece(k)) for k, t in enumerate(ts)))


def apply_mask(a, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout masks, selection)."""
    a = as_tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    return _make(a.value * m, (a, lambda g: _unbroadcast(g * m, a.shape)))


def custom(value: np.ndarray, parents: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    """Escape hatch: build a node from a value and explicit parent gradient maps."""
    return _make(value, *parents)
