"""Minimal reverse-mode gradient engine over numpy arrays.

A Tape records Tensors in construction order, which is automatically a
topological order; the backward pass walks that list once in reverse,
accumulating cotangents. Trainable leaves are the mean and raw-deviation
arrays of the model's parameter groups; everything else (inputs, noise draws,
masks) enters as plain numpy constants with no gradient.

Primitives are only what the training objectives need: arithmetic, affine
maps, relu, the standard-normal CDF, sigma(rho) = |rho|^(3/2), max over the
class axis with argmax routing, gathers, clamps, reductions, and kl_inv with
its closed-form derivative. Accumulation stays in float64 and intermediates
are saved rather than recomputed; the nets are desk-scale and determinism
matters more than memory.
"""
from __future__ import annotations

import numpy as np

from . import bounds
from .gaussian import std_normal_cdf, std_normal_pdf

__all__ = ["Tape", "Tensor", "fd_check"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to the shape it was broadcast from."""
    grad = np.asarray(grad)
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node on the tape: a float64 array plus how to push gradients back."""

    __slots__ = ("tape", "value", "parents", "vjp", "grad")

    def __init__(self, tape, value, parents=(), vjp=None):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjp = vjp
        self.grad = None
        tape._nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # Operator sugar; the right-hand side may be a Tensor, array, or scalar.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self._nodes: list[Tensor] = []

    def leaf(self, value) -> Tensor:
        return Tensor(self, value)

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor, seed: float = 1.0) -> None:
        """Accumulate d(root)/d(node) into .grad for every reachable node."""
        if root.tape is not self:
            raise ValueError("root tensor does not belong to this tape")
        if root.value.size != 1:
            raise ValueError(f"backward needs a scalar output, got shape {root.shape}")
        for node in self._nodes:
            node.grad = None
        root.grad = np.full_like(root.value, float(seed))
        for node in reversed(self._nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, pgrad in zip(node.parents, node.vjp(node.grad)):
                if pgrad is None:
                    continue
                if parent.grad is None:
                    parent.grad = pgrad
                else:
                    parent.grad = parent.grad + pgrad


def _val(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Tensor):
            return a.tape
    raise TypeError("at least one operand must be a Tensor")


def _binary(a, b, out_value, vjp_a, vjp_b) -> Tensor:
    """Build a node for a two-operand op, skipping constant sides."""
    tape = _tape_of(a, b)
    parents = []
    vjps = []
    if isinstance(a, Tensor):
        parents.append(a)
        vjps.append(lambda g: _unbroadcast(vjp_a(g), a.shape))
    if isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g: _unbroadcast(vjp_b(g), b.shape))
    return Tensor(
        tape, out_value, tuple(parents), lambda g: tuple(f(g) for f in vjps)
    )


def add(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    return _binary(a, b, va + vb, lambda g: g, lambda g: g)


def sub(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    return _binary(a, b, va - vb, lambda g: g, lambda g: -g)


def mul(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    return _binary(a, b, va * vb, lambda g: g * vb, lambda g: g * va)


def div(a, b) -> Tensor:
    va, vb = _val(a), _val(b)
    out = va / vb
    return _binary(a, b, out, lambda g: g / vb, lambda g: -g * out / vb)


def square(a: Tensor) -> Tensor:
    va = _val(a)
    return Tensor(a.tape, np.square(va), (a,), lambda g: (2.0 * va * g,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(_val(a))
    return Tensor(a.tape, out, (a,), lambda g: (0.5 * g / out,))


def log(a: Tensor) -> Tensor:
    va = _val(a)
    return Tensor(a.tape, np.log(va), (a,), lambda g: (g / va,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(_val(a))
    return Tensor(a.tape, out, (a,), lambda g: (g * out,))


def relu(a: Tensor) -> Tensor:
    va = _val(a)
    mask = va > 0
    return Tensor(a.tape, va * mask, (a,), lambda g: (g * mask,))


def ncdf(a: Tensor) -> Tensor:
    """Standard normal CDF node; gradient is the normal density."""
    va = _val(a)
    return Tensor(a.tape, std_normal_cdf(va), (a,), lambda g: (g * std_normal_pdf(va),))


def sigma_rho(a: Tensor) -> Tensor:
    """sigma = |rho|^(3/2) with derivative 1.5 sqrt(|rho|) sign(rho)."""
    va = _val(a)
    absv = np.abs(va)
    dsig = 1.5 * np.sqrt(absv) * np.sign(va)
    return Tensor(a.tape, absv ** 1.5, (a,), lambda g: (g * dsig,))


def maximum_const(a: Tensor, c: float) -> Tensor:
    va = _val(a)
    mask = va > c
    return Tensor(a.tape, np.maximum(va, c), (a,), lambda g: (g * mask,))


def minimum_const(a: Tensor, c: float) -> Tensor:
    va = _val(a)
    mask = va < c
    return Tensor(a.tape, np.minimum(va, c), (a,), lambda g: (g * mask,))


def linear(x, W, b=None) -> Tensor:
    """Affine map y = x @ W.T (+ b) over any number of batch axes.

    x has shape [..., n], W is [m, n], b is [m] or None. Every operand may be
    a Tensor or a constant array.
    """
    vx, vw = _val(x), _val(W)
    out = vx @ vw.T
    if b is not None:
        out = out + _val(b)
    tape = _tape_of(x, W, b) if b is not None else _tape_of(x, W)
    parents = []
    vjps = []
    if isinstance(x, Tensor):
        parents.append(x)
        vjps.append(lambda g: g @ vw)
    if isinstance(W, Tensor):
        parents.append(W)
        vjps.append(
            lambda g: g.reshape(-1, g.shape[-1]).T @ vx.reshape(-1, vx.shape[-1])
        )
    if b is not None and isinstance(b, Tensor):
        parents.append(b)
        vjps.append(lambda g: g.reshape(-1, g.shape[-1]).sum(axis=0))
    return Tensor(tape, out, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick entry idx[i] from row i of a [B, q] tensor; scatter-add backward."""
    va = _val(a)
    idx = np.asarray(idx)
    rows = np.arange(va.shape[0])

    def vjp(g):
        out = np.zeros_like(va)
        np.add.at(out, (rows, idx), g)
        return (out,)

    return Tensor(a.tape, va[rows, idx], (a,), vjp)


def max_last(a: Tensor) -> Tensor:
    """Max over the last axis; the cotangent routes to the stored argmax.

    np.argmax breaks ties toward the lowest index, which is the convention
    for the (probability-zero) tie case.
    """
    va = _val(a)
    idx = np.argmax(va, axis=-1)

    def vjp(g):
        out = np.zeros_like(va)
        np.put_along_axis(out, idx[..., None], np.asarray(g)[..., None], axis=-1)
        return (out,)

    return Tensor(a.tape, np.take_along_axis(va, idx[..., None], axis=-1)[..., 0], (a,), vjp)


def sum_last(a: Tensor) -> Tensor:
    va = _val(a)
    return Tensor(
        a.tape,
        va.sum(axis=-1),
        (a,),
        lambda g: (np.broadcast_to(np.asarray(g)[..., None], va.shape).copy(),),
    )


def expand_last(a: Tensor) -> Tensor:
    """Append a trailing axis of size 1 (for broadcasting against classes)."""
    va = _val(a)
    return Tensor(a.tape, va[..., None], (a,), lambda g: (np.asarray(g)[..., 0],))


def sum_all(a: Tensor) -> Tensor:
    va = _val(a)
    return Tensor(a.tape, va.sum(), (a,), lambda g: (np.full_like(va, float(g)),))


def mean_all(a: Tensor) -> Tensor:
    va = _val(a)
    return Tensor(
        a.tape, va.mean(), (a,), lambda g: (np.full_like(va, float(g) / va.size),)
    )


def kl_inv_node(u: Tensor, c: Tensor) -> Tensor:
    """kl_inv as a scalar tape op, differentiated by its closed form."""
    uv, cv = float(_val(u)), float(_val(c))
    out = bounds.kl_inv(uv, cv)
    du, dc = bounds.kl_inv_grad(uv, cv)
    return _binary(u, c, out, lambda g: g * du, lambda g: g * dc)


def sigmoid(a: Tensor) -> Tensor:
    va = _val(a)
    out = 1.0 / (1.0 + np.exp(-va))
    return Tensor(a.tape, out, (a,), lambda g: (g * out * (1.0 - out),))


def fd_check(fn, point, step: float = 1e-5, coords=None) -> float:
    """Worst relative disagreement between analytic and central-difference
    gradients of a deterministic scalar function.

    ``fn`` maps a list of arrays to (value, grads) with grads aligned to the
    input list; it must be deterministic (freeze all noise outside). ``coords``
    optionally restricts the comparison to (array_index, flat_index) pairs,
    otherwise every coordinate is checked.
    """
    point = [np.asarray(p, dtype=np.float64).copy() for p in point]
    _, grads = fn(point)
    if coords is None:
        coords = [(k, i) for k, p in enumerate(point) for i in range(p.size)]
    worst = 0.0
    for k, i in coords:
        flat = point[k].reshape(-1)
        keep = flat[i]
        flat[i] = keep + step
        up, _ = fn(point)
        flat[i] = keep - step
        down, _ = fn(point)
        flat[i] = keep
        fd = (up - down) / (2.0 * step)
        an = float(np.asarray(grads[k]).reshape(-1)[i])
        denom = max(abs(fd), abs(an), 1e-10)
        worst = max(worst, abs(fd - an) / denom)
    return worst
