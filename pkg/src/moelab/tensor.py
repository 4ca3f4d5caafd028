"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Small on purpose: only the operations a decoder-only mixture-of-experts
language model needs.  Every operation records closures on a dynamic tape;
``Tensor.backward`` replays the tape in reverse topological order and
accumulates gradients additively, so parameters shared between several
subexpressions (e.g. a tied embedding) receive the sum of all contributions.

All math is double precision.  Nothing here prevents NaN or Inf from flowing
through; detecting them is the caller's job (the trainer does exactly that).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "gelu",
    "softmax",
    "log_softmax",
    "matmul",
    "embedding",
    "take_along_last",
    "gather_rows",
    "scatter_rows",
    "cross_entropy",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


GradFn = Callable[[np.ndarray], np.ndarray]


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced or expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 n-d array plus an optional gradient of the same shape.

    Tensor data is treated as immutable between construction and the end of a
    backward pass; the trainer mutates ``data`` in place only between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: list[tuple[Tensor, GradFn]] = []

    # ---- bookkeeping -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode pass from a scalar.  Accumulates into ``grad``."""
        if self.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node.grad is None:
                continue
            g = node.grad
            for parent, fn in node._parents:
                parent._accumulate(fn(g))

    # ---- arithmetic ------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = _result(np.add(self.data, other.data), self, other)
        _register(out, self, lambda g: _unbroadcast(g, self.shape))
        _register(out, other, lambda g: _unbroadcast(g, other.shape))
        return out

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = _result(np.subtract(self.data, other.data), self, other)
        _register(out, self, lambda g: _unbroadcast(g, self.shape))
        _register(out, other, lambda g: _unbroadcast(-g, other.shape))
        return out

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = _result(np.multiply(self.data, other.data), self, other)
        a_data, b_data = self.data, other.data
        _register(out, self, lambda g: _unbroadcast(g * b_data, self.shape))
        _register(out, other, lambda g: _unbroadcast(g * a_data, other.shape))
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = _as_tensor(other)
        out = _result(np.divide(self.data, other.data), self, other)
        a_data, b_data = self.data, other.data
        _register(out, self, lambda g: _unbroadcast(g / b_data, self.shape))
        _register(out, other, lambda g: _unbroadcast(-g * a_data / (b_data * b_data), other.shape))
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return _as_tensor(other).__truediv__(self)

    def __neg__(self) -> "Tensor":
        out = _result(-self.data, self)
        _register(out, self, lambda g: -g)
        return out

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        p = float(exponent)
        out = _result(self.data**p, self)
        x = self.data
        _register(out, self, lambda g: g * p * x ** (p - 1.0))
        return out

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, key) -> "Tensor":
        """Basic (slice/int) indexing.  Gradient scatters back into place."""
        out = _result(self.data[key], self)
        shape = self.shape

        def back(g: np.ndarray) -> np.ndarray:
            gx = np.zeros(shape, dtype=np.float64)
            gx[key] += g
            return gx

        _register(out, self, back)
        return out

    # ---- structure -------------------------------------------------------

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        shape = tuple(shape)
        out = _result(self.data.reshape(shape), self)
        orig = self.shape
        _register(out, self, lambda g: g.reshape(orig))
        return out

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        out = _result(self.data.transpose(axes), self)
        inverse = tuple(np.argsort(axes))
        _register(out, self, lambda g: g.transpose(inverse))
        return out

    def swap_last2(self) -> "Tensor":
        if self.ndim < 2:
            raise ShapeError(f"swap_last2 needs ndim >= 2, got shape {self.shape}")
        axes = tuple(range(self.ndim - 2)) + (self.ndim - 1, self.ndim - 2)
        return self.transpose(axes)

    # ---- reductions ------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _result(self.data.sum(axis=axis, keepdims=keepdims), self)
        shape = self.shape

        def back(g: np.ndarray) -> np.ndarray:
            if axis is None:
                return np.broadcast_to(g, shape).copy() if g.ndim else np.full(shape, g)
            gk = g if keepdims else np.expand_dims(g, axis)
            return np.broadcast_to(gk, shape).copy()

        _register(out, self, back)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, *parents: Tensor) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _register(out: Tensor, parent: Tensor, fn: GradFn) -> None:
    # Constants stay off the tape so graphs only retain what backward needs.
    if parent.requires_grad:
        out._parents.append((parent, fn))


# ---- nonlinearity and normalizing ops -------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-error GELU: x * Phi(x), with Phi the standard normal CDF."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = _result(x.data * cdf, x)
    xd = x.data

    def back(g: np.ndarray) -> np.ndarray:
        pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
        return g * (cdf + xd * pdf)

    _register(out, x, back)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _result(y, x)

    def back(g: np.ndarray) -> np.ndarray:
        inner = (g * y).sum(axis=axis, keepdims=True)
        return y * (g - inner)

    _register(out, x, back)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _result(shifted - lse, x)
    probs = np.exp(shifted - lse)

    def back(g: np.ndarray) -> np.ndarray:
        return g - probs * g.sum(axis=axis, keepdims=True)

    _register(out, x, back)
    return out


# ---- linear algebra --------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Stacked matrix product with numpy broadcasting over leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = _result(np.matmul(a.data, b.data), a, b)
    a_data, b_data = a.data, b.data

    def back_a(g: np.ndarray) -> np.ndarray:
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        return _reduce_batch(ga, a_data.shape)

    def back_b(g: np.ndarray) -> np.ndarray:
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        return _reduce_batch(gb, b_data.shape)

    _register(out, a, back_a)
    _register(out, b, back_b)
    return out


def _reduce_batch(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse broadcast batch dims of a matmul gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i in range(len(shape) - 2) if shape[i] == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---- gather / scatter ------------------------------------------------------


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatter-adds into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"ids out of range [0, {table.shape[0]}): min={ids.min()}, max={ids.max()}"
        )
    out = _result(table.data[ids], table)
    shape = table.shape

    def back(g: np.ndarray) -> np.ndarray:
        gt = np.zeros(shape, dtype=np.float64)
        np.add.at(gt, ids, g)
        return gt

    _register(out, table, back)
    return out


def gather_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    """Select rows along axis 0 by integer index."""
    return embedding(x, np.asarray(rows, dtype=np.intp))


def scatter_rows(values: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Place ``values`` at ``rows`` of a zero tensor, accumulating duplicates."""
    values = _as_tensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    data = np.zeros((n_rows,) + values.shape[1:], dtype=np.float64)
    np.add.at(data, rows, values.data)
    out = _result(data, values)
    _register(out, values, lambda g: g[rows])
    return out


def take_along_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along the last axis: out[..., k] = x[..., idx[..., k]]."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"index shape {idx.shape} does not match {x.shape}")
    out = _result(np.take_along_axis(x.data, idx, axis=-1), x)
    shape = x.shape

    def back(g: np.ndarray) -> np.ndarray:
        gx = np.zeros(shape, dtype=np.float64)
        grids = np.meshgrid(*(np.arange(n) for n in idx.shape), indexing="ij")
        np.add.at(gx, tuple(grids[:-1]) + (idx,), g)
        return gx

    _register(out, x, back)
    return out


# ---- losses ----------------------------------------------------------------


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``logits``.

    ``logits`` has shape [..., vocab]; ``targets`` matches the leading shape.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(
            f"target ids out of range [0, {vocab}): min={targets.min()}, max={targets.max()}"
        )
    lsm = log_softmax(logits, axis=-1)
    picked = take_along_last(lsm, targets[..., None].astype(np.intp))
    return -picked.mean()


# ---- verification ----------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central finite differences.

    Relative error uses a 1e-6 floor in the denominator so elements whose true
    gradient sits at the finite-difference noise floor do not dominate.
    """
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ShapeError(f"grad_check needs a scalar-valued f, got shape {out.shape}")
    out.backward()
    analytic = np.zeros_like(base) if probe.grad is None else probe.grad.copy()

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        hi = float(f(Tensor(bumped.reshape(base.shape))).data)
        bumped[i] -= 2.0 * eps
        lo = float(f(Tensor(bumped.reshape(base.shape))).data)
        flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
