"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record onto the innermost active :class:`GradTape` whenever one of
their inputs requires a gradient. Outside of a tape everything evaluates
eagerly and nothing is recorded, which is what inference uses.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = (x * x).sum()
    >>> tape.backward(y)
    >>> x.grad
    array([6.])
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_state = threading.local()


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class DomainError(AutodiffError, ValueError):
    pass


class NumericError(AutodiffError, ArithmeticError):
    pass


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def active_tape() -> Optional["GradTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")
    # make ``ndarray * Tensor`` defer to Tensor.__rmul__
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[GradTape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: index(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones. Calling
    :meth:`backward` twice without :meth:`reset` accumulates into leaf
    ``.grad`` buffers, the same way repeated ``loss.backward()`` calls do in
    most frameworks.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out._tape = None
        self.nodes.clear()

    def record(self, out: Tensor, inputs: tuple, backward_fn, op: str) -> None:
        out._tape = self
        self.nodes.append(_Node(out, inputs, backward_fn, op))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        seed = np.ones_like(loss.data)
        if loss._tape is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, seed)
                return
            raise AutodiffError("loss was not recorded on a tape")
        if loss._tape is not self:
            raise AutodiffError("loss belongs to a different tape")

        pending = {id(loss): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
                else:
                    _accumulate_leaf(inp, gi)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Back-propagate from a scalar ``loss`` through the tape it was recorded on."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
            return
        raise AutodiffError("loss was not recorded on a tape")
    loss._tape.backward(loss)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only fall back to the full scan on doubt
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"{op} produced non-finite values")


def _make(out: np.ndarray, inputs: tuple, backward_fn, op: str) -> Tensor:
    _check_finite(out, op)
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    t = Tensor._wrap(out, needs)
    if needs:
        tape.record(t, inputs, backward_fn, op)
    return t


# Kink bookkeeping: piecewise-linear ops report which branch each element took
# so that a finite-difference probe can tell when it stepped across a corner.

def _note_branch(mask: np.ndarray) -> None:
    rec = getattr(_state, "branches", None)
    if rec is not None:
        rec.append(np.packbits(mask.reshape(-1)).tobytes())


class branch_recorder:
    """Context manager collecting the branch pattern of piecewise ops."""

    def __enter__(self) -> list:
        self._prev = getattr(_state, "branches", None)
        _state.branches = []
        return _state.branches

    def __exit__(self, *exc) -> None:
        _state.branches = self._prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- arithmetic -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise DomainError("division by zero")
    return _make(ad / bd, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * ad / (bd * bd), bd.shape)),
                 "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D/2-D operands with the usual numpy conventions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # (m,k) @ (k,) -> (m,)
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # (k,) @ (k,n) -> (n,)
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def index(a, idx) -> Tensor:
    """Basic or integer-array indexing; gradients scatter-add back."""
    a = as_tensor(a)
    src = a.shape
    out = np.asarray(a.data[idx])
    if out.size == 0:
        raise ShapeError("indexing produced an empty tensor")

    fancy = isinstance(idx, np.ndarray) and idx.dtype != bool

    def bw(g):
        full = np.zeros(src)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(out.copy(), (a,), bw, "index")


def take_rows(a, rows) -> Tensor:
    return index(a, np.asarray(rows, dtype=np.intp))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref) if ref else 0
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
                d != r for i, (d, r) in enumerate(zip(x.shape, ref)) if i != ax):
            raise ShapeError(f"concat shape mismatch off axis {axis}: {ref} vs {x.shape}")
    sizes = [x.shape[ax] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=ax), tuple(xs),
                 lambda g: tuple(np.split(g, cuts, axis=ax)), "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("stack of an empty list")
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape != ref:
            raise ShapeError(f"stack shape mismatch: {ref} vs {x.shape}")
    out = np.stack([x.data for x in xs], axis=axis)
    ax = axis % out.ndim
    return _make(out, tuple(xs),
                 lambda g: tuple(np.moveaxis(g, ax, 0)), "stack")


# --- element-wise maps ----------------------------------------------------

def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def _softplus(x):
    return np.logaddexp(0.0, x)


# name -> (forward(x), derivative(x, y)); derivatives are looked up at
# backward time so tests can inject faults.
ACTIVATIONS: dict = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
    "exp": (np.exp, lambda x, y: y),
    "log": (np.log, lambda x, y: 1.0 / x),
}


def elementwise_map(x, f: str, slope: float = 0.2) -> Tensor:
    """Apply ``f`` per element: tanh, sigmoid, relu, leaky_relu, exp or log."""
    if f == "relu":
        return relu(x)
    if f == "leaky_relu":
        return leaky_relu(x, slope)
    x = as_tensor(x)
    if f not in ACTIVATIONS:
        raise ValueError(f"unknown element-wise function {f!r}")
    if f == "log" and np.any(x.data <= 0):
        raise DomainError("log of a non-positive entry")
    xd = x.data
    y = ACTIVATIONS[f][0](xd)
    return _make(y, (x,), lambda g: (g * ACTIVATIONS[f][1](xd, y),), f)


def tanh(x) -> Tensor:
    return elementwise_map(x, "tanh")


def sigmoid(x) -> Tensor:
    return elementwise_map(x, "sigmoid")


def softplus(x) -> Tensor:
    return elementwise_map(x, "softplus")


def exp(x) -> Tensor:
    return elementwise_map(x, "exp")


def log(x) -> Tensor:
    return elementwise_map(x, "log")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    _note_branch(mask)
    scale = np.where(mask, 1.0, slope)
    return _make(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


def softmax(x, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Max-shifted softmax; entries where ``mask`` is False get weight 0."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError("softmax of an empty input")
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=axis).all():
            raise ShapeError("softmax row with no unmasked entries")
        xd = np.where(mask, xd, -np.inf)
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def max_along(x, axis: int = 0) -> Tensor:
    """Max over one axis; the gradient goes to the first maximiser only."""
    x = as_tensor(x)
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    onehot = np.zeros(x.shape, dtype=bool)
    np.put_along_axis(onehot, np.expand_dims(arg, axis), True, axis=axis)
    _note_branch(onehot)

    def bw(g):
        return (np.expand_dims(g, axis) * onehot,)

    return _make(out, (x,), bw, "max")


def reduce_max_elementwise(xs: Sequence[Tensor]) -> Tensor:
    """Coordinate-wise max over a non-empty, ordered collection of equal-shape tensors."""
    xs = list(xs)
    if not xs:
        raise DomainError("element-wise max over an empty set")
    if len(xs) == 1:
        return xs[0]
    return max_along(stack(xs, axis=0), axis=0)


# --- segment ops (edge lists / grouped rows) ------------------------------

def _check_segments(seg: np.ndarray, length: int, n: int) -> np.ndarray:
    seg = np.asarray(seg, dtype=np.intp)
    if seg.shape != (length,):
        raise ShapeError(f"segment ids shape {seg.shape} != ({length},)")
    if length and (seg.min() < 0 or seg.max() >= n):
        raise ShapeError(f"segment ids out of range [0, {n})")
    return seg


def segment_sum(x, seg, n: int) -> Tensor:
    """Sum rows of ``x`` that share a segment id; output has ``n`` rows."""
    x = as_tensor(x)
    seg = _check_segments(seg, x.shape[0], n)
    out = np.zeros((n,) + x.shape[1:])
    np.add.at(out, seg, x.data)
    return _make(out, (x,), lambda g: (g[seg],), "segment_sum")


def segment_softmax(x, seg, n: int) -> Tensor:
    """Softmax of a 1-D tensor within each segment (max-shifted per segment)."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError("segment_softmax expects a 1-D tensor")
    seg = _check_segments(seg, x.shape[0], n)
    top = np.full(n, -np.inf)
    np.maximum.at(top, seg, x.data)
    if not np.isfinite(top).all():
        raise ShapeError("segment_softmax has an empty segment")
    e = np.exp(x.data - top[seg])
    y = e / np.bincount(seg, weights=e, minlength=n)[seg]

    def bw(g):
        dot = np.bincount(seg, weights=g * y, minlength=n)
        return (y * (g - dot[seg]),)

    return _make(y, (x,), bw, "segment_softmax")


def segment_max(x, seg, n: int) -> Tensor:
    """Column-wise max over the rows of each segment.

    Ties send the gradient to the first row (in input order) attaining the max.
    Every segment must be non-empty.
    """
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("segment_max expects a 2-D tensor")
    seg = _check_segments(seg, x.shape[0], n)
    counts = np.bincount(seg, minlength=n)
    if (counts == 0).any():
        raise DomainError(f"segment {int(np.flatnonzero(counts == 0)[0])} is empty")
    order = np.argsort(seg, kind="stable")
    xs = x.data[order]
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    top = np.maximum.reduceat(xs, starts, axis=0)
    rows = np.arange(len(order))[:, None]
    pos = np.where(xs == top[seg[order]], rows, len(order))
    first = order[np.minimum.reduceat(pos, starts, axis=0)]  # (n, d) source rows
    cols = np.broadcast_to(np.arange(x.shape[1]), first.shape)
    hit = np.zeros(x.shape, dtype=bool)
    hit[first, cols] = True
    _note_branch(hit)

    def bw(g):
        full = np.zeros(x.shape)
        full[first, cols] = g
        return (full,)

    return _make(top, (x,), bw, "segment_max")


# --- gradient checking ----------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_skipped: int
    worst: Optional[tuple] = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error < 1e-4


def check_gradients(f: Callable[[], Tensor], params: Iterable[Tensor],
                    step: float = 1e-3, skip_kinks: bool = True) -> GradCheckResult:
    """Compare tape gradients of ``f()`` against central differences.

    ``params`` are perturbed in place one coordinate at a time and restored.
    When ``skip_kinks`` is set, coordinates whose ±step probe changes the
    branch taken by any relu/leaky_relu/max are left out, since a central
    difference across a corner does not estimate the derivative.
    """
    params = list(params)
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    try:
        with GradTape() as tape:
            with branch_recorder() as base_sig:
                loss = f()
        if loss.size != 1:
            raise ShapeError("gradient check needs a scalar function")
        tape.backward(loss)
        analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

        worst, worst_at, checked, skipped = 0.0, None, 0, 0
        base_sig = list(base_sig)
        for pi, p in enumerate(params):
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                with branch_recorder() as sig_plus:
                    f_plus = f().item()
                flat[k] = orig - step
                with branch_recorder() as sig_minus:
                    f_minus = f().item()
                flat[k] = orig
                if skip_kinks and (sig_plus != base_sig or sig_minus != base_sig):
                    skipped += 1
                    continue
                numeric = (f_plus - f_minus) / (2.0 * step)
                a = analytic[pi].reshape(-1)[k]
                err = abs(a - numeric) / max(abs(a), 1e-8)
                checked += 1
                if err > worst:
                    worst, worst_at = err, (pi, k, a, numeric)
        return GradCheckResult(worst, checked, skipped, worst_at)
    finally:
        for p, (rg, g) in zip(params, saved):
            p.requires_grad, p.grad = rg, g


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Max relative error of ``f``'s tape gradient at ``x`` versus central differences."""
    return check_gradients(lambda: f(x), [x], step).max_rel_error


def no_grad():
    """Context in which nothing is recorded (an empty tape stack frame)."""
    return _NoGrad()


class _NoGrad:
    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
