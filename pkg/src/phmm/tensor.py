"""Minimal dense tensor with reverse-mode automatic differentiation.

Values are float64 numpy arrays. Operations executed while a Tape is
active are recorded on it; ``backward`` replays the tape in reverse and
accumulates gradients into every ``requires_grad`` leaf. Without an
active tape, ops are plain numpy math (inference mode).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's mathematical domain."""


class ContractError(RuntimeError):
    """An operation was invoked outside its contract."""


_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of operations enabling one reverse pass.

    Records are appended in construction order, which is already a
    topological order: every node is created after its parents. Intended
    usage is one tape per forward pass, discarded after backward.
    """

    def __init__(self):
        self._records = []  # (out, inputs, backward_fn)

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def append(self, out, inputs, backward_fn):
        self._records.append((out, inputs, backward_fn))

    def __len__(self):
        return len(self._records)


class Tensor:
    """Dense n-d array participating in a gradient tape.

    ``grad`` is populated lazily by ``backward``; repeated backward calls
    accumulate. Tensors are treated as immutable once created.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(arr: np.ndarray, op: str):
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{op} produced a non-finite value")


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
    tape = _active_tape()
    if tape is not None and any(
        t.requires_grad or t.tape is not None for t in inputs
    ):
        out.tape = tape
        tape.append(out, inputs, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``.

    Sums over prepended leading axes and over size-1 axes that were
    stretched. Sanctioned broadcasting is a leading batch dimension plus
    size-1 axes (needed e.g. for attention weights of shape (B, 1)).
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data + b.data)
    except ValueError as e:
        raise DimensionError(f"add: {a.shape} vs {b.shape}") from e

    def backward(g, grads):
        grads.add(a, _unbroadcast(g, a.shape))
        grads.add(b, _unbroadcast(g, b.shape))

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data - b.data)
    except ValueError as e:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}") from e

    def backward(g, grads):
        grads.add(a, _unbroadcast(g, a.shape))
        grads.add(b, _unbroadcast(-g, b.shape))

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = Tensor(a.data * b.data)
    except ValueError as e:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}") from e

    def backward(g, grads):
        grads.add(a, _unbroadcast(g * b.data, a.shape))
        grads.add(b, _unbroadcast(g * a.data, b.shape))

    return _record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)

    def backward(g, grads):
        grads.add(a, -g)

    return _record(out, (a,), backward)


def matmul(a, b) -> Tensor:
    """Matrix product: (r,s)@(s,c) -> (r,c), or (r,s)@(s,) -> (r,)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    _check_finite(out.data, "matmul")

    def backward(g, grads):
        if b.ndim == 1:
            grads.add(a, np.outer(g, b.data))
            grads.add(b, a.data.T @ g)
        else:
            grads.add(a, g @ b.data.T)
            grads.add(b, a.data.T @ g)

    return _record(out, (a, b), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def backward(g, grads):
        grads.add(a, g.T)

    return _record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(shape))

    def backward(g, grads):
        grads.add(a, g.reshape(a.shape))

    return _record(out, (a,), backward)


# -- nonlinearities -------------------------------------------------------

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    _check_finite(out.data, "exp")

    def backward(g, grads):
        grads.add(a, g * out.data)

    return _record(out, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    out = Tensor(np.log(a.data))

    def backward(g, grads):
        grads.add(a, g / a.data)

    return _record(out, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.tanh(a.data))

    def backward(g, grads):
        grads.add(a, g * (1.0 - out.data * out.data))

    return _record(out, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Stable in both tails.
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = Tensor(out_data)

    def backward(g, grads):
        grads.add(a, g * out.data * (1.0 - out.data))

    return _record(out, (a,), backward)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero outside the interval."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    mask = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)

    def backward(g, grads):
        grads.add(a, g * mask)

    return _record(out, (a,), backward)


def softmax_lastdim(a) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = Tensor(e / e.sum(axis=-1, keepdims=True))

    def backward(g, grads):
        s = out.data
        grads.add(a, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _record(out, (a,), backward)


def log_softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = Tensor(shifted - lse)

    def backward(g, grads):
        s = np.exp(out.data)
        grads.add(a, g - s * g.sum(axis=-1, keepdims=True))

    return _record(out, (a,), backward)


# -- reductions and structure ---------------------------------------------

def tsum(a) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def backward(g, grads):
        grads.add(a, np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), backward)


def sum_lastdim(a, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum(axis=-1, keepdims=keepdims))

    def backward(g, grads):
        if not keepdims:
            g = np.expand_dims(g, -1)
        grads.add(a, np.broadcast_to(g, a.shape).copy())

    return _record(out, (a,), backward)


def concat_lastdim(tensors: Iterable[Tensor]) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ContractError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in ts], axis=-1))
    sizes = [t.shape[-1] for t in ts]

    def backward(g, grads):
        offset = 0
        for t, size in zip(ts, sizes):
            grads.add(t, g[..., offset : offset + size])
            offset += size

    return _record(out, tuple(ts), backward)


def slice_lastdim(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start < stop <= a.shape[-1]):
        raise DimensionError(f"slice [{start}:{stop}] of last dim {a.shape[-1]}")
    out = Tensor(a.data[..., start:stop].copy())

    def backward(g, grads):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        grads.add(a, full)

    return _record(out, (a,), backward)


# -- backward pass ---------------------------------------------------------

class _GradStore:
    """Per-backward-pass gradient buffers keyed by tensor identity."""

    def __init__(self):
        self._buf: dict[int, np.ndarray] = {}

    def add(self, t: Tensor, g: np.ndarray):
        key = id(t)
        if key in self._buf:
            self._buf[key] = self._buf[key] + g
        else:
            self._buf[key] = np.array(g, dtype=np.float64, copy=True)

    def get(self, t: Tensor):
        return self._buf.get(id(t))


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    ``loss`` must be a scalar recorded on a tape. Calling backward again
    (without zeroing grads) adds another copy of the gradients.
    """
    if loss.data.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        raise ContractError("loss is not connected to a tape")

    grads = _GradStore()
    grads.add(loss, np.array(1.0))
    for out, inputs, backward_fn in reversed(tape._records):
        g = grads.get(out)
        if g is None:
            continue
        backward_fn(g, grads)
    # Flush into persistent .grad buffers of requires_grad tensors.
    seen = set()
    for out, inputs, _ in tape._records:
        for t in inputs:
            if t.requires_grad and id(t) not in seen:
                seen.add(id(t))
                g_t = grads.get(t)
                if g_t is None:
                    continue
                if t.grad is None:
                    t.grad = np.array(g_t, copy=True)
                else:
                    t.grad = t.grad + g_t


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar Tensor and must be deterministic;
    non-determinism (two differing evaluations at x) raises ContractError.
    Relative error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not (0 < eps <= 1e-2):
        raise ContractError(f"eps must lie in (0, 1e-2], got {eps}")
    v1 = f(Tensor(x.data.copy()))
    if v1.data.ndim != 0:
        raise ContractError("finite_diff_check requires a scalar-valued f")
    v2 = f(Tensor(x.data.copy()))
    if v1.item() != v2.item():
        raise ContractError("f is not deterministic at x")

    probe = Tensor(x.data.copy(), requires_grad=True)

    probe.zero_grad()
    with Tape():
        loss = f(probe)
    backward(loss)
    analytic = probe.grad if probe.grad is not None else np.zeros(probe.shape)

    flat = probe.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(probe.data.copy())).item()
        flat[i] = orig - eps
        lo = f(Tensor(probe.data.copy())).item()
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0
