"""Dense float64 tensors with tape-based reverse-mode autodiff.

Operations record themselves onto the active :class:`Tape` (entered with a
``with`` block) whenever one of their inputs requires a gradient.  Outside a
tape everything runs as plain numpy and nothing is recorded.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum() * 0.5
    >>> backward(loss, tape)
    >>> x.grad
    array([1., 2., 3.])
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("active_tape", default=None)
_ALLOW_NONFINITE: contextvars.ContextVar[bool] = contextvars.ContextVar("allow_nonfinite", default=False)
_EXACT_MATMUL: contextvars.ContextVar[bool] = contextvars.ContextVar("exact_matmul", default=False)


@contextlib.contextmanager
def allow_nonfinite(flag: bool = True):
    """Debug switch: let NaN/Inf through tensor construction."""
    token = _ALLOW_NONFINITE.set(flag)
    try:
        yield
    finally:
        _ALLOW_NONFINITE.reset(token)


@contextlib.contextmanager
def exact_matmul(flag: bool = True):
    """Deterministic mode: matmul accumulates over the inner index in order.

    Results then match a naive triple loop bit for bit, independent of BLAS
    blocking or thread count.  Much slower; meant for verification.
    """
    token = _EXACT_MATMUL.set(flag)
    try:
        yield
    finally:
        _EXACT_MATMUL.reset(token)


def _check_finite(arr: np.ndarray) -> None:
    if not _ALLOW_NONFINITE.get() and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "version", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        # bumped whenever an optimizer rewrites ``data``
        self.version = 0
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        _check_finite(arr)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.version = 0
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, arr: np.ndarray) -> None:
        """Replace the values in place (optimizer use) and bump the version."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign shape {arr.shape} onto {self.data.shape}")
        _check_finite(arr)
        self.data = arr
        self.version += 1

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, backward_fn)`` where ``backward_fn``
    maps the output gradient to a tuple of input gradients (``None`` for
    inputs that do not need one).  Records are appended in execution order,
    which is already a topological order.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


@contextlib.contextmanager
def no_grad():
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


def record(out: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``out`` as a Tensor and record it if any input needs a gradient.

    Public so that fused operations outside this module (the batched expert
    path, for one) can plug in their own backward rule.
    """
    t = Tensor._wrap(out)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t._tape = tape
        tape.records.append((t, tuple(inputs), backward_fn))
    return t


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; call :func:`zero_grads` (or set
    ``.grad = None``) between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else loss._tape
    if tape is None:
        raise ContractError("loss was not produced on a tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for x, gx in zip(inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            if x.is_leaf:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
            else:
                key = id(x)
                grads[key] = gx if key not in grads else grads[key] + gx


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# --------------------------------------------------------------------------
# elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return record(out, (a, b),
                  lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return record(out, (x,), lambda g: (g / x.data,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return record(out, (x,), bw)


def log_sigmoid(x) -> Tensor:
    """log(sigmoid(x)) evaluated as -softplus(-x)."""
    x = as_tensor(x)
    v = x.data
    out = np.minimum(v, 0.0) - np.log1p(np.exp(-np.abs(v)))
    # d/dx log sigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(np.minimum(-v, 0.0)) / (1.0 + np.exp(-np.abs(v)))
    return record(out, (x,), lambda g: (g * sig_neg,))


def log1mexp(x) -> Tensor:
    """log(1 - exp(x)) for x < 0, switching branches at -ln 2."""
    x = as_tensor(x)
    v = x.data
    if np.any(v >= 0):
        raise ContractError("log1mexp needs strictly negative inputs")
    out = np.where(v > -math.log(2.0), np.log(-np.expm1(v)), np.log1p(-np.exp(v)))
    # derivative -exp(x)/(1-exp(x)) = 1/(1-exp(-x))
    return record(out, (x,), lambda g: (g / -np.expm1(-v),))


# --------------------------------------------------------------------------
# reductions and shape

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    inv = None if axes is None else tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return record(np.array(x.data[idx]), (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return record(np.concatenate([x.data for x in xs], axis=axis), xs,
                  lambda g: tuple(np.split(g, sizes, axis=axis)))


def take_rows(table, idx) -> Tensor:
    """Embedding lookup: ``table[idx]`` for an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return record(table.data[idx], (table,), bw)


def pick(x, idx) -> Tensor:
    """Gather along the last axis: ``out[..., ] = x[..., idx[...]]``."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"pick index shape {idx.shape} vs tensor shape {x.shape}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        return (full,)

    return record(out, (x,), bw)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    x = as_tensor(x)
    mask = np.broadcast_to(mask, x.shape)
    return record(np.where(mask, value, x.data), (x,), lambda g: (np.where(mask, 0.0, g),))


# --------------------------------------------------------------------------
# linear algebra and normalisation

def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if not _EXACT_MATMUL.get():
        return a @ b
    shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(shape)
    for t in range(a.shape[-1]):
        out += a[..., :, t:t + 1] * b[..., t:t + 1, :]
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(_mm(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = _mm(a.data.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            else:
                gb = _unbroadcast(_mm(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record(_mm(a.data, b.data), (a, b), bw)


def _softmax_np(v: np.ndarray, axis: int) -> np.ndarray:
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax over empty axis {axis} of shape {x.shape}")
    s = _softmax_np(x.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax over empty axis {axis} of shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gx = gg = gb = None
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, n).sum(axis=0)
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return record(xhat * gain.data + bias.data, (x, gain, bias), bw)


# --------------------------------------------------------------------------
# gradient oracle

def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor,
                               eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` is called on fresh constant tensors and never sees a tape.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)

    def call(arr):
        with no_grad():
            out = f(Tensor(arr))
        val = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float64)
        if val.size != 1:
            raise ContractError(f"f must return a scalar, got shape {val.shape}")
        return float(val.reshape(()))

    for i in range(base.size):
        plus = base.copy()
        minus = base.copy()
        plus.reshape(-1)[i] += eps
        minus.reshape(-1)[i] -= eps
        flat[i] = (call(plus) - call(minus)) / (2.0 * eps)
    return Tensor(grad)


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """max|a-b| / max(max|a|, max|b|, floor)."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


# --------------------------------------------------------------------------
# random numbers

class Rng:
    """Seeded counter-based stream (Philox) with Box-Muller normals.

    Normals are generated here instead of through numpy's ziggurat so the
    sampling recipe is fixed and spelled out.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2 ** 64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    @property
    def counter(self) -> int:
        state = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(state)))

    def fork(self, label: str) -> Rng:
        """Independent child stream keyed by ``(seed, label)``."""
        h = hashlib.sha256(f"{self.seed}:{label}".encode()).digest()
        return Rng(int.from_bytes(h[:8], "little"))

    def uniform(self, shape=()) -> np.ndarray:
        return self._gen.random(shape)

    def normal(self, shape=(), std: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])[:n]
        return (std * z).reshape(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)
