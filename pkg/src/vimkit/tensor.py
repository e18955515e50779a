"""Dense tensors with a tape-based reverse-mode autodiff.

Every op produces a new :class:`Tensor`; when any input requires a gradient
the op is appended to the active :class:`Tape` together with a closure that
maps the output gradient to input gradients.  ``backward`` walks the tape in
reverse, which is a valid topological order because ops are recorded in the
order they execute.

Ops accept optional leading batch axes where noted so that the model can run
minibatches; the documented shapes are the per-sample shapes.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "ShapeError",
    "get_dtype",
    "set_dtype",
    "precision",
    "no_grad",
    "current_tape",
    "tensor",
    "zeros",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "reshape",
    "transpose",
    "flip",
    "take",
    "insert_row",
    "split_last",
    "conv1d_causal_depthwise",
    "layer_norm",
    "softmax",
    "log_softmax",
    "apply_unary",
    "silu",
    "softplus",
    "exp",
    "backward",
    "record",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_DTYPE = np.float32


def get_dtype() -> type:
    return _DTYPE


def set_dtype(dtype) -> None:
    """Switch the build-wide float precision (float32 or float64)."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the default precision, e.g. float64 for gradient checks."""
    old = _DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(old)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DTYPE), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Tape
# --------------------------------------------------------------------------


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    entries: list[TapeEntry] = field(default_factory=list)
    enabled: bool = True

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def reset(self) -> None:
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    tape = current_tape()
    old = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = old


def _check_finite(op: str, out: np.ndarray, inputs: Sequence[Tensor]) -> None:
    if not np.isfinite(out).all():
        names = ", ".join(t.name or f"<{t.shape}>" for t in inputs)
        raise NonFiniteError(f"{op}: non-finite output {out.shape} from inputs [{names}]")


def record(op: str, out: np.ndarray, inputs: Sequence[Tensor], grad_fn) -> Tensor:
    """Wrap ``out`` as a Tensor and put the op on the tape if any input needs grad.

    ``grad_fn(g)`` must return one gradient (or None) per input.
    """
    _check_finite(op, out, inputs)
    tape = current_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    result = Tensor.__new__(Tensor)
    result.data = np.ascontiguousarray(out, dtype=_DTYPE)
    result.requires_grad = needs
    result.grad = None
    result.name = None
    if needs:
        tape.record(TapeEntry(op, tuple(inputs), result, grad_fn))
    return result


def backward(loss: Tensor, tape: Tape | None = None, params: Sequence[Tensor] = ()) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

    Leaves listed in ``params`` that the loss does not reach receive zeros.
    The tape is consumed (cleared) afterwards.
    """
    tape = tape if tape is not None else current_tape()
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(e.output) for e in tape.entries}
    leaves: dict[int, Tensor] = {}
    for entry in tape.entries:
        for inp in entry.inputs:
            if inp.requires_grad and id(inp) not in produced:
                leaves[id(inp)] = inp
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for inp, ig in zip(entry.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.shape != inp.shape:
                raise ShapeError(f"{entry.op}: gradient shape {ig.shape} != input {inp.shape}")
            key = id(inp)
            if key in produced:
                grads[key] = grads[key] + ig if key in grads else ig
            else:
                inp.grad = ig.astype(inp.data.dtype) if inp.grad is None else inp.grad + ig
    tape.reset()
    for p in list(leaves.values()) + list(params):
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    return record(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    return record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return record(
        "mean", np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def flip(a: Tensor, axis: int) -> Tensor:
    """Reverse ``a`` along ``axis`` (time reversal for the backward scan)."""
    return record("flip", np.flip(a.data, axis=axis), (a,), lambda g: (np.flip(g, axis=axis),))


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select one position along ``axis``, dropping that axis."""
    out = np.take(a.data, index, axis=axis)

    def grad_fn(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return record("take", out, (a,), grad_fn)


def insert_row(seq: Tensor, row: Tensor, index: int) -> Tensor:
    """Insert ``row`` (shape [D]) into ``seq`` ([..., L, D]) at position ``index``."""
    if row.shape != seq.shape[-1:]:
        raise ShapeError(f"insert_row: row {row.shape} vs sequence {seq.shape}")
    lead = seq.shape[:-2]
    r = np.broadcast_to(row.data, lead + (1, row.shape[0]))
    out = np.concatenate([seq.data[..., :index, :], r, seq.data[..., index:, :]], axis=-2)

    def grad_fn(g):
        gs = np.concatenate([g[..., :index, :], g[..., index + 1 :, :]], axis=-2)
        gr = g[..., index, :].reshape(-1, row.shape[0]).sum(axis=0)
        return gs, gr

    return record("insert_row", out, (seq, row), grad_fn)


def split_last(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last axis into consecutive chunks of the given sizes."""
    if sum(sizes) != a.shape[-1]:
        raise ShapeError(f"split_last: sizes {list(sizes)} do not cover {a.shape}")
    outs = []
    start = 0
    for n in sizes:
        lo, hi = start, start + n

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[..., lo:hi] = g
            return (full,)

        outs.append(record("split", a.data[..., lo:hi], (a,), grad_fn))
        start = hi
    return outs


# --------------------------------------------------------------------------
# Linear algebra, convolution, normalisation
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]``; leading axes of ``a`` are batch axes."""
    if b.ndim != 2 or a.ndim < 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    out = a.data @ b.data

    def grad_fn(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record("matmul", out, (a, b), grad_fn)


def conv1d_causal_depthwise(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal convolution over time.

    ``y[t, d] = bias[d] + sum_j kernel[j, d] * x[t - K + 1 + j, d]`` with zero
    left padding; ``x`` is ``[..., L, D]``.
    """
    if kernel.ndim != 2 or kernel.shape[1] != x.shape[-1] or bias.shape != (x.shape[-1],):
        raise ShapeError(
            f"conv1d: channel mismatch, x {x.shape}, kernel {kernel.shape}, bias {bias.shape}"
        )
    k, _ = kernel.shape
    length = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for j in range(k):
        out += kernel.data[j] * xp[..., j : j + length, :]

    def grad_fn(g):
        gxp = np.zeros_like(xp)
        gk = np.empty_like(kernel.data)
        for j in range(k):
            gxp[..., j : j + length, :] += kernel.data[j] * g
            gk[j] = (g * xp[..., j : j + length, :]).reshape(-1, g.shape[-1]).sum(axis=0)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gxp[..., k - 1 :, :], gk, gb

    return record("conv1d_causal_depthwise", out, (x, kernel, bias), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis with population variance, then scale and shift."""
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: D mismatch, x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gxhat = g * gamma.data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = (g * xhat).reshape(-1, d).sum(axis=0)
        gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gbeta

    return record("layer_norm", out, (x, gamma, beta), grad_fn)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return record("softmax", s, (x,), grad_fn)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def grad_fn(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return record("log_softmax", out, (x,), grad_fn)


# --------------------------------------------------------------------------
# Unary table
# --------------------------------------------------------------------------


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return expit(v)


def _silu(v):
    return v * _sigmoid(v)


def _silu_grad(v, y):
    s = _sigmoid(v)
    return s + v * s * (1.0 - s)


def _softplus(v):
    return np.logaddexp(0.0, v).astype(v.dtype, copy=False)


def _softplus_grad(v, y):
    return _sigmoid(v)


def _exp(v):
    return np.exp(v)


def _exp_grad(v, y):
    return y


# name -> (value, derivative(v, value))
UNARY = {
    "silu": (_silu, _silu_grad),
    "softplus": (_softplus, _softplus_grad),
    "exp": (_exp, _exp_grad),
}


def apply_unary(x: Tensor, f: str) -> Tensor:
    try:
        fn, dfn = UNARY[f]
    except KeyError:
        raise ValueError(f"unknown unary function {f!r}; known: {sorted(UNARY)}") from None
    with np.errstate(over="ignore"):
        y = fn(x.data)
    return record(f, y, (x,), lambda g: (g * dfn(x.data, y),))


def silu(x: Tensor) -> Tensor:
    return apply_unary(x, "silu")


def softplus(x: Tensor) -> Tensor:
    return apply_unary(x, "softplus")


def exp(x: Tensor) -> Tensor:
    return apply_unary(x, "exp")
