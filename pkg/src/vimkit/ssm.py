"""Selective state-space recurrence.

Per channel ``d`` and state ``n``::

    a_bar[t] = exp(delta[t, d] * A[d, n])          # zero-order hold
    b_bar[t] = delta[t, d] * B[t, n]               # Euler
    h[t]     = a_bar[t] * h[t-1] + b_bar[t] * x[t, d]
    y[t, d]  = sum_n C[t, n] * h[t, d, n] + d_skip[d] * x[t, d]

``A = -exp(a_log)`` keeps the state matrix strictly negative.  Two forward
kernels are provided: a step-by-step reference and a blocked variant that
discretises a whole block of tokens in one vectorised pass.  Both share one
analytic reverse recurrence, recorded on the tape as a single op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor

__all__ = [
    "SsmParams",
    "ScanInstance",
    "StepCounter",
    "init_ssm_params",
    "selectivize",
    "discretize",
    "selective_scan",
    "scan_sequential",
    "scan_blocked",
    "DELTA_INIT",
]

# initial step size for the softplus bias warm start
DELTA_INIT = 0.05


@dataclass
class SsmParams:
    a_log: Tensor  # [D, N]
    d_skip: Tensor  # [D]
    w_delta: Tensor  # [D, 1] down-projection to one scalar per token
    dt_up: Tensor  # [1, D] per-channel expansion of that scalar
    delta_bias: Tensor  # [D]
    w_b: Tensor  # [D, N]
    w_c: Tensor  # [D, N]

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def state_dim(self) -> int:
        return self.a_log.shape[1]

    def named(self) -> list[tuple[str, Tensor]]:
        return [
            ("a_log", self.a_log),
            ("d_skip", self.d_skip),
            ("w_delta", self.w_delta),
            ("dt_up", self.dt_up),
            ("delta_bias", self.delta_bias),
            ("w_b", self.w_b),
            ("w_c", self.w_c),
        ]


@dataclass
class ScanInstance:
    x: Tensor  # [..., L, D]
    delta: Tensor  # [..., L, D], nonnegative
    b: Tensor  # [..., L, N]
    c: Tensor  # [..., L, N]

    @property
    def length(self) -> int:
        return self.x.shape[-2]


class StepCounter:
    """Counts scalar recurrence updates (one per (t, d, n) per sample)."""

    def __init__(self) -> None:
        self.steps = 0

    def add(self, n: int) -> None:
        self.steps += int(n)


def _inv_softplus(y: float) -> float:
    return math.log(math.expm1(y))


def init_ssm_params(d_inner: int, state_dim: int, rng: np.random.Generator) -> SsmParams:
    if d_inner < 1 or state_dim < 1:
        raise ValueError("d_inner and state_dim must be >= 1")
    bound = 1.0 / math.sqrt(d_inner)
    a = np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d_inner, 1))
    return SsmParams(
        a_log=Tensor(np.log(a), requires_grad=True),
        d_skip=Tensor(np.ones(d_inner), requires_grad=True),
        w_delta=Tensor(rng.uniform(-bound, bound, (d_inner, 1)), requires_grad=True),
        dt_up=Tensor(rng.uniform(-1.0, 1.0, (1, d_inner)), requires_grad=True),
        delta_bias=Tensor(np.full(d_inner, _inv_softplus(DELTA_INIT)), requires_grad=True),
        w_b=Tensor(rng.uniform(-bound, bound, (d_inner, state_dim)), requires_grad=True),
        w_c=Tensor(rng.uniform(-bound, bound, (d_inner, state_dim)), requires_grad=True),
    )


def selectivize(x: Tensor, p: SsmParams) -> ScanInstance:
    """Make delta, B and C functions of the current token."""
    if x.shape[-1] != p.d_inner:
        raise ShapeError(f"selectivize: x {x.shape} does not match projections for D={p.d_inner}")
    low = T.matmul(x, p.w_delta)
    delta = T.softplus(T.matmul(low, p.dt_up) + p.delta_bias)
    b = T.matmul(x, p.w_b)
    c = T.matmul(x, p.w_c)
    return ScanInstance(x=x, delta=delta, b=b, c=c)


def discretize(delta: Tensor, a_log: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(a_bar, b_bar)`` of shape ``[..., L, D, N]`` as taped tensors."""
    if np.any(delta.data < 0):
        raise ValueError("discretize: delta must be nonnegative")
    A = -np.exp(a_log.data)
    dA = delta.data[..., :, None] * A
    a_bar = np.exp(dA)

    def grad_a(g):
        ga = g * a_bar
        gdelta = (ga * A).sum(axis=-1)
        g_alog = (ga * delta.data[..., :, None] * A).reshape(-1, *A.shape).sum(axis=0)
        return gdelta, g_alog

    a_out = T.record("neg_exp_of_product", a_bar, (delta, a_log), grad_a)
    d4 = delta.data[..., :, None]
    b4 = b.data[..., None, :]
    b_out = T.record(
        "euler_b",
        d4 * b4,
        (delta, b),
        lambda g: ((g * b4).sum(axis=-1), (g * d4).sum(axis=-2)),
    )
    return a_out, b_out


def _check_shapes(x, delta, a_log, b, c, d_skip) -> None:
    d, n = a_log.shape
    lead = x.shape[:-1]
    if x.shape[-1] != d or delta.shape != x.shape or d_skip.shape != (d,):
        raise ShapeError(
            f"scan: x {x.shape}, delta {delta.shape}, a_log {a_log.shape}, d_skip {d_skip.shape}"
        )
    if b.shape != lead + (n,) or c.shape != lead + (n,):
        raise ShapeError(f"scan: b {b.shape} / c {c.shape} do not match x {x.shape} and N={n}")


def _first_bad_step(hs: np.ndarray) -> int:
    bad = ~np.isfinite(hs)
    per_t = bad.reshape(-1, *hs.shape[-3:]).any(axis=(0, 2, 3))
    return int(np.argmax(per_t))


def _forward_sequential(x, delta, A, b, c, counter):
    lead, length, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    n = A.shape[1]
    per_step = d * n * int(np.prod(lead, dtype=np.int64))
    h = np.zeros(lead + (d, n), dtype=x.dtype)
    hs = np.empty(lead + (length, d, n), dtype=x.dtype)
    y = np.empty_like(x)
    a_all = np.empty_like(hs)
    for t in range(length):
        a_t = np.exp(delta[..., t, :, None] * A)
        bx_t = (delta[..., t, :] * x[..., t, :])[..., :, None] * b[..., t, None, :]
        h = a_t * h + bx_t
        a_all[..., t, :, :] = a_t
        hs[..., t, :, :] = h
        y[..., t, :] = (h @ c[..., t, :, None])[..., 0]
        if counter is not None:
            counter.add(per_step)
    return y, hs, a_all


def _forward_blocked(x, delta, A, b, c, block, counter):
    lead, length, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    n = A.shape[1]
    per_step = d * n * int(np.prod(lead, dtype=np.int64))
    h = np.zeros(lead + (d, n), dtype=x.dtype)
    hs = np.empty(lead + (length, d, n), dtype=x.dtype)
    y = np.empty_like(x)
    a_all = np.empty_like(hs)
    block = max(1, min(block, length))
    for s in range(0, length, block):
        e = min(s + block, length)
        a_blk = a_all[..., s:e, :, :]
        np.exp(delta[..., s:e, :, None] * A, out=a_blk)
        bx_blk = (delta[..., s:e, :] * x[..., s:e, :])[..., :, None] * b[..., s:e, None, :]
        for i in range(e - s):
            h = a_blk[..., i, :, :] * h + bx_blk[..., i, :, :]
            hs[..., s + i, :, :] = h
        if counter is not None:
            counter.add(per_step * (e - s))
        y[..., s:e, :] = (hs[..., s:e, :, :] @ c[..., s:e, :, None])[..., 0]
    return y, hs, a_all


def selective_scan(
    x: Tensor,
    delta: Tensor,
    a_log: Tensor,
    b: Tensor,
    c: Tensor,
    d_skip: Tensor,
    block: int | None = None,
    counter: StepCounter | None = None,
) -> Tensor:
    """Run the recurrence as one taped op. ``block=None`` selects the reference kernel."""
    _check_shapes(x, delta, a_log, b, c, d_skip)
    if block is not None and block < 1:
        raise ValueError("block must be a positive integer")
    A = -np.exp(a_log.data)
    if block is None:
        y, hs, a_all = _forward_sequential(x.data, delta.data, A, b.data, c.data, counter)
    else:
        y, hs, a_all = _forward_blocked(x.data, delta.data, A, b.data, c.data, block, counter)
    if not np.isfinite(hs).all():
        raise NonFiniteError(f"selective scan: non-finite state at step {_first_bad_step(hs)}")
    y = y + d_skip.data * x.data

    def grad_fn(gy):
        xd, dd, bd, cd = x.data, delta.data, b.data, c.data
        gh = np.empty_like(hs)
        acc = np.zeros(hs.shape[:-3] + hs.shape[-2:], dtype=hs.dtype)
        for t in range(hs.shape[-3] - 1, -1, -1):
            acc = gy[..., t, :, None] * cd[..., t, None, :] + acc
            gh[..., t, :, :] = acc
            acc = acc * a_all[..., t, :, :]
        # h_prev * a_bar, shifted so step 0 sees the zero initial state
        ha = np.empty_like(hs)
        ha[..., 0, :, :] = 0.0
        np.multiply(hs[..., :-1, :, :], a_all[..., 1:, :, :], out=ha[..., 1:, :, :])
        g_c = (gy[..., :, None, :] @ hs)[..., 0, :]
        g_b = ((dd * xd)[..., :, None, :] @ gh)[..., 0, :]
        ghb = (gh @ bd[..., :, :, None])[..., 0]
        g_x = gy * d_skip.data + ghb * dd
        gha = gh * ha
        g_delta = ghb * xd + (gha * A).sum(axis=-1)
        g_A = (gha * dd[..., :, :, None]).reshape(-1, *A.shape).sum(axis=0)
        g_alog = g_A * A
        g_d = (gy * xd).reshape(-1, xd.shape[-1]).sum(axis=0)
        return g_x, g_delta, g_alog, g_b, g_c, g_d

    return T.record("selective_scan", y, (x, delta, a_log, b, c, d_skip), grad_fn)


def scan_sequential(inst: ScanInstance, p: SsmParams, counter: StepCounter | None = None) -> Tensor:
    return selective_scan(inst.x, inst.delta, p.a_log, inst.b, inst.c, p.d_skip, None, counter)


def scan_blocked(
    inst: ScanInstance, p: SsmParams, block: int = 16, counter: StepCounter | None = None
) -> Tensor:
    if block < 1:
        raise ValueError("block must be a positive integer")
    return selective_scan(inst.x, inst.delta, p.a_log, inst.b, inst.c, p.d_skip, block, counter)
