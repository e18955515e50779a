"""Central finite-difference oracle shared by the gradient suites."""

from __future__ import annotations

import numpy as np

from vimkit import tensor as T

H = 1e-5
RTOL = 1e-3


def numeric_grad(f, inputs, h=H):
    """d f / d input for each input by central differences; ``f`` returns a scalar Tensor."""
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            with T.no_grad():
                up = f().item()
            flat[i] = old - h
            with T.no_grad():
                down = f().item()
            flat[i] = old
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(f, inputs):
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    tape = T.current_tape()
    tape.reset()
    loss = f()
    T.backward(loss, tape, params=inputs)
    return [t.grad.copy() for t in inputs]


def rel_err(a, n):
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(n), np.linalg.norm(a), 1e-8))


def check(f, inputs, rtol=RTOL):
    """Return the worst relative error between analytic and numeric gradients."""
    an = analytic_grad(f, inputs)
    nu = numeric_grad(f, inputs)
    worst = max(rel_err(a, n) for a, n in zip(an, nu))
    assert worst <= rtol, f"gradient mismatch: rel err {worst:.3e} > {rtol}"
    return worst
