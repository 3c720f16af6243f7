"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

import numpy as np

from deepcaps.autodiff import Tensor, backward, fresh_tape, no_grad
from deepcaps.errors import NonFiniteError, ShapeError

# a power of two keeps x +/- eps exact, so linear functions difference exactly
DEFAULT_EPS = 2.0 ** -14


def numerical_grad(f, xs, eps=DEFAULT_EPS):
    """Central differences of scalar ``f(*xs)`` with respect to every element of every ``xs``."""
    grads = []
    with no_grad():
        for x in xs:
            x.data = np.ascontiguousarray(x.data)
            g = np.zeros(x.shape, dtype=np.float64)
            flat = x.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = _scalar(f(*xs))
                flat[i] = orig - eps
                fm = _scalar(f(*xs))
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grad(f, xs):
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    with fresh_tape() as tape:
        out = f(*xs)
        if out.data.size != 1:
            raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
        _scalar(out)
        backward(out, tape)
    grads = [np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64) for x in xs]
    for x, (rg, g) in zip(xs, saved):
        x.requires_grad, x.grad = rg, g
    return grads


def grad_check(f, x, eps: float = DEFAULT_EPS, mask=None) -> float:
    """Max relative error between tape and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors passed positionally to ``f``.
    Relative error per element is ``|a - n| / max(|a|, |n|, 1e-8)``.
    ``mask`` (one boolean array per tensor) restricts which elements count.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError("grad_check input contains non-finite values")
    ana = analytic_grad(f, xs)
    num = numerical_grad(f, xs, eps)
    worst = 0.0
    for i, (a, n) in enumerate(zip(ana, num)):
        err = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if mask is not None and mask[i] is not None:
            err = err[mask[i]]
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data, dtype=np.float64).reshape(-1)[0])
    if not np.isfinite(v):
        raise NonFiniteError("non-finite value during grad_check")
    return v
