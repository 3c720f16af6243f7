"""Batch normalization over the trailing (channel) axis."""

from __future__ import annotations

import numpy as np

from deepcaps.autodiff import Tensor, make_op
from deepcaps.errors import EmptyDatasetError, ShapeError


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Normalize every channel of ``x`` (channels last).

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as exponential moving averages
    (``running = momentum * running + (1 - momentum) * batch``; the running
    variance uses the unbiased estimate). Inference mode uses the running stats.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have length {c} (channel extent), got {gamma.shape} and {beta.shape}")
    if x.shape[0] == 0:
        raise EmptyDatasetError("batchnorm on an empty batch")
    xd, gd, bd = x.data, gamma.data, beta.data
    axes = tuple(range(xd.ndim - 1))
    m = xd.size // c
    if training:
        mu = xd.mean(axis=axes)
        xc = xd - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= momentum
        running_var += (1 - momentum) * unbiased
    else:
        inv = 1.0 / np.sqrt(running_var.astype(xd.dtype) + eps)
        xhat = (xd - running_mean.astype(xd.dtype)) * inv
    inv = inv.astype(xd.dtype)
    xhat = xhat.astype(xd.dtype)
    out = gd * xhat + bd

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return make_op(out, (x, gamma, beta), bw, "batchnorm")
