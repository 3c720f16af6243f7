"""Capsule tensor ops: squash, flattening and 3D-convolution votes.

Capsule grids are ``[N, H, W, n, d]``: ``n`` capsule types per location, each a
``d``-dimensional activity vector.
"""

from __future__ import annotations

import numpy as np

from deepcaps.autodiff import Tensor, make_op
from deepcaps.conv import conv3d
from deepcaps.errors import ShapeError


def squash(s: Tensor, axis: int = -1) -> Tensor:
    """``v = |s|^2 / (1 + |s|^2) * s / |s|`` along ``axis``.

    Written as ``s * |s| / (1 + |s|^2)``, which has no singularity; the
    derivative at the zero vector is exactly 0.
    """
    sd = s.data
    n = np.sqrt((sd * sd).sum(axis=axis, keepdims=True))
    den = 1 + n * n
    coef = n / den
    out = sd * coef

    def bw(g):
        # d coef / d n = (1 - n^2) / den^2, and d n / d s = s / n
        safe = np.where(n > 0, n, 1)
        k = np.where(n > 0, (1 - n * n) / (den * den * safe), 0)
        dot = (sd * g).sum(axis=axis, keepdims=True)
        return ((coef * g + sd * (k * dot)).astype(sd.dtype),)

    return make_op(out, (s,), bw, "squash")


def flatten_caps(x: Tensor) -> Tensor:
    """``[N, H, W, n, d] -> [N, H*W*n, d]``.

    Row-major: capsule ``(h, w, t)`` lands at flat index ``(h * W + w) * n + t``;
    :func:`unflatten_caps` inverts it.
    """
    if x.ndim != 5:
        raise ShapeError(f"capsule grid must be [N, H, W, n, d], got shape {x.shape}")
    n, h, w, t, d = x.shape
    return x.reshape(n, h * w * t, d)


def unflatten_caps(x: Tensor, height: int, width: int, types: int) -> Tensor:
    n, k, d = x.shape
    if k != height * width * types:
        raise ShapeError(f"cannot unflatten {k} capsules into {height}x{width}x{types}")
    return x.reshape(n, height, width, types, d)


def vote_conv3d(x: Tensor, kernel: Tensor, stride=1, padding: str = "same") -> Tensor:
    """Votes from child capsules to parent capsule types via one 3D convolution.

    The grid ``[N, H, W, n, d]`` is viewed as a single-channel volume whose
    third spatial axis stacks the ``n`` capsule vectors (length ``n*d``).
    ``kernel`` is ``[kh, kw, d, 1, m*d']``; the depth extent and depth stride
    both equal ``d`` so each depth step reads one whole child capsule. Each
    output vote therefore linearly maps a ``kh x kw`` neighbourhood of one
    child type. Returns ``[N, H', W', n, m, d']``; ``m*d'`` must be given by
    the kernel's last axis and ``m`` and ``d'`` are recovered by the caller
    through :func:`split_votes`.
    """
    if x.ndim != 5:
        raise ShapeError(f"capsule grid must be [N, H, W, n, d], got shape {x.shape}")
    if kernel.ndim != 5 or kernel.shape[3] != 1:
        raise ShapeError(f"vote kernel must be [kh, kw, d, 1, m*d'], got shape {kernel.shape}")
    nb, h, w, n, d = x.shape
    kh, kw = kernel.shape[:2]
    if kernel.shape[2] != d:
        raise ShapeError(f"vote kernel depth extent {kernel.shape[2]} must equal child capsule dim {d}")
    if kh > h or kw > w:
        raise ShapeError(f"vote kernel {kh}x{kw} larger than capsule grid {h}x{w}")
    s = (stride, stride) if isinstance(stride, int) else tuple(stride)
    vol = x.reshape(nb, h, w, n * d, 1)
    out = conv3d(vol, kernel, strides=(s[0], s[1], d), padding=padding)
    return out  # [N, H', W', n, m*d']


def split_votes(votes: Tensor, parents: int, parent_dim: int) -> Tensor:
    nb, h, w, n, md = votes.shape
    if md != parents * parent_dim:
        raise ShapeError(f"vote channels {md} != parents {parents} x dim {parent_dim}")
    return votes.reshape(nb, h, w, n, parents, parent_dim)
