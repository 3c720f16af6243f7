"""Channels-last convolutions via patch gathering (im2col) and a single matmul.

Layouts: inputs are ``[N, *spatial, C_in]`` and kernels ``[*k, C_in, C_out]``.
"same" padding gives ``ceil(size / stride)`` outputs; when the total pad is
odd the extra row/column goes on the trailing edge.
"""

from __future__ import annotations

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from deepcaps.autodiff import Tensor, make_op
from deepcaps.errors import ShapeError

_AXIS_NAMES = {2: ("height", "width"), 3: ("depth", "height", "width")}


def _as_tuple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ShapeError(f"expected {n} values, got {v}")
    return v


def conv_geometry(sizes, ksize, strides, padding):
    """Output extents and ``(before, after)`` pads for each spatial axis."""
    outs, pads = [], []
    for size, k, s in zip(sizes, ksize, strides):
        if s < 1:
            raise ShapeError(f"stride must be positive, got {s}")
        if padding == "same":
            out = -(-size // s)
            total = max((out - 1) * s + k - size, 0)
            pads.append((total // 2, total - total // 2))
        elif padding == "valid":
            out = (size - k) // s + 1
            pads.append((0, 0))
        else:
            raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
        outs.append(out)
    return tuple(outs), tuple(pads)


def _check(x, w, nsp):
    names = _AXIS_NAMES.get(nsp, tuple(f"spatial{i}" for i in range(nsp)))
    if x.ndim != nsp + 2:
        raise ShapeError(f"input must have {nsp + 2} axes [N, {', '.join(names)}, C], got shape {x.shape}")
    if w.ndim != nsp + 2:
        raise ShapeError(f"kernel must have {nsp + 2} axes, got shape {w.shape}")
    if x.shape[-1] != w.shape[-2]:
        raise ShapeError(f"channel axis mismatch: input has {x.shape[-1]} channels, kernel expects {w.shape[-2]}")
    return names


def _patches(xp, ksize, strides, outs):
    """``[N, *out, *k, C]`` copy of the receptive fields of padded input ``xp``."""
    nsp = len(ksize)
    axes = tuple(range(1, nsp + 1))
    win = sliding_window_view(xp, ksize, axis=axes)  # [N, *slide, C, *k]
    sl = (slice(None),) + tuple(slice(0, o * s, s) for o, s in zip(outs, strides))
    win = win[sl]
    perm = (0,) + tuple(range(1, nsp + 1)) + tuple(range(nsp + 2, 2 * nsp + 2)) + (nsp + 1,)
    return np.ascontiguousarray(win.transpose(perm))


def _scatter_patches(dcols, padded_shape, ksize, strides, outs):
    """Adjoint of :func:`_patches`: add each patch back into a zero padded buffer."""
    nsp = len(ksize)
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for offs in itertools.product(*(range(k) for k in ksize)):
        dst = (slice(None),) + tuple(slice(o, o + n * s, s) for o, n, s in zip(offs, outs, strides))
        src = (slice(None),) * (nsp + 1) + offs
        dxp[dst] += dcols[src]
    return dxp


def convnd(x: Tensor, w: Tensor, strides, padding: str = "same") -> Tensor:
    """Cross-correlation over ``w.ndim - 2`` spatial axes."""
    nsp = w.ndim - 2
    names = _check(x, w, nsp)
    ksize = w.shape[:nsp]
    strides = _as_tuple(strides, nsp)
    sizes = x.shape[1:-1]
    outs, pads = conv_geometry(sizes, ksize, strides, padding)
    for name, size, k, (pb, pa) in zip(names, sizes, ksize, pads):
        if k > size + pb + pa:
            raise ShapeError(f"kernel {name} extent {k} exceeds padded input {name} extent {size + pb + pa}")
    xd, wd = x.data, w.data
    xp = np.pad(xd, ((0, 0),) + pads + ((0, 0),)) if any(p != (0, 0) for p in pads) else xd
    cols = _patches(xp, ksize, strides, outs)
    n, cin, cout = xd.shape[0], wd.shape[-2], wd.shape[-1]
    kflat = int(np.prod(ksize)) * cin
    cols2 = cols.reshape(-1, kflat)
    wmat = wd.reshape(kflat, cout)
    out = (cols2 @ wmat).reshape((n,) + outs + (cout,))

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(wd.shape)
        dcols = (g2 @ wmat.T).reshape(cols.shape)
        dxp = _scatter_patches(dcols, xp.shape, ksize, strides, outs)
        crop = (slice(None),) + tuple(slice(pb, pb + s) for (pb, _), s in zip(pads, sizes)) + (slice(None),)
        return dxp[crop], gw

    return make_op(out, (x, w), bw, f"conv{nsp}d")


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding: str = "same") -> Tensor:
    """``[N,H,W,Cin] * [kh,kw,Cin,Cout] -> [N,H',W',Cout]``."""
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [kh, kw, Cin, Cout], got shape {kernel.shape}")
    return convnd(x, kernel, stride, padding)


def conv3d(x: Tensor, kernel: Tensor, strides=1, padding: str = "same") -> Tensor:
    """``[N,D,H,W,Cin] * [kd,kh,kw,Cin,Cout] -> [N,D',H',W',Cout]``."""
    if kernel.ndim != 5:
        raise ShapeError(f"conv3d kernel must be [kd, kh, kw, Cin, Cout], got shape {kernel.shape}")
    return convnd(x, kernel, strides, padding)


def conv_transpose2d(x: Tensor, kernel: Tensor, stride=1, padding: str = "same") -> Tensor:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``kernel`` is ``[kh, kw, Cin, Cout]`` where ``Cin`` matches ``x``. With
    "same" padding the output is ``[N, H*s, W*s, Cout]``; with "valid" it is
    ``(H - 1) * s + k`` per axis.
    """
    if kernel.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"conv_transpose2d wants 4-axis input and kernel, got {x.shape} and {kernel.shape}")
    if x.shape[-1] != kernel.shape[2]:
        raise ShapeError(f"channel axis mismatch: input has {x.shape[-1]} channels, kernel expects {kernel.shape[2]}")
    strides = _as_tuple(stride, 2)
    ksize = kernel.shape[:2]
    xd, wd = x.data, kernel.data
    n, h, w_, cin = xd.shape
    cout = wd.shape[-1]
    ins = (h, w_)
    full = tuple((i - 1) * s + k for i, s, k in zip(ins, strides, ksize))
    if padding == "same":
        target = tuple(i * s for i, s in zip(ins, strides))
        crops = []
        for f, t in zip(full, target):
            total = f - t
            if total >= 0:
                crops.append((total // 2, total - total // 2))
            else:
                crops.append((0, total))  # negative: pad trailing edge
    elif padding == "valid":
        target = full
        crops = [(0, 0), (0, 0)]
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    # [N,H,W,Cin] @ [Cin, kh*kw*Cout]
    wmat = wd.transpose(2, 0, 1, 3).reshape(cin, -1)
    contrib = (xd.reshape(-1, cin) @ wmat).reshape(n, h, w_, ksize[0], ksize[1], cout)
    buf_shape = (n,) + tuple(max(f, t + c0) for f, t, (c0, _) in zip(full, target, crops)) + (cout,)
    buf = _scatter_patches(contrib, buf_shape, ksize, strides, ins)
    crop_sl = (slice(None),) + tuple(slice(c0, c0 + t) for (c0, _), t in zip(crops, target)) + (slice(None),)
    out = np.ascontiguousarray(buf[crop_sl])

    def bw(g):
        gbuf = np.zeros(buf_shape, dtype=g.dtype)
        gbuf[crop_sl] = g
        cols = _patches(gbuf, ksize, strides, ins)  # [N,H,W,kh,kw,Cout]
        cols2 = cols.reshape(n * h * w_, -1)
        gx = (cols2 @ wmat.T).reshape(xd.shape)
        gw = (xd.reshape(-1, cin).T @ cols2).reshape(cin, ksize[0], ksize[1], cout).transpose(1, 2, 0, 3)
        return gx, np.ascontiguousarray(gw)

    return make_op(out, (x, kernel), bw, "conv_transpose2d")
