"""Differentiable layer primitives: 3x3 convolutions, 2x2 pooling, dense, activations.

Spatial operations accept a single image ``(C, H, W)`` or a batch
``(N, C, H, W)``; dense accepts ``(N_in,)`` or ``(N, N_in)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make_node

KERNEL = 3


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _check_pad(pad: int) -> None:
    if pad != 1:
        raise DimensionError(f"only pad=1 with 3x3 kernels is supported, got pad={pad}")


def _windows(xpad: np.ndarray, h: int, wd: int) -> np.ndarray:
    """Read-only view ``v[n,c,i,j,a,b] = xpad[n,c,i+a,j+b]``."""
    return sliding_window_view(xpad, (KERNEL, KERNEL), axis=(2, 3))[:, :, :h, :wd]


def _correlate(xpad: np.ndarray, w: np.ndarray, h: int, wd: int) -> np.ndarray:
    """out[n,o,i,j] = sum_{c,a,b} w[o,c,a,b] * xpad[n,c,i+a,j+b]."""
    return np.einsum("nchwab,ocab->nohw", _windows(xpad, h, wd), w, optimize=True)


def _scatter(y: np.ndarray, w: np.ndarray, h: int, wd: int) -> np.ndarray:
    """Adjoint of :func:`_correlate`: out[n,c] = sum_o w[o,c] * y[n,o] shifted, cropped.

    Equivalent to correlating the padded ``y`` with the kernel flipped in
    both spatial axes and with its channel axes swapped.
    """
    ypad = np.pad(y, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return _correlate(ypad, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), h, wd)


def _kernel_grad(g: np.ndarray, xpad: np.ndarray, h: int, wd: int) -> np.ndarray:
    """dL/dw[o,c,a,b] = sum_{n,i,j} g[n,o,i,j] * xpad[n,c,i+a,j+b]."""
    return np.einsum("nohw,nchwab->ocab", g, _windows(xpad, h, wd), optimize=True)


def conv2d(x, w, b, pad: int = 1) -> Tensor:
    """Same-size 3x3 cross-correlation, stride 1.

    ``w`` has shape ``(C_out, C_in, 3, 3)`` and ``b`` shape ``(C_out,)``.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_pad(pad)
    xd, single = _batched(x)
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL) or w.shape[1] != xd.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    h, wd = xd.shape[2:]
    xpad = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wdat = w.data
    out = _correlate(xpad, wdat, h, wd) + b.data[None, :, None, None]
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gx = _scatter(g4, wdat, h, wd) if x.requires_grad else None
        if gx is not None and single:
            gx = gx[0]
        gw = _kernel_grad(g4, xpad, h, wd) if w.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), bw, "conv2d")


def transpose_conv2d(x, w, b, pad: int = 1) -> Tensor:
    """Adjoint of :func:`conv2d` in its input, plus a bias.

    ``w`` has shape ``(C_in, C_out, 3, 3)``; passing a conv2d kernel of shape
    ``(C_out', C_in', 3, 3)`` yields the exact transpose of that convolution.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_pad(pad)
    xd, single = _batched(x)
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL) or w.shape[0] != xd.shape[1] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"transpose_conv2d shape mismatch: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    h, wd = xd.shape[2:]
    wdat = w.data
    out = _scatter(xd, wdat, h, wd) + b.data[None, :, None, None]
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gpad = np.pad(g4, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gx = None
        if x.requires_grad:
            gx = _correlate(gpad, wdat, h, wd)
            if single:
                gx = gx[0]
        # y = scatter(x, w): dL/dw[c,o,a,b] = sum x[n,c,i,j] * gpad[n,o,i+a,j+b]
        gw = _kernel_grad(xd, gpad, h, wd) if w.requires_grad else None
        gb = g4.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), bw, "transpose_conv2d")


def max_pool2d(x) -> tuple[Tensor, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and the argmax position inside each block,
    encoded 0..3 in row-major order (0 = top-left). Ties resolve to the
    first position in that order.
    """
    x = as_tensor(x)
    xd, single = _batched(x)
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2d needs even spatial dims, got {x.shape}")
    blocks = xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    if single:
        out, idx_ret = out[0], idx[0]
    else:
        idx_ret = idx

    def bw(g):
        g4 = g[None] if single else g
        full = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(full, idx[..., None], g4[..., None], axis=-1)
        full = full.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (full[0] if single else full,)

    return make_node(out, (x,), bw, "max_pool2d"), idx_ret


def max_unpool2d(y) -> Tensor:
    """Fixed-index 2x2 unpool: each value goes to the top-left of its block."""
    y = as_tensor(y)
    yd, single = _batched(y)
    n, c, h, w = yd.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    out[:, :, ::2, ::2] = yd
    if single:
        out = out[0]
    return make_node(out, (y,), lambda g: (np.ascontiguousarray(g[..., ::2, ::2]),), "max_unpool2d")


# kernel row/col offset -> (output parity, input shift) after a top-left unpool
_UNPOOL_TAPS = {0: (1, 1), 1: (0, 0), 2: (1, 0)}


def _mix(x: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Channel mixing ``out[n,o,h,w] = sum_c m[c,o] x[n,c,h,w]`` as one batched matmul."""
    n, c, h, w = x.shape
    flat = np.ascontiguousarray(x).reshape(n, c, h * w)
    return np.matmul(m.T, flat).reshape(n, m.shape[1], h, w)


def unpool_transpose_conv2d(x, w, b, pad: int = 1) -> Tensor:
    """``transpose_conv2d(max_unpool2d(x), w, b)`` without the zero-filled grid.

    Only every other row and column of the unpooled input is nonzero, so each
    output parity phase sees a fixed subset of kernel taps at the coarse
    resolution. This is about 4x cheaper than the composition and gives the
    same values and gradients.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    _check_pad(pad)
    xd, single = _batched(x)
    if w.ndim != 4 or w.shape[2:] != (KERNEL, KERNEL) or w.shape[0] != xd.shape[1] or b.shape != (w.shape[1],):
        raise DimensionError(
            f"unpool_transpose_conv2d shape mismatch: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    n, _, h, wd = xd.shape
    wdat = w.data
    xpad = np.pad(xd, ((0, 0), (0, 0), (0, 1), (0, 1)))
    out = np.empty((n, wdat.shape[1], 2 * h, 2 * wd))
    out[:] = b.data[None, :, None, None]
    for a, (ri, si) in _UNPOOL_TAPS.items():
        for bb, (rj, sj) in _UNPOOL_TAPS.items():
            src = xpad[:, :, si:si + h, sj:sj + wd]
            out[:, :, ri::2, rj::2] += _mix(src, wdat[:, :, a, bb])
    if single:
        out = out[0]

    def bw(g):
        g4 = g[None] if single else g
        gxpad = np.zeros_like(xpad) if x.requires_grad else None
        gw = np.zeros_like(wdat) if w.requires_grad else None
        for a, (ri, si) in _UNPOOL_TAPS.items():
            for bb, (rj, sj) in _UNPOOL_TAPS.items():
                gp = g4[:, :, ri::2, rj::2]
                if gxpad is not None:
                    gxpad[:, :, si:si + h, sj:sj + wd] += _mix(gp, wdat[:, :, a, bb].T)
                if gw is not None:
                    gw[:, :, a, bb] = np.tensordot(xpad[:, :, si:si + h, sj:sj + wd], gp, axes=([0, 2, 3], [0, 2, 3]))
        gx = None
        if gxpad is not None:
            gx = gxpad[:, :, :h, :wd]
            gx = gx[0] if single else gx
        gb = g4.sum(axis=(0, 2, 3)) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), bw, "unpool_transpose_conv2d")


def dense(x, w, b) -> Tensor:
    """Affine map ``w @ x + b`` with ``w`` of shape ``(M, N)``."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or b.shape != (w.shape[0],) or x.ndim not in (1, 2):
        raise DimensionError(f"dense shape mismatch: input {x.shape}, weight {w.shape}, bias {b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T + b.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        gw = (np.outer(g, xd) if g.ndim == 1 else g.T @ xd) if w.requires_grad else None
        gb = (g if g.ndim == 1 else g.sum(axis=0)) if b.requires_grad else None
        return gx, gw, gb

    return make_node(out, (x, w, b), bw, "dense")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax(x) -> Tensor:
    """Softmax over the last axis (rows of a batch are independent)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return make_node(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def identity(x) -> Tensor:
    return as_tensor(x)


_ACTIVATIONS = {"relu": relu, "softmax": softmax, "identity": identity}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    if kind == "softmax" and as_tensor(x).ndim != 1:
        raise DimensionError("activation('softmax') expects a 1-D tensor; use softmax() for batches")
    return fn(x)
