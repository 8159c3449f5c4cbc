"""Pure-numpy convolution kernels.

Fallback for the compiled ``_kernels`` extension; same signatures, same results
to the last bit for the gather kernels and to rounding for the reductions.
All inputs are already zero-padded, C-contiguous, float32 or float64.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    """(B, C, Hp, Wp) -> (B, C*kh*kw, ho*wo), row index c*kh*kw + i*kw + j."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # win: (B, C, ho, wo, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * kh * kw, ho * wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the padded map."""
    b = cols.shape[0]
    out = np.zeros((b, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(b, c, kh, kw, ho, wo)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + he : stride, j : j + we : stride] += cols[:, :, i, j]
    return out


def dwconv_forward(xp, w, stride, ho, wo):
    """Depth-wise cross-correlation; `w` is (C, 1, kh, kw)."""
    b, c = xp.shape[:2]
    kh, kw = w.shape[2:]
    out = np.zeros((b, c, ho, wo), dtype=xp.dtype)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + he : stride, j : j + we : stride] * w[None, :, 0, i, j, None, None]
    return out


def dwconv_backward(g, xp, w, stride):
    """Gradients of :func:`dwconv_forward` w.r.t. the padded input and the kernel."""
    ho, wo = g.shape[2:]
    kh, kw = w.shape[2:]
    gx = np.zeros_like(xp)
    gw = np.zeros_like(w)
    he = (ho - 1) * stride + 1
    we = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i : i + he : stride, j : j + we : stride]
            gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, patch)
            gx[:, :, i : i + he : stride, j : j + we : stride] += g * w[None, :, 0, i, j, None, None]
    return gx, gw
