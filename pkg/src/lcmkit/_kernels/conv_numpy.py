"""Pure-numpy convolution kernels (fallback path).

Forward uses strided sliding windows plus a BLAS tensordot; the backward
passes use the matching col2im / windowed-correlation formulations.  All
arrays are batch x channel x height x width.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def _windows(xp, kh, kw, stride, oh, ow):
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, stride * sh, stride * sw, sh, sw),
        writeable=False,
    )


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv2d_forward(x, w, stride, padding):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = _pad(x, padding)
    win = _windows(xp, kh, kw, stride, oh, ow)
    # (n, oh, ow, co) <- sum over (ci, kh, kw)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_dx(gout, w, stride, padding, h, wd):
    n, co, oh, ow = gout.shape
    _, ci, kh, kw = w.shape
    # gwin[n, ci, kh, kw, oh, ow], then scatter back into padded input (col2im)
    gwin = np.tensordot(gout, w, axes=(1, 0)).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, ci, h + 2 * padding, wd + 2 * padding), dtype=gout.dtype)
    for i in range(kh):
        hi = i + stride * oh
        for j in range(kw):
            wj = j + stride * ow
            dxp[:, :, i:hi:stride, j:wj:stride] += gwin[:, :, i, j]
    if padding == 0:
        return dxp
    return dxp[:, :, padding:padding + h, padding:padding + wd]


def conv2d_backward_dw(x, gout, stride, padding, kh, kw):
    oh, ow = gout.shape[2:]
    xp = _pad(x, padding)
    win = _windows(xp, kh, kw, stride, oh, ow)
    # (co, ci, kh, kw) <- sum over (n, oh, ow)
    return np.tensordot(gout, win, axes=([0, 2, 3], [0, 2, 3]))
