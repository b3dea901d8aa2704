"""Numba-compiled convolution kernels (hot path).

Serial loops, so results are deterministic by construction (no parallel
reductions).  Each output row is built in a local accumulator with the
kernel weight hoisted and a stride-1 fast path, which LLVM vectorizes; the
padded input is materialized once per call.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _padded(x, padding):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


@njit(cache=True)
def conv2d_forward(x, w, stride, padding):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    xp = _padded(x, padding) if padding > 0 else x
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    acc = np.zeros(ow, dtype=x.dtype)
    for ni in range(n):
        for oc in range(co):
            for i in range(oh):
                acc[:] = 0
                for ic in range(ci):
                    for ki in range(kh):
                        xrow = xp[ni, ic, i * stride + ki]
                        for kj in range(kw):
                            wv = w[oc, ic, ki, kj]
                            if stride == 1:
                                for j in range(ow):
                                    acc[j] += wv * xrow[j + kj]
                            else:
                                for j in range(ow):
                                    acc[j] += wv * xrow[j * stride + kj]
                out[ni, oc, i] = acc
    return out


@njit(cache=True)
def conv2d_backward_dx(gout, w, stride, padding, h, wd):
    n, co, oh, ow = gout.shape
    ci, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    hp, wp = h + 2 * padding, wd + 2 * padding
    dxp = np.zeros((n, ci, hp, wp), dtype=gout.dtype)
    acc = np.zeros(wp, dtype=gout.dtype)
    for ni in range(n):
        for ic in range(ci):
            for ihp in range(hp):
                acc[:] = 0
                for ki in range(kh):
                    t = ihp - ki
                    if t < 0 or t % stride != 0:
                        continue
                    i = t // stride
                    if i >= oh:
                        continue
                    for oc in range(co):
                        grow = gout[ni, oc, i]
                        for kj in range(kw):
                            wv = w[oc, ic, ki, kj]
                            if stride == 1:
                                for j in range(ow):
                                    acc[j + kj] += wv * grow[j]
                            else:
                                for j in range(ow):
                                    acc[j * stride + kj] += wv * grow[j]
                dxp[ni, ic, ihp] = acc
    if padding == 0:
        return dxp
    return np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd])


@njit(cache=True)
def conv2d_backward_dw(x, gout, stride, padding, kh, kw):
    n, ci, h, wd = x.shape
    co, oh, ow = gout.shape[1], gout.shape[2], gout.shape[3]
    xp = _padded(x, padding) if padding > 0 else x
    dw = np.zeros((co, ci, kh, kw), dtype=x.dtype)
    for ni in range(n):
        for oc in range(co):
            for ic in range(ci):
                for ki in range(kh):
                    for kj in range(kw):
                        acc = 0.0
                        for i in range(oh):
                            xrow = xp[ni, ic, i * stride + ki]
                            grow = gout[ni, oc, i]
                            if stride == 1:
                                for j in range(ow):
                                    acc += xrow[j + kj] * grow[j]
                            else:
                                for j in range(ow):
                                    acc += xrow[j * stride + kj] * grow[j]
                        dw[oc, ic, ki, kj] += acc
    return dw
