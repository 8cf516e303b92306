"""numba-compiled kernels. Each mirrors its counterpart in ``_numpy``."""
import math

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def _im2col(xpad, kh, kw, stride, out):
    n, c, _, _ = xpad.shape
    oh, ow = out.shape[1], out.shape[2]
    for b in prange(n):
        for y in range(oh):
            for x in range(ow):
                for ch in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, y, x, ch, i, j] = xpad[b, ch, y * stride + i, x * stride + j]
    return out


def im2col(xpad, kh, kw, stride):
    n, c, hp, wp = xpad.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    out = np.empty((n, oh, ow, c, kh, kw), dtype=xpad.dtype)
    return _im2col(np.ascontiguousarray(xpad), kh, kw, stride, out)


@njit(parallel=True, cache=True)
def _col2im(dcols, stride, dx):
    n, oh, ow, c, kh, kw = dcols.shape
    for b in prange(n):
        for ch in range(c):
            # (i, j) outermost so every output pixel sums in the numpy order
            for i in range(kh):
                for j in range(kw):
                    for y in range(oh):
                        for x in range(ow):
                            dx[b, ch, y * stride + i, x * stride + j] += dcols[b, y, x, ch, i, j]
    return dx


def col2im(dcols, out_shape, stride):
    dx = np.zeros(out_shape, dtype=dcols.dtype)
    return _col2im(np.ascontiguousarray(dcols), stride, dx)


@njit(parallel=True, cache=True)
def _crf_kernel_matrix(coords, intensity, az, ay, ax, sz, sy, sx, inv_two_var_int,
                       w_app, w_smooth, out):
    n = coords.shape[0]
    for i in prange(n):
        out[i, i] = 0.0
        zi, yi, xi = coords[i, 0], coords[i, 1], coords[i, 2]
        for j in range(i + 1, n):
            dz = abs(zi - coords[j, 0])
            dy = abs(yi - coords[j, 1])
            dx = abs(xi - coords[j, 2])
            di = intensity[i] - intensity[j]
            k = w_app * (az[dz] * ay[dy] * ax[dx]) * math.exp(-(di * di) * inv_two_var_int)
            k += w_smooth * (sz[dz] * sy[dy] * sx[dx])
            out[i, j] = k
            out[j, i] = k
    return out


def crf_kernel_matrix(coords, intensity, app_tables, smooth_tables, inv_two_var_int,
                      w_app, w_smooth, out):
    return _crf_kernel_matrix(
        np.ascontiguousarray(coords, dtype=np.int64),
        np.ascontiguousarray(intensity, dtype=np.float64),
        *app_tables, *smooth_tables,
        float(inv_two_var_int), float(w_app), float(w_smooth), out,
    )


@njit(parallel=True, cache=True)
def _potts_messages(k, q, out):
    n = k.shape[0]
    for i in prange(n):
        a = 0.0
        b = 0.0
        for j in range(n):
            kij = np.float64(k[i, j])
            a += kij * q[j, 0]
            b += kij * q[j, 1]
        out[i, 0] = a
        out[i, 1] = b


def potts_messages(k, q):
    out = np.empty((k.shape[0], 2), dtype=np.float64)
    _potts_messages(np.ascontiguousarray(k), np.ascontiguousarray(q, dtype=np.float64), out)
    return out
