"""Pure-numpy reference kernels. Same signatures and summation order as the numba path."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xpad, kh, kw, stride):
    """(N, C, Hp, Wp) -> (N, OH, OW, C, kh, kw) patch array."""
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def col2im(dcols, out_shape, stride):
    n, oh, ow, c, kh, kw = dcols.shape
    dx = np.zeros(out_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dx


def crf_kernel_matrix(coords, intensity, app_tables, smooth_tables, inv_two_var_int,
                      w_app, w_smooth, out, chunk=512):
    """Dense Potts pairwise weights k(i, j) with a zero diagonal, written into ``out``."""
    az, ay, ax = app_tables
    sz, sy, sx = smooth_tables
    n = coords.shape[0]
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        dz = np.abs(coords[s:e, None, 0] - coords[None, :, 0])
        dy = np.abs(coords[s:e, None, 1] - coords[None, :, 1])
        dx = np.abs(coords[s:e, None, 2] - coords[None, :, 2])
        di = intensity[s:e, None] - intensity[None, :]
        k = w_app * (az[dz] * ay[dy] * ax[dx]) * np.exp(-(di * di) * inv_two_var_int)
        k += w_smooth * (sz[dz] * sy[dy] * sx[dx])
        rows = np.arange(s, e)
        k[rows - s, rows] = 0.0
        out[s:e] = k
    return out


def potts_messages(k, q, chunk=1024):
    # einsum without optimize runs its own loops, so the sums do not depend on BLAS threading
    q = np.asarray(q, dtype=np.float64)
    out = np.empty((k.shape[0], 2), dtype=np.float64)
    for s in range(0, k.shape[0], chunk):
        out[s:s + chunk] = np.einsum("ij,jl->il", k[s:s + chunk].astype(np.float64), q, optimize=False)
    return out
