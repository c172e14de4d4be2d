"""Hot inner loops, each with a numba and a pure-numpy implementation.

The public names (``im2col``, ``col2im``, ``maxpool_forward``,
``maxpool_backward``, ``hs_jacobi``, ``warp_bilinear``) dispatch on
:data:`motionpose._accel.USE_NUMBA`.  Both paths are kept importable as
``*_numpy`` / ``*_numba`` so tests and the benchmark can compare them.

Layout conventions: images are ``(N, C, H, W)``; ``im2col`` returns a
``(N*OH*OW, C*KH*KW)`` matrix whose rows are receptive fields in
``(n, oy, ox)`` order and whose columns are in ``(c, ky, kx)`` order.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import USE_NUMBA, njit


def out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


# ---------------------------------------------------------------- im2col


def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh, ow = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im_numpy(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh, ow = out_size(h, kh, stride, pad), out_size(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        return xp[:, :, pad:pad + h, pad:pad + w].copy()
    return xp


@njit
def _im2col_nb(x, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x.shape
    cols = np.zeros((n * oh * ow, c * kh * kw), dtype=x.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride - pad + i
                        if y < 0 or y >= h:
                            continue
                        for j in range(kw):
                            xx = ox * stride - pad + j
                            if xx < 0 or xx >= w:
                                continue
                            cols[row, (ch * kh + i) * kw + j] = x[b, ch, y, xx]
    return cols


@njit
def _col2im_nb(cols, n, c, h, w, kh, kw, stride, pad, oh, ow):
    x = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (b * oh + oy) * ow + ox
                for ch in range(c):
                    for i in range(kh):
                        y = oy * stride - pad + i
                        if y < 0 or y >= h:
                            continue
                        for j in range(kw):
                            xx = ox * stride - pad + j
                            if xx < 0 or xx >= w:
                                continue
                            x[b, ch, y, xx] += cols[row, (ch * kh + i) * kw + j]
    return x


def im2col_numba(x, kh, kw, stride, pad):
    _, _, h, w = x.shape
    return _im2col_nb(np.ascontiguousarray(x), kh, kw, stride, pad,
                      out_size(h, kh, stride, pad), out_size(w, kw, stride, pad))


def col2im_numba(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad,
                      out_size(h, kh, stride, pad), out_size(w, kw, stride, pad))


# ---------------------------------------------------------------- max pool
# Floor-mode pooling without padding: every window lies inside the input.


def maxpool_forward_numpy(x, k, stride):
    n, c, h, w = x.shape
    oh, ow = out_size(h, k, stride, 0), out_size(w, k, stride, 0)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    win = win.reshape(n, c, oh, ow, k * k)
    # first maximum wins, matching the loop version
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    iy = np.arange(oh)[:, None] * stride + arg // k
    ix = np.arange(ow)[None, :] * stride + arg % k
    return np.ascontiguousarray(out), (iy * w + ix).astype(np.int64)


def maxpool_backward_numpy(grad_out, argmax, shape):
    n, c, h, w = shape
    gx = np.zeros((n * c, h * w), dtype=grad_out.dtype)
    rows = np.repeat(np.arange(n * c), argmax[0, 0].size)
    np.add.at(gx, (rows, argmax.reshape(-1)), grad_out.reshape(-1))
    return gx.reshape(shape)


@njit
def _maxpool_fwd_nb(x, k, stride, oh, ow):
    n, c, h, w = x.shape
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    arg = np.empty((n, c, oh, ow), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    best = x[b, ch, oy * stride, ox * stride]
                    bi = oy * stride * w + ox * stride
                    for i in range(k):
                        for j in range(k):
                            v = x[b, ch, oy * stride + i, ox * stride + j]
                            if v > best:
                                best = v
                                bi = (oy * stride + i) * w + ox * stride + j
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = bi
    return out, arg


@njit
def _maxpool_bwd_nb(grad_out, arg, n, c, h, w):
    gx = np.zeros((n, c, h * w), dtype=grad_out.dtype)
    oh, ow = grad_out.shape[2], grad_out.shape[3]
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    gx[b, ch, arg[b, ch, oy, ox]] += grad_out[b, ch, oy, ox]
    return gx.reshape(n, c, h, w)


def maxpool_forward_numba(x, k, stride):
    _, _, h, w = x.shape
    return _maxpool_fwd_nb(np.ascontiguousarray(x), k, stride, out_size(h, k, stride, 0), out_size(w, k, stride, 0))


def maxpool_backward_numba(grad_out, argmax, shape):
    n, c, h, w = shape
    return _maxpool_bwd_nb(np.ascontiguousarray(grad_out), argmax, n, c, h, w)


# ---------------------------------------------------------------- Horn-Schunck
# Neighbourhood average uses the classic 1/6 (edge) 1/12 (corner) stencil with
# replicated borders.  The update is on the total flow (u, v) linearised
# around (u0, v0): Ix*(u-u0) + Iy*(v-v0) + It = 0.


def _hs_average(a):
    p = np.pad(a, 1, mode="edge")
    edge = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:]
    corner = p[:-2, :-2] + p[:-2, 2:] + p[2:, :-2] + p[2:, 2:]
    return edge / 6.0 + corner / 12.0


def hs_jacobi_numpy(ix, iy, it, u0, v0, alpha2, iterations):
    u, v = u0.copy(), v0.copy()
    denom = alpha2 + ix * ix + iy * iy
    for _ in range(iterations):
        ub, vb = _hs_average(u), _hs_average(v)
        r = (ix * (ub - u0) + iy * (vb - v0) + it) / denom
        u = ub - ix * r
        v = vb - iy * r
    return u, v


@njit
def _hs_jacobi_nb(ix, iy, it, u0, v0, alpha2, iterations):
    h, w = ix.shape
    u = u0.copy()
    v = v0.copy()
    un = np.empty_like(u)
    vn = np.empty_like(v)
    for _ in range(iterations):
        for y in range(h):
            ym = max(y - 1, 0)
            yp = min(y + 1, h - 1)
            for x in range(w):
                xm = max(x - 1, 0)
                xp = min(x + 1, w - 1)
                ub = (u[ym, x] + u[yp, x] + u[y, xm] + u[y, xp]) / 6.0 + \
                     (u[ym, xm] + u[ym, xp] + u[yp, xm] + u[yp, xp]) / 12.0
                vb = (v[ym, x] + v[yp, x] + v[y, xm] + v[y, xp]) / 6.0 + \
                     (v[ym, xm] + v[ym, xp] + v[yp, xm] + v[yp, xp]) / 12.0
                gx = ix[y, x]
                gy = iy[y, x]
                r = (gx * (ub - u0[y, x]) + gy * (vb - v0[y, x]) + it[y, x]) / (alpha2 + gx * gx + gy * gy)
                un[y, x] = ub - gx * r
                vn[y, x] = vb - gy * r
        u, un = un, u
        v, vn = vn, v
    return u, v


def hs_jacobi_numba(ix, iy, it, u0, v0, alpha2, iterations):
    return _hs_jacobi_nb(ix, iy, it, u0, v0, float(alpha2), int(iterations))


def warp_bilinear_numpy(img, u, v):
    """Sample ``img`` at ``(x + u, y + v)`` with clamped borders."""
    h, w = img.shape
    ys, xs = np.mgrid[0:h, 0:w]
    x = np.clip(xs + u, 0.0, w - 1.0)
    y = np.clip(ys + v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    fx, fy = x - x0, y - y0
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@njit
def _warp_nb(img, u, v):
    h, w = img.shape
    out = np.empty((h, w), dtype=img.dtype)
    for yy in range(h):
        for xx in range(w):
            x = min(max(xx + u[yy, xx], 0.0), w - 1.0)
            y = min(max(yy + v[yy, xx], 0.0), h - 1.0)
            x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
            y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
            fx = x - x0
            fy = y - y0
            x1 = min(x0 + 1, w - 1)
            y1 = min(y0 + 1, h - 1)
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[yy, xx] = top * (1 - fy) + bot * fy
    return out


def warp_bilinear_numba(img, u, v):
    return _warp_nb(img, u, v)


if USE_NUMBA:
    im2col, col2im = im2col_numba, col2im_numba
    maxpool_forward, maxpool_backward = maxpool_forward_numba, maxpool_backward_numba
    hs_jacobi, warp_bilinear = hs_jacobi_numba, warp_bilinear_numba
else:
    im2col, col2im = im2col_numpy, col2im_numpy
    maxpool_forward, maxpool_backward = maxpool_forward_numpy, maxpool_backward_numpy
    hs_jacobi, warp_bilinear = hs_jacobi_numpy, warp_bilinear_numpy
