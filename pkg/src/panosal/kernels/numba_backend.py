"""Numba-jitted twins of the kernels in ``numpy_backend``.

Explicit loops, compiled per dtype on first call and cached on disk. Kept
deliberately gather/scatter symmetric with the numpy backend so the parity
tests can compare the two element-for-element.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .numpy_backend import out_size


@njit(cache=True)
def _unfold_impl(xp, kernel, stride, oh, ow, cols):
    b, c = xp.shape[0], xp.shape[1]
    for bi in range(b):
        for yo in range(oh):
            for xo in range(ow):
                l = yo * ow + xo
                for ci in range(c):
                    base = ci * kernel * kernel
                    for i in range(kernel):
                        for j in range(kernel):
                            cols[bi, l, base + i * kernel + j] = xp[
                                bi, ci, yo * stride + i, xo * stride + j
                            ]


def unfold(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    b, c, h, w = x.shape
    oh = out_size(h, kernel, stride, pad)
    ow = out_size(w, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, oh * ow, c * kernel * kernel), dtype=x.dtype)
    _unfold_impl(xp, kernel, stride, oh, ow, cols)
    return cols


@njit(cache=True)
def _fold_impl(cols, kernel, stride, oh, ow, c, canvas):
    b = cols.shape[0]
    for bi in range(b):
        for yo in range(oh):
            for xo in range(ow):
                l = yo * ow + xo
                for ci in range(c):
                    base = ci * kernel * kernel
                    for i in range(kernel):
                        for j in range(kernel):
                            canvas[bi, ci, yo * stride + i, xo * stride + j] += cols[
                                bi, l, base + i * kernel + j
                            ]


def fold(
    cols: np.ndarray,
    kernel: int,
    stride: int,
    pad: int,
    height: int,
    width: int,
) -> np.ndarray:
    b, l, d = cols.shape
    c = d // (kernel * kernel)
    if c * kernel * kernel != d:
        raise ValueError(f"token dim {d} not divisible by k^2={kernel * kernel}")
    oh = out_size(height, kernel, stride, pad)
    ow = out_size(width, kernel, stride, pad)
    if l != oh * ow:
        raise ValueError(f"token count {l} inconsistent with grid {oh}x{ow}")
    canvas = np.zeros((b, c, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    _fold_impl(np.ascontiguousarray(cols), kernel, stride, oh, ow, c, canvas)
    return np.ascontiguousarray(canvas[:, :, pad : pad + height, pad : pad + width])


@njit(cache=True)
def _dcn_sample_impl(x, py, px, cols):
    b, c, h, w = x.shape
    k, oh, ow = py.shape[1], py.shape[2], py.shape[3]
    for bi in range(b):
        for t in range(k):
            for yo in range(oh):
                for xo in range(ow):
                    yy = py[bi, t, yo, xo]
                    xx = px[bi, t, yo, xo]
                    y0 = int(np.floor(yy))
                    x0 = int(np.floor(xx))
                    y1 = y0 + 1
                    x1 = x0 + 1
                    wy1 = yy - y0
                    wy0 = 1.0 - wy1
                    wx1 = xx - x0
                    wx0 = 1.0 - wx1
                    iy0 = 0 <= y0 < h
                    iy1 = 0 <= y1 < h
                    ix0 = 0 <= x0 < w
                    ix1 = 0 <= x1 < w
                    for ci in range(c):
                        acc = 0.0
                        if iy0 and ix0:
                            acc += wy0 * wx0 * x[bi, ci, y0, x0]
                        if iy0 and ix1:
                            acc += wy0 * wx1 * x[bi, ci, y0, x1]
                        if iy1 and ix0:
                            acc += wy1 * wx0 * x[bi, ci, y1, x0]
                        if iy1 and ix1:
                            acc += wy1 * wx1 * x[bi, ci, y1, x1]
                        cols[bi, ci, t, yo, xo] = acc


def dcn_sample(x: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    b, c = x.shape[0], x.shape[1]
    _, k, oh, ow = py.shape
    cols = np.empty((b, c, k, oh, ow), dtype=x.dtype)
    _dcn_sample_impl(x, py, px, cols)
    return cols


@njit(cache=True)
def _dcn_sample_grads_impl(x, py, px, gcols, gx, gpy, gpx):
    b, c, h, w = x.shape
    k, oh, ow = py.shape[1], py.shape[2], py.shape[3]
    for bi in range(b):
        for t in range(k):
            for yo in range(oh):
                for xo in range(ow):
                    yy = py[bi, t, yo, xo]
                    xx = px[bi, t, yo, xo]
                    y0 = int(np.floor(yy))
                    x0 = int(np.floor(xx))
                    y1 = y0 + 1
                    x1 = x0 + 1
                    wy1 = yy - y0
                    wy0 = 1.0 - wy1
                    wx1 = xx - x0
                    wx0 = 1.0 - wx1
                    iy0 = 0 <= y0 < h
                    iy1 = 0 <= y1 < h
                    ix0 = 0 <= x0 < w
                    ix1 = 0 <= x1 < w
                    gy = 0.0
                    gxp = 0.0
                    for ci in range(c):
                        g = gcols[bi, ci, t, yo, xo]
                        v00 = x[bi, ci, y0, x0] if (iy0 and ix0) else 0.0
                        v01 = x[bi, ci, y0, x1] if (iy0 and ix1) else 0.0
                        v10 = x[bi, ci, y1, x0] if (iy1 and ix0) else 0.0
                        v11 = x[bi, ci, y1, x1] if (iy1 and ix1) else 0.0
                        gy += g * (wx0 * (v10 - v00) + wx1 * (v11 - v01))
                        gxp += g * (wy0 * (v01 - v00) + wy1 * (v11 - v10))
                        if iy0 and ix0:
                            gx[bi, ci, y0, x0] += g * wy0 * wx0
                        if iy0 and ix1:
                            gx[bi, ci, y0, x1] += g * wy0 * wx1
                        if iy1 and ix0:
                            gx[bi, ci, y1, x0] += g * wy1 * wx0
                        if iy1 and ix1:
                            gx[bi, ci, y1, x1] += g * wy1 * wx1
                    gpy[bi, t, yo, xo] = gy
                    gpx[bi, t, yo, xo] = gxp


def dcn_sample_grads(
    x: np.ndarray, py: np.ndarray, px: np.ndarray, gcols: np.ndarray
):
    gx = np.zeros_like(x)
    gpy = np.empty_like(py)
    gpx = np.empty_like(px)
    _dcn_sample_grads_impl(x, py, px, np.ascontiguousarray(gcols), gx, gpy, gpx)
    return gx, gpy, gpx
