"""Pure-numpy implementations of the hot kernels.

Fallback path used when numba is disabled (PANOSAL_NUMBA=0) or unavailable.
All functions here are shape- and value-equivalent to the numba backend in
``numba_backend.py``; the parity test suite holds the two to 0 ulp / 1e-12.

Conventions shared by both backends:
  * feature maps are (B, C, H, W), tokens are (B, L, D) with L = out_h*out_w
    in row-major grid order;
  * a window is flattened channel-major, then row-major inside the window,
    so feature index = c*k*k + i*k + j;
  * fold is the exact adjoint of unfold (overlaps sum, padding cropped).
"""

from __future__ import annotations

import numpy as np


def out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    """Number of window positions along one axis."""
    span = size + 2 * pad - kernel
    if span < 0:
        raise ValueError(
            f"window {kernel} larger than padded input {size + 2 * pad}"
        )
    return span // stride + 1


def unfold(x: np.ndarray, kernel: int, stride: int, pad: int) -> np.ndarray:
    """Extract overlapping k*k windows: (B,C,H,W) -> (B, L, C*k*k)."""
    b, c, h, w = x.shape
    oh = out_size(h, kernel, stride, pad)
    ow = out_size(w, kernel, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[
                :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
            ]
    return np.ascontiguousarray(
        cols.transpose(0, 4, 5, 1, 2, 3).reshape(b, oh * ow, c * kernel * kernel)
    )


def fold(
    cols: np.ndarray,
    kernel: int,
    stride: int,
    pad: int,
    height: int,
    width: int,
) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add windows back onto the canvas.

    ``cols`` is (B, L, C*k*k) with L = out_size(height)*out_size(width);
    overlapping contributions sum, then the padding border is cropped.
    """
    b, l, d = cols.shape
    c = d // (kernel * kernel)
    if c * kernel * kernel != d:
        raise ValueError(f"token dim {d} not divisible by k^2={kernel * kernel}")
    oh = out_size(height, kernel, stride, pad)
    ow = out_size(width, kernel, stride, pad)
    if l != oh * ow:
        raise ValueError(f"token count {l} inconsistent with grid {oh}x{ow}")
    win = cols.reshape(b, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    canvas = np.zeros((b, c, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            # slices for a fixed (i, j) are disjoint, so += is race-free
            canvas[
                :, :, i : i + oh * stride : stride, j : j + ow * stride : stride
            ] += win[:, :, i, j]
    return np.ascontiguousarray(
        canvas[:, :, pad : pad + height, pad : pad + width]
    )


def _corners(py: np.ndarray, px: np.ndarray, h: int, w: int):
    y0 = np.floor(py)
    x0 = np.floor(px)
    wy1 = py - y0
    wx1 = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    y1 = y0 + 1
    x1 = x0 + 1
    my0 = (y0 >= 0) & (y0 < h)
    my1 = (y1 >= 0) & (y1 < h)
    mx0 = (x0 >= 0) & (x0 < w)
    mx1 = (x1 >= 0) & (x1 < w)
    return y0, x0, y1, x1, wy1, wx1, my0, my1, mx0, mx1


def _gather(x_flat: np.ndarray, yy: np.ndarray, xx: np.ndarray, mask: np.ndarray, w: int):
    # x_flat: (B, C, H*W); yy/xx/mask: (B, K, Ho, Wo) -> (B, C, K, Ho, Wo)
    b = x_flat.shape[0]
    idx = np.where(mask, yy * w + xx, 0).reshape(b, 1, -1)
    vals = np.take_along_axis(x_flat, np.broadcast_to(idx, (b, x_flat.shape[1], idx.shape[2])), axis=2)
    vals = vals.reshape(b, x_flat.shape[1], *yy.shape[1:])
    return vals * mask[:, None]


def dcn_sample(x: np.ndarray, py: np.ndarray, px: np.ndarray) -> np.ndarray:
    """Bilinear sampling of every channel at per-tap positions.

    x: (B, C, H, W); py/px: (B, K, Ho, Wo) absolute sample coordinates on the
    unpadded map. Out-of-bounds neighbours contribute zero. Returns
    (B, C, K, Ho, Wo).
    """
    b, c, h, w = x.shape
    y0, x0, y1, x1, wy1, wx1, my0, my1, mx0, mx1 = _corners(py, px, h, w)
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    xf = x.reshape(b, c, h * w)
    v00 = _gather(xf, y0, x0, my0 & mx0, w)
    v01 = _gather(xf, y0, x1, my0 & mx1, w)
    v10 = _gather(xf, y1, x0, my1 & mx0, w)
    v11 = _gather(xf, y1, x1, my1 & mx1, w)
    wy0e, wy1e = wy0[:, None], wy1[:, None]
    wx0e, wx1e = wx0[:, None], wx1[:, None]
    return (
        wy0e * (wx0e * v00 + wx1e * v01) + wy1e * (wx0e * v10 + wx1e * v11)
    ).astype(x.dtype, copy=False)


def dcn_sample_grads(
    x: np.ndarray, py: np.ndarray, px: np.ndarray, gcols: np.ndarray
):
    """Backward of :func:`dcn_sample`.

    gcols: (B, C, K, Ho, Wo). Returns (gx, gpy, gpx) with gx shaped like x
    and gpy/gpx shaped like py/px (summed over channels).
    """
    b, c, h, w = x.shape
    y0, x0, y1, x1, wy1, wx1, my0, my1, mx0, mx1 = _corners(py, px, h, w)
    wy0 = 1.0 - wy1
    wx0 = 1.0 - wx1
    xf = x.reshape(b, c, h * w)
    v00 = _gather(xf, y0, x0, my0 & mx0, w)
    v01 = _gather(xf, y0, x1, my0 & mx1, w)
    v10 = _gather(xf, y1, x0, my1 & mx0, w)
    v11 = _gather(xf, y1, x1, my1 & mx1, w)

    wy0e, wy1e = wy0[:, None], wy1[:, None]
    wx0e, wx1e = wx0[:, None], wx1[:, None]
    gpy = (gcols * (wx0e * (v10 - v00) + wx1e * (v11 - v01))).sum(axis=1)
    gpx = (gcols * (wy0e * (v01 - v00) + wy1e * (v11 - v10))).sum(axis=1)

    gx = np.zeros_like(x).reshape(b, c, h * w)
    for mask, yy, xx, wgt in (
        (my0 & mx0, y0, x0, wy0e * wx0e),
        (my0 & mx1, y0, x1, wy0e * wx1e),
        (my1 & mx0, y1, x0, wy1e * wx0e),
        (my1 & mx1, y1, x1, wy1e * wx1e),
    ):
        idx = np.where(mask, yy * w + xx, 0)[:, None]
        contrib = gcols * wgt * mask[:, None]
        bidx = np.arange(b)[:, None, None, None, None]
        cidx = np.arange(c)[None, :, None, None, None]
        np.add.at(gx, (bidx, cidx, np.broadcast_to(idx, contrib.shape)), contrib)
    return gx.reshape(b, c, h, w), gpy, gpx
