"""Self-attention blocks and deformable convolution.

Three token-block flavours are built here:

* ``TransformerBlock`` — pre-norm block: x + MSA(LN(x)), then + MLP(LN(.)).
* ``TokenTransformer`` — the down-sampling unit used between soft splits; its
  attention projects from the window dim down to the token dim c, with the
  value tensor as the skip path (dims differ, so the input cannot be).
* ``DeformableAttentionBlock`` — a transformer block with a deformable
  convolution on the trunk between attention and the MLP; tokens are
  reshaped to their 2-D grid for the convolution and back after it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .nn import Ctx, Dropout, Linear, LayerNorm, Mlp, Module, Param, softmax_lastdim
from .nn import Conv2d
from .tokenizer import TokenSequence, map_to_tokens, tokens_to_map


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int = 6
    mlp_ratio: float = 4.0
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            raise ValueError("mlp_ratio must be > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")


def bilinear_sample(channel: np.ndarray, y: float, x: float) -> float:
    """Bilinearly interpolate one (H, W) channel at a real-valued position.

    Integer neighbours outside the map contribute zero, so anything beyond
    [-1, size] samples to 0. Differentiable in the map values and in (y, x).
    """
    h, w = channel.shape
    y0 = int(np.floor(y))
    x0 = int(np.floor(x))
    wy1 = y - y0
    wx1 = x - x0
    acc = 0.0
    for yy, wy in ((y0, 1.0 - wy1), (y0 + 1, wy1)):
        if not 0 <= yy < h:
            continue
        for xx, wx in ((x0, 1.0 - wx1), (x0 + 1, wx1)):
            if 0 <= xx < w:
                acc += wy * wx * float(channel[yy, xx])
    return acc


class MultiHeadSelfAttention(Module):
    """Scaled dot-product attention over tokens; shape (B, L, D) preserved."""

    def __init__(self, dim: int, heads: int, attn_drop: float = 0.0,
                 proj_drop: float = 0.0, dtype=np.float32):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = Linear(dim, 3 * dim, dtype=dtype)
        self.attn_drop = Dropout(attn_drop)
        self.proj = Linear(dim, dim, dtype=dtype)
        self.proj_drop = Dropout(proj_drop)
        self._cache = None

    def _split_heads(self, qkv: np.ndarray):
        b, l, _ = qkv.shape
        qkv = qkv.reshape(b, l, 3, self.heads, self.head_dim)
        qkv = qkv.transpose(2, 0, 3, 1, 4)  # (3, B, H, L, Dh)
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        b, l, d = x.shape
        if d != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {d}")
        qkv = self.qkv.forward(x, ctx)
        q, k, v = self._split_heads(qkv)
        if ctx.train:
            s = (q @ k.transpose(0, 1, 3, 2)) * self.scale
            a = softmax_lastdim(s)
            a_drop = self.attn_drop.forward(a, ctx)
            o = a_drop @ v
            self._cache = (q, k, v, a, a_drop)
        else:
            # stream per (batch, head): keeps peak memory at one LxL matrix
            o = np.empty_like(q)
            for bi in range(b):
                for hi in range(self.heads):
                    s = (q[bi, hi] @ k[bi, hi].T) * self.scale
                    o[bi, hi] = softmax_lastdim(s) @ v[bi, hi]
        out = o.transpose(0, 2, 1, 3).reshape(b, l, d)
        return self.proj_drop.forward(self.proj.forward(out, ctx), ctx)

    def backward(self, g: np.ndarray) -> np.ndarray:
        q, k, v, a, a_drop = self._cache
        b, l, d = g.shape
        g = self.proj.backward(self.proj_drop.backward(g))
        go = g.reshape(b, l, self.heads, self.head_dim).transpose(0, 2, 1, 3)
        ga_drop = go @ v.transpose(0, 1, 3, 2)
        gv = a_drop.transpose(0, 1, 3, 2) @ go
        ga = self.attn_drop.backward(ga_drop)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gq = (gs @ k) * self.scale
        gk = (gs.transpose(0, 1, 3, 2) @ q) * self.scale
        gqkv = np.stack((gq, gk, gv))  # (3, B, H, L, Dh)
        gqkv = gqkv.transpose(1, 3, 0, 2, 4).reshape(b, l, 3 * d)
        return self.qkv.backward(gqkv)


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0,
                 dropout: float = 0.0, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, attn_drop=dropout,
                                           proj_drop=dropout, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim, drop=dropout, dtype=dtype)

    def forward(self, t: TokenSequence, ctx: Ctx) -> TokenSequence:
        x = t.data
        x1 = x + self.attn.forward(self.norm1.forward(x, ctx), ctx)
        y = x1 + self.mlp.forward(self.norm2.forward(x1, ctx), ctx)
        return t.with_data(y)

    def backward(self, g: np.ndarray) -> np.ndarray:
        g1 = g + self.norm2.backward(self.mlp.backward(g))
        return g1 + self.norm1.backward(self.attn.backward(g1))


class TokenAttention(Module):
    """Single-head attention projecting d_in down to d_out, skip through v."""

    def __init__(self, d_in: int, d_out: int, dtype=np.float32):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.scale = d_out ** -0.5
        self.qkv = Linear(d_in, 3 * d_out, dtype=dtype)
        self.proj = Linear(d_out, d_out, dtype=dtype)
        self._cache = None

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        qkv = self.qkv.forward(x, ctx)
        q, k, v = np.split(qkv, 3, axis=-1)
        s = (q @ k.transpose(0, 2, 1)) * self.scale
        a = softmax_lastdim(s)
        o = a @ v
        if ctx.train:
            self._cache = (q, k, v, a)
        return v + self.proj.forward(o, ctx)

    def backward(self, g: np.ndarray) -> np.ndarray:
        q, k, v, a = self._cache
        go = self.proj.backward(g)
        ga = go @ v.transpose(0, 2, 1)
        gv = a.transpose(0, 2, 1) @ go + g  # skip path
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True))
        gq = (gs @ k) * self.scale
        gk = (gs.transpose(0, 2, 1) @ q) * self.scale
        return self.qkv.backward(np.concatenate((gq, gk, gv), axis=-1))


class TokenTransformer(Module):
    """Down-sampling token unit: attention to dim c, then an MLP residual."""

    def __init__(self, d_in: int, d_out: int, mlp_ratio: float = 1.0,
                 dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(d_in, dtype=dtype)
        self.attn = TokenAttention(d_in, d_out, dtype=dtype)
        self.norm2 = LayerNorm(d_out, dtype=dtype)
        self.mlp = Mlp(d_out, int(d_out * mlp_ratio), d_out, dtype=dtype)

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        x1 = self.attn.forward(self.norm1.forward(x, ctx), ctx)
        return x1 + self.mlp.forward(self.norm2.forward(x1, ctx), ctx)

    def backward(self, g: np.ndarray) -> np.ndarray:
        g1 = g + self.norm2.backward(self.mlp.backward(g))
        return self.norm1.backward(self.attn.backward(g1))


class DeformableConv2d(Module):
    """k x k convolution whose taps sample at learned fractional offsets.

    A standard 3x3 convolution predicts 2 offsets (dy, dx) per tap; taps then
    bilinearly sample the input at regular-position + offset (stride 1, same
    padding). Offset channels are interleaved: 2*t is dy, 2*t+1 is dx for tap
    t = i*k + j. With the offset predictor at zero this reduces exactly to a
    standard same-padding convolution.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("deformable kernel must be odd for same-size output")
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.pad = kernel // 2
        self.weight = Param((c_out, c_in, kernel, kernel), dtype=dtype)
        self.bias = Param((c_out,), init="zeros", dtype=dtype)
        self.offset_conv = Conv2d(c_in, 2 * kernel * kernel, 3, 1, 1,
                                  weight_init="zeros", dtype=dtype)
        self._cache = None

    def _positions(self, offsets: np.ndarray):
        b, _, h, w = offsets.shape
        k = self.kernel
        off = offsets.reshape(b, k * k, 2, h, w)
        yy = np.arange(h, dtype=offsets.dtype)
        xx = np.arange(w, dtype=offsets.dtype)
        py = np.empty((b, k * k, h, w), dtype=offsets.dtype)
        px = np.empty((b, k * k, h, w), dtype=offsets.dtype)
        for i in range(k):
            for j in range(k):
                t = i * k + j
                py[:, t] = yy[:, None] + (i - self.pad) + off[:, t, 0]
                px[:, t] = xx[None, :] + (j - self.pad) + off[:, t, 1]
        return py, px

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        b, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {c}")
        offsets = self.offset_conv.forward(x, ctx)
        py, px = self._positions(offsets)
        cols = kernels.dcn_sample(x, py, px)  # (B, C, K, H, W)
        k2 = self.kernel * self.kernel
        cols2 = cols.reshape(b, c * k2, h * w)
        w2 = self.weight.data.reshape(self.c_out, c * k2)
        out = np.tensordot(w2, cols2, axes=([1], [1]))  # (Cout, B, HW)
        out = out.transpose(1, 0, 2).reshape(b, self.c_out, h, w)
        out += self.bias.data[:, None, None]
        if ctx.train:
            self._cache = (x, py, px, cols2)
        return out

    def backward(self, g: np.ndarray) -> np.ndarray:
        x, py, px, cols2 = self._cache
        b, c, h, w = x.shape
        k = self.kernel
        k2 = k * k
        g2 = g.reshape(b, self.c_out, h * w)
        self.bias.grad += g2.sum(axis=(0, 2))
        gflat = np.ascontiguousarray(g2.transpose(1, 0, 2)).reshape(self.c_out, -1)
        cflat = np.ascontiguousarray(cols2.transpose(1, 0, 2)).reshape(c * k2, -1)
        self.weight.grad += (gflat @ cflat.T).reshape(self.weight.data.shape)
        w2 = self.weight.data.reshape(self.c_out, c * k2)
        gcols2 = w2.T[None] @ g2  # (B, C*K, HW)
        gcols = gcols2.reshape(b, c, k2, h, w)
        gx, gpy, gpx = kernels.dcn_sample_grads(x, py, px, gcols)
        goff = np.empty((b, k2, 2, h, w), dtype=g.dtype)
        goff[:, :, 0] = gpy
        goff[:, :, 1] = gpx
        gx += self.offset_conv.backward(goff.reshape(b, 2 * k2, h, w))
        return gx


class DeformableAttentionBlock(Module):
    """Transformer block with a deformable conv between attention and MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0,
                 dropout: float = 0.0, conv_kernel: int = 3, dtype=np.float32):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, attn_drop=dropout,
                                           proj_drop=dropout, dtype=dtype)
        self.dconv = DeformableConv2d(dim, dim, conv_kernel, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), dim, drop=dropout, dtype=dtype)
        self._grid = None

    def forward(self, t: TokenSequence, ctx: Ctx) -> TokenSequence:
        x = t.data
        x1 = x + self.attn.forward(self.norm1.forward(x, ctx), ctx)
        m = tokens_to_map(t.with_data(x1))
        x2 = map_to_tokens(self.dconv.forward(m, ctx)).data
        y = x2 + self.mlp.forward(self.norm2.forward(x2, ctx), ctx)
        if ctx.train:
            self._grid = (t.grid_h, t.grid_w)
        return t.with_data(y)

    def backward(self, g: np.ndarray) -> np.ndarray:
        gh, gw = self._grid
        g2 = g + self.norm2.backward(self.mlp.backward(g))
        gm = tokens_to_map(TokenSequence(g2, gh, gw))
        g1 = map_to_tokens(self.dconv.backward(gm)).data
        return g1 + self.norm1.backward(self.attn.backward(g1))
