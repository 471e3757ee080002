"""Distortion gate and the prior-to-embedding scale regulator.

The gate re-weights encoder features multiplicatively: a deformable
convolution extracts distortion structure, and 2*sigmoid(GELU(BN(.)))
maps it to a per-position importance in (0, 2) that multiplies the input
(values > 1 emphasise, < 1 suppress).

The scale regulator shrinks the H x W latitude prior to the token grid of
the deepest encoder level with three strided convolutions (strides 4, 2, 2
mirroring the tokenizer reduction), making the prior trainable; its output
is added to the positional embedding.
"""

from __future__ import annotations

import numpy as np

from .attention import DeformableConv2d
from .geometry import RelationMatrix
from .nn import (
    BatchNorm2d,
    Conv2d,
    Ctx,
    Gelu,
    Module,
    ModuleList,
    gelu,
    gelu_grad,
    sigmoid,
)
from .tokenizer import TokenSequence, map_to_tokens, tokens_to_map


class DistortionGate(Module):
    """gate = 2*sigmoid(GELU(BN(DConv(x)))); out = gate * x, shapes preserved."""

    def __init__(self, channels: int, kernel: int = 3, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.dconv = DeformableConv2d(channels, channels, kernel, dtype=dtype)
        self.bn = BatchNorm2d(channels, dtype=dtype)
        self._cache = None
        self._gate_cache = None

    def gate(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        a = self.bn.forward(self.dconv.forward(x, ctx), ctx)
        u = gelu(a)
        s = sigmoid(u)
        if ctx.train:
            self._gate_cache = (a, s)
        return 2.0 * s

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        g = self.gate(x, ctx)
        if ctx.train:
            self._cache = (x, g)
        return g * x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        x, g = self._cache
        a, s = self._gate_cache
        gx_direct = grad * g
        g_gate = grad * x
        g_u = g_gate * 2.0 * s * (1.0 - s)
        g_a = g_u * gelu_grad(a)
        gx_conv = self.dconv.backward(self.bn.backward(g_a))
        return gx_direct + gx_conv


class ScaleRegulator(Module):
    """Three conv+BN+GELU stages shrinking the prior H x W -> l3 tokens of dim d.

    Kernel/stride/pad triples (7,4,2), (3,2,1), (3,2,1) mirror the tokenizer
    windows so the prior's receptive-field geometry matches the token grid.
    """

    STAGES = ((7, 4, 2), (3, 2, 1), (3, 2, 1))

    def __init__(self, embed_dim: int, hidden: tuple[int, int] = (64, 192),
                 dtype=np.float32):
        super().__init__()
        widths = (1, hidden[0], hidden[1], embed_dim)
        self.embed_dim = embed_dim
        convs = []
        bns = []
        for idx, (k, s, p) in enumerate(self.STAGES):
            convs.append(Conv2d(widths[idx], widths[idx + 1], k, s, p, dtype=dtype))
            bns.append(BatchNorm2d(widths[idx + 1], dtype=dtype))
        self.convs = ModuleList(convs)
        self.bns = ModuleList(bns)
        self.acts = ModuleList([Gelu() for _ in self.STAGES])
        self._grid = None

    def forward(self, rm: RelationMatrix, ctx: Ctx) -> TokenSequence:
        if rm.height % 16 != 0 or rm.width % 16 != 0:
            raise ValueError(
                f"prior size {rm.height}x{rm.width} must be divisible by 16"
            )
        x = rm.values.astype(self.convs[0].weight.data.dtype)[None, None]
        for conv, bn, act in zip(self.convs, self.bns, self.acts):
            x = act.forward(bn.forward(conv.forward(x, ctx), ctx), ctx)
        t = map_to_tokens(x)
        if ctx.train:
            self._grid = (t.grid_h, t.grid_w)
        return t

    def backward(self, g_tokens: np.ndarray) -> np.ndarray:
        gh, gw = self._grid
        g = tokens_to_map(TokenSequence(g_tokens, gh, gw))
        for conv, bn, act in zip(
            reversed(list(self.convs)), reversed(list(self.bns)),
            reversed(list(self.acts)),
        ):
            g = conv.backward(bn.backward(act.backward(g)))
        return g[:, 0]
