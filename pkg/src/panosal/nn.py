"""Minimal layer framework with hand-written backprop.

Layers cache what their backward pass needs only when ``ctx.train`` is set,
so inference with shared read-only parameters is thread-safe. Training
(backward + parameter updates) assumes a single writer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np
from scipy.special import erf

from . import kernels

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class Ctx:
    """Per-call forward context: training mode and (optional) dropout rng."""

    train: bool = False
    rng: Optional[np.random.Generator] = None


class Param:
    """A named array with gradient buffer and a declared init scheme."""

    __slots__ = ("data", "grad", "init", "trainable")

    def __init__(self, shape, init="trunc_normal", trainable=True,
                 dtype=np.float32):
        self.data = np.zeros(shape, dtype=dtype)
        self.grad = np.zeros(shape, dtype=dtype)
        self.init = init
        self.trainable = trainable


def trunc_normal_(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with |x| > 2*std resampled."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


class Module:
    """Base with auto-registration of `Param` and child `Module` attributes."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Param):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._modules.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> Iterator[Param]:
        for _, p in self.named_parameters():
            yield p

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def initialize(self, seed: int):
        """Deterministic init: same seed gives bit-identical parameters."""
        rng = np.random.default_rng(seed)
        for _, p in self.named_parameters():
            dtype = p.data.dtype
            if p.init == "trunc_normal":
                p.data[...] = trunc_normal_(rng, p.data.shape).astype(dtype)
            elif p.init == "zeros":
                p.data[...] = 0.0
            elif p.init == "ones":
                p.data[...] = 1.0
            else:
                raise ValueError(f"unknown init {p.init!r}")
            p.grad[...] = 0.0

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = p.grad.astype(dtype)
        return self

    def num_parameters(self, trainable_only: bool = True) -> int:
        return sum(
            p.data.size
            for p in self.parameters()
            if p.trainable or not trainable_only
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}


class ModuleList(Module):
    def __init__(self, mods):
        super().__init__()
        self._items = []
        for i, m in enumerate(mods):
            setattr(self, str(i), m)
            self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


# --- activations ------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return cdf + x * pdf


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_lastdim(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


# --- layers ------------------------------------------------------------------

class Linear(Module):
    """y = x @ W + b over the last axis."""

    def __init__(self, d_in: int, d_out: int, dtype=np.float32):
        super().__init__()
        self.d_in = d_in
        self.d_out = d_out
        self.weight = Param((d_in, d_out), dtype=dtype)
        self.bias = Param((d_out,), init="zeros", dtype=dtype)
        self._x = None

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected last dim {self.d_in}, got {x.shape[-1]}")
        if ctx.train:
            self._x = x
        return x @ self.weight.data + self.bias.data

    def backward(self, g: np.ndarray) -> np.ndarray:
        x2 = self._x.reshape(-1, self.d_in)
        g2 = g.reshape(-1, self.d_out)
        self.weight.grad += x2.T @ g2
        self.bias.grad += g2.sum(axis=0)
        return (g2 @ self.weight.data.T).reshape(self._x.shape)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Param((dim,), init="ones", dtype=dtype)
        self.beta = Param((dim,), init="zeros", dtype=dtype)
        self._cache = None

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if ctx.train:
            self._cache = (xhat, inv)
        return xhat * self.gamma.data + self.beta.data

    def backward(self, g: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        d = self.dim
        self.gamma.grad += (g * xhat).reshape(-1, d).sum(axis=0)
        self.beta.grad += g.reshape(-1, d).sum(axis=0)
        gh = g * self.gamma.data
        return inv / d * (
            d * gh
            - gh.sum(axis=-1, keepdims=True)
            - xhat * (gh * xhat).sum(axis=-1, keepdims=True)
        )


class Gelu(Module):
    def __init__(self):
        super().__init__()
        self._x = None

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        if ctx.train:
            self._x = x
        return gelu(x)

    def backward(self, g: np.ndarray) -> np.ndarray:
        return g * gelu_grad(self._x)


class Dropout(Module):
    """Inverted dropout; identity when p == 0 or at inference."""

    def __init__(self, p: float = 0.0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout prob must be in [0,1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        if not ctx.train or self.p == 0.0:
            self._mask = None
            return x
        if ctx.rng is None:
            raise RuntimeError("dropout > 0 requires a training rng")
        keep = 1.0 - self.p
        self._mask = (ctx.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, g: np.ndarray) -> np.ndarray:
        if self._mask is None:
            return g
        return g * self._mask


class Mlp(Module):
    """Linear -> GELU -> Linear with optional dropout after each linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, drop: float = 0.0,
                 dtype=np.float32):
        super().__init__()
        self.fc1 = Linear(d_in, hidden, dtype=dtype)
        self.act = Gelu()
        self.drop1 = Dropout(drop)
        self.fc2 = Linear(hidden, d_out, dtype=dtype)
        self.drop2 = Dropout(drop)

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        h = self.drop1.forward(self.act.forward(self.fc1.forward(x, ctx), ctx), ctx)
        return self.drop2.forward(self.fc2.forward(h, ctx), ctx)

    def backward(self, g: np.ndarray) -> np.ndarray:
        g = self.fc2.backward(self.drop2.backward(g))
        return self.fc1.backward(self.act.backward(self.drop1.backward(g)))


class Conv2d(Module):
    """Standard convolution via unfold + matmul (im2col reuses the fold kernels)."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 pad: int = 0, weight_init: str = "trunc_normal",
                 dtype=np.float32):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.weight = Param((c_out, c_in * kernel * kernel), init=weight_init,
                            dtype=dtype)
        self.bias = Param((c_out,), init="zeros", dtype=dtype)
        self._cache = None

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            kernels.out_size(h, self.kernel, self.stride, self.pad),
            kernels.out_size(w, self.kernel, self.stride, self.pad),
        )

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        b, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {c}")
        cols = kernels.unfold(x, self.kernel, self.stride, self.pad)  # (B,L,Ck2)
        oh, ow = self.out_hw(h, w)
        out = cols @ self.weight.data.T + self.bias.data  # (B,L,Cout)
        if ctx.train:
            self._cache = (cols, (h, w))
        return out.transpose(0, 2, 1).reshape(b, self.c_out, oh, ow)

    def backward(self, g: np.ndarray) -> np.ndarray:
        cols, (h, w) = self._cache
        b = g.shape[0]
        g2 = np.ascontiguousarray(
            g.reshape(b, self.c_out, -1).transpose(0, 2, 1)
        )  # (B,L,Cout)
        gflat = g2.reshape(-1, self.c_out)
        self.weight.grad += gflat.T @ cols.reshape(-1, cols.shape[-1])
        self.bias.grad += gflat.sum(axis=0)
        gcols = g2 @ self.weight.data  # (B,L,Ck2)
        return kernels.fold(gcols, self.kernel, self.stride, self.pad, h, w)


class BatchNorm2d(Module):
    """Per-channel batchnorm; batch stats in training, running stats at eval."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Param((channels,), init="ones", dtype=dtype)
        self.beta = Param((channels,), init="zeros", dtype=dtype)
        self.running_mean = Param((channels,), init="zeros", trainable=False,
                                  dtype=dtype)
        self.running_var = Param((channels,), init="ones", trainable=False,
                                 dtype=dtype)
        self._cache = None

    def forward(self, x: np.ndarray, ctx: Ctx) -> np.ndarray:
        if x.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[1]}")
        if ctx.train:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mu[:, None, None]) * inv[:, None, None]
            self._cache = (xhat, inv, n)
            # running variance uses the unbiased estimate
            unbiased = var * (n / max(n - 1, 1))
            m = self.momentum
            self.running_mean.data[...] = (1 - m) * self.running_mean.data + m * mu
            self.running_var.data[...] = (1 - m) * self.running_var.data + m * unbiased
        else:
            inv = 1.0 / np.sqrt(self.running_var.data + self.eps)
            xhat = (x - self.running_mean.data[:, None, None]) * inv[:, None, None]
        return xhat * self.gamma.data[:, None, None] + self.beta.data[:, None, None]

    def backward(self, g: np.ndarray) -> np.ndarray:
        xhat, inv, n = self._cache
        self.gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += g.sum(axis=(0, 2, 3))
        gh = g * self.gamma.data[:, None, None]
        sum_gh = gh.sum(axis=(0, 2, 3), keepdims=True)
        sum_gh_xhat = (gh * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv[:, None, None] / n) * (n * gh - sum_gh - xhat * sum_gh_xhat)
