"""Overlapping-window tokenization: soft split (unfold) and its fold inverse.

The encoder shrinks the token grid by splitting overlapping windows into
tokens; the decoder grows it back by folding token windows onto a canvas,
summing where windows overlap. ``overlap`` is the number of shared pixels
between neighbouring windows, so the effective stride is ``kernel -
overlap`` (the stated multi-level token counts H/4, H/8, H/16 force this
reading).

Token layout contract (must match the kernels): token l = row-major grid
position, feature index = c*k*k + i*k + j (channel-major, then row-major
within the window).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

FeatureMap = np.ndarray  # (B, C, H, W)


@dataclass(frozen=True)
class SoftSplitSpec:
    kernel: int
    overlap: int
    pad: int

    def __post_init__(self):
        if self.kernel < 1:
            raise ValueError(f"kernel must be >= 1, got {self.kernel}")
        if not 0 <= self.overlap < self.kernel:
            raise ValueError(
                f"overlap must be in [0, kernel), got {self.overlap}"
            )
        if self.pad < 0:
            raise ValueError(f"pad must be >= 0, got {self.pad}")

    @property
    def stride(self) -> int:
        return self.kernel - self.overlap


@dataclass
class TokenSequence:
    """A batch of tokens with its remembered 2-D grid shape."""

    data: np.ndarray  # (B, L, D)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"tokens must be (B, L, D), got {self.data.shape}")
        if self.grid_h * self.grid_w != self.data.shape[1]:
            raise ValueError(
                f"grid {self.grid_h}x{self.grid_w} != token count {self.data.shape[1]}"
            )

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def with_data(self, data: np.ndarray) -> "TokenSequence":
        return TokenSequence(data, self.grid_h, self.grid_w)


def out_length(length_in: int, spec: SoftSplitSpec) -> int:
    """Window positions along one axis of length ``length_in``."""
    return kernels.out_size(length_in, spec.kernel, spec.stride, spec.pad)


def soft_split(x: FeatureMap, spec: SoftSplitSpec) -> TokenSequence:
    """Split (B,C,H,W) into overlapping k*k windows -> (B, L, C*k*k) tokens."""
    if x.ndim != 4:
        raise ValueError(f"feature map must be (B, C, H, W), got {x.shape}")
    _, _, h, w = x.shape
    oh = out_length(h, spec)
    ow = out_length(w, spec)
    cols = kernels.unfold(x, spec.kernel, spec.stride, spec.pad)
    return TokenSequence(cols, oh, ow)


def token_fold(t: TokenSequence, spec: SoftSplitSpec, out_h: int,
               out_w: int) -> FeatureMap:
    """Scatter-add each token's window onto a (out_h, out_w) canvas.

    Overlapping contributions sum; zero padding is cropped. Exact adjoint of
    :func:`soft_split` with the same spec.
    """
    k2 = spec.kernel * spec.kernel
    if t.dim % k2 != 0:
        raise ValueError(f"token dim {t.dim} not divisible by k^2={k2}")
    if t.grid_h != out_length(out_h, spec) or t.grid_w != out_length(out_w, spec):
        raise ValueError(
            f"grid {t.grid_h}x{t.grid_w} inconsistent with folding to "
            f"{out_h}x{out_w} under {spec}"
        )
    return kernels.fold(t.data, spec.kernel, spec.stride, spec.pad, out_h, out_w)


def overlap_count(spec: SoftSplitSpec, out_h: int, out_w: int) -> np.ndarray:
    """How many windows cover each output pixel (the fold of all-ones tokens)."""
    oh = out_length(out_h, spec)
    ow = out_length(out_w, spec)
    ones = TokenSequence(
        np.ones((1, oh * ow, spec.kernel * spec.kernel)), oh, ow
    )
    return token_fold(ones, spec, out_h, out_w)[0, 0]


def tokens_to_map(t: TokenSequence) -> FeatureMap:
    """(B, L, D) -> (B, D, grid_h, grid_w); pure layout transpose."""
    b, l, d = t.data.shape
    return np.ascontiguousarray(
        t.data.transpose(0, 2, 1).reshape(b, d, t.grid_h, t.grid_w)
    )


def map_to_tokens(x: FeatureMap) -> TokenSequence:
    """(B, D, H, W) -> (B, H*W, D); exact inverse of :func:`tokens_to_map`."""
    if x.ndim != 4:
        raise ValueError(f"feature map must be (B, C, H, W), got {x.shape}")
    b, d, h, w = x.shape
    data = np.ascontiguousarray(x.reshape(b, d, h * w).transpose(0, 2, 1))
    return TokenSequence(data, h, w)
