"""Equirectangular coordinate math and the latitude prior grid.

An ERP image maps a full sphere onto a 2:1 rectangle: columns are longitude,
rows are latitude. Pixel (h, w) maps to angles via

    phi   = (w - W/2) / W * 2*pi        (longitude)
    theta = (h - H/2) / H * pi          (latitude)

Integer indices are used directly (no half-pixel offset), so row 0 maps to
exactly -pi/2; H/2 and W/2 are real divisions, odd sizes are fine.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

PRIOR_KINDS = ("cosine", "sine", "blank")


class SphericalCoord(NamedTuple):
    phi: float
    theta: float


def erp_pixel_to_sphere(h, w, height: int, width: int):
    """Map pixel indices to (longitude, latitude) in radians.

    Accepts scalars or arrays; scalar inputs return a SphericalCoord.
    """
    if height < 1 or width < 1:
        raise ValueError(f"image size must be >= 1, got {height}x{width}")
    ha = np.asarray(h)
    wa = np.asarray(w)
    if (ha < 0).any() or (ha >= height).any():
        raise ValueError(f"row index out of range [0, {height})")
    if (wa < 0).any() or (wa >= width).any():
        raise ValueError(f"col index out of range [0, {width})")
    phi = (wa - width / 2) / width * (2.0 * np.pi)
    theta = (ha - height / 2) / height * np.pi
    if np.isscalar(h) and np.isscalar(w):
        return SphericalCoord(float(phi), float(theta))
    return phi, theta


def sphere_to_erp_row(theta, height: int):
    """Inverse of the latitude mapping: theta -> fractional row index."""
    return np.asarray(theta) / np.pi * height + height / 2


@dataclass
class RelationMatrix:
    """Spatial prior over the ERP plane, one scalar per pixel.

    The cosine prior weights the equator band (cos of latitude, in [0, 1],
    constant along rows, symmetric about the equator). The sine variant is
    the signed sin of latitude; blank is all zeros.
    """

    values: np.ndarray  # (H, W)
    prior_kind: str

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def init_relation_matrix(height: int, width: int, kind: str = "cosine",
                         dtype=np.float64) -> RelationMatrix:
    if kind not in PRIOR_KINDS:
        raise ValueError(f"prior kind must be one of {PRIOR_KINDS}, got {kind!r}")
    if height < 1 or width < 1:
        raise ValueError(f"matrix size must be >= 1, got {height}x{width}")
    rows = np.arange(height, dtype=np.float64)
    theta = (rows - height / 2) / height * np.pi
    if kind == "cosine":
        col = np.cos(theta)
    elif kind == "sine":
        col = np.sin(theta)
    else:
        col = np.zeros(height)
    values = np.repeat(col[:, None], width, axis=1).astype(dtype)
    return RelationMatrix(values=values, prior_kind=kind)


def relation_matrix_to_u8(rm: RelationMatrix) -> np.ndarray:
    """Min-max scale the prior to [0, 255] for PNG export."""
    v = rm.values
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255.0).astype(np.uint8)
