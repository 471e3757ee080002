"""Dataset loading, augmentation, edge extraction, and synthetic panoramas.

Dataset layout on disk: ``<root>/images/<id>.(png|jpg)`` paired with
``<root>/masks/<id>.png`` (8-bit grayscale, binarized at 128). Edge maps are
derived from masks as the 1-pixel inner morphological boundary and are
recomputed after any geometric augmentation so they stay exactly one pixel
wide.

The synthetic generator imitates the statistics of real panorama datasets:
object centers concentrate near the equator (~85% in the central half of
rows), shapes stretch horizontally with latitude the way an equirectangular
projection does, and objects may wrap across the left/right seam.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import binary_erosion

EQUATOR_BAND_PROB = 0.85
MIN_COVERAGE = 0.025
MAX_COVERAGE = 0.58


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray   # (1, H, W) float32 in {0, 1}
    edge: np.ndarray   # (1, H, W) float32 in {0, 1}
    id: str


@dataclass(frozen=True)
class AugmentConfig:
    resize_to: tuple[int, int] = (256, 512)   # (H, W)
    crop_to: tuple[int, int] = (224, 448)
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.crop_to[0] > self.resize_to[0] or self.crop_to[1] > self.resize_to[1]:
            raise ValueError(f"crop {self.crop_to} must fit inside resize {self.resize_to}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")


# --- resizing (channel-first arrays, half-pixel centers, clamp-to-edge) --------

def _src_coords(n_out: int, n_in: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def bilinear_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) float array with bilinear interpolation."""
    c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    ys = _src_coords(out_h, h)
    xs = _src_coords(out_w, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - np.floor(ys), 0.0, 1.0)
    wx = np.clip(xs - np.floor(xs), 0.0, 1.0)
    top = x[:, y0][:, :, x0] * (1 - wx) + x[:, y0][:, :, x1] * wx
    bot = x[:, y1][:, :, x0] * (1 - wx) + x[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[None, :, None] + bot * wy[None, :, None]
    return out.astype(x.dtype)


def nearest_resize(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (C, H, W) with nearest-neighbour (keeps binary maps binary)."""
    c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.copy()
    yi = np.clip(np.floor((np.arange(out_h) + 0.5) * h / out_h).astype(int), 0, h - 1)
    xi = np.clip(np.floor((np.arange(out_w) + 0.5) * w / out_w).astype(int), 0, w - 1)
    return x[:, yi][:, :, xi].copy()


# --- edges ----------------------------------------------------------------------

def edge_from_mask(mask: np.ndarray) -> np.ndarray:
    """1-pixel inner boundary: mask AND NOT erode(mask, 3x3), zero-padded."""
    squeeze = mask.ndim == 3
    m2 = mask[0] if squeeze else mask
    if not np.isin(m2, (0.0, 1.0)).all():
        raise ValueError("mask must be binary {0, 1}")
    mb = m2.astype(bool)
    eroded = binary_erosion(mb, structure=np.ones((3, 3), bool), border_value=0)
    edge = (mb & ~eroded).astype(np.float32)
    return edge[None] if squeeze else edge


# --- disk I/O ---------------------------------------------------------------------

def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _load_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.float32)[None]


def load_dataset(root) -> list[Sample]:
    """Load all image/mask pairs under ``root``; samples sorted by id."""
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {img_dir}")
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"missing masks directory: {mask_dir}")
    images = sorted(
        p for p in img_dir.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg")
    )
    if not images:
        raise FileNotFoundError(f"no images found in {img_dir}")
    samples = []
    for img_path in images:
        sid = img_path.stem
        mask_path = mask_dir / f"{sid}.png"
        if not mask_path.exists():
            raise FileNotFoundError(f"sample {sid!r}: missing mask {mask_path}")
        image = _load_image(img_path)
        mask = _load_mask(mask_path)
        if image.shape[1:] != mask.shape[1:]:
            raise ValueError(
                f"sample {sid!r}: image {image.shape[1:]} and mask "
                f"{mask.shape[1:]} sizes differ"
            )
        samples.append(Sample(image, mask, edge_from_mask(mask), sid))
    return samples


def save_sample(root, sample: Sample):
    """Write a sample in the dataset layout (8-bit PNGs)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    img = np.round(sample.image.transpose(1, 2, 0) * 255).astype(np.uint8)
    Image.fromarray(img).save(root / "images" / f"{sample.id}.png")
    mask = (sample.mask[0] * 255).astype(np.uint8)
    Image.fromarray(mask, mode="L").save(root / "masks" / f"{sample.id}.png")


# --- augmentation ------------------------------------------------------------------

def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Resize -> random crop -> random horizontal flip; edges recomputed."""
    rh, rw = cfg.resize_to
    ch, cw = cfg.crop_to
    image = bilinear_resize(s.image, rh, rw)
    mask = nearest_resize(s.mask, rh, rw)
    dy = int(rng.integers(0, rh - ch + 1))
    dx = int(rng.integers(0, rw - cw + 1))
    image = image[:, dy : dy + ch, dx : dx + cw]
    mask = mask[:, dy : dy + ch, dx : dx + cw]
    if rng.random() < cfg.hflip_prob:
        image = image[:, :, ::-1].copy()
        mask = mask[:, :, ::-1].copy()
    return Sample(image, mask, edge_from_mask(mask), s.id)


# --- synthetic panoramas -------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, channels: int, h: int, w: int):
    coarse = rng.random((channels, max(h // 8, 2), max(w // 8, 2))).astype(np.float32)
    return bilinear_resize(coarse, h, w)


def _point_in_polygon(dy: np.ndarray, dx: np.ndarray, verts: np.ndarray):
    """Even-odd rule on wrapped offsets; verts is (n, 2) as (y, x)."""
    dy, dx = np.broadcast_arrays(dy, dx)
    inside = np.zeros(dy.shape, dtype=bool)
    n = len(verts)
    for i in range(n):
        y1, x1 = verts[i]
        y2, x2 = verts[(i + 1) % n]
        cond = (dy < y1) != (dy < y2)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (dy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= cond & (dx < xi)
    return inside


def _draw_object(grid_dy, grid_dx, kind: str, a: float, b: float, verts):
    if kind == "ellipse":
        return (grid_dy / a) ** 2 + (grid_dx / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(grid_dy) <= a * 0.85) & (np.abs(grid_dx) <= b * 0.85)
    scaled = verts * np.array([a, b])
    return _point_in_polygon(grid_dy, grid_dx, scaled)


def synth_erp_sample(seed: int, height: int, width: int, n_objects: int = 2,
                     with_meta: bool = False):
    """Deterministic synthetic panorama with equator-biased salient objects.

    Object centers fall in the central half of rows with probability 0.85;
    shapes are stretched horizontally by 1/max(cos latitude, 0.2); column
    offsets wrap across the seam (longitude continuity). Object sizes are
    rescaled until mask coverage lands in [MIN_COVERAGE, MAX_COVERAGE].
    """
    if height < 32 or width < 32:
        raise ValueError("synthetic samples need height, width >= 32")
    rng = np.random.default_rng(seed)
    background = 0.25 + 0.5 * _smooth_noise(rng, 3, height, width)
    background += 0.08 * np.sin(
        np.linspace(0, 2 * np.pi, width, dtype=np.float32)
    )[None, None, :]

    objs = []
    for _ in range(max(n_objects, 1)):
        central = rng.random() < EQUATOR_BAND_PROB
        if central:
            cy = float(rng.uniform(height / 4, 3 * height / 4))
        else:
            span = height / 4
            lo = float(rng.uniform(0, 2 * span))
            cy = lo if lo < span else height - 2 * span + lo
        cx = float(rng.uniform(0, width))
        kind = ("ellipse", "rectangle", "polygon")[int(rng.integers(3))]
        a = float(rng.uniform(height / 9, height / 5))
        b_ratio = float(rng.uniform(0.7, 1.4))
        n_verts = int(rng.integers(5, 9))
        # evenly spread jittered angles keep the polygon star-shaped
        jitter = rng.uniform(0.0, 0.8, n_verts)
        angles = 2 * np.pi * (np.arange(n_verts) + jitter) / n_verts
        radii = rng.uniform(0.55, 1.0, n_verts)
        verts = np.stack([np.sin(angles) * radii, np.cos(angles) * radii], axis=1)
        color = rng.uniform(0.0, 1.0, 3).astype(np.float32)
        objs.append((cy, cx, kind, a, b_ratio, verts, color))

    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]

    def render(scale: float):
        mask = np.zeros((height, width), dtype=bool)
        layers = []
        centers = []
        for cy, cx, kind, a, b_ratio, verts, color in objs:
            a_s = min(a * scale, height / 2.5)
            cy_s = float(np.clip(cy, 0.6 * a_s, height - 0.6 * a_s))
            theta = (cy_s - height / 2) / height * np.pi
            stretch = 1.0 / max(np.cos(theta), 0.2)
            b_s = min(a_s * b_ratio * stretch, width / 3.5)
            dy = ys - cy_s
            dx = np.mod(xs - cx + width / 2, width) - width / 2  # seam wrap
            obj = _draw_object(dy, dx, kind, a_s, b_s, verts)
            mask |= obj
            layers.append((obj, color))
            centers.append((cy_s, cx))
        return mask, layers, centers

    scale = 1.0
    mask, layers, centers = render(scale)
    for _ in range(12):
        cov = float(mask.mean())
        if MIN_COVERAGE <= cov <= MAX_COVERAGE:
            break
        # object area grows ~ scale^2 until the size caps bite
        target = 0.12 if cov < MIN_COVERAGE else 0.30
        scale = min(scale * np.sqrt(target / max(cov, 1e-4)), 25.0)
        mask, layers, centers = render(scale)

    image = background.copy()
    texture = 0.12 * _smooth_noise(rng, 3, height, width)
    for obj, color in layers:
        image[:, obj] = color[:, None] + texture[:, obj]
    image += rng.normal(0.0, 0.015, image.shape).astype(np.float32)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    mask_f = mask.astype(np.float32)[None]
    sample = Sample(image, mask_f, edge_from_mask(mask_f), f"synth{seed:06d}")
    if with_meta:
        return sample, {"centers": centers, "coverage": float(mask.mean())}
    return sample


def make_synth_dataset(out_dir, n: int, seed: int, height: int, width: int):
    """Write n synthetic samples in the on-disk dataset layout."""
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        sample_seed = int(rng.integers(0, 2**31 - 1))
        n_objects = int(rng.integers(1, 4))
        s = synth_erp_sample(sample_seed, height, width, n_objects)
        s = Sample(s.image, s.mask, s.edge, f"{i:04d}_{s.id}")
        save_sample(out_dir, s)
        ids.append(s.id)
    return ids
