"""Training losses and the four saliency evaluation metrics.

Loss is plain binary cross-entropy on the saliency and edge maps; the two
terms add up to the total.

Evaluation metrics follow the standard saliency protocol: MAE, F-measure
(beta^2 = 0.3) and E-measure swept over 255 binarization thresholds
{0, 1/255, ..., 254/255} with per-image max and mean, and the structural
S-measure (alpha = 0.5). Degenerate-case conventions (documented on each
function) follow the original metric definitions: all-empty ground truth is
an error for F/E (the image is excluded and counted), S and E carry explicit
fallbacks for constant ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .data import Sample, bilinear_resize, nearest_resize

if TYPE_CHECKING:  # pragma: no cover
    from .model import Model

BCE_EPS = 1e-7
FBETA2 = 0.3
THRESHOLDS = np.arange(255) / 255.0
S_ALPHA = 0.5


class EmptyGroundTruthError(ValueError):
    """Ground truth has no positive pixel; F/E-measure are undefined."""


@dataclass
class LossReport:
    loss_sal: float
    loss_edge: float

    @property
    def loss_total(self) -> float:
        return self.loss_sal + self.loss_edge


@dataclass
class MetricsReport:
    mae: float
    maxF: float
    meanF: float
    maxE: float
    meanE: float
    s_measure: float
    n_images: int

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "maxF": self.maxF,
            "meanF": self.meanF,
            "maxE": self.maxE,
            "meanE": self.meanE,
            "s_measure": self.s_measure,
            "n_images": self.n_images,
        }


def _check_same_shape(p: np.ndarray, g: np.ndarray):
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")


def _check_binary(g: np.ndarray):
    if not np.isin(g, (0.0, 1.0)).all():
        raise ValueError("ground truth must be binary {0, 1}")


# --- losses -------------------------------------------------------------------

def bce_loss(p: np.ndarray, g: np.ndarray) -> float:
    """Mean binary cross-entropy; p is clamped to [eps, 1-eps] before the logs."""
    _check_same_shape(p, g)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(g * np.log(pc) + (1.0 - g) * np.log1p(-pc)))


def bce_grad(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d bce_loss / d p: (p - g) / (p (1 - p)) / N inside the clamp, 0 outside."""
    _check_same_shape(p, g)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    inside = (p > BCE_EPS) & (p < 1.0 - BCE_EPS)
    return np.where(inside, (pc - g) / (pc * (1.0 - pc)), 0.0) / p.size


def bce_grad_wrt_logits(logits: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d bce_loss(sigmoid(logits), g) / d logits = (sigmoid(logits) - g) / N.

    Identical to chaining bce_grad through the sigmoid wherever the clamp is
    inactive, but stays exact when the sigmoid saturates.
    """
    from .nn import sigmoid

    return (sigmoid(logits) - g) / logits.size


def total_loss(p_sal: np.ndarray, p_edge: np.ndarray, g_sal: np.ndarray,
               g_edge: np.ndarray) -> LossReport:
    return LossReport(bce_loss(p_sal, g_sal), bce_loss(p_edge, g_edge))


# --- per-image metrics ----------------------------------------------------------

def mae(p: np.ndarray, g: np.ndarray) -> float:
    _check_same_shape(p, g)
    return float(np.mean(np.abs(p - g)))


def _threshold_counts(p: np.ndarray, g: np.ndarray):
    """tp[t], fp[t] for binarization p > THRESHOLDS[t], via one histogram pass."""
    pf = p.ravel()
    gf = g.ravel().astype(bool)
    # number of thresholds strictly below each pixel value
    idx = np.searchsorted(THRESHOLDS, pf, side="left")
    n_t = THRESHOLDS.size
    hist_pos = np.bincount(idx[gf], minlength=n_t + 1)
    hist_neg = np.bincount(idx[~gf], minlength=n_t + 1)
    tp = gf.sum() - np.cumsum(hist_pos)[:n_t]
    fp = (~gf).sum() - np.cumsum(hist_neg)[:n_t]
    return tp.astype(np.float64), fp.astype(np.float64)


def f_measure(p: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    """(maxF, meanF) over the 255-threshold sweep; F = 0 when the
    denominator vanishes (e.g. no predicted positives)."""
    _check_same_shape(p, g)
    _check_binary(g)
    n_pos = float(g.sum())
    if n_pos == 0:
        raise EmptyGroundTruthError("no positive ground-truth pixel")
    tp, fp = _threshold_counts(p, g)
    pred_pos = tp + fp
    prec = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    rec = tp / n_pos
    denom = FBETA2 * prec + rec
    f = np.divide((1.0 + FBETA2) * prec * rec, denom,
                  out=np.zeros_like(denom), where=denom > 0)
    return float(f.max()), float(f.mean())


def _alignment_score(n: float, n_g: float, tp: float, fp: float) -> float:
    """Enhanced-alignment score for one binarized map from its confusion counts.

    Both maps are bias-aligned (mean subtracted); the pointwise alignment
    2*aG*aP/(aG^2+aP^2) (0 where the denominator vanishes) is mapped through
    (phi+1)^2/4 and averaged. Binary maps make this a function of counts only.
    """
    mean_g = n_g / n
    mean_p = (tp + fp) / n
    total = 0.0
    for gv, pv, count in (
        (1.0, 1.0, tp),
        (1.0, 0.0, n_g - tp),
        (0.0, 1.0, fp),
        (0.0, 0.0, n - n_g - fp),
    ):
        if count == 0:
            continue
        ag = gv - mean_g
        ap = pv - mean_p
        denom = ag * ag + ap * ap
        phi = 0.0 if denom == 0 else 2.0 * ag * ap / denom
        total += count * (phi + 1.0) ** 2 / 4.0
    return total / n


def e_measure(p: np.ndarray, g: np.ndarray) -> tuple[float, float]:
    """(maxE, meanE) over the 255-threshold sweep.

    Degenerate convention: all-ones ground truth scores mean(p_bin) at each
    threshold (the 1 - mean|p_bin - g| fallback); all-zero raises, matching
    f_measure.
    """
    _check_same_shape(p, g)
    _check_binary(g)
    n = float(g.size)
    n_g = float(g.sum())
    if n_g == 0:
        raise EmptyGroundTruthError("no positive ground-truth pixel")
    tp, fp = _threshold_counts(p, g)
    if n_g == n:
        scores = tp / n
    else:
        scores = np.array(
            [_alignment_score(n, n_g, tp[t], fp[t]) for t in range(THRESHOLDS.size)]
        )
    return float(scores.max()), float(scores.mean())


def _object_score(values: np.ndarray) -> float:
    if values.size == 0:
        return 0.0
    x = float(values.mean())
    sx = float(values.std())
    return 2.0 * x / (x * x + 1.0 + sx + 1e-12)


def _region_ssim(p: np.ndarray, g: np.ndarray) -> float:
    n = p.size
    if n == 0:
        return 0.0
    mx = float(p.mean())
    my = float(g.mean())
    denom_n = max(n - 1, 1)
    sx = float(((p - mx) ** 2).sum() / denom_n)
    sy = float(((g - my) ** 2).sum() / denom_n)
    sxy = float(((p - mx) * (g - my)).sum() / denom_n)
    alpha = 4.0 * mx * my * sxy
    beta = (mx * mx + my * my) * (sx + sy)
    if beta == 0.0:
        return 1.0 if alpha == 0.0 else 0.0
    return alpha / beta


def s_measure(p: np.ndarray, g: np.ndarray) -> float:
    """Structural similarity S = alpha*S_object + (1-alpha)*S_region.

    Degenerate conventions: all-zero ground truth scores 1 - mean(p),
    all-one scores mean(p). The result is clipped to [0, 1].
    """
    _check_same_shape(p, g)
    _check_binary(g)
    mu = float(g.mean())
    if mu == 0.0:
        return float(1.0 - p.mean())
    if mu == 1.0:
        return float(p.mean())

    # object part: foreground on p where g, background on 1-p where not g
    s_obj = mu * _object_score(p[g == 1]) + (1.0 - mu) * _object_score(
        (1.0 - p)[g == 0]
    )

    # region part: 4-way split about the foreground centroid
    ys, xs = np.nonzero(g)
    cy = int(np.round(ys.mean()))
    cx = int(np.round(xs.mean()))
    h, w = g.shape[-2], g.shape[-1]
    p2 = p.reshape(h, w)
    g2 = g.reshape(h, w)
    s_reg = 0.0
    for rows, cols in (
        (slice(0, cy + 1), slice(0, cx + 1)),
        (slice(0, cy + 1), slice(cx + 1, w)),
        (slice(cy + 1, h), slice(0, cx + 1)),
        (slice(cy + 1, h), slice(cx + 1, w)),
    ):
        pq = p2[rows, cols]
        gq = g2[rows, cols]
        weight = pq.size / (h * w)
        s_reg += weight * _region_ssim(pq, gq)

    s = S_ALPHA * s_obj + (1.0 - S_ALPHA) * s_reg
    return float(np.clip(s, 0.0, 1.0))


# --- dataset-level aggregation ---------------------------------------------------

def compute_image_metrics(p: np.ndarray, g: np.ndarray) -> dict:
    """All per-image metrics for one prediction/ground-truth pair."""
    out = {"mae": mae(p, g), "s_measure": s_measure(p, g)}
    try:
        out["maxF"], out["meanF"] = f_measure(p, g)
        out["maxE"], out["meanE"] = e_measure(p, g)
    except EmptyGroundTruthError:
        out["fe_excluded"] = True
    return out


def aggregate_metrics(per_image: Sequence[dict], n_images: int) -> MetricsReport:
    if not per_image:
        raise ValueError("cannot aggregate an empty metrics list")
    mae_v = float(np.mean([m["mae"] for m in per_image]))
    s_v = float(np.mean([m["s_measure"] for m in per_image]))
    with_fe = [m for m in per_image if "maxF" in m]
    if with_fe:
        maxf = float(np.mean([m["maxF"] for m in with_fe]))
        meanf = float(np.mean([m["meanF"] for m in with_fe]))
        maxe = float(np.mean([m["maxE"] for m in with_fe]))
        meane = float(np.mean([m["meanE"] for m in with_fe]))
    else:
        maxf = meanf = maxe = meane = 0.0
    return MetricsReport(mae_v, maxf, meanf, maxe, meane, s_v, n_images)


def evaluate(model: "Model", samples: Sequence[Sample]) -> MetricsReport:
    """Run the model over a dataset and aggregate per-image metrics.

    Images are resized (bilinear) to the model input; masks follow with
    nearest-neighbour so they stay binary. Images whose mask is empty are
    excluded from the F/E averages but still counted in n_images.
    """
    if len(samples) == 0:
        raise ValueError("empty dataset")
    cfg = model.cfg
    per_image = []
    for s in samples:
        img = bilinear_resize(s.image, cfg.height, cfg.width)
        g = nearest_resize(s.mask, cfg.height, cfg.width)[0]
        out = model.forward(img[None])
        p = out.saliency[0, 0].astype(np.float64)
        per_image.append(compute_image_metrics(p, g.astype(np.float64)))
    return aggregate_metrics(per_image, len(samples))
