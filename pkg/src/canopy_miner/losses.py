"""Reference numpy kernels for the detector training losses.

These are not used for training here. They exist to check external training
code against a known-good implementation and to synthesize target heatmaps
for fixtures. Every loss accepts either :class:`~canopy_miner.core.Raster`
objects or plain arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Raster, WorldTransform, world_to_pixel
from .errors import InvariantViolation, ShapeMismatch


@dataclass(frozen=True)
class HeatmapConfig:
    """Gaussian target settings. ``sigma`` is in meters."""

    sigma: float = 1.5
    truncation: float = 3.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvariantViolation(f"heatmap sigma must be > 0, got {self.sigma}")
        if not self.truncation >= 3:
            raise InvariantViolation(f"heatmap truncation must be >= 3 sigma, got {self.truncation}")


@dataclass(frozen=True)
class LossWeights:
    w_tversky: float = 0.6
    w_focal: float = 0.4
    tversky_alpha: float = 0.3
    tversky_beta: float = 0.7
    focal_gamma: float = 2.0
    epsilon: float = 1e-7

    def __post_init__(self):
        for name in ("w_tversky", "w_focal", "tversky_alpha", "tversky_beta", "focal_gamma"):
            if not getattr(self, name) >= 0:
                raise InvariantViolation(f"{name} must be >= 0, got {getattr(self, name)}")
        if abs(self.w_tversky + self.w_focal - 1.0) > 1e-9:
            raise InvariantViolation(
                f"w_tversky + w_focal must equal 1, got {self.w_tversky} + {self.w_focal}"
            )
        if not self.epsilon > 0:
            raise InvariantViolation(f"epsilon must be > 0, got {self.epsilon}")


def _as_array(x):
    if isinstance(x, Raster):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _pair(pred, target):
    p, t = _as_array(pred), _as_array(target)
    if p.shape != t.shape:
        raise ShapeMismatch(f"pred shape {p.shape} != target shape {t.shape}")
    return p, t


def gaussian_value(center, pixel, sigma_px):
    """Unnormalized 2-D Gaussian evaluated at ``pixel``.

    ``center`` and ``pixel`` are (i, j) pairs in pixel units; the peak value
    is 1 at zero distance.
    """
    x, y = center
    i, j = pixel
    return math.exp(-((i - x) ** 2 + (j - y) ** 2) / (2.0 * sigma_px ** 2))


def render_target(points, transform: WorldTransform, cfg: HeatmapConfig = HeatmapConfig()) -> Raster:
    """Max-pool per-point Gaussian kernels into a single-band target raster.

    The kernel is evaluated at pixel centers and set to zero beyond
    ``cfg.truncation`` standard deviations.
    """
    sigma_px = cfg.sigma / transform.gsd
    reach = cfg.truncation * sigma_px
    heat = np.zeros(transform.shape, dtype=np.float64)
    for p in points:
        world_to_pixel(transform, p)  # raises OutOfBounds for stray points
        fr, fc = transform.fractional_pixel(p)
        r0, r1 = max(0, math.ceil(fr - reach)), min(transform.rows - 1, math.floor(fr + reach))
        c0, c1 = max(0, math.ceil(fc - reach)), min(transform.cols - 1, math.floor(fc + reach))
        rr = np.arange(r0, r1 + 1, dtype=np.float64)[:, None] - fr
        cc = np.arange(c0, c1 + 1, dtype=np.float64)[None, :] - fc
        d2 = rr ** 2 + cc ** 2
        kernel = np.exp(-d2 / (2.0 * sigma_px ** 2))
        kernel[d2 > reach ** 2] = 0.0
        window = heat[r0:r1 + 1, c0:c1 + 1]
        np.maximum(window, kernel, out=window)
    return Raster(transform, heat)


def heatmap_loss(pred, target, reduction="mean"):
    """Squared error between predicted and target heatmaps.

    ``reduction="mean"`` gives the MSE; ``"sum"`` gives the raw squared
    l2 norm, which grows with raster size.
    """
    p, t = _pair(pred, target)
    if p.ndim == 3 and p.shape[0] != 1:
        raise ShapeMismatch(f"heatmap loss expects one band, got {p.shape[0]}")
    sq = (p - t) ** 2
    if reduction == "mean":
        return float(sq.mean())
    if reduction == "sum":
        return float(sq.sum())
    raise ValueError(f"unknown reduction {reduction!r}")


def tversky_loss(pred, target, w: LossWeights = LossWeights()):
    p, t = _pair(pred, target)
    tp = float(np.sum(p * t))
    fp = float(np.sum(p * (1.0 - t)))
    fn = float(np.sum((1.0 - p) * t))
    eps = w.epsilon
    return 1.0 - (tp + eps) / (tp + w.tversky_alpha * fp + w.tversky_beta * fn + eps)


def focal_loss(pred, target, gamma=2.0, epsilon=1e-7):
    """Binary focal loss averaged over pixels; ``gamma=0`` is plain BCE."""
    p, t = _pair(pred, target)
    p = np.clip(p, epsilon, 1.0 - epsilon)
    p_t = np.where(t >= 0.5, p, 1.0 - p)
    return float(np.mean(-((1.0 - p_t) ** gamma) * np.log(p_t)))


def combined_seg_loss(pred, target, w: LossWeights = LossWeights()):
    tv = tversky_loss(pred, target, w)
    fo = focal_loss(pred, target, w.focal_gamma, w.epsilon)
    return w.w_tversky * tv + w.w_focal * fo


def loss_report(pred, target, w: LossWeights = LossWeights()):
    """All losses for one prediction/target pair, as a plain dict."""
    tv = tversky_loss(pred, target, w)
    fo = focal_loss(pred, target, w.focal_gamma, w.epsilon)
    return {
        "tversky": tv,
        "focal": fo,
        "combined": w.w_tversky * tv + w.w_focal * fo,
        "heatmap_mse": heatmap_loss(pred, target),
    }
