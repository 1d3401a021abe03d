"""Pixel-wise ensemble averaging and local-maximum peak extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Detection, Raster
from .errors import BandMismatch, GridMismatch, InvariantViolation


@dataclass(frozen=True)
class PeakConfig:
    """Peak search window side ``kernel_m`` (meters) and confidence threshold."""

    kernel_m: float = 2.0
    threshold: float = 0.25

    def __post_init__(self):
        if not self.kernel_m > 0:
            raise InvariantViolation(f"kernel_m must be > 0, got {self.kernel_m}")
        if not 0 < self.threshold < 1:
            raise InvariantViolation(f"threshold must lie in (0, 1), got {self.threshold}")

    def half_width(self, gsd: float) -> int:
        # round half up, never below one pixel
        return max(1, int(math.floor(self.kernel_m / (2.0 * gsd) + 0.5)))


def average_rasters(rasters) -> Raster:
    """Arithmetic mean of aligned rasters, accumulated in input order."""
    rasters = list(rasters)
    if not rasters:
        raise InvariantViolation("average_rasters needs at least one raster")
    first = rasters[0]
    acc = np.zeros_like(first.values)
    for k, r in enumerate(rasters):
        diff = first.transform.mismatched_fields(r.transform)
        if diff:
            raise GridMismatch(f"raster {k} differs from raster 0 in {', '.join(diff)}", diff)
        if r.bands != first.bands:
            raise BandMismatch(f"raster {k} has {r.bands} bands, raster 0 has {first.bands}")
        acc += r.values
    mean = acc / len(rasters)
    return Raster(first.transform, mean)


def extract_peaks(heat: Raster, cfg: PeakConfig = PeakConfig(), id_prefix="d") -> list:
    """Detections at local maxima of a single-band heatmap.

    A pixel qualifies when it reaches ``cfg.threshold`` and no pixel in the
    square window around it is larger. Strict maxima are always returned.
    Flat tops are reduced to the first (row, col) of each connected plateau,
    and equal-valued maxima that still share a window are thinned greedily in
    (value desc, row, col) order, so no two detections sit within one
    half-width of each other.

    Detections are ordered by descending confidence, then (row, col), and get
    ids ``<id_prefix>000000``, ``<id_prefix>000001``, ...
    """
    data = heat.check_unit_range("heatmap").data
    t = heat.transform
    h = cfg.half_width(t.gsd)
    local_max = ndimage.maximum_filter(data, size=2 * h + 1, mode="constant", cval=-np.inf)
    cand = (data >= cfg.threshold) & (data == local_max)
    if not cand.any():
        return []

    labels, n = ndimage.label(cand, structure=np.ones((3, 3), dtype=bool))
    coords = np.argwhere(cand)  # row-major, so first hit per label is the smallest (row, col)
    lab = labels[coords[:, 0], coords[:, 1]]
    _, first = np.unique(lab, return_index=True)
    reps = coords[first]

    vals = data[reps[:, 0], reps[:, 1]]
    order = np.lexsort((reps[:, 1], reps[:, 0], -vals))
    reps, vals = reps[order], vals[order]

    blocked = np.zeros(data.shape, dtype=bool)
    out = []
    for (r, c), v in zip(reps, vals):
        r, c = int(r), int(c)
        if blocked[r, c]:
            continue
        blocked[max(0, r - h):r + h + 1, max(0, c - h):c + h + 1] = True
        out.append((r, c, float(v)))

    return [
        Detection(f"{id_prefix}{k:06d}", t.pixel_to_world(r, c), v)
        for k, (r, c, v) in enumerate(out)
    ]


def detection_pixels(detections, transform):
    """(row, col) of each detection, for tests and diagnostics."""
    from .core import world_to_pixel

    return [world_to_pixel(transform, d.position) for d in detections]
