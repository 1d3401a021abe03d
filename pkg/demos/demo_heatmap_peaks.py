"""
From tree positions to detections
=================================

Render a Gaussian target heatmap from a handful of tree positions, average
three noisy copies of it as if they came from an ensemble of detectors, and
pull the detections back out with the local-maximum search.
"""

import numpy as np

from canopy_miner.core import Point, Raster, WorldTransform, world_to_pixel
from canopy_miner.ensemble import PeakConfig, average_rasters, detection_pixels, extract_peaks
from canopy_miner.losses import HeatmapConfig, loss_report, render_target

# A 40 m x 40 m tile at 0.2 m per pixel, north-up.
grid = WorldTransform(origin_x=0.0, origin_y=40.0, gsd=0.2, rows=200, cols=200)
trees = [Point(6.1, 33.3), Point(14.7, 30.2), Point(22.0, 12.9), Point(31.5, 25.4), Point(8.8, 8.1)]

# The target puts a peak of 1.0 on every tree and is cut to zero beyond 3 sigma.
target = render_target(trees, grid, HeatmapConfig(sigma=1.0))
print("target at tree pixels:", [round(float(target.data[world_to_pixel(grid, t)]), 3) for t in trees])

# Three "models": the target with a little noise each, clipped to [0, 1].
rng = np.random.default_rng(0)
models = [Raster(grid, np.clip(0.9 * target.data + rng.uniform(0, 0.05, target.shape), 0, 1))
          for _ in range(3)]
mean = average_rasters(models)

# Peaks: maxima of a 2 m window that reach 0.25.
detections = extract_peaks(mean, PeakConfig(kernel_m=2.0, threshold=0.25))
for d in detections:
    print(f"{d.det_id}  x={d.position.x:6.1f}  y={d.position.y:6.1f}  confidence={d.confidence:.3f}")

# Noise can move a flat-topped peak by a pixel, so compare with a tolerance.
found = detection_pixels(detections, grid)
for t in trees:
    r, c = world_to_pixel(grid, t)
    offset = min(max(abs(r - fr), abs(c - fc)) for fr, fc in found)
    print(f"tree at ({t.x}, {t.y}): nearest detection {offset} px away")

# The reference losses of one model against the target.
for name, value in loss_report(models[0], target).items():
    print(f"{name:12s} {value:.4f}")
