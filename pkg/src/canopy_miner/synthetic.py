"""Synthetic scenes for tests, demos and benchmarks.

A scene is a jittered grid of trees with species, a few circular field
parcels that record a noisy subset of those trees, an ensemble of prediction
rasters rendered from the true crowns, 4-band imagery, and species-clustered
embeddings for the detections the ensemble will produce.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .core import FieldTree, Parcel, Point, Raster, WorldTransform
from .ensemble import PeakConfig, average_rasters, extract_peaks
from .io import save_parcels, save_raster
from .losses import HeatmapConfig, render_target
from .propagation import EmbeddingTable, save_embeddings

SPECIES = ("pinus_pinaster", "pinus_sylvestris", "quercus_ilex", "quercus_pyrenaica", "eucalyptus_globulus")


@dataclass
class Scene:
    transform: WorldTransform
    trees: List[Point]
    tree_species: List[str]
    parcels: List[Parcel]
    predictions: List[Raster]
    imagery: Raster
    embeddings: EmbeddingTable
    meta: Dict = field(default_factory=dict)


def make_scene(seed=0, rows=500, cols=500, gsd=0.2, spacing_m=6.0, n_models=3, n_parcels=4,
               record_rate=0.7, position_noise_m=0.8, embed_dim=16, sigma_m=1.0):
    """Build a deterministic synthetic scene from ``seed``.

    Parcels alternate between monospecific and mixed. Trees outside parcels
    get species from a smooth spatial field so that embeddings carry signal.
    """
    rng = np.random.default_rng(seed)
    t = WorldTransform(500000.0, 4400000.0 + rows * gsd, gsd, rows, cols)
    xmin, ymin, xmax, ymax = t.bounds
    margin = spacing_m / 2
    xs = np.arange(xmin + margin, xmax - margin, spacing_m)
    ys = np.arange(ymin + margin, ymax - margin, spacing_m)
    gx, gy = np.meshgrid(xs, ys)
    jitter = rng.uniform(-spacing_m * 0.2, spacing_m * 0.2, size=(2,) + gx.shape)
    px = (gx + jitter[0]).ravel()
    py = (gy + jitter[1]).ravel()
    trees = [Point(float(x), float(y)) for x, y in zip(px, py)]

    width, height = xmax - xmin, ymax - ymin
    band = ((px - xmin) // (width / len(SPECIES))).astype(int) % len(SPECIES)
    species = [SPECIES[b] for b in band]

    # parcel centers on an inner grid, far enough from the border for a 25 m radius
    radius = min(25.0, 0.2 * min(width, height))
    k = int(np.ceil(np.sqrt(n_parcels)))
    cx = np.linspace(xmin + radius + 5, xmax - radius - 5, k)
    cy = np.linspace(ymax - radius - 5, ymin + radius + 5, k)
    centers = [Point(float(x), float(y)) for y in cy for x in cx][:n_parcels]
    parcels = []
    for pi, c in enumerate(centers):
        inside = [i for i, p in enumerate(trees) if c.distance(p) <= radius]
        mono = pi % 2 == 0
        for i in inside:
            species[i] = SPECIES[pi % len(SPECIES)] if mono else SPECIES[int(rng.integers(0, 3))]
        field_trees = []
        for i in inside:
            if rng.random() > record_rate:
                continue
            dx = trees[i].x - c.x + rng.normal(0, position_noise_m)
            dy = trees[i].y - c.y + rng.normal(0, position_noise_m)
            off = np.hypot(dx, dy)
            if off > radius:
                dx, dy = dx * 0.999 * radius / off, dy * 0.999 * radius / off
            field_trees.append(FieldTree(f"t{i}", float(dx), float(dy), species[i]))
        if not mono and len({ft.species for ft in field_trees}) < 2 and field_trees:
            first = field_trees[0]
            alt = SPECIES[(SPECIES.index(first.species) + 1) % 3]
            field_trees[0] = FieldTree(first.tree_id, first.dx, first.dy, alt)
        parcels.append(Parcel(f"P{pi:03d}", c, radius, tuple(field_trees)))

    predictions = []
    base = render_target(trees, t, HeatmapConfig(sigma=sigma_m)).data
    for m in range(n_models):
        keep = rng.random(len(trees)) > 0.05
        heat = render_target([p for p, kp in zip(trees, keep) if kp], t, HeatmapConfig(sigma=sigma_m)).data
        heat = 0.85 * heat + 0.1 * base + rng.uniform(0.0, 0.04, size=heat.shape)
        predictions.append(Raster(t, np.clip(heat, 0.0, 1.0)))

    imagery = np.empty((4,) + t.shape)
    crown = base
    for b in range(4):
        imagery[b] = 0.15 + 0.6 * crown * (0.5 + 0.1 * b) + rng.normal(0, 0.01, size=t.shape)
    imagery = Raster(t, imagery)

    mean = average_rasters(predictions)
    dets = extract_peaks(mean, PeakConfig())
    tree_xy = np.array([[p.x, p.y] for p in trees])
    centers_emb = rng.normal(size=(len(SPECIES), embed_dim))
    ids, vecs = [], []
    for d in dets:
        nearest = int(np.argmin(np.hypot(tree_xy[:, 0] - d.position.x, tree_xy[:, 1] - d.position.y)))
        cls = SPECIES.index(species[nearest])
        ids.append(d.det_id)
        vecs.append(centers_emb[cls] + rng.normal(0, 0.6, size=embed_dim))
    embeddings = EmbeddingTable(ids, np.array(vecs).reshape(len(ids), embed_dim))

    return Scene(t, trees, species, parcels, predictions, imagery, embeddings,
                 {"seed": seed, "n_detections": len(dets)})


def write_scene(scene: Scene, out_dir, raster_suffix=".tif"):
    """Write a scene as pipeline inputs plus a ``config.toml``; returns the config path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pred_paths = []
    for k, r in enumerate(scene.predictions):
        p = out / f"pred_{k}{raster_suffix}"
        save_raster(r, p)
        pred_paths.append(p.name)
    save_parcels(scene.parcels, out / "parcels.csv")
    save_raster(scene.imagery, out / "imagery.tif")
    save_embeddings(scene.embeddings, out / "embeddings.csv")
    preds = ", ".join(f'"{p}"' for p in pred_paths)
    cfg = (
        "[paths]\n"
        f"predictions = [{preds}]\n"
        'parcels = "parcels.csv"\n'
        'imagery = "imagery.tif"\n'
        'embeddings = "embeddings.csv"\n'
        'output_dir = "out"\n'
        "\n[propagation]\nk = 10\n"
        "\n[dataset]\npatch_px = 32\nseed = 7\n"
    )
    (out / "config.toml").write_text(cfg, encoding="utf-8")
    return out / "config.toml"
