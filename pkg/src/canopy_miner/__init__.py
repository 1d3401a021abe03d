"""Mine individual-tree species labels from detection rasters and forest inventory plots."""

__version__ = "0.1.0"

from .core import Detection, FieldTree, Parcel, Point, Raster, WorldTransform, tree_world_position, world_to_pixel
from .dataset import PatchSpec, build_manifest, dataset_stats, extract_patch, species_histogram, split_manifest
from .ensemble import PeakConfig, average_rasters, extract_peaks
from .evaluation import agreement, classification_metrics, render_report
from .io import load_detections, load_parcels, load_raster, save_detections, save_raster
from .losses import (
    HeatmapConfig,
    LossWeights,
    combined_seg_loss,
    focal_loss,
    gaussian_value,
    heatmap_loss,
    render_target,
    tversky_loss,
)
from .matching import build_cost_matrix, classify_and_label, match_all, solve_assignment
from .propagation import EmbeddingTable, PropagationConfig, build_graph, diffuse, extract_pseudo_labels, propagate

__all__ = [
    "Detection", "FieldTree", "Parcel", "Point", "Raster", "WorldTransform", "tree_world_position",
    "world_to_pixel", "PatchSpec", "build_manifest", "dataset_stats", "extract_patch", "species_histogram",
    "split_manifest", "PeakConfig", "average_rasters", "extract_peaks", "agreement", "classification_metrics",
    "render_report", "load_detections", "load_parcels", "load_raster", "save_detections", "save_raster",
    "HeatmapConfig", "LossWeights", "combined_seg_loss", "focal_loss", "gaussian_value", "heatmap_loss",
    "render_target", "tversky_loss", "build_cost_matrix", "classify_and_label", "match_all", "solve_assignment",
    "EmbeddingTable", "PropagationConfig", "build_graph", "diffuse", "extract_pseudo_labels", "propagate",
]
