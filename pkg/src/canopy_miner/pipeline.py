"""Config-driven, resumable end-to-end run.

Stages run in a fixed order and each one writes its artifact under the output
directory; later stages read their inputs back from disk, so any stage can be
resumed from existing artifacts.

    ensemble   -> mean.tif
    peaks      -> detections.geojson
    match      -> labeled.geojson, matches.csv
    propagate  -> pseudo_labels.csv        (only with paths.embeddings)
    patches    -> manifest_unsplit.csv, patches/*.png
    split      -> manifest.csv
    stats      -> stats.json, stats.txt, qc_report.txt
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from . import __version__
from .dataset import (
    PatchSpec,
    build_manifest,
    dataset_stats,
    load_manifest,
    render_stats,
    save_manifest,
    split_manifest,
    write_patches,
)
from .ensemble import PeakConfig, average_rasters, extract_peaks
from .errors import CanopyError, ConfigError, InvariantViolation
from .evaluation import agreement, render_report
from .io import ensure_dir, load_detections, load_parcels, load_raster, save_detections, save_raster
from .losses import HeatmapConfig, LossWeights
from .matching import match_all, save_matches
from .propagation import (
    EmbeddingTable,
    PropagationConfig,
    extract_pseudo_labels,
    build_graph,
    diffuse,
    load_embeddings,
    load_pseudo_labels,
    save_pseudo_labels,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("canopy_miner")

STAGES = ("ensemble", "peaks", "match", "propagate", "patches", "split", "stats")

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "paths": {"predictions": [], "parcels": None, "imagery": None, "embeddings": None, "output_dir": "out"},
    "peak": {"kernel_m": 2.0, "threshold": 0.25},
    "match": {"gate_m": 4.0},
    "heatmap": {"sigma_m": 1.5},
    "losses": {"w_tversky": 0.6, "w_focal": 0.4, "tversky_alpha": 0.3, "tversky_beta": 0.7,
               "focal_gamma": 2.0, "epsilon": 1e-7},
    "propagation": {"k": 50, "alpha": 0.99, "gamma": 3.0, "tol": 1e-6, "max_iter": 200},
    "dataset": {"patch_px": 64, "bands": 4, "train_fraction": 0.8, "seed": 0, "raw_patches": False},
}

_TYPES = {
    "paths": {"predictions": list, "parcels": str, "imagery": str, "embeddings": str, "output_dir": str},
    "peak": {"kernel_m": float, "threshold": float},
    "match": {"gate_m": float},
    "heatmap": {"sigma_m": float},
    "losses": dict.fromkeys(DEFAULTS["losses"], float),
    "propagation": {"k": int, "alpha": float, "gamma": float, "tol": float, "max_iter": int},
    "dataset": {"patch_px": int, "bands": int, "train_fraction": float, "seed": int, "raw_patches": bool},
}


class StageError(CanopyError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    values: Dict[str, Dict[str, Any]]
    base_dir: Path = field(default_factory=Path.cwd)

    def __getitem__(self, section):
        return self.values[section]

    def path(self, key) -> Optional[Path]:
        v = self.values["paths"][key]
        if v is None:
            return None
        return self.base_dir / v

    @property
    def prediction_paths(self) -> List[Path]:
        return [self.base_dir / p for p in self.values["paths"]["predictions"]]

    @property
    def output_dir(self) -> Path:
        return self.path("output_dir")

    def peak(self):
        return PeakConfig(self["peak"]["kernel_m"], self["peak"]["threshold"])

    def propagation(self):
        p = self["propagation"]
        return PropagationConfig(k=p["k"], affinity_gamma=p["gamma"], alpha=p["alpha"],
                                 cg_tol=p["tol"], cg_max_iter=p["max_iter"])

    def patch_spec(self):
        return PatchSpec(self["dataset"]["patch_px"], self["dataset"]["bands"])

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _coerce(section, key, value):
    want = _TYPES[section][key]
    name = f"{section}.{key}"
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is list:
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{name}: expected a list of paths")
        return list(value)
    if (want is int and isinstance(value, bool)) or not isinstance(value, want):
        raise ConfigError(f"{name}: expected {want.__name__}, got {value!r}")
    return value


def parse_override(text):
    """``section.key=value`` with the value parsed as a TOML literal (bare words become strings)."""
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    lhs, rhs = text.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    try:
        value = tomllib.loads(f"v = {rhs.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = rhs.strip()
    return section, key, value


def _validate_field(section, key, values):
    """Build the owning module's config for one field so errors name that field."""
    v = values[section][key]
    try:
        if section == "peak":
            PeakConfig(**{key: v})
        elif section == "match" and not v > 0:
            raise InvariantViolation("must be > 0")
        elif section == "heatmap":
            HeatmapConfig(sigma=v)
        elif section == "propagation":
            names = {"gamma": "affinity_gamma", "tol": "cg_tol", "max_iter": "cg_max_iter"}
            PropagationConfig(**{names.get(key, key): v})
        elif section == "dataset":
            if key == "patch_px":
                PatchSpec(size_px=v)
            elif key == "bands":
                PatchSpec(bands=v)
            elif key == "train_fraction" and not 0 < v < 1:
                raise InvariantViolation("must lie in (0, 1)")
    except (InvariantViolation, TypeError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def load_config(path=None, overrides=(), check_files=True) -> PipelineConfig:
    """Read a TOML config, apply ``section.key=value`` overrides and validate."""
    raw: Dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        base = Path(path).resolve().parent
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return build_config(raw, overrides, base, check_files)


def build_config(raw, overrides=(), base_dir=None, check_files=True) -> PipelineConfig:
    values = copy.deepcopy(DEFAULTS)
    items = []
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be a table")
        items.extend((section, k, v) for k, v in body.items())
    items.extend(parse_override(o) if isinstance(o, str) else o for o in overrides)
    for section, key, value in items:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        values[section][key] = _coerce(section, key, value)
    for section in ("peak", "match", "heatmap", "propagation", "dataset"):
        for key in values[section]:
            _validate_field(section, key, values)
    lw = values["losses"]
    try:
        LossWeights(**lw)
    except InvariantViolation as exc:
        raise ConfigError(f"losses: {exc}") from None
    cfg = PipelineConfig(values, Path(base_dir) if base_dir else Path.cwd())
    if not values["paths"]["predictions"]:
        raise ConfigError("paths.predictions: at least one prediction raster is required")
    if values["paths"]["parcels"] is None:
        raise ConfigError("paths.parcels is required")
    if check_files:
        for p in cfg.prediction_paths:
            if not p.exists():
                raise ConfigError(f"paths.predictions: file not found: {p}")
        for key in ("parcels", "imagery", "embeddings"):
            p = cfg.path(key)
            if p is not None and not p.exists():
                raise ConfigError(f"paths.{key}: file not found: {p}")
    return cfg


def artifacts(out: Path) -> Dict[str, List[Path]]:
    return {
        "ensemble": [out / "mean.tif"],
        "peaks": [out / "detections.geojson"],
        "match": [out / "labeled.geojson", out / "matches.csv"],
        "propagate": [out / "pseudo_labels.csv"],
        "patches": [out / "manifest_unsplit.csv"],
        "split": [out / "manifest.csv"],
        "stats": [out / "stats.json", out / "stats.txt", out / "qc_report.txt"],
    }


def _count_csv_rows(path):
    with open(path, encoding="utf-8") as fh:
        return max(0, sum(1 for _ in fh) - 1)


class Pipeline:
    def __init__(self, config: PipelineConfig, threads=1):
        self.cfg = config
        self.threads = max(1, int(threads))
        self.out = config.output_dir
        self.paths = artifacts(self.out)
        self.counts: Dict[str, int] = {}

    # -- stages -------------------------------------------------------------

    def ensemble(self):
        rasters = [load_raster(p).check_unit_range(str(p)) for p in self.cfg.prediction_paths]
        mean = average_rasters(rasters)
        save_raster(mean, self.paths["ensemble"][0])
        self.counts["rasters"] = len(rasters)

    def peaks(self):
        mean = load_raster(self.paths["ensemble"][0])
        dets = extract_peaks(mean, self.cfg.peak())
        save_detections(dets, self.paths["peaks"][0])
        self.counts["detections"] = len(dets)

    def match(self):
        parcels = load_parcels(self.cfg.path("parcels"))
        dets = load_detections(self.paths["peaks"][0])
        labeled, rows = match_all(parcels, dets, self.cfg["match"]["gate_m"], self.threads)
        save_detections(labeled, self.paths["match"][0])
        save_matches(rows, self.paths["match"][1])
        self.counts["matches"] = len(rows)
        self.counts["labeled"] = sum(d.provenance != "none" for d in labeled)

    def propagate(self):
        target = self.paths["propagate"][0]
        if self.cfg.path("embeddings") is None:
            if target.exists():
                target.unlink()
            return
        emb = load_embeddings(self.cfg.path("embeddings"))
        labels = {d.det_id: d.species for d in load_detections(self.paths["match"][0])}
        # labels come from matching, not from the embeddings file
        emb = EmbeddingTable(emb.ids, emb.vectors, [labels.get(i) for i in emb.ids])
        y, classes = emb.label_matrix()
        if not classes:
            raise InvariantViolation("no labeled detections to propagate from")
        pcfg = self.cfg.propagation()
        z = diffuse(build_graph(emb, pcfg), y, pcfg)
        pls = extract_pseudo_labels(z, emb, classes)
        save_pseudo_labels(pls, target)
        self.counts["pseudo_labels"] = len(pls.labels)

    def patches(self):
        dets = load_detections(self.paths["match"][0])
        pseudo_path = self.paths["propagate"][0]
        pseudo = load_pseudo_labels(pseudo_path) if self.cfg.path("embeddings") is not None else None
        imagery = load_raster(self.cfg.path("imagery")) if self.cfg.path("imagery") else None
        spec = self.cfg.patch_spec()
        manifest = build_manifest(dets, pseudo, imagery, spec)
        if imagery is not None:
            write_patches(manifest, dets, imagery, spec, self.out,
                          raw=self.cfg["dataset"]["raw_patches"], threads=self.threads)
        save_manifest(manifest, self.paths["patches"][0])
        self.counts["manifest_rows"] = len(manifest)

    def split(self):
        manifest = load_manifest(self.paths["patches"][0])
        d = self.cfg["dataset"]
        save_manifest(split_manifest(manifest, d["train_fraction"], d["seed"]), self.paths["split"][0])

    def stats(self):
        manifest = load_manifest(self.paths["split"][0])
        parcels = load_parcels(self.cfg.path("parcels"))
        stats = dataset_stats(manifest, parcels)
        stats["train"] = sum(r.split == "train" for r in manifest)
        stats["val"] = sum(r.split == "val" for r in manifest)
        json_path, txt_path, qc_path = self.paths["stats"]
        json_path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        txt_path.write_text(render_stats(stats), encoding="utf-8")
        # agreement of field trees with detections inside the parcels
        dets = load_detections(self.paths["peaks"][0])
        ref, cand = [], []
        for p in parcels:
            ref.extend(pos for _, pos in p.tree_positions())
            cand.extend(d.position for d in dets if p.contains(d.position))
        rep = agreement(ref, cand, self.cfg["match"]["gate_m"])
        qc_path.write_text(render_report(rep, "Field data", "Predictions"), encoding="utf-8")

    # -- driver -------------------------------------------------------------

    def run(self, resume_from=None, stop_after=None):
        ensure_dir(self.out)
        start = STAGES.index(resume_from) if resume_from else 0
        stop = STAGES.index(stop_after) if stop_after else len(STAGES) - 1
        for stage in STAGES[:start]:
            if stage == "propagate" and self.cfg.path("embeddings") is None:
                continue
            missing = [str(p) for p in self.paths[stage] if not p.exists()]
            if missing:
                raise StageError(resume_from, f"cannot resume, missing artifact(s) of {stage!r}: {missing}")
            log.info("stage %s: skipped (artifacts present)", stage)
        for stage in STAGES[start:stop + 1]:
            log.info("stage %s: start", stage)
            try:
                getattr(self, stage)()
            except CanopyError as exc:
                raise StageError(stage, str(exc)) from exc
            except OSError as exc:
                raise StageError(stage, f"I/O error: {exc}") from exc
            log.info("stage %s: done", stage)
        self._write_run_record()
        return 0

    def _write_run_record(self):
        import numpy
        import scipy

        counts = {}
        for name, path in (("detections", self.paths["peaks"][0]), ("matches", self.paths["match"][1]),
                           ("manifest_rows", self.paths["split"][0])):
            if path.exists():
                counts[name] = (len(load_detections(path)) if name == "detections"
                                else _count_csv_rows(path))
        record = {
            "config_sha256": self.cfg.digest(),
            "config": self.cfg.values,
            "versions": {"canopy_miner": __version__, "numpy": numpy.__version__, "scipy": scipy.__version__},
            "row_counts": counts,
        }
        (self.out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_pipeline(config: PipelineConfig, threads=1, resume_from=None, stop_after=None) -> int:
    if resume_from is not None and resume_from not in STAGES:
        raise ConfigError(f"unknown stage {resume_from!r}; choose from {', '.join(STAGES)}")
    return Pipeline(config, threads).run(resume_from, stop_after)
