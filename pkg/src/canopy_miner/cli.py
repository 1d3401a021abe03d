"""``canopy-miner`` command line.

Each subcommand is a thin wrapper over one library call. Usage errors exit
with status 2 (argparse), data errors with status 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys

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
from .errors import CanopyError, ParseError
from .evaluation import agreement, classification_metrics, render_report
from .io import (
    ensure_dir,
    load_detections,
    load_parcels,
    load_points,
    load_raster,
    save_detections,
    save_raster,
)
from .losses import HeatmapConfig, LossWeights, loss_report, render_target
from .matching import DEFAULT_GATE_M, match_all, save_matches
from .pipeline import STAGES, load_config, run_pipeline
from .propagation import PropagationConfig, load_embeddings, load_pseudo_labels, propagate, save_pseudo_labels

log = logging.getLogger("canopy_miner")


def _print_json(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_render_target(a):
    like = load_raster(a.like)
    target = render_target(load_points(a.points), like.transform, HeatmapConfig(sigma=a.sigma_m))
    save_raster(target, a.out)


def cmd_ensemble(a):
    save_raster(average_rasters([load_raster(p).check_unit_range(p) for p in a.rasters]), a.out)


def cmd_peaks(a):
    dets = extract_peaks(load_raster(getattr(a, "in")), PeakConfig(a.kernel_m, a.threshold))
    save_detections(dets, a.out)
    log.info("%d detections", len(dets))


def cmd_match(a):
    labeled, rows = match_all(load_parcels(a.parcels), load_detections(a.detections), a.gate_m, a.threads)
    save_detections(labeled, a.out)
    if a.matches:
        save_matches(rows, a.matches)
    log.info("%d matches", len(rows))


def cmd_evaluate(a):
    rep = agreement(load_points(a.reference), load_points(a.candidate), a.gate_m)
    if a.json:
        _print_json(rep.to_dict())
    else:
        sys.stdout.write(render_report(rep, a.reference_name, a.candidate_name))


def _read_labels(path):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "species" not in reader.fieldnames:
            raise ParseError(f"{path}:1: expected a 'species' column")
        rows = list(reader)
    keyed = "id" in reader.fieldnames
    return [(r["id"] if keyed else None, r["species"]) for r in rows], keyed


def cmd_class_metrics(a):
    pred, pkeyed = _read_labels(a.pred)
    truth, tkeyed = _read_labels(a.truth)
    if pkeyed and tkeyed:
        lookup = dict(pred)
        missing = [i for i, _ in truth if i not in lookup]
        if missing:
            raise ParseError(f"{a.pred}: no prediction for id {missing[0]!r}")
        pred = [(i, lookup[i]) for i, _ in truth]
    rep = classification_metrics([s for _, s in pred], [s for _, s in truth])
    if a.json:
        _print_json(rep.to_dict())
    else:
        sys.stdout.write(render_report(rep, label=a.label))


def _parse_weights(text):
    out = {}
    if not text:
        return out
    for item in text.split(","):
        if "=" not in item:
            raise ParseError(f"--weights entry {item!r} must be key=value")
        k, v = item.split("=", 1)
        k = k.strip()
        if k not in LossWeights.__dataclass_fields__:
            raise ParseError(f"--weights: unknown key {k!r}")
        try:
            out[k] = float(v)
        except ValueError:
            raise ParseError(f"--weights: {k} is not a number: {v!r}") from None
    if "w_tversky" in out and "w_focal" not in out:
        out["w_focal"] = 1.0 - out["w_tversky"]
    elif "w_focal" in out and "w_tversky" not in out:
        out["w_tversky"] = 1.0 - out["w_focal"]
    return out


def cmd_loss(a):
    w = LossWeights(**_parse_weights(a.weights))
    pred, target = load_raster(a.pred), load_raster(a.target)
    _print_json(loss_report(pred, target, w))


def cmd_propagate(a):
    cfg = PropagationConfig(k=a.k, affinity_gamma=a.gamma, alpha=a.alpha, cg_tol=a.tol, cg_max_iter=a.max_iter)
    pls = propagate(load_embeddings(a.embeddings), cfg)
    save_pseudo_labels(pls, a.out)
    log.info("%d pseudo-labels", len(pls.labels))


def cmd_patches(a):
    dets = load_detections(a.detections)
    imagery = load_raster(a.imagery)
    spec = PatchSpec(a.patch_px, a.bands)
    pseudo = load_pseudo_labels(a.pseudo) if a.pseudo else None
    out = ensure_dir(a.out_dir)
    manifest = build_manifest(dets, pseudo, imagery, spec)
    write_patches(manifest, dets, imagery, spec, out, raw=a.raw, threads=a.threads)
    save_manifest(manifest, out / "manifest.csv")
    log.info("%d manifest rows", len(manifest))


def cmd_stats(a):
    manifest = load_manifest(a.manifest)
    parcels = load_parcels(a.parcels) if a.parcels else None
    stats = dataset_stats(manifest, parcels)
    if a.json:
        _print_json(stats)
    else:
        sys.stdout.write(render_stats(stats))


def cmd_split(a):
    save_manifest(split_manifest(load_manifest(a.manifest), a.fraction, a.seed), a.out)


def cmd_pipeline(a):
    cfg = load_config(a.config, a.set)
    if a.out_dir:
        cfg.values["paths"]["output_dir"] = str(a.out_dir)
    return run_pipeline(cfg, threads=a.threads, resume_from=a.resume_from)


def build_parser():
    p = argparse.ArgumentParser(
        prog="canopy-miner",
        description="Turn tree-detection rasters and inventory plots into a labeled species dataset.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("render-target", help="render a Gaussian target heatmap from points", formatter_class=fmt)
    s.add_argument("--points", required=True, help="GeoJSON points or CSV with x,y")
    s.add_argument("--like", required=True, help="raster whose grid the target uses")
    s.add_argument("--sigma-m", type=float, default=1.5, help="Gaussian standard deviation in meters")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render_target)

    s = sub.add_parser("ensemble", help="pixel-wise mean of aligned prediction rasters", formatter_class=fmt)
    s.add_argument("--out", required=True)
    s.add_argument("rasters", nargs="+")
    s.set_defaults(func=cmd_ensemble)

    s = sub.add_parser("peaks", help="extract detections at heatmap local maxima", formatter_class=fmt)
    s.add_argument("--in", required=True, metavar="RASTER")
    s.add_argument("--kernel-m", type=float, default=2.0,
                   help="side of the square peak search window in meters")
    s.add_argument("--threshold", type=float, default=0.25,
                   help="minimum peak confidence in (0, 1)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_peaks)

    s = sub.add_parser("match", help="gated 1-to-1 matching and parcel labeling", formatter_class=fmt)
    s.add_argument("--parcels", required=True)
    s.add_argument("--detections", required=True)
    s.add_argument("--gate-m", type=float, default=DEFAULT_GATE_M,
                   help="pairs at or beyond this distance in meters never match")
    s.add_argument("--out", required=True)
    s.add_argument("--matches", help="optional matches CSV")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("evaluate", help="one-to-one agreement between two point sets", formatter_class=fmt)
    s.add_argument("--reference", required=True)
    s.add_argument("--candidate", required=True)
    s.add_argument("--gate-m", type=float, default=DEFAULT_GATE_M)
    s.add_argument("--reference-name", default="Reference")
    s.add_argument("--candidate-name", default="Candidate")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("class-metrics", help="OA, mIoU and AR for species predictions", formatter_class=fmt)
    s.add_argument("--pred", required=True, help="CSV with a species column (and optional id)")
    s.add_argument("--truth", required=True)
    s.add_argument("--label", default="")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_class_metrics)

    s = sub.add_parser("loss", help="segmentation and heatmap losses of a prediction", formatter_class=fmt)
    s.add_argument("--pred", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--weights", default="",
                   help="k=v overrides of w_tversky (0.6), w_focal (0.4), tversky_alpha, tversky_beta, "
                        "focal_gamma, epsilon")
    s.set_defaults(func=cmd_loss)

    s = sub.add_parser("propagate", help="pseudo-label unlabeled embeddings", formatter_class=fmt)
    s.add_argument("--embeddings", required=True)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--alpha", type=float, default=0.99)
    s.add_argument("--gamma", type=float, default=3.0)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-iter", type=int, default=200)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_propagate)

    s = sub.add_parser("patches", help="cut image patches and write the manifest", formatter_class=fmt)
    s.add_argument("--detections", required=True)
    s.add_argument("--imagery", required=True)
    s.add_argument("--pseudo", help="pseudo_labels.csv from propagate")
    s.add_argument("--patch-px", type=int, default=64)
    s.add_argument("--bands", type=int, default=4)
    s.add_argument("--raw", action="store_true", help="also write float32 .npy sidecars")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_patches)

    s = sub.add_parser("stats", help="dataset summary", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--parcels")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("split", help="grouped train/val split", formatter_class=fmt)
    s.add_argument("--manifest", required=True)
    s.add_argument("--fraction", type=float, default=0.8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("pipeline", help="run every stage from a TOML config", formatter_class=fmt)
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a config value; repeatable")
    s.add_argument("--out-dir", help="override paths.output_dir")
    s.add_argument("--resume-from", choices=STAGES)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        rc = args.func(args)
    except (CanopyError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
