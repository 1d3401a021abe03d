"""Patch extraction, the dataset manifest, statistics and grouped splits."""
from __future__ import annotations

import csv
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import Raster, world_to_pixel
from .errors import BandMismatch, DuplicateId, InvalidFraction, InvariantViolation, IoError, ParseError

SPLITS = ("train", "val", "unassigned")
TRAIN_ONLY = ("unverified", "pseudo")


@dataclass(frozen=True)
class PatchSpec:
    size_px: int = 64
    bands: int = 4
    pad_value: float = 0.0

    def __post_init__(self):
        if int(self.size_px) != self.size_px or self.size_px < 8 or self.size_px % 2:
            raise InvariantViolation(f"patch size must be an even integer >= 8, got {self.size_px}")
        if self.bands < 1:
            raise InvariantViolation(f"patch bands must be >= 1, got {self.bands}")


@dataclass(frozen=True)
class ManifestRow:
    patch_path: str
    det_id: str
    parcel_id: Optional[str]
    species: Optional[str]
    provenance: str
    weight: float
    split: str = "unassigned"
    clipped: bool = False
    scale_min: float = 0.0
    scale_max: float = 1.0

    def __post_init__(self):
        if self.provenance in ("verified", "unverified") and not self.species:
            raise InvariantViolation(f"row {self.det_id!r}: {self.provenance} row needs a species")
        if self.provenance == "none" and self.species:
            raise InvariantViolation(f"row {self.det_id!r}: unlabeled row carries a species")
        if self.provenance not in ("verified", "unverified", "pseudo", "none"):
            raise InvariantViolation(f"row {self.det_id!r}: unknown provenance {self.provenance!r}")
        if not (math.isfinite(self.weight) and self.weight >= 0):
            raise InvariantViolation(f"row {self.det_id!r}: weight must be >= 0")
        if self.split not in SPLITS:
            raise InvariantViolation(f"row {self.det_id!r}: unknown split {self.split!r}")


MANIFEST_HEADER = [f.name for f in fields(ManifestRow)]


def _window(r, c, size):
    half = size // 2
    return r - half, r + half, c - half, c + half


def extract_patch(imagery: Raster, center, spec: PatchSpec = PatchSpec()):
    """Square ``(bands, size, size)`` window around the pixel holding ``center``.

    Rows ``[r - size/2, r + size/2)`` and likewise for columns; cells beyond
    the raster are filled with ``spec.pad_value``. Returns ``(patch, clipped)``.
    """
    if imagery.bands != spec.bands:
        raise BandMismatch(f"imagery has {imagery.bands} bands, patch spec expects {spec.bands}")
    r, c = world_to_pixel(imagery.transform, center)
    rows, cols = imagery.shape
    r0, r1, c0, c1 = _window(r, c, spec.size_px)
    patch = np.full((spec.bands, spec.size_px, spec.size_px), spec.pad_value, dtype=np.float64)
    sr0, sr1, sc0, sc1 = max(r0, 0), min(r1, rows), max(c0, 0), min(c1, cols)
    patch[:, sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = imagery.values[:, sr0:sr1, sc0:sc1]
    clipped = (sr0, sr1, sc0, sc1) != (r0, r1, c0, c1)
    return patch, clipped


def build_manifest(detections, pseudo=None, imagery: Optional[Raster] = None,
                   spec: PatchSpec = PatchSpec(), patch_dir="patches") -> List[ManifestRow]:
    """One manifest row per kept detection, sorted by ``det_id``.

    Discarded detections are skipped. Unlabeled detections with an entry in
    ``pseudo`` become ``pseudo`` rows weighted by certainty times class
    weight. Without ``imagery`` no patch paths are assigned.
    """
    seen = set()
    kept = []
    for d in detections:
        if d.det_id in seen:
            raise DuplicateId(f"duplicate det_id {d.det_id!r}")
        seen.add(d.det_id)
        if d.status != "discarded":
            kept.append(d)
    kept.sort(key=lambda d: d.det_id)

    if imagery is not None:
        if imagery.bands != spec.bands:
            raise BandMismatch(f"imagery has {imagery.bands} bands, patch spec expects {spec.bands}")
        lo, hi = float(imagery.values.min()), float(imagery.values.max())
    else:
        lo, hi = 0.0, 1.0

    rows = []
    for d in kept:
        species, provenance, weight = d.species, d.provenance, 1.0
        if pseudo is not None and d.det_id in pseudo.labels:
            if provenance != "none":
                raise InvariantViolation(f"pseudo label given for labeled detection {d.det_id!r}")
            species, _ = pseudo.labels[d.det_id]
            provenance, weight = "pseudo", pseudo.weight(d.det_id)
        clipped, path = False, ""
        if imagery is not None:
            r, c = world_to_pixel(imagery.transform, d.position)
            r0, r1, c0, c1 = _window(r, c, spec.size_px)
            clipped = r0 < 0 or c0 < 0 or r1 > imagery.shape[0] or c1 > imagery.shape[1]
            path = f"{patch_dir}/{d.det_id}.png"
        rows.append(ManifestRow(path, d.det_id, d.parcel_id, species, provenance, weight,
                                "unassigned", clipped, lo, hi))
    return rows


def _png_mode(bands):
    modes = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}
    if bands not in modes:
        raise BandMismatch(f"PNG patches support 1-4 bands, got {bands}")
    return modes[bands]


def to_uint8(patch, lo, hi):
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip(np.floor((patch - lo) * scale + 0.5), 0, 255).astype(np.uint8)


def write_patches(manifest, detections, imagery: Raster, spec: PatchSpec, out_dir,
                  raw=False, threads=1):
    """Write one PNG (and optionally a float ``.npy``) per manifest row with a patch path.

    Pixel values are mapped linearly from ``[scale_min, scale_max]`` to 0..255.
    """
    from PIL import Image

    _png_mode(spec.bands)
    pos = {d.det_id: d.position for d in detections}
    out_dir = Path(out_dir)
    pending = [row for row in manifest if row.patch_path]

    def work(row):
        patch, _ = extract_patch(imagery, pos[row.det_id], spec)
        target = out_dir / row.patch_path
        target.parent.mkdir(parents=True, exist_ok=True)
        img = np.moveaxis(to_uint8(patch, row.scale_min, row.scale_max), 0, -1)
        if spec.bands == 1:
            img = img[..., 0]
        try:
            Image.fromarray(img).save(target, format="PNG")
            if raw:
                np.save(target.with_suffix(".npy"), patch.astype(np.float32))
        except OSError as exc:
            raise IoError(f"cannot write {target}: {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, pending))
    else:
        for row in pending:
            work(row)


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for row in manifest:
            w.writerow([
                row.patch_path, row.det_id, row.parcel_id or "", row.species or "", row.provenance,
                repr(float(row.weight)), row.split, "true" if row.clipped else "false",
                repr(float(row.scale_min)), repr(float(row.scale_max)),
            ])


def load_manifest(path) -> List[ManifestRow]:
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc
    rows = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ParseError(f"{path}:1: expected header {','.join(MANIFEST_HEADER)}")
        for rec in reader:
            if not rec:
                continue
            where = f"{path}:{reader.line_num}"
            if len(rec) != len(MANIFEST_HEADER):
                raise ParseError(f"{where}: expected {len(MANIFEST_HEADER)} fields, got {len(rec)}")
            path_, det_id, pid, species, prov, weight, split, clipped, smin, smax = rec
            if clipped not in ("true", "false"):
                raise ParseError(f"{where}: clipped must be true or false")
            try:
                rows.append(ManifestRow(path_, det_id, pid or None, species or None, prov, float(weight),
                                        split, clipped == "true", float(smin), float(smax)))
            except ValueError as exc:
                raise type(exc)(f"{where}: {exc}") from None
    return rows


def species_histogram(manifest, min_count=0):
    """``(species, count)`` pairs with ``count >= min_count``, most frequent first."""
    counts = Counter(row.species for row in manifest if row.species)
    return sorted(((s, n) for s, n in counts.items() if n >= min_count), key=lambda sn: (-sn[1], sn[0]))


def split_manifest(manifest, train_fraction=0.8, seed=0) -> List[ManifestRow]:
    """Assign train/val by parcel group with a seeded PCG64 shuffle.

    Rows without a parcel form singleton groups. Groups holding unverified or
    pseudo rows always go to train, so those rows never reach val and no
    parcel straddles both splits. Unlabeled rows stay ``unassigned``. The
    remaining groups are shuffled with ``numpy.random.default_rng(seed)`` and
    the first ones fill train up to ``round(train_fraction * n_groups)``.
    """
    if not 0 < train_fraction < 1:
        raise InvalidFraction(f"train_fraction must lie in (0, 1), got {train_fraction}")
    groups = {}
    for row in manifest:
        if row.provenance == "none":
            continue
        key = ("p", row.parcel_id) if row.parcel_id else ("d", row.det_id)
        groups.setdefault(key, []).append(row)
    forced = sorted(k for k, rows in groups.items() if any(r.provenance in TRAIN_ONLY for r in rows))
    forced_set = set(forced)
    eligible = sorted(k for k in groups if k not in forced_set)
    target = int(math.floor(train_fraction * len(groups) + 0.5))
    n_extra = min(len(eligible), max(0, target - len(forced)))
    order = np.random.default_rng(seed).permutation(len(eligible))
    train = forced_set | {eligible[i] for i in order[:n_extra]}
    out = []
    for row in manifest:
        if row.provenance == "none":
            split = "unassigned"
        else:
            key = ("p", row.parcel_id) if row.parcel_id else ("d", row.det_id)
            split = "train" if key in train else "val"
        out.append(replace(row, split=split))
    return out


def _genus(species):
    return species.split("_", 1)[0]


def format_percent(fraction):
    return f"{100.0 * fraction:.1f}%"


def dataset_stats(manifest, parcels=None) -> dict:
    """Summary counts over the labeled rows (verified + unverified) and the parcels.

    ``verified_fraction`` is verified / labeled rows; ``monospecific_fraction``
    is taken over ``parcels`` when given, else over parcel ids in the manifest
    (whose species composition is then unknown, so it is reported as 0).
    """
    prov = Counter(row.provenance for row in manifest)
    labeled = prov["verified"] + prov["unverified"]
    species = {row.species for row in manifest if row.provenance in ("verified", "unverified")}
    if parcels is not None:
        n_parcels = len(parcels)
        n_mono = sum(p.is_monospecific for p in parcels)
    else:
        n_parcels = len({row.parcel_id for row in manifest if row.parcel_id})
        n_mono = 0
    return {
        "total": labeled,
        "verified": prov["verified"],
        "unverified": prov["unverified"],
        "pseudo": prov["pseudo"],
        "unlabeled": prov["none"],
        "verified_fraction": prov["verified"] / labeled if labeled else 0.0,
        "parcels": n_parcels,
        "monospecific": n_mono,
        "monospecific_fraction": n_mono / n_parcels if n_parcels else 0.0,
        "species_count": len(species),
        "genus_count": len({_genus(s) for s in species}),
    }


def render_stats(stats) -> str:
    return (
        f"trees: {stats['total']}\n"
        f"verified: {format_percent(stats['verified_fraction'])} ({stats['verified']})\n"
        f"unverified: {stats['unverified']}\n"
        f"pseudo-labeled: {stats['pseudo']}\n"
        f"unlabeled: {stats['unlabeled']}\n"
        f"parcels: {stats['parcels']}\n"
        f"monospecific: {format_percent(stats['monospecific_fraction'])} ({stats['monospecific']})\n"
        f"species: {stats['species_count']} in {stats['genus_count']} genera\n"
    )


def manifest_to_dicts(manifest):
    return [asdict(r) for r in manifest]
