"""Readers and writers for parcels, rasters and detections.

Loaders validate everything they construct and report the line (or pixel) at
fault. Supported formats:

* parcels: CSV ``parcel_id,center_x,center_y,radius_m,tree_id,dx_m,dy_m,species``
* rasters: GeoTIFF (``.tif``/``.tiff``) or ESRI ASCII grid (``.asc``)
* detections: GeoJSON FeatureCollection (``.geojson``/``.json``) or flat CSV
"""
from __future__ import annotations

import csv
import json
import math
import os
from collections import OrderedDict
from pathlib import Path
from typing import List

import numpy as np

from .core import Detection, FieldTree, Parcel, Point, Raster, WorldTransform
from .errors import CanopyError, DuplicateId, InvariantViolation, IoError, ParseError

PARCEL_HEADER = ["parcel_id", "center_x", "center_y", "radius_m", "tree_id", "dx_m", "dy_m", "species"]
DETECTION_CSV_HEADER = ["det_id", "x", "y", "confidence", "status", "species", "provenance", "parcel_id"]

# GeoTIFF tag codes
_MODEL_PIXEL_SCALE = 33550
_MODEL_TIEPOINT = 33922
_GEO_KEY_DIRECTORY = 34735
_PROJECTED_CS_KEY = 3072


def _open_text(path, mode="r"):
    try:
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc


def _float(value, what, where):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ParseError(f"{where}: {what} is not a number: {value!r}") from None
    if not math.isfinite(v):
        raise InvariantViolation(f"{where}: {what} is not finite: {value!r}")
    return v


# --- parcels -----------------------------------------------------------------

def load_parcels(path) -> List[Parcel]:
    """Read a parcels CSV, one row per field tree, grouped by ``parcel_id``.

    Parcel order follows first appearance in the file.
    """
    groups = OrderedDict()
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file, expected header")
        if [h.strip() for h in header] != PARCEL_HEADER:
            raise ParseError(f"{path}:1: bad header {header!r}, expected {','.join(PARCEL_HEADER)}")
        for row in reader:
            where = f"{path}:{reader.line_num}"
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(PARCEL_HEADER):
                raise ParseError(f"{where}: expected {len(PARCEL_HEADER)} columns, got {len(row)}")
            pid, cx, cy, rad, tid, dx, dy, species = (c.strip() for c in row)
            if not pid:
                raise InvariantViolation(f"{where}: empty parcel_id")
            if not species:
                raise InvariantViolation(f"{where}: empty species")
            center = (_float(cx, "center_x", where), _float(cy, "center_y", where))
            radius = _float(rad, "radius_m", where)
            try:
                tree = FieldTree(tid, _float(dx, "dx_m", where), _float(dy, "dy_m", where), species)
            except InvariantViolation as exc:
                raise InvariantViolation(f"{where}: {exc}") from None
            if tree.offset > radius:
                raise InvariantViolation(
                    f"{where}: tree {tid!r} offset {tree.offset:.2f} m exceeds radius {radius} m"
                )
            g = groups.get(pid)
            if g is None:
                groups[pid] = g = {"center": center, "radius": radius, "trees": [], "line": reader.line_num}
            elif g["center"] != center or g["radius"] != radius:
                raise InvariantViolation(f"{where}: parcel {pid!r} center/radius differ from line {g['line']}")
            if any(t.tree_id == tid for t in g["trees"]):
                raise InvariantViolation(f"{where}: duplicate tree_id {tid!r} in parcel {pid!r}")
            g["trees"].append(tree)
    parcels = []
    for pid, g in groups.items():
        try:
            parcels.append(Parcel(pid, Point(*g["center"]), g["radius"], tuple(g["trees"])))
        except InvariantViolation as exc:
            raise InvariantViolation(f"{path}:{g['line']}: {exc}") from None
    return parcels


def save_parcels(parcels, path):
    with _open_text(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PARCEL_HEADER)
        for p in parcels:
            for t in p.trees:
                w.writerow([p.parcel_id, repr(p.center.x), repr(p.center.y), repr(p.radius),
                            t.tree_id, repr(t.dx), repr(t.dy), t.species])


# --- rasters -----------------------------------------------------------------

def load_raster(path) -> Raster:
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        return _load_geotiff(path)
    if suffix == ".asc":
        return _load_ascii_grid(path)
    raise ParseError(f"{path}: unsupported raster format {suffix!r} (use .tif or .asc)")


def save_raster(raster: Raster, path):
    suffix = Path(path).suffix.lower()
    if suffix in (".tif", ".tiff"):
        _save_geotiff(raster, path)
    elif suffix == ".asc":
        _save_ascii_grid(raster, path)
    else:
        raise ParseError(f"{path}: unsupported raster format {suffix!r} (use .tif or .asc)")


def _raster_or_raise(path, transform, values):
    try:
        return Raster(transform, values)
    except InvariantViolation as exc:
        raise InvariantViolation(f"{path}: {exc}") from None


def _load_ascii_grid(path) -> Raster:
    with _open_text(path) as fh:
        lines = fh.read().splitlines()
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if not parts:
            i += 1
            continue
        if parts[0][0].isalpha():
            if len(parts) != 2:
                raise ParseError(f"{path}:{i + 1}: malformed header line {lines[i]!r}")
            header[parts[0].lower()] = parts[1]
            i += 1
        else:
            break
    try:
        ncols, nrows = int(header["ncols"]), int(header["nrows"])
        cell = float(header["cellsize"])
        if "xllcorner" in header:
            xll = float(header["xllcorner"])
        else:
            xll = float(header["xllcenter"]) - cell / 2
        if "yllcorner" in header:
            yll = float(header["yllcorner"])
        else:
            yll = float(header["yllcenter"]) - cell / 2
    except KeyError as exc:
        raise ParseError(f"{path}: missing header key {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ParseError(f"{path}: bad header value ({exc})") from None
    try:
        transform = WorldTransform(xll, yll + nrows * cell, cell, nrows, ncols)
    except InvariantViolation as exc:
        raise InvariantViolation(f"{path}: {exc}") from None
    rows = []
    for lineno in range(i, len(lines)):
        parts = lines[lineno].split()
        if not parts:
            continue
        if len(parts) != ncols:
            raise ParseError(f"{path}:{lineno + 1}: expected {ncols} values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise ParseError(f"{path}:{lineno + 1}: non-numeric value") from None
    if len(rows) != nrows:
        raise ParseError(f"{path}: expected {nrows} data rows, got {len(rows)}")
    values = np.array(rows, dtype=np.float64)
    if "nodata_value" in header:
        nodata = float(header["nodata_value"])
        hit = np.argwhere(values == nodata)
        if len(hit):
            r, c = (int(v) for v in hit[0])
            raise InvariantViolation(f"{path}: NODATA value at pixel (row={r}, col={c})")
    return _raster_or_raise(path, transform, values)


def _save_ascii_grid(raster: Raster, path):
    if raster.bands != 1:
        raise InvariantViolation(f"ASCII grids hold one band, raster has {raster.bands}")
    t = raster.transform
    with _open_text(path, "w") as fh:
        fh.write(f"ncols {t.cols}\nnrows {t.rows}\n")
        fh.write(f"xllcorner {t.origin_x!r}\nyllcorner {t.origin_y - t.rows * t.gsd!r}\n")
        fh.write(f"cellsize {t.gsd!r}\n")
        for row in raster.data:
            fh.write(" ".join(repr(float(v)) for v in row))
            fh.write("\n")


def _load_geotiff(path) -> Raster:
    import tifffile

    try:
        tif = tifffile.TiffFile(path)
    except FileNotFoundError as exc:
        raise IoError(f"cannot open {path}: {exc.strerror}") from exc
    except Exception as exc:  # tifffile raises a variety of errors on garbage
        raise ParseError(f"{path}: not a readable TIFF ({exc})") from None
    with tif:
        page = tif.pages[0]
        tags = page.tags
        if _MODEL_PIXEL_SCALE not in tags or _MODEL_TIEPOINT not in tags:
            raise ParseError(f"{path}: missing GeoTIFF geotransform tags")
        sx, sy = tags[_MODEL_PIXEL_SCALE].value[:2]
        tp = tags[_MODEL_TIEPOINT].value
        if abs(sx - sy) > 1e-9 * max(abs(sx), 1.0):
            raise InvariantViolation(f"{path}: non-square pixels ({sx} x {sy})")
        if tp[0] != 0 or tp[1] != 0:
            raise ParseError(f"{path}: tiepoint must reference pixel (0, 0)")
        crs = None
        if _GEO_KEY_DIRECTORY in tags:
            keys = tags[_GEO_KEY_DIRECTORY].value
            for k in range(4, len(keys) - 3, 4):
                if keys[k] == _PROJECTED_CS_KEY and keys[k + 1] == 0:
                    crs = int(keys[k + 3])
        data = page.asarray()
        planar_separate = page.planarconfig == 2
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[np.newaxis]
    elif data.ndim == 3 and not planar_separate:
        data = np.moveaxis(data, -1, 0)
    transform = WorldTransform(float(tp[3]), float(tp[4]), float(sx), data.shape[1], data.shape[2], crs)
    return _raster_or_raise(path, transform, data)


def _save_geotiff(raster: Raster, path):
    import tifffile

    t = raster.transform
    geokeys = [1, 1, 0, 2, 1024, 0, 1, 1, 1025, 0, 1, 1]
    if t.crs is not None:
        geokeys[3] = 3
        geokeys += [_PROJECTED_CS_KEY, 0, 1, int(t.crs)]
    extratags = [
        (_MODEL_PIXEL_SCALE, "d", 3, (t.gsd, t.gsd, 0.0), False),
        (_MODEL_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0), False),
        (_GEO_KEY_DIRECTORY, "H", len(geokeys), tuple(geokeys), False),
    ]
    data = raster.values.astype(np.float32)
    kwargs = {"planarconfig": "separate", "photometric": "minisblack"} if raster.bands > 1 else {}
    if raster.bands == 1:
        data = data[0]
    try:
        tifffile.imwrite(path, data, extratags=extratags, metadata=None, software=False, **kwargs)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# --- detections --------------------------------------------------------------

def _is_csv(path):
    return Path(path).suffix.lower() == ".csv"


def save_detections(detections, path):
    """Write detections as GeoJSON, or as the flat CSV mirror for ``.csv``."""
    detections = list(detections)
    if _is_csv(path):
        with _open_text(path, "w") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DETECTION_CSV_HEADER)
            for d in detections:
                w.writerow([d.det_id, repr(d.position.x), repr(d.position.y), repr(d.confidence),
                            d.status, d.species or "", d.provenance, d.parcel_id or ""])
        return
    features = [
        {
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [d.position.x, d.position.y]},
            "properties": {
                "det_id": d.det_id,
                "confidence": d.confidence,
                "status": d.status,
                "species": d.species,
                "provenance": d.provenance,
                "parcel_id": d.parcel_id,
            },
        }
        for d in detections
    ]
    with _open_text(path, "w") as fh:
        json.dump({"type": "FeatureCollection", "features": features}, fh, indent=1)
        fh.write("\n")


def _check_unique(detections, path):
    seen = set()
    for d in detections:
        if d.det_id in seen:
            raise DuplicateId(f"{path}: duplicate det_id {d.det_id!r}")
        seen.add(d.det_id)
    return detections


def load_detections(path) -> List[Detection]:
    if _is_csv(path):
        return _check_unique(_load_detections_csv(path), path)
    with _open_text(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ParseError(f"{path}: expected a GeoJSON FeatureCollection")
    out = []
    for k, feat in enumerate(doc.get("features", [])):
        where = f"{path}: feature {k}"
        try:
            geom = feat["geometry"]
            if geom["type"] != "Point":
                raise ParseError(f"{where}: geometry must be a Point")
            x, y = geom["coordinates"][:2]
            props = feat["properties"]
            det = Detection(
                det_id=str(props["det_id"]),
                position=Point(_float(x, "x", where), _float(y, "y", where)),
                confidence=_float(props["confidence"], "confidence", where),
                status=props.get("status", "unmatched"),
                species=props.get("species"),
                provenance=props.get("provenance", "none"),
                parcel_id=props.get("parcel_id"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, CanopyError):
                raise type(exc)(f"{where}: {exc}") from None
            raise ParseError(f"{where}: malformed feature ({exc!r})") from None
        out.append(det)
    return _check_unique(out, path)


def _load_detections_csv(path):
    out = []
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file, expected header")
        if [h.strip() for h in header] != DETECTION_CSV_HEADER:
            raise ParseError(f"{path}:1: bad header {header!r}")
        for row in reader:
            where = f"{path}:{reader.line_num}"
            if not row:
                continue
            if len(row) != len(DETECTION_CSV_HEADER):
                raise ParseError(f"{where}: expected {len(DETECTION_CSV_HEADER)} columns, got {len(row)}")
            det_id, x, y, conf, status, species, prov, pid = row
            try:
                out.append(Detection(det_id, Point(_float(x, "x", where), _float(y, "y", where)),
                                     _float(conf, "confidence", where), status, species or None,
                                     prov, pid or None))
            except InvariantViolation as exc:
                raise InvariantViolation(f"{where}: {exc}") from None
    return out


def load_points(path) -> List[Point]:
    """Read bare points from a GeoJSON FeatureCollection or an ``x,y`` CSV."""
    if _is_csv(path):
        pts = []
        with _open_text(path) as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"x", "y"} <= set(reader.fieldnames):
                raise ParseError(f"{path}:1: CSV needs x and y columns")
            for row in reader:
                where = f"{path}:{reader.line_num}"
                pts.append(Point(_float(row["x"], "x", where), _float(row["y"], "y", where)))
        return pts
    with _open_text(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    pts = []
    for k, feat in enumerate(doc.get("features", [])):
        where = f"{path}: feature {k}"
        try:
            x, y = feat["geometry"]["coordinates"][:2]
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"{where}: expected a Point geometry") from None
        pts.append(Point(_float(x, "x", where), _float(y, "y", where)))
    return pts


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create directory {path}: {exc.strerror}") from exc
    return Path(path)
