"""Domain types and planar coordinate transforms.

All coordinates live in a single projected CRS measured in meters. Rasters are
north-up: world ``y`` decreases as the row index grows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from .errors import InvariantViolation, OutOfBounds

STATUSES = ("unmatched", "verified", "unverified", "discarded")
PROVENANCES = ("verified", "unverified", "pseudo", "none")

DEFAULT_PARCEL_RADIUS_M = 25.0


@dataclass(frozen=True)
class Point:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvariantViolation(f"non-finite point ({self.x}, {self.y})")

    def distance(self, other: "Point") -> float:
        return math.hypot(self.x - other.x, self.y - other.y)


@dataclass(frozen=True)
class WorldTransform:
    """Affine mapping between the pixel grid and world coordinates.

    ``origin_x``/``origin_y`` are the world coordinates of the top-left
    corner of pixel (0, 0); ``gsd`` is the pixel side in meters. ``crs`` is an
    optional EPSG code carried along only to refuse mixing grids.
    """

    origin_x: float
    origin_y: float
    gsd: float
    rows: int
    cols: int
    crs: Optional[int] = None

    def __post_init__(self):
        if not (math.isfinite(self.origin_x) and math.isfinite(self.origin_y)):
            raise InvariantViolation("transform origin must be finite")
        if not (math.isfinite(self.gsd) and self.gsd > 0):
            raise InvariantViolation(f"gsd must be > 0, got {self.gsd}")
        if int(self.rows) != self.rows or int(self.cols) != self.cols or self.rows < 1 or self.cols < 1:
            raise InvariantViolation(f"grid shape must be positive integers, got {self.rows}x{self.cols}")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) of the grid extent."""
        return (
            self.origin_x,
            self.origin_y - self.rows * self.gsd,
            self.origin_x + self.cols * self.gsd,
            self.origin_y,
        )

    def pixel_to_world(self, row: int, col: int) -> Point:
        return Point(self.origin_x + (col + 0.5) * self.gsd, self.origin_y - (row + 0.5) * self.gsd)

    def fractional_pixel(self, p: Point) -> Tuple[float, float]:
        """Continuous (row, col) where integer values are pixel centers."""
        return (
            (self.origin_y - p.y) / self.gsd - 0.5,
            (p.x - self.origin_x) / self.gsd - 0.5,
        )

    def contains(self, p: Point) -> bool:
        xmin, ymin, xmax, ymax = self.bounds
        return xmin <= p.x < xmax and ymin < p.y <= ymax

    def mismatched_fields(self, other: "WorldTransform") -> list:
        names = ("origin_x", "origin_y", "gsd", "rows", "cols", "crs")
        return [n for n in names if getattr(self, n) != getattr(other, n)]


def world_to_pixel(t: WorldTransform, p: Point) -> Tuple[int, int]:
    """Return the (row, col) of the cell containing ``p``.

    Raises :class:`OutOfBounds` when ``p`` lies outside the grid.
    """
    row = math.floor((t.origin_y - p.y) / t.gsd)
    col = math.floor((p.x - t.origin_x) / t.gsd)
    if not (0 <= row < t.rows and 0 <= col < t.cols):
        raise OutOfBounds(f"point ({p.x}, {p.y}) outside grid {t.rows}x{t.cols}", (p.x, p.y))
    return row, col


def pixel_to_world(t: WorldTransform, row: int, col: int) -> Point:
    return t.pixel_to_world(row, col)


class Raster:
    """A (bands, rows, cols) float grid bound to a :class:`WorldTransform`.

    Values are copied into a read-only float64 array. Non-finite values are
    rejected with the offending pixel named.
    """

    __slots__ = ("transform", "values")

    def __init__(self, transform: WorldTransform, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[np.newaxis]
        if arr.ndim != 3:
            raise InvariantViolation(f"raster values must be 2-D or 3-D, got {arr.ndim}-D")
        if arr.shape[1:] != transform.shape:
            raise InvariantViolation(
                f"values shape {arr.shape[1:]} does not match transform {transform.shape}"
            )
        if arr.shape[0] < 1:
            raise InvariantViolation("raster needs at least one band")
        bad = ~np.isfinite(arr)
        if bad.any():
            b, r, c = (int(v) for v in np.argwhere(bad)[0])
            raise InvariantViolation(f"non-finite value at band {b}, pixel (row={r}, col={c})")
        arr.setflags(write=False)
        self.transform = transform
        self.values = arr

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.transform.shape

    @property
    def data(self) -> np.ndarray:
        """The single band as a 2-D array."""
        if self.bands != 1:
            raise InvariantViolation(f"expected a single-band raster, got {self.bands} bands")
        return self.values[0]

    def check_unit_range(self, name: str = "raster") -> "Raster":
        lo, hi = float(self.values.min()), float(self.values.max())
        if lo < 0.0 or hi > 1.0:
            raise InvariantViolation(f"{name} values must lie in [0, 1], found [{lo}, {hi}]")
        return self

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.transform == other.transform and np.array_equal(self.values, other.values)

    def __repr__(self):
        t = self.transform
        return f"Raster({self.bands}x{t.rows}x{t.cols}, origin=({t.origin_x}, {t.origin_y}), gsd={t.gsd})"


@dataclass(frozen=True)
class FieldTree:
    tree_id: str
    dx: float
    dy: float
    species: str

    def __post_init__(self):
        if not self.tree_id:
            raise InvariantViolation("tree_id must be non-empty")
        if not self.species:
            raise InvariantViolation(f"tree {self.tree_id!r} has an empty species code")
        if not (math.isfinite(self.dx) and math.isfinite(self.dy)):
            raise InvariantViolation(f"tree {self.tree_id!r} has a non-finite offset")

    @property
    def offset(self) -> float:
        return math.hypot(self.dx, self.dy)


@dataclass(frozen=True)
class Parcel:
    parcel_id: str
    center: Point
    radius: float = DEFAULT_PARCEL_RADIUS_M
    trees: Tuple[FieldTree, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trees", tuple(self.trees))
        if not self.parcel_id:
            raise InvariantViolation("parcel_id must be non-empty")
        if not (math.isfinite(self.radius) and self.radius > 0):
            raise InvariantViolation(f"parcel {self.parcel_id!r}: radius must be > 0")
        seen = set()
        for t in self.trees:
            if t.tree_id in seen:
                raise InvariantViolation(f"parcel {self.parcel_id!r}: duplicate tree_id {t.tree_id!r}")
            seen.add(t.tree_id)
            if t.offset > self.radius:
                raise InvariantViolation(
                    f"parcel {self.parcel_id!r}: tree {t.tree_id!r} offset {t.offset:.2f} m "
                    f"exceeds radius {self.radius} m"
                )

    @property
    def species(self) -> Tuple[str, ...]:
        return tuple(sorted({t.species for t in self.trees}))

    @property
    def is_monospecific(self) -> bool:
        return len(self.species) == 1

    def contains(self, p: Point) -> bool:
        return self.center.distance(p) <= self.radius

    def tree_positions(self):
        return [(t.tree_id, tree_world_position(self, t)) for t in self.trees]


def tree_world_position(parcel: Parcel, tree: FieldTree) -> Point:
    """World position of a field tree from its offset to the parcel center."""
    if tree.offset > parcel.radius:
        raise InvariantViolation(
            f"tree {tree.tree_id!r} offset {tree.offset:.2f} m exceeds parcel radius {parcel.radius} m"
        )
    return Point(parcel.center.x + tree.dx, parcel.center.y + tree.dy)


@dataclass(frozen=True)
class Detection:
    """A detected tree position and its labeling state.

    ``parcel_id`` records which field plot (if any) the detection was matched
    against; it drives grouped train/val splits downstream.
    """

    det_id: str
    position: Point
    confidence: float
    status: str = "unmatched"
    species: Optional[str] = None
    provenance: str = "none"
    parcel_id: Optional[str] = None

    def __post_init__(self):
        if not self.det_id:
            raise InvariantViolation("det_id must be non-empty")
        if not (0.0 <= self.confidence <= 1.0):
            raise InvariantViolation(f"detection {self.det_id!r}: confidence {self.confidence} outside [0, 1]")
        if self.status not in STATUSES:
            raise InvariantViolation(f"detection {self.det_id!r}: unknown status {self.status!r}")
        if self.provenance not in PROVENANCES:
            raise InvariantViolation(f"detection {self.det_id!r}: unknown provenance {self.provenance!r}")
        if self.species == "":
            object.__setattr__(self, "species", None)
        if self.status == "verified" and self.species is None:
            raise InvariantViolation(f"detection {self.det_id!r}: verified without species")
        if self.provenance in ("verified", "unverified", "pseudo") and self.species is None:
            raise InvariantViolation(f"detection {self.det_id!r}: provenance {self.provenance} needs a species")
        if self.provenance == "none" and self.species is not None:
            raise InvariantViolation(f"detection {self.det_id!r}: species set without provenance")
        if self.parcel_id == "":
            object.__setattr__(self, "parcel_id", None)

    def with_(self, **changes) -> "Detection":
        return replace(self, **changes)
