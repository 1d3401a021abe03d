"""Gated one-to-one matching of detections to field trees, and parcel labeling.

Pairs farther apart than the gate (strictly: ``distance >= gate_m``) can never
be matched. Among the remaining pairs the solver maximizes the number of
matches first and minimizes their summed distance second.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .core import Detection, Parcel
from .errors import DuplicateId, InvariantViolation

DEFAULT_GATE_M = 4.0
INFEASIBLE_SURROGATE = 1e6


@dataclass(frozen=True)
class CostMatrix:
    """Dense n x m distance matrix; ``np.inf`` marks infeasible pairs."""

    det_ids: Tuple[str, ...]
    tree_ids: Tuple[str, ...]
    costs: np.ndarray
    gate_m: float = DEFAULT_GATE_M

    @property
    def n_detections(self):
        return len(self.det_ids)

    @property
    def m_trees(self):
        return len(self.tree_ids)

    @property
    def feasible(self):
        return np.isfinite(self.costs)


@dataclass
class MatchResult:
    pairs: List[Tuple[str, str, float]] = field(default_factory=list)
    unmatched_detections: List[str] = field(default_factory=list)
    unmatched_trees: List[str] = field(default_factory=list)

    @property
    def total_distance(self) -> float:
        return float(sum(d for _, _, d in self.pairs))

    def __len__(self):
        return len(self.pairs)


def _det_point(d):
    if isinstance(d, Detection):
        return d.det_id, d.position
    det_id, p = d
    return det_id, p


def build_cost_matrix(dets, trees, gate_m=DEFAULT_GATE_M) -> CostMatrix:
    """Euclidean distances, with pairs at or beyond ``gate_m`` marked infeasible.

    ``dets`` holds :class:`Detection` objects or ``(id, Point)`` tuples;
    ``trees`` holds ``(tree_id, Point)`` tuples.
    """
    if not gate_m > 0:
        raise InvariantViolation(f"gate_m must be > 0, got {gate_m}")
    dets = [_det_point(d) for d in dets]
    trees = [(tid, p) for tid, p in trees]
    costs = np.full((len(dets), len(trees)), np.inf)
    if dets and trees:
        a = np.array([[p.x, p.y] for _, p in dets])
        b = np.array([[p.x, p.y] for _, p in trees])
        dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
        costs = np.where(dist < gate_m, dist, np.inf)
    return CostMatrix(tuple(i for i, _ in dets), tuple(t for t, _ in trees), costs, float(gate_m))


def _solve_dense(costs):
    """(cardinality, total, {row: col}) for max-cardinality, min-cost matching."""
    if costs.size == 0:
        return 0, 0.0, {}
    feasible = np.isfinite(costs)
    surrogate = np.where(feasible, costs, max(INFEASIBLE_SURROGATE, 10.0 * costs[feasible].sum() + 1.0))
    rows, cols = linear_sum_assignment(surrogate)
    assign = {int(r): int(c) for r, c in zip(rows, cols) if feasible[r, c]}
    total = math.fsum(costs[r, c] for r, c in assign.items())
    return len(assign), total, assign


def _lexicographic_optimum(costs):
    """Optimal matching whose (row, col) pair sequence is lexicographically smallest.

    Rows are fixed one at a time: each row takes the smallest column that
    still admits an optimal completion, or stays unmatched if none does.
    """
    best_k, best_c, cur = _solve_dense(costs)
    tol = 1e-9 * max(1.0, best_c)
    n, m = costs.shape
    free_rows = list(range(n))
    free_cols = list(range(m))
    fixed = {}
    fixed_cost = []
    for i in range(n):
        free_rows.remove(i)
        row_cand = [j for j in free_cols if np.isfinite(costs[i, j])]
        limit = cur.get(i)
        trials = [j for j in row_cand if limit is None or j < limit]
        chosen = limit
        for j in trials:
            cols = [c for c in free_cols if c != j]
            sub = costs[np.ix_(free_rows, cols)]
            k, c, a = _solve_dense(sub)
            if len(fixed) + 1 + k == best_k and math.fsum(fixed_cost + [costs[i, j], c]) <= best_c + tol:
                chosen = j
                cur = dict(fixed)
                cur[i] = j
                cur.update({free_rows[r]: cols[cc] for r, cc in a.items()})
                break
        if chosen is not None:
            fixed[i] = chosen
            fixed_cost.append(costs[i, chosen])
            free_cols.remove(chosen)
    return fixed


def solve_assignment(c: CostMatrix) -> MatchResult:
    """Maximum-cardinality, minimum-distance 1-to-1 matching on feasible pairs.

    Ties between equally good matchings go to the lexicographically smallest
    sequence of (detection index, tree index) pairs. The problem is split into
    connected components of the feasibility graph, which keeps each solve
    small in sparse scenes.
    """
    n, m = c.costs.shape
    result = MatchResult()
    feasible = c.feasible
    assign = {}
    if n and m and feasible.any():
        r_idx, c_idx = np.nonzero(feasible)
        graph = coo_matrix((np.ones(len(r_idx)), (r_idx, n + c_idx)), shape=(n + m, n + m))
        _, comp = connected_components(graph, directed=False)
        det_comp, tree_comp = comp[:n], comp[n:]
        for label in np.unique(comp[n + c_idx]):
            rows = np.flatnonzero(det_comp == label)
            cols = np.flatnonzero(tree_comp == label)
            sub = _lexicographic_optimum(c.costs[np.ix_(rows, cols)])
            assign.update({int(rows[r]): int(cols[k]) for r, k in sub.items()})
    matched_trees = set(assign.values())
    for i in range(n):
        if i in assign:
            j = assign[i]
            result.pairs.append((c.det_ids[i], c.tree_ids[j], float(c.costs[i, j])))
        else:
            result.unmatched_detections.append(c.det_ids[i])
    result.unmatched_trees = [c.tree_ids[j] for j in range(m) if j not in matched_trees]
    return result


def classify_and_label(parcel: Parcel, dets, match: MatchResult) -> List[Detection]:
    """Apply the parcel labeling rules to detections after matching.

    * matched detections become ``verified`` with the matched tree's species;
    * in a monospecific parcel, unmatched detections inside the radius become
      ``unverified`` with the parcel species;
    * in a mixed parcel, unmatched detections inside the radius are dropped.

    Detections outside the radius are returned unchanged.
    """
    species_of = {t.tree_id: t.species for t in parcel.trees}
    by_id = {d.det_id: d for d in dets}
    matched = {}
    for det_id, tree_id, dist in match.pairs:
        if tree_id not in species_of:
            raise InvariantViolation(f"tree {tree_id!r} is not in parcel {parcel.parcel_id!r}")
        d = by_id.get(det_id)
        if d is None or not parcel.contains(d.position):
            raise InvariantViolation(
                f"matched detection {det_id!r} is not inside parcel {parcel.parcel_id!r}"
            )
        matched[det_id] = species_of[tree_id]
    mono = parcel.species[0] if parcel.is_monospecific else None
    out = []
    for d in dets:
        if not parcel.contains(d.position):
            out.append(d)
        elif d.det_id in matched:
            out.append(d.with_(status="verified", species=matched[d.det_id],
                               provenance="verified", parcel_id=parcel.parcel_id))
        elif mono is not None:
            out.append(d.with_(status="unverified", species=mono,
                               provenance="unverified", parcel_id=parcel.parcel_id))
    return out


def match_parcel(parcel: Parcel, dets, gate_m=DEFAULT_GATE_M):
    """Match and label the detections lying inside one parcel.

    Returns ``(labeled, match)``; ``labeled`` omits discarded detections.
    """
    inside = [d for d in dets if parcel.contains(d.position)]
    cost = build_cost_matrix(inside, parcel.tree_positions(), gate_m)
    match = solve_assignment(cost)
    return classify_and_label(parcel, inside, match), match


def assign_to_parcels(parcels, detections):
    """Map det_id -> index of the nearest parcel whose radius contains it."""
    owner = {}
    if not parcels:
        return owner
    centers = np.array([[p.center.x, p.center.y] for p in parcels])
    radii = np.array([p.radius for p in parcels])
    for d in detections:
        dist = np.hypot(centers[:, 0] - d.position.x, centers[:, 1] - d.position.y)
        inside = np.flatnonzero(dist <= radii)
        if len(inside):
            owner[d.det_id] = int(inside[np.argmin(dist[inside])])
    return owner


def match_all(parcels, detections, gate_m=DEFAULT_GATE_M, threads=1):
    """Run per-parcel matching over a whole scene.

    Returns ``(labeled, rows)`` where ``labeled`` keeps the input order (minus
    discarded detections; detections outside every parcel are passed through
    as the unlabeled pool) and ``rows`` lists ``(parcel_id, det_id, tree_id,
    distance_m)`` in parcel order. Parcels are independent, so ``threads > 1``
    runs them concurrently with identical results.
    """
    detections = list(detections)
    seen = set()
    for d in detections:
        if d.det_id in seen:
            raise DuplicateId(f"duplicate det_id {d.det_id!r}")
        seen.add(d.det_id)
    owner = assign_to_parcels(parcels, detections)
    members = [[] for _ in parcels]
    for d in detections:
        if d.det_id in owner:
            members[owner[d.det_id]].append(d)

    def work(k):
        return match_parcel(parcels[k], members[k], gate_m)

    if threads > 1 and len(parcels) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(len(parcels))))
    else:
        results = [work(k) for k in range(len(parcels))]

    labeled_by_id = {}
    rows = []
    for parcel, (labeled, match) in zip(parcels, results):
        for d in labeled:
            labeled_by_id[d.det_id] = d
        rows.extend((parcel.parcel_id, det, tree, dist) for det, tree, dist in match.pairs)
    out = []
    for d in detections:
        if d.det_id not in owner:
            out.append(d)
        elif d.det_id in labeled_by_id:
            out.append(labeled_by_id[d.det_id])
    return out, rows


def verified_fraction(detections) -> float:
    """Share of kept parcel detections (verified + unverified) that are verified."""
    kept = [d for d in detections if d.status in ("verified", "unverified")]
    if not kept:
        return 0.0
    return sum(d.status == "verified" for d in kept) / len(kept)


def save_matches(rows, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parcel_id", "det_id", "tree_id", "distance_m"])
        for pid, det, tree, dist in rows:
            w.writerow([pid, det, tree, repr(float(dist))])
