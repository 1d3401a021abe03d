import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from canopy_miner.core import Detection, FieldTree, Parcel, Point
from canopy_miner.errors import DuplicateId, InvariantViolation
from canopy_miner.matching import (
    CostMatrix,
    MatchResult,
    build_cost_matrix,
    classify_and_label,
    match_all,
    match_parcel,
    solve_assignment,
    verified_fraction,
)

from conftest import brute_force_assignment, greedy_nearest


def dets_at(*coords):
    return [Detection(f"d{i}", Point(x, y), 0.5) for i, (x, y) in enumerate(coords)]


def trees_at(*coords):
    return [(f"t{i}", Point(x, y)) for i, (x, y) in enumerate(coords)]


@pytest.mark.parametrize("tree,expected", [((3, 4), math.inf), ((0, 4.0), math.inf), ((1, 0), 1.0)])
def test_gate_examples(tree, expected):
    c = build_cost_matrix(dets_at((0, 0)), trees_at(tree))
    assert c.costs[0, 0] == expected


def test_single_pair():
    r = solve_assignment(build_cost_matrix(dets_at((0, 0)), trees_at((2, 0))))
    assert r.pairs == [("d0", "t0", 2.0)] and r.total_distance == 2.0


def test_greedy_trap_instance():
    costs = build_cost_matrix(dets_at((0, 0), (3, 0)), trees_at((1, 0), (-2.5, 0)))
    assert greedy_nearest(costs.costs) == 1
    r = solve_assignment(costs)
    assert sorted(r.pairs) == [("d0", "t1", 2.5), ("d1", "t0", 2.0)]
    assert len(r) == 2 and r.total_distance == 4.5


def test_all_infeasible_and_empty():
    r = solve_assignment(build_cost_matrix(dets_at((0, 0), (1, 1)), trees_at((50, 50))))
    assert r.pairs == [] and r.unmatched_detections == ["d0", "d1"] and r.unmatched_trees == ["t0"]
    r = solve_assignment(build_cost_matrix([], []))
    assert r == MatchResult()


def test_tie_break_prefers_smallest_index_sequence():
    # two equally good perfect matchings; the one pairing d0 with t0 wins
    c = CostMatrix(("a", "b"), ("x", "y"), np.array([[1.0, 1.0], [1.0, 1.0]]), 4.0)
    assert solve_assignment(c).pairs == [("a", "x", 1.0), ("b", "y", 1.0)]


def random_costs(rng, n, m, gate=4.0):
    d = rng.uniform(0, 8, size=(n, m))
    return np.where(d < gate, d, np.inf)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(0, 6), st.integers(0, 6))
def test_matches_brute_force_and_dominates_greedy(seed, n, m):
    costs = random_costs(np.random.default_rng(seed), n, m)
    c = CostMatrix(tuple(f"d{i}" for i in range(n)), tuple(f"t{j}" for j in range(m)), costs, 4.0)
    r = solve_assignment(c)
    k, total = brute_force_assignment(costs)
    assert len(r) == k
    assert abs(r.total_distance - total) <= 1e-9
    assert len(r) >= greedy_nearest(costs)
    assert all(d < 4.0 for _, _, d in r.pairs)
    assert len({t for _, t, _ in r.pairs}) == len(r)
    assert len(r.unmatched_detections) == n - k and len(r.unmatched_trees) == m - k


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_translation_keeps_pairing(seed, dx, dy):
    rng = np.random.default_rng(seed)
    # quantized coordinates keep distances exact under translation
    a = rng.integers(0, 40, size=(5, 2)) / 4.0
    b = rng.integers(0, 40, size=(5, 2)) / 4.0
    dx, dy = round(dx), round(dy)
    before = solve_assignment(build_cost_matrix(dets_at(*a), trees_at(*b)))
    moved = solve_assignment(build_cost_matrix(dets_at(*(a + [dx, dy])), trees_at(*(b + [dx, dy]))))
    assert [(p, q) for p, q, _ in before.pairs] == [(p, q) for p, q, _ in moved.pairs]


def pine_parcel(*species):
    trees = tuple(FieldTree(f"t{i}", float(i) * 8.0, 0.0, s) for i, s in enumerate(species))
    return Parcel("P", Point(100.0, 100.0), 25.0, trees)


def test_monospecific_parcel_labels_everything():
    parcel = pine_parcel("pinus_pinea")
    dets = dets_at((100.5, 100.0), (110, 110), (90, 95))
    labeled, match = match_parcel(parcel, dets)
    assert [d.status for d in labeled] == ["verified", "unverified", "unverified"]
    assert all(d.species == "pinus_pinea" for d in labeled)
    assert [d.provenance for d in labeled] == ["verified", "unverified", "unverified"]
    assert all(d.parcel_id == "P" for d in labeled)
    assert len(match) == 1


def test_mixed_parcel_keeps_only_verified():
    parcel = pine_parcel("pinus_pinea", "quercus_ilex")
    dets = dets_at((100.5, 100.0), (100, 115), (90, 95))
    labeled, _ = match_parcel(parcel, dets)
    assert [(d.det_id, d.status, d.species) for d in labeled] == [("d0", "verified", "pinus_pinea")]


def test_zero_detections():
    labeled, match = match_parcel(pine_parcel("pinus_pinea"), [])
    assert labeled == [] and len(match) == 0


def test_outside_radius_untouched_and_bad_match_rejected():
    parcel = pine_parcel("pinus_pinea")
    outside = Detection("far", Point(200, 200), 0.4)
    assert classify_and_label(parcel, [outside], MatchResult()) == [outside]
    bogus = MatchResult(pairs=[("far", "t0", 1.0)])
    with pytest.raises(InvariantViolation):
        classify_and_label(parcel, [outside], bogus)


def straight_line_labels(parcels, detections, gate):
    """Independent count oracle: nearest containing parcel, brute-force matching per parcel."""
    verified = unverified = discarded = 0
    for p in parcels:
        members = [d for d in detections
                   if min((q for q in parcels if q.center.distance(d.position) <= q.radius),
                          key=lambda q: q.center.distance(d.position), default=None) is p]
        costs = np.full((len(members), len(p.trees)), np.inf)
        for i, d in enumerate(members):
            for j, (_, tp) in enumerate(p.tree_positions()):
                dist = math.hypot(d.position.x - tp.x, d.position.y - tp.y)
                if dist < gate:
                    costs[i, j] = dist
        k, _ = brute_force_assignment(costs)
        verified += k
        if p.is_monospecific:
            unverified += len(members) - k
        else:
            discarded += len(members) - k
    return verified, unverified, discarded


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.booleans())
def test_labeling_counts_match_oracle(seed, mono):
    rng = np.random.default_rng(seed)
    n_trees = int(rng.integers(1, 6))
    species = ["pinus_pinea"] * n_trees if mono else [["pinus_pinea", "quercus_ilex"][i % 2] for i in range(n_trees)]
    if not mono and n_trees == 1:
        species.append("quercus_ilex")
    trees = tuple(FieldTree(f"t{i}", *map(float, rng.uniform(-15, 15, 2)), s) for i, s in enumerate(species))
    parcel = Parcel("P", Point(0.0, 0.0), 25.0, trees)
    dets = [Detection(f"d{i}", Point(*map(float, rng.uniform(-30, 30, 2))), 0.5)
            for i in range(int(rng.integers(0, 7)))]
    labeled, rows = match_all([parcel], dets)
    v, u, disc = straight_line_labels([parcel], dets, 4.0)
    statuses = [d.status for d in labeled]
    assert statuses.count("verified") == v == len(rows)
    assert statuses.count("unverified") == u
    inside = sum(parcel.contains(d.position) for d in dets)
    assert inside == v + u + disc
    assert len(labeled) == len(dets) - disc
    if mono:
        assert disc == 0
    else:
        assert u == 0


def test_match_all_threads_and_nearest_parcel():
    a = Parcel("A", Point(0, 0), 25.0, (FieldTree("t", 0, 0, "pinus_pinea"),))
    b = Parcel("B", Point(30, 0), 25.0, (FieldTree("t", 0, 0, "quercus_ilex"),
                                          FieldTree("u", 0, 20, "pinus_pinea")))
    dets = dets_at((0.5, 0), (29, 0), (16, 0), (100, 100))
    one = match_all([a, b], dets, threads=1)
    many = match_all([a, b], dets, threads=4)
    assert one == many
    labeled, rows = one
    assert [r[:3] for r in rows] == [("A", "d0", "t"), ("B", "d1", "t")]
    # d2 is closer to B (mixed) and gets discarded; d3 is outside every parcel
    assert [d.det_id for d in labeled] == ["d0", "d1", "d3"]
    assert labeled[2].status == "unmatched"
    assert verified_fraction(labeled) == 1.0
    with pytest.raises(DuplicateId):
        match_all([a], dets + dets[:1])


def test_verified_fraction_definition():
    d = Detection("x", Point(0, 0), 0.5)
    mixed = [d.with_(det_id="a", status="verified", species="s", provenance="verified"),
             d.with_(det_id="b", status="unverified", species="s", provenance="unverified"),
             d.with_(det_id="c", status="unverified", species="s", provenance="unverified"),
             d.with_(det_id="e")]
    assert verified_fraction(mixed) == pytest.approx(1 / 3)
    assert verified_fraction([]) == 0.0
