"""
Labeling detections with field plots
====================================

Detections inside a field plot are matched one-to-one to the recorded trees.
Matched detections inherit the tree's species. In a plot with a single
species, the unmatched ones inherit it as well; in a mixed plot they are
dropped.
"""

from canopy_miner.core import Detection, FieldTree, Parcel, Point
from canopy_miner.evaluation import agreement, render_report
from canopy_miner.matching import build_cost_matrix, match_all, solve_assignment

# Why global matching: a greedy closest-first pass would pair d1 with t1 and
# strand d2, while the optimal matching keeps both pairs.
dets = [("d1", Point(0, 0)), ("d2", Point(3, 0))]
trees = [("t1", Point(1, 0)), ("t2", Point(-2.5, 0))]
result = solve_assignment(build_cost_matrix(dets, trees, gate_m=4.0))
print("pairs:", result.pairs, "total:", result.total_distance, "m")

# Two plots: one pure stone pine, one mixed.
pine = Parcel("P-pine", Point(100, 100), 25.0, (
    FieldTree("a", 0.0, 0.0, "pinus_pinea"),
    FieldTree("b", 6.0, 2.0, "pinus_pinea"),
))
mixed = Parcel("P-mixed", Point(200, 100), 25.0, (
    FieldTree("c", 0.0, 0.0, "pinus_pinea"),
    FieldTree("d", -5.0, 4.0, "quercus_ilex"),
))
detections = [
    Detection("d000", Point(100.4, 100.3), 0.9),
    Detection("d001", Point(105.2, 101.5), 0.8),
    Detection("d002", Point(90.0, 112.0), 0.6),   # nothing recorded nearby
    Detection("d003", Point(195.5, 104.2), 0.7),
    Detection("d004", Point(210.0, 90.0), 0.5),   # unmatched in the mixed plot
    Detection("d005", Point(400.0, 400.0), 0.7),  # outside every plot
]
labeled, rows = match_all([pine, mixed], detections)
for d in labeled:
    print(f"{d.det_id}  {d.status:10s}  {d.species or '-':14s}  parcel={d.parcel_id}")
print("matches:", rows)

# Quality control: agreement of recorded trees with detections in the plots.
ref = [p for parcel in (pine, mixed) for _, p in parcel.tree_positions()]
cand = [d.position for d in detections if pine.contains(d.position) or mixed.contains(d.position)]
print(render_report(agreement(ref, cand), "Field data", "Predictions"), end="")
