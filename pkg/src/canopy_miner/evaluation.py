"""Point-set agreement (detection quality control) and species classification metrics."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import List, Tuple

from .errors import DegenerateInput, LengthMismatch
from .matching import DEFAULT_GATE_M, build_cost_matrix, solve_assignment


@dataclass(frozen=True)
class AgreementReport:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    f1: float
    count_difference: int
    avg_match_distance_m: float

    @classmethod
    def from_counts(cls, tp, fp, fn, avg_distance=0.0):
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        return cls(tp, fp, fn, precision, recall, f1, (tp + fp) - (tp + fn), avg_distance)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ClassificationReport:
    oa: float
    miou: float
    ar: float
    per_class: List[Tuple[str, float, float, int]] = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["per_class"] = [
            {"species": s, "iou": iou, "recall": rec, "support": n} for s, iou, rec, n in self.per_class
        ]
        return d


def agreement(reference, candidate, gate_m=DEFAULT_GATE_M) -> AgreementReport:
    """One-to-one agreement between a reference and a candidate point set.

    Matched pairs are true positives, leftover candidates false positives and
    leftover references false negatives. ``count_difference`` is
    ``len(candidate) - len(reference)``.
    """
    ref = [(f"r{k}", p) for k, p in enumerate(reference)]
    cand = [(f"c{k}", p) for k, p in enumerate(candidate)]
    match = solve_assignment(build_cost_matrix(cand, ref, gate_m))
    tp = len(match.pairs)
    avg = match.total_distance / tp if tp else 0.0
    return AgreementReport.from_counts(tp, len(cand) - tp, len(ref) - tp, avg)


def classification_metrics(pred, truth) -> ClassificationReport:
    """Overall accuracy plus IoU and recall averaged over classes present in ``truth``."""
    pred, truth = list(pred), list(truth)
    if len(pred) != len(truth):
        raise LengthMismatch(f"pred has {len(pred)} labels, truth has {len(truth)}")
    if not truth:
        raise DegenerateInput("classification_metrics needs at least one sample")
    oa = sum(p == t for p, t in zip(pred, truth)) / len(truth)
    per_class = []
    for c in sorted(set(truth)):
        tp = sum(p == c and t == c for p, t in zip(pred, truth))
        fp = sum(p == c and t != c for p, t in zip(pred, truth))
        fn = sum(p != c and t == c for p, t in zip(pred, truth))
        per_class.append((c, tp / (tp + fp + fn), tp / (tp + fn), tp + fn))
    miou = sum(r[1] for r in per_class) / len(per_class)
    ar = sum(r[2] for r in per_class) / len(per_class)
    return ClassificationReport(oa, miou, ar, per_class)


def _pct(v):
    return f"{100.0 * v:.1f}"


def render_report(report, reference="Reference", matched="Matched", label=""):
    """Fixed-width text table: a header line and one row per report.

    Agreement rows read ``<reference>  <matched>  +1099  47.9  1.1m``
    (count difference, F1 in percent, mean match distance); classification
    rows read ``<label> 40.3 12.9 24.8`` (OA, mIoU, AR in percent). Values
    wider than their column push later columns right but stay separated.
    """
    if isinstance(report, AgreementReport):
        head = f"{'Reference':<16}  {'Matched':<16}  {'Diff':>6}  {'F1':>4}  {'Avg':>4}"
        row = (
            f"{reference:<16}  {matched:<16}  {report.count_difference:>+6d}  "
            f"{_pct(report.f1):>4}  {report.avg_match_distance_m:>3.1f}m"
        )
        return head + "\n" + row + "\n"
    if isinstance(report, ClassificationReport):
        head = f"{'':<16} {'OA':>4} {'mIoU':>4} {'AR':>4}"
        row = f"{label:<16} {_pct(report.oa):>4} {_pct(report.miou):>4} {_pct(report.ar):>4}"
        return head + "\n" + row + "\n"
    raise TypeError(f"cannot render {type(report).__name__}")
