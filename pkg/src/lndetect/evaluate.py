"""Hit matching and detection metrics: PR, FROC, mFROC, best F1.

A candidate may hit a ground-truth instance iff their voxel sets overlap
and the candidate's equivalent radius is within a factor of [0.5, 1.5] of
the ground-truth radius (inclusive).  Assignment is greedy in descending
candidate score and one-to-one; duplicate detections of an already-matched
instance count as false positives.

Because the greedy pass consumes candidates in descending score order, the
matching at any score threshold equals the greedy state after the kept
prefix.  The threshold sweeps below exploit this: one greedy pass per
patient, then pure counting.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .instances import GroundTruthInstance, InstanceCandidate

DEFAULT_RADIUS_FACTOR_BAND = (0.5, 1.5)
DEFAULT_FROC_BUDGETS = (2.0, 3.0, 4.0, 6.0)
DEFAULT_OPERATING_PRECISION = 0.15
DEFAULT_PRECISION_BAND = (0.10, 0.20)


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (candidate id, gt id)
    unmatched_candidates: tuple[int, ...]  # FPs
    unmatched_gts: tuple[int, ...]  # FNs
    hit_flags: dict[int, bool]  # candidate id -> hit


@dataclass(frozen=True)
class PrCurve:
    """(threshold, precision, recall) points, ascending threshold, macro-averaged."""

    points: tuple[tuple[float, float, float], ...]


@dataclass(frozen=True)
class FrocCurve:
    """(fp_per_patient, recall) points ascending in FP, plus per-budget recalls."""

    points: tuple[tuple[float, float], ...]
    budgets: tuple[float, ...]
    recall_at_budget: dict[float, float]


@dataclass(frozen=True)
class BandRecall:
    recall_at_point: float  # recall of the point nearest the band midpoint
    mean_recall: float | None  # mean over in-band points; None when band is empty
    n_in_band: int


def _overlap(a: np.ndarray | None, b: np.ndarray | None) -> int:
    if a is None or b is None:
        raise ValueError("matching requires voxel index sets on both sides")
    return int(np.intersect1d(a, b, assume_unique=True).size)


def _candidate_order(cands: Sequence[InstanceCandidate]) -> list[int]:
    # descending score, ties broken by ascending candidate id
    return sorted(range(len(cands)), key=lambda i: (-cands[i].score, cands[i].id))


def _greedy_assign(
    ordered: Sequence[InstanceCandidate],
    gts: Sequence[GroundTruthInstance],
    radius_factor_band=DEFAULT_RADIUS_FACTOR_BAND,
    min_overlap_frac: float = 0.0,
) -> list[int]:
    """For candidates already in greedy order, the matched gt index or -1.

    A candidate takes the unmatched criterion-satisfying instance with the
    largest voxel overlap (ties: lowest gt index).
    """
    lo, hi = radius_factor_band
    taken = [False] * len(gts)
    out = []
    for c in ordered:
        best, best_ov = -1, 0
        for j, g in enumerate(gts):
            if taken[j]:
                continue
            ratio = c.radius_mm / g.radius_mm
            if not (lo <= ratio <= hi):
                continue
            ov = _overlap(c.voxel_indices, g.voxel_indices)
            if ov == 0:
                continue
            if min_overlap_frac > 0.0 and ov < min_overlap_frac * g.voxel_indices.size:
                continue
            if ov > best_ov:
                best, best_ov = j, ov
        if best >= 0:
            taken[best] = True
        out.append(best)
    return out


def match_instances(
    cands: Sequence[InstanceCandidate],
    gts: Sequence[GroundTruthInstance],
    radius_factor_band=DEFAULT_RADIUS_FACTOR_BAND,
    min_overlap_frac: float = 0.0,
) -> MatchResult:
    """One-to-one greedy matching of candidates against ground truth."""
    order = _candidate_order(cands)
    ordered = [cands[i] for i in order]
    assign = _greedy_assign(ordered, gts, radius_factor_band, min_overlap_frac)
    pairs = []
    fps = []
    hit = {}
    matched_gt = set()
    for c, j in zip(ordered, assign):
        if j >= 0:
            pairs.append((c.id, gts[j].id))
            matched_gt.add(j)
            hit[c.id] = True
        else:
            fps.append(c.id)
            hit[c.id] = False
    fns = [g.id for j, g in enumerate(gts) if j not in matched_gt]
    return MatchResult(tuple(pairs), tuple(fps), tuple(fns), hit)


@dataclass(frozen=True, eq=False)
class _PatientSweep:
    scores_desc: np.ndarray  # candidate scores, descending
    cum_tp: np.ndarray  # true positives within each prefix
    n_gts: int

    def counts_at(self, threshold: float) -> tuple[int, int]:
        """(kept, tp) with candidates kept iff score >= threshold."""
        kept = int(np.searchsorted(-self.scores_desc, -threshold, side="right"))
        tp = int(self.cum_tp[kept - 1]) if kept > 0 else 0
        return kept, tp


def _sweep(
    per_patient, radius_factor_band, min_overlap_frac
) -> tuple[list[_PatientSweep], np.ndarray]:
    if len(per_patient) == 0:
        raise ValueError("need at least one patient")
    sweeps = []
    all_scores = []
    for cands, gts in per_patient:
        order = _candidate_order(cands)
        ordered = [cands[i] for i in order]
        assign = _greedy_assign(ordered, gts, radius_factor_band, min_overlap_frac)
        scores = np.array([c.score for c in ordered], dtype=np.float64)
        cum_tp = np.cumsum([1 if j >= 0 else 0 for j in assign]).astype(np.int64)
        sweeps.append(_PatientSweep(scores, cum_tp, len(gts)))
        all_scores.append(scores)
    thresholds = np.unique(np.concatenate(all_scores)) if any(
        s.size for s in all_scores
    ) else np.empty(0)
    return sweeps, thresholds


def _macro_at(sweeps: list[_PatientSweep], t: float) -> tuple[float, float, float]:
    """(macro precision, macro recall, mean FP per patient) at threshold t."""
    precs, recs, fps = [], [], []
    for s in sweeps:
        kept, tp = s.counts_at(t)
        precs.append(tp / kept if kept > 0 else 1.0)
        recs.append(tp / s.n_gts if s.n_gts > 0 else 1.0)
        fps.append(kept - tp)
    n = len(sweeps)
    return sum(precs) / n, sum(recs) / n, sum(fps) / n


def pr_curve(
    per_patient: Sequence[tuple[Sequence[InstanceCandidate], Sequence[GroundTruthInstance]]],
    radius_factor_band=DEFAULT_RADIUS_FACTOR_BAND,
    min_overlap_frac: float = 0.0,
) -> PrCurve:
    """Macro-averaged precision/recall over the sweep of all distinct scores.

    Per patient, precision is 1 when no candidates are kept and recall is 1
    when the patient has no ground-truth instances.
    """
    sweeps, thresholds = _sweep(per_patient, radius_factor_band, min_overlap_frac)
    points = []
    for t in thresholds:
        p, r, _ = _macro_at(sweeps, float(t))
        points.append((float(t), p, r))
    return PrCurve(tuple(points))


def froc_curve(
    per_patient,
    budgets: Sequence[float] = DEFAULT_FROC_BUDGETS,
    radius_factor_band=DEFAULT_RADIUS_FACTOR_BAND,
    min_overlap_frac: float = 0.0,
) -> FrocCurve:
    """Recall against mean false positives per patient.

    For each budget b, the curve records the maximum recall among sweep
    thresholds whose mean FP count per patient is <= b (0 when no
    threshold qualifies).
    """
    budgets = tuple(float(b) for b in budgets)
    if any(b < 0 or not np.isfinite(b) for b in budgets):
        raise ValueError(f"budgets must be non-negative finite, got {budgets}")
    sweeps, thresholds = _sweep(per_patient, radius_factor_band, min_overlap_frac)
    points = []
    for t in thresholds:
        _, r, fp = _macro_at(sweeps, float(t))
        points.append((fp, r))
    points.sort(key=lambda pt: (pt[0], pt[1]))
    recall_at_budget = {}
    for b in budgets:
        qualifying = [r for fp, r in points if fp <= b]
        recall_at_budget[b] = max(qualifying) if qualifying else 0.0
    return FrocCurve(tuple(points), budgets, recall_at_budget)


def mfroc(curve: FrocCurve, budgets: Sequence[float] | None = None) -> float:
    """Arithmetic mean of the recalls at the budget set."""
    budgets = curve.budgets if budgets is None else tuple(float(b) for b in budgets)
    missing = [b for b in budgets if b not in curve.recall_at_budget]
    if missing:
        raise ValueError(f"curve has no recall for budgets {missing}")
    return sum(curve.recall_at_budget[b] for b in budgets) / len(budgets)


def best_f1(
    per_patient,
    radius_factor_band=DEFAULT_RADIUS_FACTOR_BAND,
    min_overlap_frac: float = 0.0,
) -> tuple[float, float]:
    """(threshold, F1) maximizing macro F1 = 2PR/(P+R); ties take the lower threshold."""
    sweeps, thresholds = _sweep(per_patient, radius_factor_band, min_overlap_frac)
    best_t, best = 0.0, 0.0
    first = True
    for t in thresholds:  # ascending, so strict > keeps the lowest tied threshold
        p, r, _ = _macro_at(sweeps, float(t))
        f1 = 2.0 * p * r / (p + r) if p + r > 0 else 0.0
        if first or f1 > best:
            best_t, best, first = float(t), f1, False
    return best_t, best


def recall_at_precision(
    curve: PrCurve, band: Sequence[float] = DEFAULT_PRECISION_BAND
) -> BandRecall:
    """Recall nearest the band midpoint, and mean recall over in-band points.

    When no sweep point has precision inside the band, ``mean_recall`` is
    None and the nearest-point recall serves as the flagged fallback.
    """
    lo, hi = float(band[0]), float(band[1])
    if lo > hi:
        raise ValueError(f"band must satisfy lo <= hi, got [{lo}, {hi}]")
    if not curve.points:
        raise ValueError("empty PR curve")
    mid = 0.5 * (lo + hi)
    # nearest precision to the midpoint, ties resolved toward higher recall
    best = min(curve.points, key=lambda pt: (abs(pt[1] - mid), -pt[2]))
    in_band = [r for _, p, r in curve.points if lo <= p <= hi]
    mean = sum(in_band) / len(in_band) if in_band else None
    return BandRecall(best[2], mean, len(in_band))


def select_operating_threshold(
    curve: PrCurve, target_precision: float = DEFAULT_OPERATING_PRECISION
) -> float:
    """Threshold of the sweep point whose precision is nearest the target."""
    if not 0.0 < target_precision <= 1.0:
        raise ValueError(f"target precision must lie in (0, 1], got {target_precision}")
    if not curve.points:
        raise ValueError("empty PR curve")
    best = min(curve.points, key=lambda pt: (abs(pt[1] - target_precision), -pt[2]))
    return best[0]


def build_report(
    per_patient,
    budgets: Sequence[float] = DEFAULT_FROC_BUDGETS,
    operating_precision: float = DEFAULT_OPERATING_PRECISION,
    precision_band: Sequence[float] = DEFAULT_PRECISION_BAND,
    radius_factor_band=DEFAULT_RADIUS_FACTOR_BAND,
    min_overlap_frac: float = 0.0,
) -> dict:
    """Full evaluation report as a JSON-ready dict."""
    pr = pr_curve(per_patient, radius_factor_band, min_overlap_frac)
    froc = froc_curve(per_patient, budgets, radius_factor_band, min_overlap_frac)
    if not pr.points:  # no candidates anywhere: degenerate but reportable
        return {
            "pr": [],
            "froc": [],
            "froc_at_budgets": {repr(b): 0.0 for b in froc.budgets},
            "mfroc": 0.0,
            "best_f1": {"threshold": None, "f1": 0.0},
            "recall_at_p15": None,
            "mrecall_10_20": None,
            "mrecall_10_20_band_empty": True,
            "operating_threshold": None,
        }
    band = recall_at_precision(pr, precision_band)
    t_f1, f1 = best_f1(per_patient, radius_factor_band, min_overlap_frac)
    return {
        "pr": [
            {"threshold": t, "precision": p, "recall": r} for t, p, r in pr.points
        ],
        "froc": [{"fp_per_patient": fp, "recall": r} for fp, r in froc.points],
        "froc_at_budgets": {repr(b): froc.recall_at_budget[b] for b in froc.budgets},
        "mfroc": mfroc(froc),
        "best_f1": {"threshold": t_f1, "f1": f1},
        "recall_at_p15": band.recall_at_point,
        "mrecall_10_20": band.mean_recall,
        "mrecall_10_20_band_empty": band.n_in_band == 0,
        "operating_threshold": select_operating_threshold(pr, operating_precision),
    }
