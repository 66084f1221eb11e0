"""Lesion-level and patient-level detection metrics.

A detection map is a list of disjoint connected clusters, each scored with
the mean lesion probability of its voxels. Predictions are matched one to
one against ground-truth lesions in descending score order; a match needs
an IoU of at least ``iou_min``. Because that greedy matching only depends on
higher-scored clusters, the matching at any score threshold is the
restriction of the matching computed once on all clusters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import LESION, ValidationError, connected_components, iou

MIN_LESION_VOXELS = 15
IOU_MIN = 0.1


@dataclass
class LesionCluster:
    voxels: np.ndarray  # sorted flat indices
    score: float

    @property
    def volume_voxels(self) -> int:
        return int(len(self.voxels))


@dataclass
class DetectionMap:
    clusters: list[LesionCluster]
    case_id: str = ""


@dataclass
class MatchResult:
    pairs: list[tuple[int, int, float]]  # (prediction index, gt index, iou)
    unmatched_pred: list[int]
    unmatched_gt: list[int]


@dataclass
class CurvePoint:
    threshold: float
    sensitivity: float | None
    fp_per_patient: float
    precision: float
    recall: float | None


@dataclass
class Case:
    """Detection map paired with its ground-truth lesions."""

    detections: DetectionMap
    gt: list[np.ndarray] = field(default_factory=list)


def extract_lesions(prob: np.ndarray, threshold: float = 0.5, min_voxels: int = MIN_LESION_VOXELS,
                    connectivity: str = "full", case_id: str = "",
                    lesion_class: int = LESION) -> DetectionMap:
    """Threshold the lesion channel, split into components and score each one.

    Args:
        prob: softmax volume ``(C, *spatial)`` or a bare lesion-probability map.
        threshold: binarisation level in (0, 1).
        min_voxels: components smaller than this are discarded.
    """
    if not 0 < threshold < 1:
        raise ValidationError("threshold must lie in (0, 1)")
    lesion = prob[lesion_class] if prob.ndim == 4 else prob
    flat = lesion.ravel()
    clusters = [LesionCluster(c, float(flat[c].mean()))
                for c in connected_components(lesion >= threshold, connectivity)
                if len(c) >= min_voxels]
    return DetectionMap(clusters, case_id)


def gt_lesions(labels: np.ndarray, connectivity: str = "full") -> list[np.ndarray]:
    return connected_components(np.asarray(labels) == LESION, connectivity)


def _order(clusters: Sequence[LesionCluster]) -> list[int]:
    return sorted(range(len(clusters)), key=lambda i: (-clusters[i].score, i))


def match_lesions(pred: DetectionMap | Sequence[LesionCluster], gt: Sequence[np.ndarray],
                  iou_min: float = IOU_MIN) -> MatchResult:
    """Greedy one-to-one matching, highest-scored prediction first."""
    clusters = pred.clusters if isinstance(pred, DetectionMap) else list(pred)
    free = set(range(len(gt)))
    pairs = []
    unmatched = []
    for i in _order(clusters):
        best, best_iou = None, -1.0
        for j in sorted(free):
            v = iou(clusters[i].voxels, gt[j])
            if v >= iou_min and v > best_iou:
                best, best_iou = j, v
        if best is None:
            unmatched.append(i)
        else:
            free.discard(best)
            pairs.append((i, best, best_iou))
    return MatchResult(pairs, unmatched, sorted(free))


def _scored_outcomes(cases: Sequence[Case], iou_min: float):
    # (score, is_tp) for every cluster of every case plus the total lesion count
    scores, tps = [], []
    n_gt = 0
    for case in cases:
        n_gt += len(case.gt)
        m = match_lesions(case.detections, case.gt, iou_min)
        tp = np.zeros(len(case.detections.clusters), dtype=bool)
        tp[[p[0] for p in m.pairs]] = True
        scores.extend(c.score for c in case.detections.clusters)
        tps.extend(tp.tolist())
    return np.asarray(scores, dtype=np.float64), np.asarray(tps, dtype=bool), n_gt


def _threshold_table(cases, iou_min):
    scores, tps, n_gt = _scored_outcomes(cases, iou_min)
    if scores.size == 0:
        return np.empty(0), np.empty(0), np.empty(0), n_gt
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], tps[order]
    tp_cum = np.cumsum(t)
    fp_cum = np.cumsum(~t)
    last = np.r_[s[1:] != s[:-1], True]  # final position of each distinct score
    return s[last], tp_cum[last], fp_cum[last], n_gt


def froc(cases: Sequence[Case], iou_min: float = IOU_MIN) -> list[CurvePoint]:
    """Operating points at every distinct cluster score, highest threshold first."""
    if not cases:
        raise ValidationError("froc needs at least one case")
    thr, tp, fp, n_gt = _threshold_table(cases, iou_min)
    points = []
    for t, a, b in zip(thr, tp, fp):
        sens = a / n_gt if n_gt else None
        points.append(CurvePoint(float(t), sens, b / len(cases), a / (a + b), sens))
    return points


def sensitivity_at_fp(curve: Sequence[CurvePoint], fp_budget: float = 1.0) -> tuple[float, bool]:
    """Best sensitivity within the FP budget; the flag marks curves that never reach it.

    A flagged curve reports its maximum sensitivity instead.
    """
    if not curve:
        raise ValidationError("empty FROC curve")
    sens = [p.sensitivity or 0.0 for p in curve]
    if max(p.fp_per_patient for p in curve) < fp_budget:
        return max(sens), True
    within = [s for s, p in zip(sens, curve) if p.fp_per_patient <= fp_budget]
    return (max(within) if within else 0.0), False


def average_precision(cases: Sequence[Case], iou_min: float = IOU_MIN) -> float:
    """Step-wise area under the lesion-level precision-recall curve."""
    thr, tp, fp, n_gt = _threshold_table(cases, iou_min)
    if n_gt == 0:
        raise ValidationError("average precision needs at least one ground-truth lesion")
    if thr.size == 0:
        return 0.0
    recall = tp / n_gt
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def patient_scores(cases: Sequence[Case]) -> list[tuple[float, bool]]:
    """Maximum cluster score per patient (0 without clusters) and its label."""
    return [(max((c.score for c in case.detections.clusters), default=0.0), bool(case.gt))
            for case in cases]


def auroc(scores: Sequence[tuple[float, bool]]) -> float | None:
    """Mann-Whitney estimate of P(positive > negative) with half credit for ties."""
    s = np.array([x for x, _ in scores], dtype=np.float64)
    y = np.array([bool(l) for _, l in scores])
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        return None
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(allv.size)
    sorted_v = allv[order]
    # average ranks over ties
    i = 0
    while i < sorted_v.size:
        j = i
        while j + 1 < sorted_v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[:pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Dice overlap of two boolean masks; two empty masks agree perfectly."""
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def relative_change(test_value: float, val_value: float) -> float | None:
    """Test-set score as a ratio of the in-distribution validation score."""
    if val_value is None or test_value is None or val_value <= 0:
        return None
    return test_value / val_value


def summarize(cases: Sequence[Case], iou_min: float = IOU_MIN, fp_budget: float = 1.0) -> dict:
    """All detection metrics of one model on one dataset; undefined values are None."""
    curve = froc(cases, iou_min)
    n_gt = sum(len(c.gt) for c in cases)
    n_pred = sum(len(c.detections.clusters) for c in cases)
    if curve and n_gt:
        sens, dagger = sensitivity_at_fp(curve, fp_budget)
        max_sens = curve[-1].sensitivity
    elif n_gt:
        sens, dagger, max_sens = 0.0, True, 0.0
    else:
        sens, dagger, max_sens = None, None, None
    return {
        "sensitivity_at_1fp": sens,
        "dagger": dagger,
        "AP": average_precision(cases, iou_min) if n_gt else None,
        "AUROC": auroc(patient_scores(cases)),
        "max_sensitivity": max_sens,
        "avg_fp_per_patient": (curve[-1].fp_per_patient if curve else 0.0) if n_pred else 0.0,
    }
