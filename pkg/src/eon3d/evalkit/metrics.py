"""Detection matching, average precision and orientation accuracy."""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from ..geometry import rotated_iou
from ..rotgroup import angle_to_bin, make_group


def ranking(scores) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(dets: list, gts: list, iou_thr: float):
    """TP flags (in descending-score order) and the matched gt index per detection.

    Returns ``(order, tp, matched)`` where ``order`` ranks ``dets``,
    ``tp[i]`` refers to ``dets[order[i]]`` and ``matched[i]`` is a gt index
    or -1.
    """
    order = ranking([d.score for d in dets])
    taken = np.zeros(len(gts), bool)
    tp = np.zeros(len(dets), bool)
    matched = np.full(len(dets), -1)
    for rank, i in enumerate(order):
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(dets[i], gt)
            if iou >= iou_thr and iou > best_iou:
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            tp[rank] = True
            matched[rank] = best
    return order, tp, matched


def average_precision(flags, scores, num_gt: int) -> float:
    """All-point interpolated AP of a ranked list of TP/FP flags.

    Detections are ranked by descending score (stable).  Precision at each
    recall level is replaced by the best precision at any recall at least as
    high; AP is the sum of envelope precision times recall increment.
    """
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return 1.0 if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    flags = flags[ranking(scores)]
    # exact rational arithmetic, rounded once at the end
    precision, tp = [], 0
    for k, f in enumerate(flags, start=1):
        tp += int(f)
        precision.append(Fraction(tp, k))
    total, best = Fraction(0), Fraction(0)
    for p, f in zip(reversed(precision), flags[::-1]):
        best = max(best, p)
        if f:  # every TP raises recall by exactly 1/num_gt
            total += best
    return float(total / num_gt)


def orientation_accuracy(pairs: list, group_order: int):
    """Fraction of (det, gt) pairs whose yaws fall in the same group bin; None if empty."""
    if not pairs:
        return None
    group = make_group(group_order)
    hits = sum(angle_to_bin(d.yaw, group) == angle_to_bin(g.yaw, group) for d, g in pairs)
    return hits / len(pairs)
