"""Equivariance suspension: split seed orbits into orientation + invariant feature.

Foreground seeds keep the orbit slot picked by the orientation head (their
object-frame feature); background seeds get the slot-wise max, which is
invariant to any rotation of the orbit.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np
import torch

from .errors import ConfigurationError
from .rotgroup import CyclicGroup, GroupElement

UNDEFINED = -1


@dataclass
class DecomposedSeeds:
    f_inv: torch.Tensor               # [P, C]
    orientation: np.ndarray           # [P] slot index, UNDEFINED on background
    orientation_scores: torch.Tensor  # [P, N]
    foreground: np.ndarray            # [P] bool
    group: CyclicGroup

    def element(self, i: int) -> GroupElement | None:
        k = int(self.orientation[i])
        return None if k == UNDEFINED else GroupElement(k, self.group)


def _as_tensor(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def first_argmax(scores: torch.Tensor) -> np.ndarray:
    """Row-wise argmax with ties resolved to the smallest index."""
    s = scores.detach().cpu().numpy()
    return np.argmax(s, axis=1).astype(np.int64)  # numpy returns the first maximum


def _slice_or_pool(values: torch.Tensor, orientation: np.ndarray, foreground: np.ndarray):
    pooled = values.amax(dim=2)
    if not np.any(foreground):
        return pooled
    idx = torch.as_tensor(np.where(foreground, orientation, 0))
    picked = values.gather(2, idx[:, None, None].expand(-1, values.shape[1], 1)).squeeze(2)
    fg = torch.as_tensor(foreground)[:, None]
    return torch.where(fg, picked, pooled)


def decompose(values, scores, foreground, group: CyclicGroup) -> DecomposedSeeds:
    """Split an orbit ``values`` [P, C, N]."""
    values = _as_tensor(values)
    scores = _as_tensor(scores, values.dtype)
    foreground = np.asarray(foreground, dtype=bool)
    if values.shape[0] != scores.shape[0] or values.shape[2] != scores.shape[1]:
        raise ValueError(f"orbit {tuple(values.shape)} and scores {tuple(scores.shape)} disagree")
    best = first_argmax(scores)
    orientation = np.where(foreground, best, UNDEFINED)
    f_inv = _slice_or_pool(values, orientation, foreground)
    return DecomposedSeeds(f_inv, orientation, scores, foreground, group)


def oracle_overrides(decomposed: DecomposedSeeds, values, gt_foreground=None, gt_bins=None,
                     use_gt_orientation: bool = False,
                     use_gt_segmentation: bool = False) -> DecomposedSeeds:
    """Replace predicted segmentation and/or orientation by ground truth.

    ``values`` is the orbit the decomposition came from; the invariant
    feature is re-sliced so it stays consistent with the new fields.
    """
    if not (use_gt_orientation or use_gt_segmentation):
        return decomposed
    if use_gt_segmentation and gt_foreground is None:
        raise ConfigurationError("oracle segmentation requested but no foreground labels given")
    if use_gt_orientation and gt_bins is None:
        raise ConfigurationError("oracle orientation requested but no orientation labels given")
    values = _as_tensor(values)
    foreground = decomposed.foreground.copy()
    if use_gt_segmentation:
        foreground = np.asarray(gt_foreground, dtype=bool).copy()
    orientation = first_argmax(decomposed.orientation_scores)
    if use_gt_orientation:
        gt_bins = np.asarray(gt_bins)
        known = gt_bins >= 0
        orientation = np.where(known, gt_bins, orientation)
    orientation = np.where(foreground, orientation, UNDEFINED)
    f_inv = _slice_or_pool(values, orientation, foreground)
    return replace(decomposed, f_inv=f_inv, orientation=orientation, foreground=foreground)


def region_orientation(orientations, score_sums=None, mode: str = "mode", group: CyclicGroup = None,
                       central_index: int | None = None):
    """Orientation of a region from its members' hypotheses.

    ``orientations`` lists member slot indices (``UNDEFINED`` for background
    members, which never vote).  ``score_sums`` gives each member's
    orientation confidence; per-bin sums break count ties, then the smaller
    index wins.  Returns ``(bin, low_confidence)``; a region without
    foreground members falls back to the identity and is flagged.
    """
    orientations = [int(o) for o in orientations]
    if mode == "central_point":
        if central_index is None:
            raise ConfigurationError("central_point rule needs a central member index")
        k = orientations[central_index]
        if k == UNDEFINED:
            return _element(0, group), True
        return _element(k, group), False
    if mode != "mode":
        raise ConfigurationError(f"unknown region orientation rule {mode!r}")
    weights = list(score_sums) if score_sums is not None else [0.0] * len(orientations)
    counts = Counter()
    sums: dict[int, float] = {}
    for k, w in zip(orientations, weights):
        if k == UNDEFINED:
            continue
        counts[k] += 1
        sums[k] = sums.get(k, 0.0) + float(w)
    if not counts:
        return _element(0, group), True
    top = max(counts.values())
    tied = [k for k, c in counts.items() if c == top]
    best = min(tied, key=lambda k: (-sums[k], k))
    return _element(best, group), len(tied) > 1


def _element(k, group):
    return GroupElement(k, group) if group is not None else k
