"""Training losses for every detector variant."""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from ..scenegen import Scene
from ..suspension import UNDEFINED
from .config import DetectorConfig


def wrapped_angle_distance(a: torch.Tensor, b) -> torch.Tensor:
    """|wrap(a - b)| in [0, pi]."""
    d = torch.remainder(a - b + math.pi, 2 * math.pi) - math.pi
    return d.abs()


def objectness_targets(region_centers: np.ndarray, gt_centers: np.ndarray, delta_pos: float,
                       delta_neg: float):
    """(label, valid, matched gt) per region from its distance to the nearest gt center."""
    r = len(region_centers)
    if len(gt_centers) == 0:
        return np.zeros(r, bool), np.ones(r, bool), np.full(r, -1)
    d = np.linalg.norm(region_centers[:, None, :] - gt_centers[None, :, :], axis=-1)
    nearest = np.argmin(d, axis=1)
    dmin = d[np.arange(r), nearest]
    positive = dmin < delta_pos
    negative = dmin > delta_neg
    return positive, positive | negative, np.where(positive, nearest, -1)


def _zero(dtype):
    return torch.zeros((), dtype=dtype)


def compute_losses(out, scene: Scene, cfg: DetectorConfig, class_sizes: np.ndarray,
                   gt_bins: np.ndarray | None = None) -> dict:
    """Named scalar losses plus their weighted ``total``.

    ``gt_bins`` are per-point orientation bins under the model's group; the
    scene's own labels are used when omitted.
    """
    labels = scene.labels
    dtype = out.proposals.objectness.dtype
    bins = labels.orientation_bin if gt_bins is None else gt_bins
    losses = {}

    # votes: foreground seeds towards their gt center
    src = out.seed_source
    fg = labels.foreground[src]
    if np.any(fg):
        v = out.votes[torch.as_tensor(fg)]
        target = torch.as_tensor(scene.points[src][fg] + labels.vote_target[src][fg], dtype=v.dtype)
        if v.dim() == 3:  # one vote per slot
            target = target[:, None, :]
        losses["vote"] = (v - target).abs().sum(dim=-1).mean()
    else:
        losses["vote"] = _zero(dtype)

    # segmentation over all supervised points
    hs = out.head_source
    seg_target = torch.as_tensor(labels.foreground[hs], dtype=dtype)
    losses["segmentation"] = F.binary_cross_entropy_with_logits(out.head_logits, seg_target)

    # orientation on foreground points only; background bins are ignored
    losses["orientation"] = _zero(dtype)
    if out.head_scores is not None and out.group.order > 1:
        hb = bins[hs]
        known = hb != UNDEFINED
        if np.any(known):
            losses["orientation"] = F.cross_entropy(out.head_scores[torch.as_tensor(known)],
                                                    torch.as_tensor(hb[known]))

    # proposals
    props = out.proposals
    gt = scene.gt_boxes
    gt_centers = np.array([b.center for b in gt]).reshape(-1, 3)
    rc = props.region_center.detach().cpu().numpy().astype(np.float64)
    positive, valid, match = objectness_targets(rc, gt_centers, cfg.delta_pos, cfg.delta_neg)
    if len(props) and np.any(valid):
        v = torch.as_tensor(valid)
        losses["objectness"] = F.binary_cross_entropy_with_logits(
            props.objectness[v], torch.as_tensor(positive[valid], dtype=dtype))
    else:
        losses["objectness"] = _zero(dtype)

    for key in ("center", "size", "yaw", "class"):
        losses[key] = _zero(dtype)
    if np.any(positive):
        p = torch.as_tensor(positive)
        m = match[positive]
        boxes = [gt[i] for i in m]
        gt_c = torch.as_tensor(np.array([b.center for b in boxes]), dtype=props.center.dtype)
        gt_s = torch.as_tensor(np.array([b.size for b in boxes]), dtype=dtype)
        gt_y = torch.as_tensor(np.array([b.yaw for b in boxes]), dtype=props.yaw.dtype)
        gt_cls = torch.as_tensor(np.array([b.class_id for b in boxes]), dtype=torch.long)
        # size is assembled with the gt class template so it does not depend on the argmax
        tmpl = torch.as_tensor(class_sizes[gt_cls.numpy()], dtype=dtype)
        losses["center"] = (props.center[p] - gt_c).abs().sum(dim=1).mean()
        losses["size"] = (tmpl * torch.exp(props.log_size[p]) - gt_s).abs().sum(dim=1).mean()
        losses["yaw"] = wrapped_angle_distance(props.yaw[p], gt_y).mean()
        losses["class"] = F.cross_entropy(props.class_scores[p], gt_cls)
        if out.region_scores is not None and out.group.order > 1:
            from ..rotgroup import angles_to_bins
            target = angles_to_bins([b.yaw for b in boxes], out.group)
            losses["orientation"] = F.cross_entropy(out.region_scores[p], torch.as_tensor(target))

    total = _zero(dtype)
    for key, value in losses.items():
        losses[key] = value.to(dtype)
        total = total + cfg.loss_weights[key] * losses[key]
    losses["total"] = total
    return losses
