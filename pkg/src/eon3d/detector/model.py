"""Vote-based detector with equivariance suspension, in five variants.

Pipeline: orbit backbone -> (suspension) -> voting -> vote grouping ->
region aggregation in the region's object frame -> object-frame proposal
-> scene-frame boxes.

Variants differ only in where orientation is split off:

* ``baseline``: the same code with a trivial group (N = 1).
* ``eon``: decompose the seed orbits (after the last backbone stage).
* ``pre_eon``: decompose after the first stage; the second stage runs on
  invariant features in each anchor's predicted frame.
* ``full_eon``: votes and region features stay orbits; decomposition
  happens on region features right before the proposal head.
* ``ion``: seed orbits are max-pooled; boxes are predicted directly in the
  scene frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..errors import ConfigurationError
from ..eqvnet import (
    DTYPES,
    LayerSpec,
    NetworkParams,
    OrbitFeature,
    SAGeometry,
    affine,
    affine_shapes,
    effective_kernel_width,
    group_conv1d,
    layer_shapes,
    lift_inputs,
    mlp2,
    mlp2_shapes,
    orientation_head,
    sa_geometry,
    segmentation_head,
    set_abstraction_layer,
)
from ..eqvnet import count_parameters, measure_forward_time
from ..geometry import OrientedBox
from ..rotgroup import CyclicGroup, make_group, wrap_angle
from ..scenegen import Scene, get_template
from ..suspension import (
    UNDEFINED,
    DecomposedSeeds,
    decompose,
    first_argmax,
    oracle_overrides,
    region_orientation,
)
from .config import DetectorConfig
from .nms import nms

LOG_SIZE_CLAMP = 3.0


@dataclass
class SceneGeometry:
    stage1: SAGeometry
    stage2: SAGeometry


@dataclass
class Regions:
    center_idx: np.ndarray   # [R] index of the seed whose vote is the region center
    member_idx: np.ndarray   # [R, K] seed indices
    member_mask: np.ndarray  # [R, K]

    def __len__(self):
        return len(self.center_idx)


@dataclass
class Proposals:
    """Per-region outputs; box fields are already in the scene frame."""
    center_inv: torch.Tensor    # [R, 3] object-frame offset from the region center
    log_size: torch.Tensor      # [R, 3]
    yaw_sincos: torch.Tensor    # [R, 2]
    class_scores: torch.Tensor  # [R, num_classes]
    objectness: torch.Tensor    # [R]
    region_center: torch.Tensor  # [R, 3]
    orientation: np.ndarray     # [R] region orientation index (h~)
    low_confidence: np.ndarray  # [R]
    center: torch.Tensor = None  # [R, 3] scene frame
    yaw: torch.Tensor = None     # [R] scene frame
    yaw_inv: torch.Tensor = None  # [R]

    def __len__(self):
        return len(self.orientation)


@dataclass
class ForwardOutput:
    group: CyclicGroup
    seed_source: np.ndarray          # [S] indices into the scene points
    seed_positions: np.ndarray       # [S, 3]
    seed_orbit: torch.Tensor | None  # [S, C, N] when the seeds are still orbits
    seeds: DecomposedSeeds | None
    head_source: np.ndarray          # points supervised by the seg/orientation heads
    head_scores: torch.Tensor | None  # [H, N]
    head_logits: torch.Tensor        # [H]
    votes: torch.Tensor              # [S, 3], or [S, N, 3] for full_eon
    vote_positions: torch.Tensor     # [S, 3] positions used for grouping
    vote_features: torch.Tensor
    regions: Regions
    proposals: Proposals
    region_scores: torch.Tensor | None = None  # full_eon: [R, N]
    stage_orbits: list = field(default_factory=list)

    def detections(self, class_sizes, with_nms: bool = True, nms_iou: float = 0.25):
        boxes = assemble_detections(self.proposals, class_sizes)
        return nms(boxes, nms_iou) if with_nms else boxes


# ---------------------------------------------------------------------------
# stage functions


def vote(seeds: DecomposedSeeds, seed_positions: torch.Tensor, params, name: str = "vote",
         rotate: bool = True):
    """Per-seed vote: object-frame offset rotated by the seed's orientation.

    Vote positions take the dtype of ``seed_positions`` (64-bit in the
    detector, so relative geometry stays exact far from the origin).
    """
    out = mlp2(seeds.f_inv, params, name, final_relu=False)
    delta_inv, residual = out[:, :3].to(seed_positions.dtype), out[:, 3:]
    if rotate:
        k = np.where(seeds.foreground, seeds.orientation, 0)
        k = np.where(k == UNDEFINED, 0, k)
        rot = torch.as_tensor(seeds.group.matrices[k], dtype=delta_inv.dtype)
        delta = torch.einsum("sij,sj->si", rot, delta_inv)
    else:
        delta = delta_inv
    return seed_positions + delta, seeds.f_inv + residual


def group_regions(vote_positions: np.ndarray, num_regions: int, radius: float,
                  max_members: int, candidates: np.ndarray | None = None) -> Regions:
    """Vote clusters: FPS centers over votes, members within ``radius``.

    ``candidates`` (bool mask) restricts which votes may become centers;
    membership always considers every vote.  An empty candidate set falls
    back to all votes.
    """
    from ..eqvnet import ball_query, farthest_point_sample

    n = len(vote_positions)
    if n == 0:
        return Regions(np.zeros(0, np.int64), np.zeros((0, 1), np.int64), np.zeros((0, 1), bool))
    pool = np.arange(n)
    if candidates is not None and np.any(candidates):
        pool = np.flatnonzero(candidates)
    centers = pool[farthest_point_sample(vote_positions[pool], num_regions)]
    idx, mask = ball_query(vote_positions[centers], vote_positions, radius, max_members)
    return Regions(centers, idx, mask)


def aggregate_regions(vote_positions: torch.Tensor, vote_features: torch.Tensor,
                      regions: Regions, frames: np.ndarray, params,
                      name: str = "agg", scale: float = 1.0) -> torch.Tensor:
    """Region feature: max over members of a shared map of (relative position, feature).

    Relative positions are expressed in each region's frame (``frames``
    holds the rotation R_h of every region), so rotating a region's votes
    together with its orientation leaves the feature unchanged.  Offsets
    are divided by ``scale`` (the cluster radius).
    """
    member = torch.as_tensor(regions.member_idx)
    center = torch.as_tensor(regions.center_idx)
    rel = (vote_positions[member] - vote_positions[center][:, None, :]) / scale
    rot = torch.as_tensor(frames, dtype=rel.dtype)
    rel = torch.einsum("rji,rkj->rki", rot, rel).to(vote_features.dtype)
    h = mlp2(torch.cat([rel, vote_features[member]], dim=-1), params, name, final_relu=True)
    h = h.masked_fill(~torch.as_tensor(regions.member_mask)[:, :, None], 0.0)
    return torch.relu(affine(h.amax(dim=1), params, f"{name}_post"))


def split_proposal(raw: torch.Tensor, num_classes: int):
    return (raw[:, 0:3], raw[:, 3:6].clamp(-LOG_SIZE_CLAMP, LOG_SIZE_CLAMP), raw[:, 6:8],
            raw[:, 8:8 + num_classes], raw[:, 8 + num_classes])


def safe_yaw(sincos: torch.Tensor) -> torch.Tensor:
    """atan2 of a (sin, cos) pair; (0, 0) maps to 0 with finite gradients."""
    s, c = sincos[:, 0], sincos[:, 1]
    degenerate = (s == 0) & (c == 0)
    return torch.atan2(s, torch.where(degenerate, torch.ones_like(c), c))


def resume_orientation(props: Proposals, group: CyclicGroup):
    """Fill scene-frame centers and yaws from object-frame proposals."""
    dtype = props.region_center.dtype
    rot = torch.as_tensor(group.matrices[props.orientation], dtype=dtype)
    props.center = props.region_center + torch.einsum("rij,rj->ri", rot, props.center_inv.to(dtype))
    props.yaw_inv = safe_yaw(props.yaw_sincos).to(dtype)
    angles = torch.as_tensor(group.angles()[props.orientation], dtype=dtype)
    props.yaw = props.yaw_inv + angles
    return props


def assemble_detections(props: Proposals, class_sizes: np.ndarray) -> list:
    """Scene-frame boxes: class = argmax score, score = objectness probability."""
    if len(props) == 0:
        return []
    cls = props.class_scores.detach().argmax(dim=1).cpu().numpy()
    log_size = props.log_size.detach().cpu().numpy().astype(np.float64)
    size = class_sizes[cls] * np.exp(log_size)
    center = props.center.detach().cpu().numpy().astype(np.float64)
    yaw = props.yaw.detach().cpu().numpy().astype(np.float64)
    score = torch.sigmoid(props.objectness.detach()).cpu().numpy().astype(np.float64)
    return [OrientedBox(center[i], size[i], wrap_angle(float(yaw[i])), int(cls[i]),
                        float(score[i]), bool(props.low_confidence[i]))
            for i in range(len(props))]


# ---------------------------------------------------------------------------
# model


class Detector:
    def __init__(self, cfg: DetectorConfig, params: NetworkParams | None = None):
        self.cfg = cfg
        self.group = make_group(cfg.model_group_order)
        self.class_sizes = np.array([get_template(name, i).size for i, name in enumerate(cfg.classes)])
        if params is None:
            params = NetworkParams.initialize(self.parameter_shapes(), cfg.seed, DTYPES[cfg.dtype],
                                              meta={"variant": cfg.variant})
        else:
            self.check_params(params)
        self.params = params

    # -- structure ---------------------------------------------------------

    def layer_specs(self) -> dict:
        cfg = self.cfg
        n = self.group.order
        w = effective_kernel_width(cfg.group_kernel, n)
        w2 = 1 if cfg.variant == "pre_eon" else w
        return {
            "sa1": LayerSpec("set_abstraction", 2, cfg.sa1_width, radius=cfg.sa1_radius,
                             max_neighbors=cfg.sa1_neighbors, num_samples=cfg.sa1_samples,
                             hidden=cfg.sa1_width),
            "gc1": LayerSpec("group_conv", cfg.sa1_width, cfg.sa1_width, kernel_width=w,
                             depthwise=cfg.depthwise_group_conv),
            "sa2": LayerSpec("set_abstraction", cfg.sa1_width, cfg.sa2_width, radius=cfg.sa2_radius,
                             max_neighbors=cfg.sa2_neighbors, num_samples=cfg.num_seeds,
                             hidden=cfg.sa2_width),
            "gc2": LayerSpec("group_conv", cfg.sa2_width, cfg.sa2_width, kernel_width=w2,
                             depthwise=cfg.depthwise_group_conv),
        }

    def parameter_shapes(self) -> dict:
        cfg = self.cfg
        shapes = {}
        for name, spec in self.layer_specs().items():
            shapes.update(layer_shapes(name, spec))
        head_in = cfg.sa1_width if cfg.variant == "pre_eon" else cfg.sa2_width
        c, r = cfg.sa2_width, cfg.region_width
        ncls = len(cfg.classes)
        if cfg.uses_orientation and cfg.variant != "full_eon":
            shapes.update(mlp2_shapes("orient", head_in, cfg.head_hidden, 1))
        shapes.update(mlp2_shapes("seg", head_in, cfg.head_hidden, 1))
        shapes.update(mlp2_shapes("vote", c, c, 3 + c))
        shapes.update(mlp2_shapes("agg", 3 + c, r, r))
        shapes.update(affine_shapes("agg_post", r, r))
        if cfg.variant == "full_eon":
            shapes.update(mlp2_shapes("region_orient", r, cfg.head_hidden, 1))
        shapes.update(affine_shapes("prop", r, 8 + ncls + 1))
        return shapes

    def check_params(self, params: NetworkParams):
        expected = self.parameter_shapes()
        if set(params.tensors) != set(expected):
            missing = sorted(set(expected) - set(params.tensors))
            extra = sorted(set(params.tensors) - set(expected))
            raise ConfigurationError(
                f"parameters do not match variant {self.cfg.variant!r}: missing {missing[:4]}, "
                f"unexpected {extra[:4]}")
        for name, (shape, _) in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ConfigurationError(
                    f"parameter {name} has shape {tuple(params[name].shape)}, expected {shape}")

    def num_parameters(self) -> int:
        return count_parameters(self.params)

    # -- geometry -----------------------------------------------------------

    def scene_geometry(self, points: np.ndarray, exhaustive: bool = False) -> SceneGeometry:
        """Parameter-free anchor sampling and neighbourhoods for a scene.

        ``exhaustive`` keeps every point at every stage, which makes anchor
        correspondence under object motion exact.
        """
        specs = self.layer_specs()
        n1 = len(points) if exhaustive else None
        g1 = sa_geometry(points, specs["sa1"], n1)
        pts1 = points[g1.anchor_idx]
        n2 = len(pts1) if exhaustive else None
        g2 = sa_geometry(pts1, specs["sa2"], n2)
        return SceneGeometry(g1, g2)

    # -- forward ------------------------------------------------------------

    def forward(self, scene: Scene, geometry: SceneGeometry | None = None,
                exhaustive: bool = False) -> ForwardOutput:
        cfg, group, p = self.cfg, self.group, self.params
        specs = self.layer_specs()
        dtype = p.dtype
        points = np.asarray(scene.points, dtype=np.float64)
        geo = geometry or self.scene_geometry(points, exhaustive)
        labels = scene.labels
        gt_bins = None
        if cfg.oracle_orientation:
            gt_bins = self._bins_for_group(scene)

        feat = lift_inputs(points, group, dtype)
        s1 = set_abstraction_layer(feat, specs["sa1"], p, "sa1", geo.stage1)
        s1 = group_conv1d(s1, p, "gc1", specs["gc1"].kernel_width, specs["gc1"].depthwise)
        stage_orbits = [s1]

        if cfg.variant == "pre_eon":
            scores1 = orientation_head(s1, p, "orient")
            logits1 = segmentation_head(s1, p, "seg")
            dec1 = self._decompose(s1, scores1, logits1, labels, gt_bins)
            a2 = geo.stage2.anchor_idx
            k = np.where(dec1.foreground[a2], dec1.orientation[a2], 0)
            frames = group.matrices[k]
            inv = OrbitFeature(dec1.f_inv[:, :, None], make_group(1), s1.anchors, s1.source)
            s2 = set_abstraction_layer(inv, specs["sa2"], p, "sa2", geo.stage2, frame_rotations=frames)
            s2 = group_conv1d(s2, p, "gc2", 1, specs["gc2"].depthwise)
            stage_orbits.append(s2)
            seeds = DecomposedSeeds(s2.values[:, :, 0], dec1.orientation[a2], scores1[a2],
                                    dec1.foreground[a2], group)
            seed_orbit = None
            head_source, head_scores, head_logits = s1.source, scores1, logits1
        else:
            s2 = set_abstraction_layer(s1, specs["sa2"], p, "sa2", geo.stage2)
            s2 = group_conv1d(s2, p, "gc2", specs["gc2"].kernel_width, specs["gc2"].depthwise)
            stage_orbits.append(s2)
            seed_orbit = s2.values
            head_logits = segmentation_head(s2, p, "seg")
            head_source = s2.source
            if cfg.variant in ("eon", "baseline"):
                if cfg.uses_orientation:
                    head_scores = orientation_head(s2, p, "orient")
                else:
                    head_scores = torch.zeros(len(s2.source), group.order, dtype=dtype)
                seeds = self._decompose(s2, head_scores, head_logits, labels, gt_bins)
            elif cfg.variant == "ion":
                head_scores = None
                fg = (head_logits.detach() > cfg.segmentation_threshold).cpu().numpy()
                seeds = DecomposedSeeds(s2.slot_max(), np.full(len(fg), UNDEFINED), None, fg, group)
            else:  # full_eon
                head_scores = None
                seeds = None

        seed_source = s2.source
        seed_pos_np = points[seed_source]
        seed_pos = torch.as_tensor(seed_pos_np, dtype=torch.float64)

        # exhaustive runs make every seed a region center so regions follow objects
        num_regions = len(seed_source) if exhaustive else cfg.num_regions
        region_scores = None
        if cfg.variant == "full_eon":
            fg = (head_logits.detach() > cfg.segmentation_threshold).cpu().numpy()
            out = self._full_eon_tail(s2, seed_pos, num_regions, fg)
            votes, vote_pos, vote_feat, regions, region_feat, orient, low, region_scores = out
        else:
            votes, vote_feat = vote(seeds, seed_pos, p, rotate=cfg.variant != "ion")
            vote_pos = votes
            regions = group_regions(vote_pos.detach().cpu().numpy().astype(np.float64),
                                    num_regions, cfg.cluster_radius, cfg.max_region_members,
                                    seeds.foreground)
            if cfg.variant == "ion":
                orient = np.zeros(len(regions), np.int64)
                low = np.zeros(len(regions), bool)
            else:
                orient, low = self._region_orientations(seeds, regions)
            region_feat = aggregate_regions(vote_pos, vote_feat, regions, group.matrices[orient], p,
                                            scale=cfg.cluster_radius)

        raw = affine(region_feat, p, "prop")
        c_inv, log_size, sincos, cls_scores, obj = split_proposal(raw, len(cfg.classes))
        props = Proposals(c_inv, log_size, sincos, cls_scores, obj,
                          vote_pos[torch.as_tensor(regions.center_idx)], orient, low)
        resume_orientation(props, group)
        return ForwardOutput(group, seed_source, seed_pos_np, seed_orbit, seeds, head_source,
                             head_scores, head_logits, votes, vote_pos, vote_feat, regions, props,
                             region_scores, stage_orbits)

    def _bins_for_group(self, scene: Scene) -> np.ndarray:
        """Ground-truth orientation bins of every point under this model's group."""
        from ..rotgroup import angles_to_bins
        from ..geometry import points_in_box

        if scene.group_order == self.group.order:
            return scene.labels.orientation_bin
        bins = np.full(scene.num_points, UNDEFINED, dtype=np.int64)
        if not scene.gt_boxes:
            return bins
        box_bins = angles_to_bins([b.yaw for b in scene.gt_boxes], self.group)
        owner = np.full(scene.num_points, -1)
        for i, box in enumerate(scene.gt_boxes):
            owner[(owner < 0) & points_in_box(scene.points, box)] = i
        fg = scene.labels.foreground
        bins[fg] = box_bins[owner[fg]]
        return bins

    def _decompose(self, orbit: OrbitFeature, scores, logits, labels, gt_bins):
        cfg = self.cfg
        fg = (logits.detach() > cfg.segmentation_threshold).cpu().numpy()
        dec = decompose(orbit.values, scores, fg, self.group)
        if cfg.oracle_orientation or cfg.oracle_segmentation:
            src = orbit.source
            dec = oracle_overrides(
                dec, orbit.values,
                gt_foreground=None if labels is None else labels.foreground[src],
                gt_bins=None if gt_bins is None else gt_bins[src],
                use_gt_orientation=cfg.oracle_orientation,
                use_gt_segmentation=cfg.oracle_segmentation)
        return dec

    def _region_orientations(self, seeds: DecomposedSeeds, regions: Regions):
        n = len(regions)
        orient = np.zeros(n, np.int64)
        low = np.zeros(n, bool)
        if n == 0:
            return orient, low
        probs = torch.softmax(seeds.orientation_scores.detach(), dim=1).cpu().numpy()
        for r in range(n):
            members = regions.member_idx[r][regions.member_mask[r]]
            bins = seeds.orientation[members]
            conf = [probs[m, b] if b != UNDEFINED else 0.0 for m, b in zip(members, bins)]
            central = None
            if self.cfg.region_rule == "central_point":
                central = int(np.flatnonzero(members == regions.center_idx[r])[0])
            h, flag = region_orientation(bins, conf, self.cfg.region_rule, central_index=central)
            orient[r], low[r] = h, flag
        return orient, low

    def _full_eon_tail(self, seeds: OrbitFeature, seed_pos: torch.Tensor, num_regions: int,
                       foreground: np.ndarray):
        cfg, group, p = self.cfg, self.group, self.params
        dtype = seed_pos.dtype
        x = seeds.values.permute(0, 2, 1)                     # [S, N, C]
        out = mlp2(x, p, "vote", final_relu=False)
        delta_inv, residual = out[..., :3].to(dtype), out[..., 3:]
        rot = torch.as_tensor(group.matrices, dtype=dtype)     # R_g
        votes = seed_pos[:, None, :] + torch.einsum("gij,sgj->sgi", rot, delta_inv)
        feats = x + residual                                   # [S, N, C]
        vote_pos = votes.mean(dim=1)
        regions = group_regions(vote_pos.detach().cpu().numpy().astype(np.float64),
                                num_regions, cfg.cluster_radius, cfg.max_region_members, foreground)
        member = torch.as_tensor(regions.member_idx)
        center = torch.as_tensor(regions.center_idx)
        rel = (vote_pos[member] - vote_pos[center][:, None, :]) / cfg.cluster_radius  # [R, K, 3]
        rel = torch.einsum("gji,rkj->rkgi", rot, rel).to(x.dtype)  # R_g^{-1} per slot
        h = mlp2(torch.cat([rel, feats[member]], dim=-1), p, "agg", final_relu=True)
        h = h.masked_fill(~torch.as_tensor(regions.member_mask)[:, :, None, None], 0.0)
        region_orbit = torch.relu(affine(h.amax(dim=1), p, "agg_post"))  # [R, N, C]
        scores = mlp2(region_orbit, p, "region_orient", final_relu=False).squeeze(-1)
        orient = first_argmax(scores)
        idx = torch.as_tensor(orient)[:, None, None].expand(-1, 1, region_orbit.shape[2])
        region_feat = region_orbit.gather(1, idx).squeeze(1)
        low = np.zeros(len(regions), bool)
        return votes, vote_pos, feats, regions, region_feat, orient, low, scores

    # -- inference helpers --------------------------------------------------

    def detect(self, scene: Scene, geometry=None, with_nms: bool = True, exhaustive: bool = False):
        with torch.no_grad():
            out = self.forward(scene, geometry, exhaustive)
        return out.detections(self.class_sizes, with_nms, self.cfg.nms_iou)

    def forward_time(self, scene: Scene, repeats: int = 5) -> float:
        return measure_forward_time(lambda: self.forward(scene), repeats)
