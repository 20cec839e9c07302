"""Object-level equivariance diagnostics.

Rotate one object about its box center by every group element, rerun the
detector with exhaustive sampling (every point is an anchor, every
foreground seed a region center) and compare against the unrotated run at
corresponding points.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import InvalidArgumentError
from ..geometry import points_in_box, rotate_points_about
from ..rotgroup import GroupElement, rotation_matrix, shift_orbit, wrap_angle
from ..scenegen import Scene
from ..suspension import UNDEFINED

# bounds asserted by the probe (32-bit runs; 64-bit runs use the tighter orbit bound)
ORBIT_TOL = {torch.float32: 1e-5, torch.float64: 1e-10}
YAW_TOL = 1e-5
SIZE_TOL = 1e-4
CENTER_TOL = 1e-4


@dataclass
class ProbeRow:
    g0: int
    angle: float
    orbit_residual: float
    shift_correct_rate: float | None
    yaw_delta_error: float | None
    size_drift: float | None
    center_error: float | None
    static_center_drift: float
    static_yaw_drift: float
    unmatched_regions: int
    object_regions: int


@dataclass
class ProbeReport:
    variant: str
    group_order: int
    object_id: int
    applicable: bool
    clearance: float
    required_clearance: float
    asserted: bool
    rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def object_mask(scene: Scene, object_id: int) -> np.ndarray:
    box = scene.gt_boxes[object_id]
    return (scene.object_id == object_id) | ((scene.object_id < 0) & points_in_box(scene.points, box))


def rotate_object(scene: Scene, object_id: int, g0: GroupElement) -> Scene:
    """Scene with one object (points and box) rotated about its box center by ``g0``."""
    box = scene.gt_boxes[object_id]
    mask = object_mask(scene, object_id)
    points = scene.points.copy()
    points[mask] = rotate_points_about(points[mask], box.center, g0.angle, rotation_matrix(g0))
    boxes = list(scene.gt_boxes)
    boxes[object_id] = box.with_(yaw=box.yaw + g0.angle)
    object_id_arr = scene.object_id.copy()
    object_id_arr[mask] = object_id
    class_id = scene.class_id.copy()
    class_id[mask] = box.class_id
    return Scene(points, object_id_arr, class_id, boxes, scene.group_order)


def clearance(scene: Scene, mask: np.ndarray) -> float:
    """Distance from the masked points to the nearest other point."""
    inside, outside = scene.points[mask], scene.points[~mask]
    if len(inside) == 0 or len(outside) == 0:
        return math.inf
    best = math.inf
    for chunk in np.array_split(inside, max(1, len(inside) // 256)):
        d = np.linalg.norm(chunk[:, None, :] - outside[None, :, :], axis=-1)
        best = min(best, float(d.min()))
    return best


def required_clearance(cfg) -> float:
    """Sum of the backbone radii and the vote-cluster radius."""
    return cfg.sa1_radius + cfg.sa2_radius + cfg.cluster_radius


def bounds_asserted(cfg) -> bool:
    if cfg.variant == "full_eon":
        return True
    return cfg.variant in ("eon", "pre_eon") and cfg.oracle_orientation and cfg.oracle_segmentation


def _probe_orbit(out):
    """The last orbit that still carries the full group (per source point)."""
    order = out.group.order
    for orbit in reversed(out.stage_orbits):
        if orbit.values.shape[2] == order:
            return orbit.values, orbit.source
    return None, None


def _region_table(out, boxes):
    """Map the source point of each region center to (region index, box)."""
    src = out.seed_source[out.regions.center_idx]
    return {int(s): (r, boxes[r]) for r, s in enumerate(src)}


def _seed_orientation(out):
    if out.seeds is None:
        return None
    return out.seeds.orientation


def equivariance_probe(detector, scene: Scene, object_id: int) -> ProbeReport:
    from ..detector.model import assemble_detections

    cfg = detector.cfg
    if not 0 <= object_id < len(scene.gt_boxes):
        raise InvalidArgumentError(f"object {object_id} not in scene ({len(scene.gt_boxes)} objects)")
    group = detector.group
    mask = object_mask(scene, object_id)
    if not np.any(mask):
        raise InvalidArgumentError(f"object {object_id} has no points")
    need = required_clearance(cfg)
    moved_scenes = [rotate_object(scene, object_id, g) for g in group]
    gap = min(clearance(s, object_mask(s, object_id)) for s in moved_scenes)
    applicable = gap > need
    report = ProbeReport(cfg.variant, group.order, object_id, applicable, gap, need,
                         applicable and bounds_asserted(cfg))
    pivot = scene.gt_boxes[object_id].center
    obj_src = set(np.flatnonzero(mask).tolist())

    with torch.no_grad():
        base = detector.forward(scene, exhaustive=True)
    base_boxes = assemble_detections(base.proposals, detector.class_sizes)
    base_orbit, base_orbit_src = _probe_orbit(base)
    base_regions = _region_table(base, base_boxes)
    base_orient = _seed_orientation(base)
    orbit_tol = ORBIT_TOL.get(detector.params.dtype, 1e-5)

    for g0, moved_scene in zip(group, moved_scenes):
        k0 = g0.index
        with torch.no_grad():
            moved = detector.forward(moved_scene, exhaustive=True)
        moved_boxes = assemble_detections(moved.proposals, detector.class_sizes)
        rot = rotation_matrix(g0)

        # (a) orbit shift residual at object points
        residual = 0.0
        orbit, orbit_src = _probe_orbit(moved)
        if orbit is not None:
            row_of = {int(s): i for i, s in enumerate(orbit_src)}
            rows_b = [i for i, s in enumerate(base_orbit_src) if int(s) in obj_src and int(s) in row_of]
            rows_m = [row_of[int(base_orbit_src[i])] for i in rows_b]
            if rows_b:
                expect = shift_orbit(base_orbit[rows_b], k0)
                residual = float((orbit[rows_m] - expect).abs().max())

        # (b) orientation hypotheses follow the rotation
        rate = None
        m_orient = _seed_orientation(moved)
        if cfg.variant == "full_eon":
            pairs = []
            moved_regions = _region_table(moved, moved_boxes)
            for s, (r, _) in base_regions.items():
                if s in obj_src and s in moved_regions:
                    pairs.append((base.proposals.orientation[r], moved.proposals.orientation[moved_regions[s][0]]))
        elif base_orient is not None and cfg.uses_orientation:
            seed_row = {int(s): i for i, s in enumerate(moved.seed_source)}
            pairs = [(base_orient[i], m_orient[seed_row[int(s)]])
                     for i, s in enumerate(base.seed_source)
                     if int(s) in obj_src and int(s) in seed_row and base_orient[i] != UNDEFINED]
        else:
            pairs = []
        if pairs:
            rate = sum(int(m) == (int(b) + k0) % group.order for b, m in pairs) / len(pairs)

        # (c, d) boxes of regions centered on the object; drift elsewhere
        moved_regions = _region_table(moved, moved_boxes)
        yaw_err, size_drift, center_err = [], [], []
        static_c, static_y = [0.0], [0.0]
        unmatched, n_obj = 0, 0
        for s, (_, b) in base_regions.items():
            if s not in moved_regions:
                unmatched += 1
                continue
            m = moved_regions[s][1]
            if s in obj_src:
                n_obj += 1
                yaw_err.append(abs(wrap_angle(m.yaw - b.yaw - g0.angle)))
                size_drift.append(float(np.linalg.norm(m.size - b.size)))
                expect = rot @ (b.center - pivot) + pivot
                center_err.append(float(np.linalg.norm(m.center - expect)))
            else:
                static_c.append(float(np.linalg.norm(m.center - b.center)))
                static_y.append(abs(wrap_angle(m.yaw - b.yaw)))
        unmatched += len(set(moved_regions) - set(base_regions))
        row = ProbeRow(k0, g0.angle, residual, rate,
                       max(yaw_err) if yaw_err else None,
                       max(size_drift) if size_drift else None,
                       max(center_err) if center_err else None,
                       max(static_c), max(static_y), unmatched, n_obj)
        report.rows.append(row)
        if report.asserted:
            report.failures.extend(_check(row, orbit_tol))
    return report


def _check(row: ProbeRow, orbit_tol: float) -> list:
    bad = []
    tag = f"g0={row.g0}"
    if row.orbit_residual > orbit_tol:
        bad.append(f"{tag}: orbit residual {row.orbit_residual:.3g} > {orbit_tol:g}")
    if row.shift_correct_rate is not None and row.shift_correct_rate < 1.0:
        bad.append(f"{tag}: orientation shift correctness {row.shift_correct_rate:.3f} < 1")
    if row.object_regions == 0:
        bad.append(f"{tag}: no region centered on the object")
    if row.yaw_delta_error is not None and row.yaw_delta_error > YAW_TOL:
        bad.append(f"{tag}: yaw delta error {row.yaw_delta_error:.3g} > {YAW_TOL:g}")
    if row.size_drift is not None and row.size_drift > SIZE_TOL:
        bad.append(f"{tag}: size drift {row.size_drift:.3g} > {SIZE_TOL:g}")
    if row.center_error is not None and row.center_error > CENTER_TOL:
        bad.append(f"{tag}: center error {row.center_error:.3g} > {CENTER_TOL:g}")
    if row.static_center_drift > CENTER_TOL:
        bad.append(f"{tag}: static center drift {row.static_center_drift:.3g} > {CENTER_TOL:g}")
    if row.unmatched_regions:
        bad.append(f"{tag}: {row.unmatched_regions} regions have no counterpart")
    return bad
