"""Synthetic tabletop-free indoor scenes with oriented, asymmetric objects.

Each scene is a floor patch with two wall strips plus a handful of objects
drawn from rotationally asymmetric templates, so every object has a
well-defined orientation bin for any group order up to 8.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import (
    GenerationFailure,
    GroupMismatchError,
    InvalidArgumentError,
    LabelConsistencyError,
    SceneFormatError,
)
from .geometry import OrientedBox, points_in_box, rotate_points_about
from .rotgroup import angles_to_bins, make_group, rotation_matrix, wrap_angle

FORMAT_VERSION = 1
SCENE_SUFFIX = ".scene.json"
MAX_REJECTIONS = 1000
ASYMMETRY_MIN_CHAMFER = 0.05


# ---------------------------------------------------------------------------
# templates


def _cuboid_surface(rng, lo, hi, n):
    """Points on the top and four side faces of an axis-aligned cuboid."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    ext = hi - lo
    areas = np.array([ext[0] * ext[1], ext[1] * ext[2], ext[1] * ext[2],
                      ext[0] * ext[2], ext[0] * ext[2]])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    pts = rng.uniform(lo, hi, size=(n, 3))
    pts[face == 0, 2] = hi[2]
    pts[face == 1, 0] = lo[0]
    pts[face == 2, 0] = hi[0]
    pts[face == 3, 1] = lo[1]
    pts[face == 4, 1] = hi[1]
    return pts


def _union_of_cuboids(rng, parts, n):
    vols = np.array([np.prod(np.subtract(hi, lo)) ** (2 / 3) for lo, hi in parts])
    counts = np.round(n * 1.5 * vols / vols.sum()).astype(int) + 1
    pts = np.vstack([_cuboid_surface(rng, lo, hi, c) for (lo, hi), c in zip(parts, counts)])
    interior = np.zeros(len(pts), bool)
    for lo, hi in parts:
        interior |= np.all((pts > np.add(lo, 1e-6)) & (pts < np.subtract(hi, 1e-6)), axis=1)
    pts = pts[~interior]
    return pts[rng.permutation(len(pts))[:n]]


def _l_plate(rng, n):
    parts = [((-0.5, -0.4, 0.0), (0.5, -0.1, 0.5)),
             ((-0.5, -0.4, 0.0), (-0.2, 0.4, 0.5))]
    return _union_of_cuboids(rng, parts, n)


def _t_plate(rng, n):
    parts = [((-0.6, 0.15, 0.0), (0.6, 0.45, 0.7)),
             ((-0.15, -0.45, 0.0), (0.15, 0.15, 0.7))]
    return _union_of_cuboids(rng, parts, n)


def _wedge_bar(rng, n):
    # thin bar whose height rises linearly along +x
    lx, hy = 0.8, 0.12

    def top(x):
        return 0.2 + 0.6 * (x + lx) / (2 * lx)

    out = []
    while sum(len(o) for o in out) < n:
        m = 2 * n
        face = rng.choice(4, size=m, p=[0.4, 0.25, 0.25, 0.1])
        x = rng.uniform(-lx, lx, m)
        y = rng.uniform(-hy, hy, m)
        z = rng.uniform(0, 0.8, m)
        pts = np.stack([x, y, z], 1)
        pts[face == 0, 2] = top(x[face == 0])
        pts[face == 1, 1] = -hy
        pts[face == 2, 1] = hy
        pts[face == 3, 0] = np.where(rng.random(np.count_nonzero(face == 3)) < 0.5, -lx, lx)
        keep = pts[:, 2] <= top(pts[:, 0]) + 1e-12
        out.append(pts[keep])
    return np.vstack(out)[:n]


_TEMPLATE_BUILDERS = {
    "L-plate": _l_plate,
    "T-plate": _t_plate,
    "wedge-bar": _wedge_bar,
}
DEFAULT_CLASSES = ("L-plate", "T-plate", "wedge-bar")


@dataclass(frozen=True)
class ShapeTemplate:
    name: str
    class_id: int
    points: np.ndarray  # canonical cloud centred on its box center
    size: np.ndarray


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * (d.min(1).mean() + d.min(0).mean())


def self_symmetry_gap(template: ShapeTemplate, order: int, sample: int = 600) -> float:
    """Smallest Chamfer distance between the template and any nontrivial rotation of it."""
    pts = template.points[:sample]
    group = make_group(order)
    gaps = [chamfer(pts, pts @ rotation_matrix(g).T) for g in group if g.index != 0]
    return min(gaps) if gaps else math.inf


@lru_cache(maxsize=None)
def get_template(name: str, class_id: int, dense: int = 3000) -> ShapeTemplate:
    if name not in _TEMPLATE_BUILDERS:
        raise InvalidArgumentError(f"unknown shape template {name!r}")
    rng = np.random.default_rng(abs(hash_name(name)))
    pts = _TEMPLATE_BUILDERS[name](rng, dense)
    lo, hi = pts.min(0), pts.max(0)
    pts = pts - (lo + hi) / 2
    template = ShapeTemplate(name, class_id, pts, hi - lo)
    for order in range(2, 9):
        gap = self_symmetry_gap(template, order)
        if gap <= ASYMMETRY_MIN_CHAMFER:
            raise InvalidArgumentError(
                f"template {name!r} is nearly symmetric under C{order} (chamfer {gap:.3f})")
    return template


def hash_name(name: str) -> int:
    # stable across processes, unlike hash()
    h = 0
    for ch in name.encode():
        h = (h * 131 + ch) % (2 ** 31)
    return h


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneGenConfig:
    group_order: int = 4
    object_count: tuple = (2, 4)
    classes: tuple = DEFAULT_CLASSES
    area: tuple = (5.0, 5.0)
    min_separation: float = 0.2
    points_per_object: int = 128
    background_density: float = 12.0
    wall_points: int = 40
    noise_sigma: float = 0.005
    yaw_mode: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise InvalidArgumentError(f"bad object_count {self.object_count}")
        if self.points_per_object <= 0 or self.background_density < 0 or self.wall_points < 0:
            raise InvalidArgumentError("point counts must be positive")
        if self.noise_sigma < 0:
            raise InvalidArgumentError("noise_sigma must be >= 0")
        if self.yaw_mode not in ("grid", "uniform"):
            raise InvalidArgumentError(f"yaw_mode must be 'grid' or 'uniform', got {self.yaw_mode!r}")
        if not self.classes:
            raise InvalidArgumentError("at least one class is required")
        make_group(self.group_order)

    def templates(self) -> list[ShapeTemplate]:
        return [get_template(name, i) for i, name in enumerate(self.classes)]


@dataclass
class SceneLabels:
    foreground: np.ndarray       # bool [P]
    orientation_bin: np.ndarray  # int [P], -1 where background
    vote_target: np.ndarray      # [P, 3]

    @property
    def orientation_ignored(self) -> np.ndarray:
        return self.orientation_bin < 0


@dataclass
class Scene:
    points: np.ndarray
    object_id: np.ndarray
    class_id: np.ndarray
    gt_boxes: list
    group_order: int
    labels: SceneLabels = field(default=None)

    def __post_init__(self):
        if self.labels is None:
            self.labels = derive_labels(self.points, self.object_id, self.gt_boxes,
                                        make_group(self.group_order))

    @property
    def num_points(self) -> int:
        return len(self.points)

    def object_mask(self, object_id: int) -> np.ndarray:
        return self.object_id == object_id


def derive_labels(points, object_id, gt_boxes, group) -> SceneLabels:
    """Foreground mask, orientation bins and vote targets.

    Points assigned to an object must lie inside its box.  Unassigned points
    that fall inside a box are still foreground (foreground means inside an
    OBB) and vote for that box.
    """
    points = np.asarray(points, dtype=np.float64)
    object_id = np.asarray(object_id)
    n = len(points)
    owner = np.full(n, -1, dtype=np.int64)
    for i, box in enumerate(gt_boxes):
        inside = points_in_box(points, box) if n else np.zeros(0, bool)
        mine = object_id == i
        if np.any(mine & ~inside):
            bad = int(np.flatnonzero(mine & ~inside)[0])
            raise LabelConsistencyError(
                f"point {bad} is assigned to object {i} but lies outside its box")
        owner[mine] = i
        owner[(owner < 0) & (object_id < 0) & inside] = i
    if np.any(object_id >= len(gt_boxes)):
        raise LabelConsistencyError("object_id refers to a missing gt box")
    foreground = owner >= 0
    bins = np.full(n, -1, dtype=np.int64)
    votes = np.zeros((n, 3))
    if gt_boxes:
        box_bins = angles_to_bins([b.yaw for b in gt_boxes], group)
        centers = np.array([b.center for b in gt_boxes])
        bins[foreground] = box_bins[owner[foreground]]
        votes[foreground] = centers[owner[foreground]] - points[foreground]
    return SceneLabels(foreground, bins, votes)


def validate_scene(scene: Scene) -> None:
    """Raise LabelConsistencyError if any scene invariant is violated."""
    group = make_group(scene.group_order)
    lab = scene.labels
    fresh = derive_labels(scene.points, scene.object_id, scene.gt_boxes, group)
    if not np.array_equal(fresh.foreground, lab.foreground):
        raise LabelConsistencyError("foreground mask disagrees with box containment")
    if not np.array_equal(fresh.orientation_bin, lab.orientation_bin):
        raise LabelConsistencyError("orientation bins disagree with box yaws")
    if not np.allclose(fresh.vote_target, lab.vote_target, atol=1e-9):
        raise LabelConsistencyError("vote targets disagree with box centers")
    for i, box in enumerate(scene.gt_boxes):
        mine = scene.object_id == i
        if np.any(scene.class_id[mine] != box.class_id):
            raise LabelConsistencyError(f"class ids of object {i} disagree with its box")


def _sample_object(rng, template, box, cfg):
    idx = rng.choice(len(template.points), size=cfg.points_per_object,
                     replace=cfg.points_per_object > len(template.points))
    local = template.points[idx] + rng.normal(0.0, cfg.noise_sigma, (len(idx), 3))
    half = template.size / 2
    local = np.clip(local, -half, half)
    rot = np.array([[math.cos(box.yaw), -math.sin(box.yaw), 0.0],
                    [math.sin(box.yaw), math.cos(box.yaw), 0.0],
                    [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _background(rng, cfg, boxes):
    w, h = cfg.area
    margin = 0.5
    fw, fh = w + 2 * margin, h + 2 * margin
    n_floor = int(round(cfg.background_density * fw * fh))
    floor = np.column_stack([rng.uniform(-fw / 2, fw / 2, n_floor),
                             rng.uniform(-fh / 2, fh / 2, n_floor),
                             rng.normal(0.0, cfg.noise_sigma, n_floor)])
    keep = np.ones(n_floor, bool)
    for box in boxes:
        footprint = box.with_(size=box.size + np.array([0.0, 0.0, 1.0]))
        keep &= ~points_in_box(floor, footprint)
    floor = floor[keep]
    k = cfg.wall_points
    wall_x = np.column_stack([np.full(k, -fw / 2) + rng.normal(0, cfg.noise_sigma, k),
                              rng.uniform(-fh / 2, fh / 2, k), rng.uniform(0, 1.0, k)])
    wall_y = np.column_stack([rng.uniform(-fw / 2, fw / 2, k),
                              np.full(k, fh / 2) + rng.normal(0, cfg.noise_sigma, k),
                              rng.uniform(0, 1.0, k)])
    return np.vstack([floor, wall_x, wall_y])


def _place_boxes(rng, cfg, seed):
    templates = cfg.templates()
    group = make_group(cfg.group_order)
    lo, hi = cfg.object_count
    count = int(rng.integers(lo, hi + 1))
    w, h = cfg.area
    boxes, radii = [], []
    rejections = 0
    while len(boxes) < count:
        t = templates[int(rng.integers(len(templates)))]
        if cfg.yaw_mode == "grid":
            yaw = wrap_angle(group[int(rng.integers(group.order))].angle)
        else:
            yaw = float(rng.uniform(-math.pi, math.pi))
        r = 0.5 * math.hypot(t.size[0], t.size[1])
        if 2 * r > min(w, h):
            raise GenerationFailure(f"seed {seed}: template {t.name} does not fit the area")
        xy = rng.uniform([-w / 2 + r, -h / 2 + r], [w / 2 - r, h / 2 - r])
        ok = all(np.hypot(*(xy - b.center[:2])) >= r + rb + cfg.min_separation
                 for b, rb in zip(boxes, radii))
        if not ok:
            rejections += 1
            if rejections > MAX_REJECTIONS:
                raise GenerationFailure(
                    f"seed {seed}: could not place {count} objects after {MAX_REJECTIONS} rejections")
            continue
        center = np.array([xy[0], xy[1], t.size[2] / 2])
        boxes.append(OrientedBox(center, t.size.copy(), yaw, t.class_id))
        radii.append(r)
    return boxes


def generate_scene(cfg: SceneGenConfig, seed: int) -> Scene:
    """Deterministic scene for ``(cfg, seed)``."""
    rng = np.random.default_rng(seed)
    boxes = _place_boxes(rng, cfg, seed)
    templates = cfg.templates()
    chunks, oids, cids = [], [], []
    for i, box in enumerate(boxes):
        pts = _sample_object(rng, templates[box.class_id], box, cfg)
        chunks.append(pts)
        oids.append(np.full(len(pts), i))
        cids.append(np.full(len(pts), box.class_id))
    bg = _background(rng, cfg, boxes)
    chunks.append(bg)
    oids.append(np.full(len(bg), -1))
    cids.append(np.full(len(bg), -1))
    points = np.vstack(chunks)
    order = rng.permutation(len(points))
    return Scene(points=points[order],
                 object_id=np.concatenate(oids)[order].astype(np.int64),
                 class_id=np.concatenate(cids)[order].astype(np.int64),
                 gt_boxes=boxes, group_order=cfg.group_order)


def generate_isolated_scene(cfg: SceneGenConfig, seed: int, spacing: float = 30.0) -> Scene:
    """Objects on a line ``spacing`` meters apart with small floor patches halfway between.

    Used for object-level equivariance checks: with a large spacing no
    receptive field or vote cluster reaches from one object to another.
    """
    if spacing <= 0:
        raise InvalidArgumentError("spacing must be positive")
    rng = np.random.default_rng(seed)
    templates = cfg.templates()
    group = make_group(cfg.group_order)
    lo, hi = cfg.object_count
    count = int(rng.integers(lo, hi + 1))
    chunks, oids, cids, boxes = [], [], [], []
    for i in range(count):
        t = templates[int(rng.integers(len(templates)))]
        if cfg.yaw_mode == "grid":
            yaw = wrap_angle(group[int(rng.integers(group.order))].angle)
        else:
            yaw = float(rng.uniform(-math.pi, math.pi))
        center = np.array([(i - (count - 1) / 2) * spacing, 0.0, t.size[2] / 2])
        box = OrientedBox(center, t.size.copy(), yaw, t.class_id)
        pts = _sample_object(rng, t, box, cfg)
        boxes.append(box)
        chunks.append(pts)
        oids.append(np.full(len(pts), i))
        cids.append(np.full(len(pts), t.class_id))
    n_patch = max(1, int(round(cfg.background_density)))
    for i in range(count + 1):
        x = (i - count / 2) * spacing
        patch = np.column_stack([rng.uniform(x - 0.5, x + 0.5, n_patch),
                                 rng.uniform(-0.5, 0.5, n_patch),
                                 rng.normal(0.0, cfg.noise_sigma, n_patch)])
        chunks.append(patch)
        oids.append(np.full(n_patch, -1))
        cids.append(np.full(n_patch, -1))
    return Scene(points=np.vstack(chunks), object_id=np.concatenate(oids).astype(np.int64),
                 class_id=np.concatenate(cids).astype(np.int64), gt_boxes=boxes,
                 group_order=cfg.group_order)


def object_rotation_augment(scene: Scene, max_degrees: float, seed: int) -> Scene:
    """Rotate each object's points about its box axis by an independent angle."""
    if max_degrees < 0:
        raise InvalidArgumentError("max_degrees must be >= 0")
    if max_degrees == 0 or not scene.gt_boxes:
        return replace(scene, points=scene.points.copy(), gt_boxes=list(scene.gt_boxes))
    rng = np.random.default_rng(seed)
    points = scene.points.copy()
    object_id = scene.object_id.copy()
    class_id = scene.class_id.copy()
    boxes = []
    for i, box in enumerate(scene.gt_boxes):
        delta = math.radians(float(rng.uniform(-max_degrees, max_degrees)))
        mine = object_id == i
        points[mine] = rotate_points_about(points[mine], box.center, delta)
        new_box = box.with_(yaw=box.yaw + delta)
        boxes.append(new_box)
        # background that the rotated box now covers belongs to the object
        grabbed = (object_id < 0) & points_in_box(points, new_box)
        object_id[grabbed] = i
        class_id[grabbed] = box.class_id
    return Scene(points, object_id, class_id, boxes, scene.group_order)


# ---------------------------------------------------------------------------
# persistence


def scene_to_dict(scene: Scene) -> dict:
    lab = scene.labels
    return {
        "format_version": FORMAT_VERSION,
        "group_order": int(scene.group_order),
        "points": scene.points.tolist(),
        "object_id": scene.object_id.astype(int).tolist(),
        "class_id": scene.class_id.astype(int).tolist(),
        "gt_boxes": [b.to_dict() for b in scene.gt_boxes],
        "labels": {
            "foreground": lab.foreground.astype(int).tolist(),
            "orientation_bin": lab.orientation_bin.astype(int).tolist(),
            "vote_target": lab.vote_target.tolist(),
        },
    }


def save_scene(scene: Scene, path) -> None:
    # json emits the shortest repr that round-trips each float64 exactly
    Path(path).write_text(json.dumps(scene_to_dict(scene)))


def _need(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise SceneFormatError(f"{where}: missing key {key!r}")
    return obj[key]


def _array(value, where, dtype, shape_tail=()):
    try:
        arr = np.asarray(value, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise SceneFormatError(f"{where}: {exc}") from None
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    if arr.shape[1:] != shape_tail:
        raise SceneFormatError(f"{where}: expected trailing shape {shape_tail}, got {arr.shape}")
    return arr


def scene_from_dict(data: dict, where: str = "scene", expected_group_order=None) -> Scene:
    version = _need(data, "format_version", where)
    if version != FORMAT_VERSION:
        raise SceneFormatError(f"{where}: unsupported format_version {version!r}")
    order = _need(data, "group_order", where)
    if not isinstance(order, int) or order < 1:
        raise SceneFormatError(f"{where}: group_order must be a positive integer")
    if expected_group_order is not None and order != expected_group_order:
        raise GroupMismatchError(
            f"{where}: scene group order {order} does not match configured {expected_group_order}")
    points = _array(_need(data, "points", where), f"{where}.points", np.float64, (3,))
    n = len(points)
    object_id = _array(_need(data, "object_id", where), f"{where}.object_id", np.int64)
    class_id = _array(_need(data, "class_id", where), f"{where}.class_id", np.int64)
    for name, arr in (("object_id", object_id), ("class_id", class_id)):
        if len(arr) != n:
            raise SceneFormatError(f"{where}.{name}: length {len(arr)} != {n} points")
    boxes = []
    for i, b in enumerate(_need(data, "gt_boxes", where)):
        bw = f"{where}.gt_boxes[{i}]"
        try:
            boxes.append(OrientedBox(np.asarray(_need(b, "center", bw), float),
                                     np.asarray(_need(b, "size", bw), float),
                                     float(_need(b, "yaw", bw)), int(_need(b, "class_id", bw))))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, SceneFormatError):
                raise
            raise SceneFormatError(f"{bw}: {exc}") from None
    lab = _need(data, "labels", where)
    lw = f"{where}.labels"
    fg = _array(_need(lab, "foreground", lw), f"{lw}.foreground", np.int64)
    bins = _array(_need(lab, "orientation_bin", lw), f"{lw}.orientation_bin", np.int64)
    votes = _array(_need(lab, "vote_target", lw), f"{lw}.vote_target", np.float64, (3,))
    for name, arr in (("foreground", fg), ("orientation_bin", bins), ("vote_target", votes)):
        if len(arr) != n:
            raise SceneFormatError(f"{lw}.{name}: length {len(arr)} != {n} points")
    labels = SceneLabels(fg.astype(bool), bins, votes)
    return Scene(points, object_id, class_id, boxes, order, labels)


def load_scene(path, expected_group_order=None) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return scene_from_dict(data, str(path), expected_group_order)


def write_manifest(root, splits: dict) -> Path:
    path = Path(root) / "manifest.json"
    path.write_text(json.dumps({k: list(v) for k, v in splits.items()}, indent=1))
    return path


def read_manifest(path) -> dict:
    """Map split name to absolute scene paths."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise SceneFormatError(f"{path}: manifest must map split names to path lists")
    return {split: [os.path.join(path.parent, p) for p in files] for split, files in data.items()}
