"""Oriented boxes, point containment, frame transforms and rotated-box IoU.

Boxes are gravity aligned: a center, full extents along the box axes and a
yaw about +z.  Corner ordering used by :func:`box_corners` is the binary
counter ``i = 4*bx + 2*by + bz`` where bit ``b = 0`` selects the negative
half-extent and ``b = 1`` the positive one, evaluated in the box frame and
then rotated by the yaw and translated to the center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .rotgroup import GroupElement, rotation_matrix, wrap_angle, yaw_matrix

_INSIDE_EPS = 1e-9
_AREA_EPS = 1e-12


@dataclass(frozen=True)
class OrientedBox:
    center: np.ndarray
    size: np.ndarray
    yaw: float = 0.0
    class_id: int = 0
    score: float = 1.0
    low_confidence: bool = field(default=False, compare=False)

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(center)):
            raise InvalidArgumentError(f"box center must be finite, got {center}")
        if not np.all(size > 0):
            raise InvalidArgumentError(f"box size must be strictly positive, got {size}")
        if not math.isfinite(self.yaw):
            raise InvalidArgumentError("box yaw must be finite")
        if int(self.class_id) < 0:
            raise InvalidArgumentError("class_id must be >= 0")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", wrap_angle(float(self.yaw)))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))

    def __eq__(self, other):
        if not isinstance(other, OrientedBox):
            return NotImplemented
        return (np.array_equal(self.center, other.center)
                and np.array_equal(self.size, other.size)
                and self.yaw == other.yaw and self.class_id == other.class_id
                and self.score == other.score)

    __hash__ = None

    def with_(self, **changes) -> OrientedBox:
        return replace(self, **changes)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size))

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "size": self.size.tolist(),
                "yaw": self.yaw, "class_id": self.class_id}


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InvalidArgumentError(f"points must have shape [P, 3], got {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InvalidArgumentError("point coordinates must be finite")
    return pts


def box_corners(box: OrientedBox) -> np.ndarray:
    """Corners of the box, shape [8, 3], in binary-counter order."""
    bits = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)
    local = (bits - 0.5) * box.size
    return local @ yaw_matrix(box.yaw).T + box.center


def to_box_frame(points, box: OrientedBox) -> np.ndarray:
    pts = as_points(points)
    # row-vector form of R(-yaw) (p - c)
    return (pts - box.center) @ yaw_matrix(box.yaw)


def points_in_box(points, box: OrientedBox) -> np.ndarray:
    """Boolean mask of points inside (or on the boundary of) the box."""
    local = to_box_frame(points, box)
    return np.all(np.abs(local) <= box.size / 2 + _INSIDE_EPS, axis=1)


def bev_polygon(box: OrientedBox) -> np.ndarray:
    """Counter-clockwise footprint rectangle, shape [4, 2]."""
    hx, hy = box.size[0] / 2, box.size[1] / 2
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW ``clipper``."""
    output = list(subject)
    n = len(clipper)
    for i in range(n):
        if not output:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        edge = b - a

        def side(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])

        inp, output = output, []
        for j in range(len(inp)):
            cur, prev = inp[j], inp[j - 1]
            s_cur, s_prev = side(cur), side(prev)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    output.append(prev + t * (cur - prev))
                output.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                output.append(prev + t * (cur - prev))
    return np.array(output).reshape(-1, 2)


def bev_intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    poly = clip_polygon(bev_polygon(a), bev_polygon(b))
    return max(polygon_area(poly), 0.0)


def rotated_iou(a: OrientedBox, b: OrientedBox) -> float:
    """3D IoU of two yaw-rotated boxes (BEV overlap times vertical overlap)."""
    # quick reject on circumscribed circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if np.hypot(*(a.center[:2] - b.center[:2])) > ra + rb:
        return 0.0
    zlo = max(a.center[2] - a.size[2] / 2, b.center[2] - b.size[2] / 2)
    zhi = min(a.center[2] + a.size[2] / 2, b.center[2] + b.size[2] / 2)
    dz = zhi - zlo
    if dz <= 0:
        return 0.0
    area = bev_intersection_area(a, b)
    if area <= _AREA_EPS:
        return 0.0
    inter = area * dz
    union = a.volume + b.volume - inter
    if union <= _AREA_EPS:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def bev_iou(a: OrientedBox, b: OrientedBox) -> float:
    area = bev_intersection_area(a, b)
    union = a.size[0] * a.size[1] + b.size[0] * b.size[1] - area
    return 0.0 if union <= _AREA_EPS else area / union


def box_to_scene_frame(box_inv: OrientedBox, h: GroupElement, region_center) -> OrientedBox:
    """Map an object-frame box to the scene frame of a region with orientation ``h``.

    ``box_inv.center`` is the offset from the region center expressed in the
    object frame.
    """
    rot = rotation_matrix(h)
    center = np.asarray(region_center, dtype=np.float64) + rot @ box_inv.center
    return box_inv.with_(center=center, yaw=wrap_angle(box_inv.yaw + h.angle))


def box_to_object_frame(box: OrientedBox, h: GroupElement, region_center) -> OrientedBox:
    """Inverse of :func:`box_to_scene_frame`."""
    rot = rotation_matrix(h)
    offset = rot.T @ (box.center - np.asarray(region_center, dtype=np.float64))
    return box.with_(center=offset, yaw=wrap_angle(box.yaw - h.angle))


def rotate_points_about(points, pivot, yaw: float, rot: np.ndarray | None = None) -> np.ndarray:
    """Rotate points by ``yaw`` about the vertical axis through ``pivot``.

    ``rot`` may supply an exact 3x3 matrix (e.g. a group element's) instead
    of building one from ``yaw``.
    """
    pts = as_points(points)
    pivot = np.asarray(pivot, dtype=np.float64)
    if rot is None:
        rot = yaw_matrix(yaw)
    out = (pts - pivot) @ rot.T + pivot
    out[:, 2] = pts[:, 2]
    return out
