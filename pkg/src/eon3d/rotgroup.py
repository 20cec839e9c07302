"""Discretized yaw rotation group (cyclic group C_N about the z axis)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError

TWO_PI = 2.0 * math.pi


def wrap_angle(yaw):
    """Wrap angle(s) to [-pi, pi). Works on floats and numpy arrays."""
    if isinstance(yaw, np.ndarray):
        out = np.mod(yaw + math.pi, TWO_PI) - math.pi
        # fmod rounding can land exactly on +pi
        out[out >= math.pi] -= TWO_PI
        return out
    out = math.fmod(yaw + math.pi, TWO_PI)
    if out < 0:
        out += TWO_PI
    out -= math.pi
    if out >= math.pi:
        out -= TWO_PI
    return out


def yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CyclicGroup:
    order: int

    def __post_init__(self):
        if isinstance(self.order, bool) or not isinstance(self.order, (int, np.integer)):
            raise InvalidArgumentError(f"group order must be an integer, got {self.order!r}")
        if self.order < 1:
            raise InvalidArgumentError(f"group order must be >= 1, got {self.order}")

    def __len__(self):
        return self.order

    def __iter__(self):
        return (GroupElement(k, self) for k in range(self.order))

    def __getitem__(self, k: int) -> GroupElement:
        return GroupElement(int(k) % self.order, self)

    @property
    def identity(self) -> GroupElement:
        return GroupElement(0, self)

    @property
    def bin_width(self) -> float:
        return TWO_PI / self.order

    def angles(self) -> np.ndarray:
        return np.array([e.angle for e in self])

    @cached_property
    def matrices(self) -> np.ndarray:
        """Stack of all rotation matrices, shape [N, 3, 3]."""
        return np.stack([rotation_matrix(e) for e in self])


@dataclass(frozen=True)
class GroupElement:
    index: int
    group: CyclicGroup

    def __post_init__(self):
        if not 0 <= self.index < self.group.order:
            raise InvalidArgumentError(
                f"element index {self.index} outside [0, {self.group.order})")

    @property
    def angle(self) -> float:
        return TWO_PI * self.index / self.group.order

    def __int__(self):
        return self.index

    def __matmul__(self, other: GroupElement) -> GroupElement:
        return compose(self, other)


def make_group(n: int) -> CyclicGroup:
    return CyclicGroup(n)


def _check_same(a: GroupElement, b: GroupElement):
    if a.group != b.group:
        raise InvalidArgumentError(
            f"elements belong to different groups (C{a.group.order} vs C{b.group.order})")


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    _check_same(a, b)
    return GroupElement((a.index + b.index) % a.group.order, a.group)


def inverse(a: GroupElement) -> GroupElement:
    return GroupElement((-a.index) % a.group.order, a.group)


def _exact_cos_sin(index: int, order: int) -> tuple[float, float]:
    # Quarter turns are returned exactly so C4 rotations permute coordinates
    # without rounding.
    if (4 * index) % order == 0:
        quarter = (4 * index // order) % 4
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][quarter]
    theta = TWO_PI * index / order
    return math.cos(theta), math.sin(theta)


def rotation_matrix(a: GroupElement) -> np.ndarray:
    """3x3 yaw rotation by the element's angle (counter-clockwise about +z)."""
    c, s = _exact_cos_sin(a.index, a.group.order)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _nearest_bin(yaw: float, order: int) -> int:
    t = wrap_angle(yaw) / (TWO_PI / order)
    f = math.floor(t)
    r = t - f
    if r < 0.5:
        return f % order
    if r > 0.5:
        return (f + 1) % order
    return min(f % order, (f + 1) % order)


def angle_to_bin(yaw: float, group: CyclicGroup) -> GroupElement:
    """Nearest group element to ``yaw``; exact half-bin ties go to the smaller index."""
    if not math.isfinite(yaw):
        raise InvalidArgumentError(f"yaw must be finite, got {yaw!r}")
    return GroupElement(_nearest_bin(float(yaw), group.order), group)


def angles_to_bins(yaws, group: CyclicGroup) -> np.ndarray:
    """Vectorised :func:`angle_to_bin` returning integer indices."""
    yaws = np.asarray(yaws, dtype=np.float64)
    if not np.all(np.isfinite(yaws)):
        raise InvalidArgumentError("yaw must be finite")
    return np.array([_nearest_bin(float(y), group.order) for y in yaws.ravel()],
                    dtype=np.int64).reshape(yaws.shape)


def orbit_index_after_rotation(k: GroupElement, k0: GroupElement) -> GroupElement:
    """Slot that value ``f(k)`` moves to when the input is rotated by ``k0``."""
    return compose(k0, k)


def shift_orbit(values, k0, axis: int = -1):
    """Circularly shift an orbit array so that ``out[(k0 + k) % N] = values[k]``.

    Works for numpy arrays and torch tensors.
    """
    shift = int(k0)
    if isinstance(values, np.ndarray):
        return np.roll(values, shift, axis=axis)
    import torch
    return torch.roll(values, shifts=shift, dims=axis)
