import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eon3d.errors import InvalidArgumentError
from eon3d.rotgroup import (
    angle_to_bin,
    angles_to_bins,
    compose,
    inverse,
    make_group,
    orbit_index_after_rotation,
    rotation_matrix,
    shift_orbit,
    wrap_angle,
)


def brute_force_bin(yaw, n):
    """Nearest bin by enumerating wrapped distances, ties to the smaller index."""
    dists = []
    for k in range(n):
        d = abs(math.remainder(yaw - 2 * math.pi * k / n, 2 * math.pi))
        dists.append(d)
    best = min(dists)
    return min(k for k, d in enumerate(dists) if abs(d - best) <= 1e-12)


def test_make_group_angles():
    g = make_group(4)
    np.testing.assert_allclose(g.angles(), [0, math.pi / 2, math.pi, 3 * math.pi / 2])
    assert [e.index for e in make_group(1)] == [0]
    np.testing.assert_allclose(make_group(8).angles(), [k * math.pi / 4 for k in range(8)])


@pytest.mark.parametrize("n", [0, -3])
def test_make_group_rejects_nonpositive(n):
    with pytest.raises(InvalidArgumentError):
        make_group(n)


def test_compose_examples():
    g = make_group(4)
    assert compose(g[1], g[2]).index == 3
    assert compose(g[3], g[2]).index == 1
    for x in g:
        assert compose(g.identity, x) == x


def test_compose_mixed_groups():
    with pytest.raises(InvalidArgumentError):
        compose(make_group(4)[1], make_group(8)[1])
    with pytest.raises(InvalidArgumentError):
        orbit_index_after_rotation(make_group(4)[1], make_group(2)[1])


def test_inverse_examples():
    assert inverse(make_group(4)[3]).index == 1
    assert inverse(make_group(4).identity).index == 0
    assert inverse(make_group(2)[1]).index == 1


def test_rotation_matrix_examples():
    g = make_group(4)
    np.testing.assert_array_equal(rotation_matrix(g[0]), np.eye(3))
    np.testing.assert_array_equal(rotation_matrix(g[1]), [[0, -1, 0], [1, 0, 0], [0, 0, 1]])
    np.testing.assert_array_equal(rotation_matrix(g[2]), np.diag([-1.0, -1.0, 1.0]))


@pytest.mark.parametrize("n", range(1, 17))
def test_group_axioms_exhaustive(n):
    g = make_group(n)
    elems = list(g)
    for a, b in itertools.product(elems, elems):
        assert compose(a, b).group == g
    for a, b, c in itertools.product(elems, elems, elems):
        assert compose(compose(a, b), c) == compose(a, compose(b, c))
    for a in elems:
        assert compose(a, g.identity) == a == compose(g.identity, a)
        assert compose(a, inverse(a)) == g.identity == compose(inverse(a), a)


@pytest.mark.parametrize("n", range(1, 17))
def test_rotation_homomorphism(n):
    g = make_group(n)
    for a, b in itertools.product(g, g):
        lhs = rotation_matrix(compose(a, b))
        rhs = rotation_matrix(a) @ rotation_matrix(b)
        assert np.max(np.abs(lhs - rhs)) <= 1e-12
    for a in g:
        r = rotation_matrix(a)
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1) < 1e-12


@pytest.mark.parametrize("n", range(1, 17))
def test_angle_to_bin_exact_on_group_angles(n):
    g = make_group(n)
    for e in g:
        assert angle_to_bin(2 * math.pi * e.index / n, g).index == e.index


def test_angle_to_bin_examples():
    g = make_group(4)
    assert angle_to_bin(0.0, g).index == 0
    assert brute_force_bin(0.8, 4) == 1
    assert angle_to_bin(0.8, g).index == 1
    assert brute_force_bin(-math.pi / 4, 4) == 0
    assert angle_to_bin(-math.pi / 4, g).index == 0
    with pytest.raises(InvalidArgumentError):
        angle_to_bin(float("nan"), g)
    with pytest.raises(InvalidArgumentError):
        angle_to_bin(float("inf"), g)


@given(st.floats(-20, 20, allow_nan=False), st.sampled_from([1, 2, 3, 4, 5, 8]))
def test_angle_to_bin_matches_brute_force(yaw, n):
    assert angle_to_bin(yaw, make_group(n)).index == brute_force_bin(yaw, n)


def test_angles_to_bins_vectorised():
    g = make_group(4)
    yaws = np.array([0.0, 0.8, -math.pi / 4, 3.0, -3.0])
    assert angles_to_bins(yaws, g).tolist() == [angle_to_bin(y, g).index for y in yaws]


@given(st.floats(-100, 100, allow_nan=False))
def test_wrap_angle_range(yaw):
    w = wrap_angle(yaw)
    assert -math.pi <= w < math.pi
    assert abs(math.remainder(w - yaw, 2 * math.pi)) < 1e-9


def test_orbit_shift_examples():
    g = make_group(4)
    orbit = np.array(["a", "b", "c", "d"])
    assert shift_orbit(orbit, g[1]).tolist() == ["d", "a", "b", "c"]
    assert shift_orbit(orbit, g.identity).tolist() == orbit.tolist()
    assert shift_orbit(shift_orbit(orbit, g[2]), g[2]).tolist() == orbit.tolist()
    # index map agrees with the array shift
    for k in g:
        assert shift_orbit(orbit, g[1])[orbit_index_after_rotation(k, g[1]).index] == orbit[k.index]


@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_orbit_shift_composes(n):
    g = make_group(n)
    orbit = np.arange(n * 3).reshape(3, n)
    for k0, k1 in itertools.product(g, g):
        twice = shift_orbit(shift_orbit(orbit, k0), k1)
        assert np.array_equal(twice, shift_orbit(orbit, compose(k1, k0)))
