import numpy as np
import pytest
import torch

from eon3d.errors import ConfigurationError
from eon3d.rotgroup import compose, make_group, shift_orbit
from eon3d.suspension import UNDEFINED, decompose, oracle_overrides, region_orientation


def test_decompose_foreground_argmax():
    g = make_group(4)
    vals = torch.arange(12, dtype=torch.float64).reshape(1, 3, 4)
    out = decompose(vals, torch.tensor([[0.1, 2.0, -1.0, 0.5]]), [True], g)
    assert out.orientation.tolist() == [1]
    assert torch.equal(out.f_inv[0], vals[0, :, 1])
    assert out.element(0) == g[1]


def test_decompose_background_max_pool():
    g = make_group(2)
    vals = torch.tensor([[[1.0, 5.0], [3.0, 2.0]]], dtype=torch.float64)
    out = decompose(vals, torch.zeros(1, 2), [False], g)
    assert out.f_inv[0].tolist() == [5.0, 3.0]
    assert out.orientation.tolist() == [UNDEFINED]
    assert out.element(0) is None


def test_decompose_ties_go_to_smaller_index():
    g = make_group(4)
    vals = torch.randn(1, 2, 4, dtype=torch.float64)
    out = decompose(vals, torch.tensor([[0.0, 1.0, 1.0, 0.0]]), [True], g)
    assert out.orientation.tolist() == [1]


def test_shift_consistency_random_orbits():
    g = make_group(4)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        vals = torch.tensor(rng.normal(size=(3, 5, 4)))
        scores = torch.tensor(rng.normal(size=(3, 4)))
        fg = rng.random(3) < 0.5
        base = decompose(vals, scores, fg, g)
        k0 = g[int(rng.integers(4))]
        moved = decompose(shift_orbit(vals, k0), shift_orbit(scores, k0), fg, g)
        assert torch.equal(moved.f_inv, base.f_inv)
        for i in range(3):
            if fg[i]:
                assert moved.element(i) == compose(k0, base.element(i))


def test_decompose_n1_is_identity():
    g = make_group(1)
    vals = torch.randn(4, 3, 1, dtype=torch.float64)
    out = decompose(vals, torch.randn(4, 1), [True, False, True, False], g)
    assert torch.equal(out.f_inv, vals[:, :, 0])
    assert out.orientation.tolist() == [0, UNDEFINED, 0, UNDEFINED]


def test_region_orientation_rules():
    g = make_group(4)
    assert region_orientation([1, 1, 3, 1, 2], group=g) == (g[1], False)
    assert region_orientation([1, 2], [0.4, 0.9], group=g) == (g[2], True)
    assert region_orientation([], group=g) == (g.identity, True)
    assert region_orientation([UNDEFINED, UNDEFINED], [1, 1], group=g) == (g.identity, True)
    assert region_orientation([2, 3, 1], mode="central_point", central_index=1, group=g) == (g[3], False)
    assert region_orientation([UNDEFINED, 3], mode="central_point", central_index=0, group=g) == (g[0], True)
    with pytest.raises(ConfigurationError):
        region_orientation([1], mode="central_point")


def test_region_orientation_mode_composes():
    g = make_group(4)
    rng = np.random.default_rng(1)
    for _ in range(200):
        bins = rng.integers(0, 4, size=rng.integers(1, 9)).tolist()
        w = rng.random(len(bins)).tolist()
        k0 = g[int(rng.integers(4))]
        h, _ = region_orientation(bins, w, group=g)
        h2, _ = region_orientation([(b + k0.index) % 4 for b in bins], w, group=g)
        assert h2 == compose(k0, h)


def test_oracle_overrides():
    g = make_group(4)
    vals = torch.randn(3, 2, 4, dtype=torch.float64)
    scores = torch.tensor([[3.0, 0, 0, 0], [0, 3.0, 0, 0], [0, 0, 0, 3.0]])
    base = decompose(vals, scores, [True, True, False], g)
    assert oracle_overrides(base, vals) is base
    out = oracle_overrides(base, vals, gt_bins=[2, 2, -1], use_gt_orientation=True)
    assert out.orientation.tolist() == [2, 2, UNDEFINED]
    assert torch.equal(out.f_inv[0], vals[0, :, 2])
    assert torch.equal(out.f_inv[2], base.f_inv[2])
    seg = oracle_overrides(base, vals, gt_foreground=[True, False, True], use_gt_segmentation=True)
    assert torch.equal(seg.f_inv[1], vals[1].amax(dim=1))
    assert seg.orientation.tolist() == [0, UNDEFINED, 3]
    with pytest.raises(ConfigurationError):
        oracle_overrides(base, vals, use_gt_orientation=True)
    with pytest.raises(ConfigurationError):
        oracle_overrides(base, vals, use_gt_segmentation=True)
