import math

import numpy as np
import pytest
import torch

from eon3d.eqvnet import (
    LayerSpec,
    NetworkParams,
    effective_kernel_width,
    group_conv1d,
    layer_shapes,
    lift_inputs,
    mlp2_shapes,
    sa_geometry,
    set_abstraction_layer,
)
from eon3d.rotgroup import make_group
from eon3d.scenegen import SceneGenConfig


def backbone_specs(n, c1=8, c2=12, r1=0.4, r2=0.8, s1=64, s2=24, k=16):
    w = effective_kernel_width(3, n)
    return [
        ("sa1", LayerSpec("set_abstraction", 2, c1, radius=r1, max_neighbors=k, num_samples=s1, hidden=c1)),
        ("gc1", LayerSpec("group_conv", c1, c1, kernel_width=w)),
        ("sa2", LayerSpec("set_abstraction", c1, c2, radius=r2, max_neighbors=k, num_samples=s2, hidden=c2)),
        ("gc2", LayerSpec("group_conv", c2, c2, kernel_width=w)),
    ]


def random_backbone_params(specs, seed=0, dtype=torch.float64, heads=True):
    shapes = {}
    for name, spec in specs:
        shapes.update(layer_shapes(name, spec))
    if heads:
        c = specs[-1][1].out_channels
        shapes.update(mlp2_shapes("orient", c, 8, 1))
        shapes.update(mlp2_shapes("seg", c, 8, 1))
    return NetworkParams.initialize(shapes, seed, dtype)


def run_backbone(points, specs, params, group, dtype=torch.float64, exhaustive=False):
    feat = lift_inputs(points, group, dtype)
    outs = []
    for name, spec in specs:
        if spec.kind == "set_abstraction":
            geo = sa_geometry(feat.anchors, spec, len(feat.anchors) if exhaustive else None)
            feat = set_abstraction_layer(feat, spec, params, name, geo)
        else:
            feat = group_conv1d(feat, params, name, spec.kernel_width)
        outs.append(feat)
    return outs


@pytest.fixture
def c4():
    return make_group(4)


@pytest.fixture
def grid_cfg():
    return SceneGenConfig(group_order=4, yaw_mode="grid", object_count=(2, 3))


def rotate_about_origin(points, rot):
    return points @ rot.T


def isolated_object_scene(rng, n_objects=3, spacing=30.0, per_object=80):
    """Objects far apart on a line, each a random asymmetric blob, grid yaw."""
    clouds, ids = [], []
    for i in range(n_objects):
        pts = rng.uniform([-0.6, -0.3, 0.0], [0.6, 0.3, 0.5], size=(per_object, 3))
        pts[: per_object // 4, 1] += 0.4  # asymmetric bump
        pts += np.array([i * spacing, 0.0, 0.0])
        clouds.append(pts)
        ids.append(np.full(per_object, i))
    return np.vstack(clouds), np.concatenate(ids)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail=""):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
