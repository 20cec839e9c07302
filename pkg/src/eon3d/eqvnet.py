"""Orbit-carrying point-cloud layers over the cyclic yaw group.

Every feature tensor carries a trailing group axis: ``values[p, c, g]`` is
channel ``c`` of point ``p`` computed in the frame rotated by ``g``.
Rotating the input by ``g0`` circularly shifts that axis by ``g0``.

Parameters live in :class:`NetworkParams`, a flat name -> tensor store.
Gradients come from torch autograd; :func:`backward` wraps it with the
finiteness checks the training loop relies on.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidArgumentError, NonFiniteLossError, SceneFormatError, ShapeError
from .rotgroup import CyclicGroup
from .scenegen import hash_name

DTYPES = {"float32": torch.float32, "float64": torch.float64}
_BIN_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


@dataclass
class OrbitFeature:
    values: torch.Tensor       # [P, C, N]
    group: CyclicGroup
    anchors: np.ndarray        # [P, 3] positions
    source: np.ndarray = None  # [P] index of each anchor in the input cloud

    def __post_init__(self):
        if self.values.dim() != 3 or self.values.shape[2] != self.group.order:
            raise ShapeError(
                f"orbit values must be [P, C, {self.group.order}], got {tuple(self.values.shape)}")
        if self.source is None:
            self.source = np.arange(len(self.anchors))

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def slot_max(self) -> torch.Tensor:
        return self.values.amax(dim=2)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # set_abstraction | group_conv | pointwise
    in_channels: int
    out_channels: int
    radius: float = 0.0
    max_neighbors: int = 0
    num_samples: int = 0
    kernel_width: int = 1
    hidden: int = 0
    depthwise: bool = False

    def __post_init__(self):
        if self.kind not in ("set_abstraction", "group_conv", "pointwise"):
            raise InvalidArgumentError(f"unknown layer kind {self.kind!r}")
        if self.in_channels <= 0 or self.out_channels <= 0:
            raise InvalidArgumentError("layer widths must be positive")
        if self.kind == "set_abstraction" and (self.radius <= 0 or self.max_neighbors <= 0):
            raise InvalidArgumentError("set_abstraction needs radius > 0 and max_neighbors > 0")
        if self.kind == "group_conv" and self.kernel_width % 2 == 0:
            raise InvalidArgumentError("group_conv kernel width must be odd")


# ---------------------------------------------------------------------------
# parameters


class NetworkParams:
    """Named parameter tensors plus free-form metadata."""

    def __init__(self, tensors: dict, meta: dict | None = None):
        self.tensors = dict(tensors)
        self.meta = dict(meta or {})

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @classmethod
    def initialize(cls, shapes: dict, seed: int, dtype=torch.float64, meta=None) -> NetworkParams:
        """Uniform(+-sqrt(1/fan_in)) init, seeded per parameter name.

        ``shapes`` maps name -> (shape, fan_in).  Each tensor draws from its own
        generator so adding or removing a layer never perturbs the others.
        """
        tensors = {}
        for name, (shape, fan_in) in shapes.items():
            rng = np.random.default_rng([int(seed), hash_name(name)])
            bound = float(np.sqrt(1.0 / fan_in))
            arr = rng.uniform(-bound, bound, size=shape)
            tensors[name] = torch.tensor(arr, dtype=dtype, requires_grad=True)
        return cls(tensors, meta)

    def numpy(self) -> dict:
        return {k: v.detach().cpu().numpy() for k, v in self.tensors.items()}

    def clone(self, dtype=None) -> NetworkParams:
        dtype = dtype or self.dtype
        return NetworkParams({k: v.detach().clone().to(dtype).requires_grad_(True)
                              for k, v in self.tensors.items()}, self.meta)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None


def affine_shapes(name: str, fan_in: int, fan_out: int) -> dict:
    return {f"{name}.weight": ((fan_out, fan_in), fan_in),
            f"{name}.bias": ((fan_out,), fan_in)}


def mlp2_shapes(name: str, fan_in: int, hidden: int, fan_out: int) -> dict:
    return {**affine_shapes(f"{name}.0", fan_in, hidden),
            **affine_shapes(f"{name}.1", hidden, fan_out)}


def group_conv_shapes(name: str, channels_in: int, channels_out: int, width: int,
                      depthwise: bool = False) -> dict:
    if depthwise:
        if channels_in != channels_out:
            raise InvalidArgumentError("depthwise group conv needs equal in/out widths")
        return {f"{name}.weight": ((channels_in, width), width),
                f"{name}.bias": ((channels_in,), width)}
    fan_in = channels_in * width
    return {f"{name}.weight": ((channels_out, channels_in, width), fan_in),
            f"{name}.bias": ((channels_out,), fan_in)}


def layer_shapes(name: str, spec: LayerSpec) -> dict:
    if spec.kind == "set_abstraction":
        hidden = spec.hidden or spec.out_channels
        return mlp2_shapes(name, 3 + spec.in_channels, hidden, spec.out_channels)
    if spec.kind == "group_conv":
        return group_conv_shapes(name, spec.in_channels, spec.out_channels,
                                 spec.kernel_width, spec.depthwise)
    return affine_shapes(name, spec.in_channels, spec.out_channels)


def affine(x: torch.Tensor, params, name: str) -> torch.Tensor:
    return x @ params[f"{name}.weight"].T + params[f"{name}.bias"]


def mlp2(x: torch.Tensor, params, name: str, final_relu: bool = True) -> torch.Tensor:
    h = torch.relu(affine(x, params, f"{name}.0"))
    out = affine(h, params, f"{name}.1")
    return torch.relu(out) if final_relu else out


def count_parameters(params) -> int:
    tensors = params.tensors if isinstance(params, NetworkParams) else params
    return int(sum(int(np.prod(t.shape)) for t in tensors.values()))


# ---------------------------------------------------------------------------
# sampling and grouping (parameter-free, computed on float64 coordinates)


def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    """Indices of ``n`` farthest-point samples, returned in ascending order.

    Starts at index 0; ties in the running distance go to the lowest index.
    When ``n`` covers the whole cloud every index is returned.
    """
    p = len(points)
    if n >= p:
        return np.arange(p)
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = 0
    d = np.sum((points - points[0]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, np.sum((points - points[nxt]) ** 2, axis=1))
    return np.sort(chosen)


def ball_query(centers: np.ndarray, points: np.ndarray, radius: float, max_k: int):
    """First ``max_k`` points (by index) within ``radius`` of each center.

    Returns ``(idx [M, K], mask [M, K])``; padded slots have ``mask`` False.
    """
    m, p = len(centers), len(points)
    k = max(1, min(max_k, p))
    if m == 0 or p == 0:
        return np.zeros((m, k), np.int64), np.zeros((m, k), bool)
    d2 = np.sum((centers[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    within = d2 <= radius * radius
    idx = np.argsort(~within, axis=1, kind="stable")[:, :k]
    mask = np.take_along_axis(within, idx, axis=1)
    idx = np.where(mask, idx, 0)
    return idx.astype(np.int64), mask


@dataclass
class SAGeometry:
    """Anchor selection and neighbourhoods of one set-abstraction stage."""
    anchor_idx: np.ndarray   # indices into the stage input
    nbr_idx: np.ndarray      # [M, K] indices into the stage input
    nbr_mask: np.ndarray     # [M, K]


def sa_geometry(positions: np.ndarray, spec: LayerSpec, num_samples: int | None = None) -> SAGeometry:
    n = spec.num_samples if num_samples is None else num_samples
    anchors = farthest_point_sample(positions, n)
    idx, mask = ball_query(positions[anchors], positions, spec.radius, spec.max_neighbors)
    return SAGeometry(anchors, idx, mask)


# ---------------------------------------------------------------------------
# layers


def _slot_rotations(group: CyclicGroup, dtype) -> torch.Tensor:
    # R_g^{-1} for every slot, [N, 3, 3]
    return torch.tensor(np.transpose(group.matrices, (0, 2, 1)).copy(), dtype=dtype)


def lift_inputs(points, group: CyclicGroup, dtype=torch.float64) -> OrbitFeature:
    """Initial orbit: invariant channels (1, z) replicated across all slots.

    Positional lifting happens inside :func:`set_abstraction_layer`, which
    rotates relative coordinates into every slot's frame.
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise InvalidArgumentError("cannot lift an empty point cloud")
    base = torch.tensor(np.stack([np.ones(len(pts)), pts[:, 2]], axis=1), dtype=dtype)
    values = base[:, :, None].expand(-1, -1, group.order).contiguous()
    return OrbitFeature(values, group, pts, np.arange(len(pts)))


def set_abstraction_layer(inp: OrbitFeature, spec: LayerSpec, params, name: str,
                          geometry: SAGeometry | None = None,
                          frame_rotations: np.ndarray | None = None) -> OrbitFeature:
    """Rotate-and-compute PointNet layer.

    ``out[i, :, g] = max_j sharedMap(concat(R_g^{-1} (x_j - x_i) / r, in[j, :, g]))``
    over neighbours ``j`` of anchor ``i`` (``r`` is the layer radius); empty
    neighbourhoods give zeros.
    ``frame_rotations`` ([M, 3, 3], optional) first maps each anchor's
    relative coordinates into a per-anchor frame (used after suspension).
    """
    if inp.channels != spec.in_channels:
        raise ShapeError(f"{name}: expected {spec.in_channels} input channels, got {inp.channels}")
    if geometry is None:
        geometry = sa_geometry(inp.anchors, spec)
    dtype = inp.values.dtype
    pos = inp.anchors
    a_idx, n_idx, n_mask = geometry.anchor_idx, geometry.nbr_idx, geometry.nbr_mask
    # offsets in units of the radius keep the first affine map well scaled
    rel = torch.tensor((pos[n_idx] - pos[a_idx][:, None, :]) / spec.radius, dtype=dtype)  # [M, K, 3]
    if frame_rotations is not None:
        frames = torch.tensor(np.transpose(frame_rotations, (0, 2, 1)).copy(), dtype=dtype)
        rel = torch.einsum("mij,mkj->mki", frames, rel)
    rot_rel = torch.einsum("gij,mkj->mkgi", _slot_rotations(inp.group, dtype), rel)  # [M, K, N, 3]
    feats = inp.values[torch.as_tensor(n_idx)].permute(0, 1, 3, 2)             # [M, K, N, C]
    h = mlp2(torch.cat([rot_rel, feats], dim=-1), params, name, final_relu=True)
    # sharedMap ends in ReLU, so masked entries can be zero-filled before the max
    h = h.masked_fill(~torch.as_tensor(n_mask)[:, :, None, None], 0.0)
    out = h.amax(dim=1).permute(0, 2, 1).contiguous()                          # [M, C', N]
    return OrbitFeature(out, inp.group, pos[a_idx], inp.source[a_idx])


def group_conv1d(inp: OrbitFeature, params, name: str, kernel_width: int,
                 depthwise: bool = False, apply_relu: bool = True) -> OrbitFeature:
    """Circular convolution along the group axis, then ReLU."""
    n = inp.group.order
    if kernel_width % 2 == 0 or kernel_width < 1:
        raise InvalidArgumentError(f"kernel width must be odd and positive, got {kernel_width}")
    if kernel_width > n:
        raise InvalidArgumentError(f"kernel width {kernel_width} exceeds group order {n}")
    weight, bias = params[f"{name}.weight"], params[f"{name}.bias"]
    half = kernel_width // 2
    x = inp.values
    out = None
    for t in range(kernel_width):
        shifted = torch.roll(x, shifts=-(t - half), dims=2) if t != half else x
        if depthwise:
            term = weight[:, t][None, :, None] * shifted
        else:
            term = torch.einsum("oc,pcn->pon", weight[:, :, t], shifted)
        out = term if out is None else out + term
    out = out + bias[None, :, None]
    if apply_relu:
        out = torch.relu(out)
    return OrbitFeature(out, inp.group, inp.anchors, inp.source)


def effective_kernel_width(requested: int, order: int) -> int:
    """Largest odd width not exceeding ``requested`` or the group order."""
    w = min(requested, order)
    return w if w % 2 == 1 else w - 1


def orientation_head(inp: OrbitFeature, params, name: str) -> torch.Tensor:
    """Per-slot score from a shared two-layer map, shape [P, N]."""
    x = inp.values.permute(0, 2, 1)
    return mlp2(x, params, name, final_relu=False).squeeze(-1)


def segmentation_head(inp: OrbitFeature, params, name: str) -> torch.Tensor:
    """Foreground logit from the slot-wise max of the orbit, shape [P]."""
    return mlp2(inp.slot_max(), params, name, final_relu=False).squeeze(-1)


# ---------------------------------------------------------------------------
# gradients, cost


def check_finite(named: dict):
    for key, value in named.items():
        if isinstance(value, torch.Tensor) and not torch.all(torch.isfinite(value)):
            raise NonFiniteLossError(key)


def backward(loss: torch.Tensor, params: NetworkParams, named_losses: dict | None = None) -> dict:
    """Reverse-mode gradients of scalar ``loss`` for every parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    check_finite(named_losses or {"loss": loss})
    if not torch.isfinite(loss):
        raise NonFiniteLossError("loss")
    names = list(params.tensors)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    out = {}
    for n, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        if not torch.all(torch.isfinite(g)):
            raise NonFiniteLossError(f"grad:{n}")
        out[n] = g
    return out


def measure_forward_time(forward, repeats: int = 5) -> float:
    """Median wall-clock seconds of ``forward()`` over ``repeats`` calls."""
    times = []
    with torch.no_grad():
        for _ in range(max(5, repeats)):
            t0 = time.perf_counter()
            forward()
            times.append(time.perf_counter() - t0)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, params: NetworkParams, manifest: dict,
                    extra_tensors: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``params.bin`` into ``directory``.

    ``extra_tensors`` (e.g. optimizer buffers) are stored in the same blob.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, blobs, offset = {}, [], 0
    items = [(k, v) for k, v in params.items()] + list((extra_tensors or {}).items())
    for name, tensor in items:
        t = tensor.detach().cpu()
        code = _BIN_DTYPES[t.dtype]
        data = np.ascontiguousarray(t.numpy(), dtype=np.dtype(code)).tobytes()
        index[name] = {"shape": list(t.shape), "offset": offset, "dtype": code}
        blobs.append(data)
        offset += len(data)
    doc = dict(manifest)
    doc["parameters"] = [k for k, _ in params.items()]
    doc["parameter_index"] = index
    tmp_bin = directory / "params.bin.tmp"
    tmp_bin.write_bytes(b"".join(blobs))
    tmp_bin.replace(directory / "params.bin")
    tmp_man = directory / "manifest.json.tmp"
    tmp_man.write_text(json.dumps(doc, indent=1, sort_keys=True))
    tmp_man.replace(directory / "manifest.json")
    return directory


def load_checkpoint(directory):
    """Return ``(params, extra_tensors, manifest)`` from a checkpoint directory."""
    directory = Path(directory)
    man_path = directory / "manifest.json"
    if not man_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest in {directory}")
    try:
        manifest = json.loads(man_path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{man_path}: line {exc.lineno}: {exc.msg}") from None
    blob = (directory / "params.bin").read_bytes()
    index = manifest.get("parameter_index")
    if index is None:
        raise SceneFormatError(f"{man_path}: missing key 'parameter_index'")
    names = set(manifest.get("parameters", index))
    params, extra = {}, {}
    for name, entry in index.items():
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=entry["offset"]).reshape(entry["shape"])
        tdtype = torch.float64 if dt.itemsize == 8 else torch.float32
        t = torch.tensor(arr.astype(dt.newbyteorder("=")), dtype=tdtype)
        if name in names:
            params[name] = t.requires_grad_(True)
        else:
            extra[name] = t
    return NetworkParams(params, manifest.get("network", {})), extra, manifest


def spec_to_dict(spec: LayerSpec) -> dict:
    return asdict(spec)
