from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..errors import ConfigurationError
from ..scenegen import DEFAULT_CLASSES

VARIANTS = ("baseline", "eon", "pre_eon", "full_eon", "ion")

DEFAULT_LOSS_WEIGHTS = {
    "vote": 1.0,
    "segmentation": 1.0,
    "orientation": 1.0,
    "objectness": 1.0,
    "center": 1.0,
    "size": 1.0,
    "yaw": 1.0,
    "class": 0.5,
}


@dataclass(frozen=True)
class DetectorConfig:
    variant: str = "eon"
    group_order: int = 4
    region_rule: str = "mode"
    oracle_orientation: bool = False
    oracle_segmentation: bool = False
    classes: tuple = DEFAULT_CLASSES
    # backbone
    sa1_samples: int = 256
    sa1_radius: float = 0.35
    sa1_neighbors: int = 24
    sa1_width: int = 32
    num_seeds: int = 64
    sa2_radius: float = 0.7
    sa2_neighbors: int = 24
    sa2_width: int = 64
    group_kernel: int = 3
    depthwise_group_conv: bool = False
    head_hidden: int = 32
    # voting / regions
    num_regions: int = 16
    cluster_radius: float = 0.6
    max_region_members: int = 64
    region_width: int = 64
    proposals_per_region: int = 1
    segmentation_threshold: float = 0.0
    nms_iou: float = 0.25
    # losses
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_LOSS_WEIGHTS))
    delta_pos: float = 0.3
    delta_neg: float = 0.6
    # optimisation
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    lr_steps: tuple = ()
    lr_gamma: float = 0.1
    epochs: int = 0
    batch_size: int = 8
    objaug_degrees: float = 0.0
    seed: int = 0
    dtype: str = "float32"
    num_threads: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.group_order < 1:
            raise ConfigurationError("group_order must be >= 1")
        if self.region_rule not in ("mode", "central_point"):
            raise ConfigurationError(f"unknown region_rule {self.region_rule!r}")
        for name in ("sa1_radius", "sa2_radius", "cluster_radius", "delta_pos", "delta_neg"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if not self.delta_pos < self.delta_neg:
            raise ConfigurationError("delta_pos must be smaller than delta_neg")
        unknown = set(self.loss_weights) - set(DEFAULT_LOSS_WEIGHTS)
        if unknown:
            raise ConfigurationError(f"unknown loss weight(s): {sorted(unknown)}")
        if any(w < 0 for w in self.loss_weights.values()):
            raise ConfigurationError("loss weights must be >= 0")
        if self.proposals_per_region != 1:
            raise ConfigurationError("only one proposal per region is supported")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if (self.oracle_orientation or self.oracle_segmentation) and self.variant in ("full_eon", "ion"):
            raise ConfigurationError(f"oracle flags are not defined for variant {self.variant!r}")
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "lr_steps", tuple(self.lr_steps))
        object.__setattr__(self, "loss_weights", {**DEFAULT_LOSS_WEIGHTS, **self.loss_weights})

    @property
    def model_group_order(self) -> int:
        """Group order the network actually runs with (1 for the baseline)."""
        return 1 if self.variant == "baseline" else self.group_order

    @property
    def uses_orientation(self) -> bool:
        return self.variant in ("eon", "pre_eon", "full_eon") and self.model_group_order > 1

    def replace(self, **changes) -> DetectorConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["classes"] = list(self.classes)
        d["lr_steps"] = list(self.lr_steps)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> DetectorConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigurationError(f"unknown detector config key(s): {sorted(unknown)}")
        return cls(**data)
