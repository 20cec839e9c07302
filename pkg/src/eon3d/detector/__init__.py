"""Vote-based 3D detector with equivariance suspension."""

from .config import DEFAULT_LOSS_WEIGHTS, VARIANTS, DetectorConfig
from .losses import compute_losses, objectness_targets, wrapped_angle_distance
from .model import (
    Detector,
    ForwardOutput,
    Proposals,
    Regions,
    aggregate_regions,
    assemble_detections,
    group_regions,
    safe_yaw,
    vote,
)
from .nms import nms

__all__ = [
    "DEFAULT_LOSS_WEIGHTS", "VARIANTS", "DetectorConfig", "compute_losses", "objectness_targets",
    "wrapped_angle_distance", "Detector", "ForwardOutput", "Proposals", "Regions",
    "aggregate_regions", "assemble_detections", "group_regions", "safe_yaw", "vote", "nms",
]
