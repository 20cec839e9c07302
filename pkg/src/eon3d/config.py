"""Run configuration: one JSON document per run, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .detector.config import VARIANTS, DetectorConfig
from .errors import ConfigurationError, EonError
from .scenegen import SceneGenConfig

# default toy benchmark training budget
TOY_DETECTOR = DetectorConfig(optimizer="adam", lr=0.002, batch_size=4, epochs=15)


@dataclass(frozen=True)
class DatasetSpec:
    train_scenes: int = 200
    test_scenes: int = 50
    train_seed: int = 0
    test_seed: int = 100000

    def __post_init__(self):
        if self.train_scenes < 0 or self.test_scenes < 0:
            raise ConfigurationError("scene counts must be >= 0")

    def seeds(self) -> dict:
        return {"train": [self.train_seed + i for i in range(self.train_scenes)],
                "test": [self.test_seed + i for i in range(self.test_scenes)]}


@dataclass(frozen=True)
class AblationSpec:
    variants: tuple = VARIANTS
    group_orders: tuple = ()       # empty: use detector.group_order only
    objaug: tuple = (False,)
    oracle: bool = True            # add an eon row with both oracle flags
    objaug_degrees: float = 30.0

    def __post_init__(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r} in ablation.variants")
        if any(int(n) < 1 for n in self.group_orders):
            raise ConfigurationError("ablation.group_orders must be >= 1")
        object.__setattr__(self, "variants", tuple(self.variants))
        object.__setattr__(self, "group_orders", tuple(int(n) for n in self.group_orders))
        object.__setattr__(self, "objaug", tuple(bool(x) for x in self.objaug))


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    scenegen: SceneGenConfig = field(default_factory=SceneGenConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    detector: DetectorConfig = TOY_DETECTOR
    thresholds: tuple = (0.25, 0.5)
    eval_split: str = "test"
    ablation: AblationSpec = field(default_factory=AblationSpec)

    def __post_init__(self):
        if not self.thresholds or any(not 0 < t <= 1 for t in self.thresholds):
            raise ConfigurationError("thresholds must lie in (0, 1]")
        if self.scenegen.group_order != self.detector.group_order:
            raise ConfigurationError(
                f"scenegen.group_order {self.scenegen.group_order} != detector.group_order "
                f"{self.detector.group_order}")
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))

    @property
    def manifest(self) -> Path:
        return Path(self.data_dir) / "manifest.json"

    def to_dict(self) -> dict:
        d = {
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "scenegen": _jsonable(dataclasses.asdict(self.scenegen)),
            "dataset": dataclasses.asdict(self.dataset),
            "detector": self.detector.to_dict(),
            "thresholds": list(self.thresholds),
            "eval_split": self.eval_split,
            "ablation": _jsonable(dataclasses.asdict(self.ablation)),
        }
        return d


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _section(cls, data, name: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{name} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigurationError(f"unknown config key {name}.{key!r}")
    try:
        return cls(**data)
    except EonError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def run_config_from_dict(data: dict, base_dir=None) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    names = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in names:
            raise ConfigurationError(f"unknown config key {key!r}")
    kw = dict(data)
    det = dict(TOY_DETECTOR.to_dict())
    if "detector" in kw:
        if not isinstance(kw["detector"], dict):
            raise ConfigurationError("detector must be a JSON object")
        for key in kw["detector"]:
            if key not in det:
                raise ConfigurationError(f"unknown config key detector.{key!r}")
        det.update(kw["detector"])
    kw["detector"] = _section(DetectorConfig, det, "detector")
    for name, cls in (("scenegen", SceneGenConfig), ("dataset", DatasetSpec), ("ablation", AblationSpec)):
        if name in kw:
            kw[name] = _section(cls, kw[name], name)
    if "scenegen" not in kw:
        kw["scenegen"] = SceneGenConfig(group_order=kw["detector"].group_order)
    for key in ("data_dir", "out_dir"):
        if key in kw:
            if not isinstance(kw[key], str):
                raise ConfigurationError(f"{key} must be a string")
            if base_dir is not None and not Path(kw[key]).is_absolute():
                kw[key] = str(Path(base_dir) / kw[key])
    try:
        return RunConfig(**kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None


def load_run_config(path) -> RunConfig:
    """Parse a run config; relative paths are taken relative to the file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    return run_config_from_dict(data, path.parent)


def save_run_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=1))
    return path
