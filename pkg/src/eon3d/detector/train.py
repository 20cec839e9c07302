"""Seeded training loop with per-epoch checkpoints and resume."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..eqvnet import check_finite, load_checkpoint, save_checkpoint
from ..errors import ConfigurationError, NonFiniteLossError
from ..scenegen import Scene, load_scene, object_rotation_augment, read_manifest
from .config import DetectorConfig
from .losses import compute_losses
from .model import Detector

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "eon3d-checkpoint"
LOG_NAME = "train_log.jsonl"


@dataclass
class TrainResult:
    detector: Detector
    log: list
    checkpoint: Path


def load_split(manifest_path, split: str = "train", expected_group_order=None) -> list:
    splits = read_manifest(manifest_path)
    if split not in splits:
        raise ConfigurationError(f"manifest {manifest_path} has no split {split!r}")
    return [load_scene(p, expected_group_order) for p in splits[split]]


def checkpoint_manifest(cfg: DetectorConfig, epoch: int) -> dict:
    return {"format": CHECKPOINT_FORMAT, "version": 1, "epoch": epoch, "detector": cfg.to_dict(),
            "network": {"variant": cfg.variant, "group_order": cfg.model_group_order}}


def detector_from_checkpoint(directory, overrides: dict | None = None) -> tuple:
    """Return ``(detector, extra_tensors, manifest)``."""
    params, extra, manifest = load_checkpoint(directory)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{directory} is not a detector checkpoint")
    cfg = DetectorConfig.from_dict(manifest["detector"])
    if overrides:
        cfg = cfg.replace(**overrides)
    return Detector(cfg, params), extra, manifest


def make_optimizer(cfg: DetectorConfig, tensors: list):
    if cfg.optimizer == "adam":
        return torch.optim.Adam(tensors, lr=cfg.lr)
    return torch.optim.SGD(tensors, lr=cfg.lr, momentum=cfg.momentum)


def learning_rate(cfg: DetectorConfig, epoch: int) -> float:
    """Step schedule: multiply by ``lr_gamma`` at every epoch listed in ``lr_steps``."""
    return cfg.lr * cfg.lr_gamma ** sum(1 for s in cfg.lr_steps if epoch >= s)


def optimizer_state(opt, names: list) -> dict:
    out = {}
    for name, p in zip(names, opt.param_groups[0]["params"]):
        for key, value in opt.state.get(p, {}).items():
            if isinstance(value, torch.Tensor):
                out[f"optim/{name}/{key}"] = value
    return out


def restore_optimizer(opt, names: list, extra: dict):
    for name, p in zip(names, opt.param_groups[0]["params"]):
        prefix = f"optim/{name}/"
        state = {k[len(prefix):]: v.clone() for k, v in extra.items() if k.startswith(prefix)}
        if state:
            opt.state[p] = state


class Trainer:
    def __init__(self, cfg: DetectorConfig, scenes: list, out_dir, progress=None):
        if not scenes:
            raise ConfigurationError("training set is empty")
        self.cfg = cfg
        self.scenes = scenes
        self.out_dir = Path(out_dir)
        self.progress = progress
        self._geometry = {}

    def _scene(self, index: int, epoch: int) -> tuple:
        scene = self.scenes[index]
        if self.cfg.objaug_degrees > 0:
            seed = int(np.random.default_rng([self.cfg.seed, epoch, index]).integers(2 ** 31))
            return object_rotation_augment(scene, self.cfg.objaug_degrees, seed), None
        if index not in self._geometry:
            self._geometry[index] = self.detector.scene_geometry(scene.points)
        return scene, self._geometry[index]

    def _losses(self, scene: Scene, geometry) -> dict:
        det = self.detector
        out = det.forward(scene, geometry)
        bins = det._bins_for_group(scene) if scene.group_order != det.group.order else None
        losses = compute_losses(out, scene, self.cfg, det.class_sizes, bins)
        check_finite(losses)
        return losses

    def _initial_entry(self) -> dict:
        t0 = time.perf_counter()
        sums = {}
        with torch.no_grad():
            for i in range(len(self.scenes)):
                scene, geo = self._scene(i, 0)
                for k, v in self._losses(scene, geo).items():
                    sums[k] = sums.get(k, 0.0) + float(v)
        n = len(self.scenes)
        return {"epoch": 0, "losses": {k: v / n for k, v in sums.items()},
                "wall_seconds": time.perf_counter() - t0}

    def _write_log(self, entries: list):
        with open(self.out_dir / LOG_NAME, "w") as fh:
            for e in entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    def _save(self, epoch: int, opt, names: list):
        save_checkpoint(self.out_dir / "checkpoint", self.detector.params,
                        checkpoint_manifest(self.cfg, epoch), optimizer_state(opt, names))

    def run(self, resume: bool = True) -> TrainResult:
        cfg = self.cfg
        torch.set_num_threads(cfg.num_threads)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = self.out_dir / "checkpoint"
        start, entries, extra = 1, [], {}
        if resume and (ckpt / "manifest.json").exists():
            det, extra, manifest = detector_from_checkpoint(ckpt)
            # the epoch budget may grow between runs; everything else must match
            if {**det.cfg.to_dict(), "epochs": 0} != {**cfg.to_dict(), "epochs": 0}:
                raise ConfigurationError(f"checkpoint in {ckpt} was written with a different config")
            det = Detector(cfg, det.params)
            self.detector = det
            start = int(manifest["epoch"]) + 1
            log_path = self.out_dir / LOG_NAME
            if log_path.exists():
                entries = [json.loads(line) for line in log_path.read_text().splitlines() if line]
                entries = [e for e in entries if e["epoch"] < start]
        else:
            self.detector = Detector(cfg)
        names = list(self.detector.params.tensors)
        opt = make_optimizer(cfg, [self.detector.params[n] for n in names])
        restore_optimizer(opt, names, extra)
        if start == 1:
            entries = [self._initial_entry()]
            self._write_log(entries)
            self._save(0, opt, names)

        for epoch in range(start, cfg.epochs + 1):
            t0 = time.perf_counter()
            for group in opt.param_groups:
                group["lr"] = learning_rate(cfg, epoch - 1)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(self.scenes))
            sums = {}
            try:
                for b in range(0, len(order), cfg.batch_size):
                    batch = order[b:b + cfg.batch_size]
                    opt.zero_grad(set_to_none=True)
                    for i in batch:
                        scene, geo = self._scene(int(i), epoch)
                        losses = self._losses(scene, geo)
                        (losses["total"] / len(batch)).backward()
                        for k, v in losses.items():
                            sums[k] = sums.get(k, 0.0) + float(v.detach())
                    check_finite({f"grad:{n}": self.detector.params[n].grad for n in names})
                    opt.step()
            except NonFiniteLossError:
                log.error("non-finite value at epoch %d; keeping checkpoint of epoch %d", epoch, epoch - 1)
                raise
            entry = {"epoch": epoch, "losses": {k: v / len(order) for k, v in sums.items()},
                     "wall_seconds": time.perf_counter() - t0, "lr": learning_rate(cfg, epoch - 1)}
            entries.append(entry)
            self._save(epoch, opt, names)
            self._write_log(entries)
            if self.progress:
                self.progress(entry)
        return TrainResult(self.detector, entries, ckpt)


def train(cfg: DetectorConfig, dataset, out_dir, resume: bool = True, progress=None) -> TrainResult:
    """Train on ``dataset`` (a manifest path or a list of scenes)."""
    if isinstance(dataset, (str, Path)):
        dataset = load_split(dataset, "train")
    return Trainer(cfg, list(dataset), out_dir, progress).run(resume)
