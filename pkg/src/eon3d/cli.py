"""Command-line entry point: gen, train, eval, verify, ablate.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import multiprocessing
import os
import shutil
import sys
from collections import Counter
from pathlib import Path

from .config import RunConfig, load_run_config
from .detector import Detector, DetectorConfig
from .detector.train import LOG_NAME, detector_from_checkpoint, load_split, train
from .errors import (
    ConfigurationError,
    EonError,
    GenerationFailure,
    GroupMismatchError,
    NonFiniteLossError,
    SceneFormatError,
)
from .evalkit import equivariance_probe, evaluate, write_report
from .scenegen import SCENE_SUFFIX, generate_scene, load_scene, read_manifest, save_scene, write_manifest

log = logging.getLogger("eon3d")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def num_workers() -> int:
    raw = os.environ.get("EON_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"EON_NUM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigurationError("EON_NUM_WORKERS must be >= 1")
    return n


def parse_thresholds(text: str) -> tuple:
    try:
        values = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ConfigurationError(f"bad --thresholds {text!r}") from None
    if not values or any(not 0 < t <= 1 for t in values):
        raise ConfigurationError("thresholds must lie in (0, 1]")
    return values


def read_train_log(directory) -> list:
    path = Path(directory) / LOG_NAME
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text().splitlines() if line]


# ---------------------------------------------------------------------------
# gen


def _gen_one(job):
    cfg, seed, path = job
    scene = generate_scene(cfg, seed)
    save_scene(scene, path)
    return len(scene.gt_boxes)


def generate_dataset(cfg: RunConfig, out_dir, force: bool = False, workers: int = 1) -> dict:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigurationError(f"output directory {out} is not empty (use --force)")
        shutil.rmtree(out / "scenes", ignore_errors=True)
        (out / "manifest.json").unlink(missing_ok=True)
    splits, jobs = {}, []
    for split, seeds in cfg.dataset.seeds().items():
        folder = out / "scenes" / split
        folder.mkdir(parents=True, exist_ok=True)
        rel = []
        for seed in seeds:
            name = f"{split}_{seed:07d}{SCENE_SUFFIX}"
            rel.append(f"scenes/{split}/{name}")
            jobs.append((cfg.scenegen, seed, folder / name))
        splits[split] = rel
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.get_context("spawn").Pool(workers) as pool:
            counts = pool.map(_gen_one, jobs, chunksize=4)
    else:
        counts = [_gen_one(job) for job in jobs]
    write_manifest(out, splits)
    summary, i = {}, 0
    for split, rel in splits.items():
        hist = Counter(counts[i:i + len(rel)])
        summary[split] = {"scenes": len(rel), "objects_per_scene": dict(sorted(hist.items()))}
        i += len(rel)
    return summary


def cmd_gen(args) -> int:
    cfg = load_run_config(args.config)
    out = args.out or cfg.data_dir
    summary = generate_dataset(cfg, out, args.force, num_workers())
    for split, s in summary.items():
        hist = ", ".join(f"{k} obj: {v}" for k, v in s["objects_per_scene"].items())
        print(f"{split}: {s['scenes']} scenes ({hist})")
    print(f"manifest: {Path(out) / 'manifest.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if not cfg.manifest.exists():
        raise ConfigurationError(f"dataset manifest not found: {cfg.manifest}")
    scenes = load_split(cfg.manifest, "train", cfg.detector.group_order)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))

    def progress(entry):
        print(f"epoch {entry['epoch']:3d}  total {entry['losses']['total']:.4f}  "
              f"({entry['wall_seconds']:.1f}s)", flush=True)

    result = train(cfg.detector, scenes, out, resume=not args.restart, progress=progress)
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _eval_scenes(detector: Detector, manifest, split: str) -> list:
    splits = read_manifest(manifest)
    if split not in splits:
        raise ConfigurationError(f"manifest {manifest} has no split {split!r}")
    scenes = [load_scene(p) for p in splits[split]]
    order = detector.cfg.group_order
    if detector.cfg.uses_orientation:
        for s, p in zip(scenes, splits[split]):
            if s.group_order != order:
                raise GroupMismatchError(
                    f"{p}: scene group order {s.group_order} does not match checkpoint group order {order}")
    return scenes


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config) if args.config else None
    manifest = args.data or (cfg.manifest if cfg else None)
    if manifest is None:
        raise ConfigurationError("eval needs --data or --config")
    thresholds = parse_thresholds(args.thresholds) if args.thresholds else (
        cfg.thresholds if cfg else (0.25, 0.5))
    split = args.split or (cfg.eval_split if cfg else "test")
    ckpt = Path(args.checkpoint)
    detector, _, _ = detector_from_checkpoint(ckpt)
    scenes = _eval_scenes(detector, manifest, split)
    report = evaluate(detector, scenes, thresholds)
    out = Path(args.out) if args.out else ckpt.parent / f"eval_{split}"
    write_report(report, out, read_train_log(ckpt.parent))
    for key, value in report["map"].items():
        print(f"mAP@{key}: {value:.4f}")
    print(f"report: {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify


def cmd_verify(args) -> int:
    if bool(args.checkpoint) == bool(args.random_params):
        raise ConfigurationError("verify needs exactly one of --checkpoint or --random-params")
    if args.checkpoint:
        detector, _, _ = detector_from_checkpoint(args.checkpoint)
    else:
        base = load_run_config(args.config).detector if args.config else DetectorConfig()
        changes = {"dtype": args.dtype}
        if args.variant:
            changes["variant"] = args.variant
        if args.oracle:
            changes.update(oracle_orientation=True, oracle_segmentation=True)
        detector = Detector(base.replace(**changes))
    scene = load_scene(args.scene)
    report = equivariance_probe(detector, scene, args.object_id)
    print(f"variant {report.variant}  N={report.group_order}  object {report.object_id}  "
          f"clearance {report.clearance:.3f} m (needs > {report.required_clearance:.3f})")
    if not report.applicable:
        print("object is not isolated: diagnostics reported, bounds not asserted")
    print("g0  orbit_res   shift_ok  yaw_err     size_drift  static_drift")
    for r in report.rows:
        def f(x):
            return "   -      " if x is None else f"{x:.3e}"
        print(f"{r.g0:2d}  {f(r.orbit_residual)}  {f(r.shift_correct_rate)}  {f(r.yaw_delta_error)}  "
              f"{f(r.size_drift)}  {f(r.static_center_drift)}")
    doc = report.to_dict()
    if args.out:
        path = Path(args.out)
        if path.suffix != ".json":
            path.mkdir(parents=True, exist_ok=True)
            path = path / "verify.json"
        path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    else:
        print(json.dumps(doc, sort_keys=True))
    if report.asserted:
        print("PASS" if report.passed else "FAIL: " + "; ".join(report.failures))
        return EXIT_OK if report.passed else EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate


def ablation_rows(cfg: RunConfig) -> list:
    """(label, DetectorConfig) for every cell of the ablation grid."""
    ab = cfg.ablation
    base = cfg.detector
    orders = ab.group_orders or (base.group_order,)
    rows, seen = [], set()
    for variant in ab.variants:
        for n in orders:
            for aug in ab.objaug:
                det = base.replace(variant=variant, group_order=n,
                                   objaug_degrees=ab.objaug_degrees if aug else 0.0,
                                   oracle_orientation=False, oracle_segmentation=False)
                label = f"{variant}_N{det.model_group_order}" + ("_objaug" if aug else "")
                if label not in seen:
                    seen.add(label)
                    rows.append((label, det))
                if ab.oracle and variant == "eon":
                    det = det.replace(oracle_orientation=True, oracle_segmentation=True)
                    rows.append((label + "_oracle", det))
    return rows


def ablation_columns(thresholds) -> list:
    return (["variant", "N", "objaug", "oracle"] + [f"mAP@{t:g}" for t in thresholds]
            + ["params", "median_forward_ms", "status"])


def run_ablation(cfg: RunConfig, out_dir, force: bool = False, progress=print) -> list:
    from .evalkit.plots import plot_ablation

    out = Path(out_dir)
    if force and out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    if not cfg.manifest.exists():
        progress(f"generating dataset in {cfg.data_dir}")
        generate_dataset(cfg, cfg.data_dir, force=False, workers=num_workers())
    train_scenes = load_split(cfg.manifest, "train")
    test_scenes = load_split(cfg.manifest, cfg.eval_split)
    results = []
    for label, det_cfg in ablation_rows(cfg):
        row = {"variant": det_cfg.variant, "N": det_cfg.model_group_order,
               "objaug": det_cfg.objaug_degrees > 0,
               "oracle": det_cfg.oracle_orientation and det_cfg.oracle_segmentation,
               "label": label, "map25": None}
        try:
            progress(f"[{label}] training")
            res = train(det_cfg, train_scenes, out / label)
            report = evaluate(res.detector, test_scenes, cfg.thresholds)
            write_report(report, out / label / "eval", res.log)
            for t in cfg.thresholds:
                row[f"mAP@{t:g}"] = report["map"][f"{t:g}"]
            row["map25"] = report["map"].get("0.25")
            row["params"] = report["cost"]["parameters"]
            row["median_forward_ms"] = report["cost"]["median_forward_ms"]
            row["status"] = "ok"
            progress(f"[{label}] " + "  ".join(f"mAP@{t:g}={row[f'mAP@{t:g}']:.4f}" for t in cfg.thresholds))
        except (EonError, ArithmeticError, RuntimeError) as exc:
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
            progress(f"[{label}] {row['status']}")
        results.append(row)
    columns = ablation_columns(cfg.thresholds)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in results:
            w.writerow([_fmt(row.get(c)) for c in columns])
    plot_ablation(results, out / "ablation.png")
    return results


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    out = Path(args.out or Path(cfg.out_dir) / "ablation")
    rows = run_ablation(cfg, out, args.force, progress=lambda msg: print(msg, flush=True))
    print(f"ablation table: {out / 'ablation.csv'} ({len(rows)} rows)")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eon3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", help="dataset directory (default: config data_dir)")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (default: config out_dir)")
    t.add_argument("--restart", action="store_true", help="ignore an existing checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--data", help="dataset manifest (default: from --config)")
    e.add_argument("--split")
    e.add_argument("--out")
    e.add_argument("--thresholds", help="comma-separated IoU thresholds, e.g. 0.25,0.5")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="object-level equivariance probe")
    v.add_argument("--checkpoint")
    v.add_argument("--random-params", action="store_true")
    v.add_argument("--config")
    v.add_argument("--variant", choices=["baseline", "eon", "pre_eon", "full_eon", "ion"])
    v.add_argument("--oracle", action="store_true", help="ground-truth orientation and segmentation")
    v.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    v.add_argument("--scene", required=True)
    v.add_argument("--object-id", type=int, default=0)
    v.add_argument("--out")
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", help="train and evaluate the variant grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out")
    a.add_argument("--force", action="store_true", help="discard previous runs in the output directory")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}; training aborted, last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, GroupMismatchError, SceneFormatError, FileNotFoundError,
            GenerationFailure, EonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
