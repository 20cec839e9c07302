import csv
import json

import pytest
import torch

from eon3d.cli import ablation_rows, main, parse_thresholds
from eon3d.config import load_run_config, run_config_from_dict
from eon3d.eqvnet import load_checkpoint
from eon3d.detector import Detector
from eon3d.errors import ConfigurationError
from eon3d.scenegen import SceneGenConfig, generate_isolated_scene, load_scene, read_manifest, save_scene

TINY_DETECTOR = {"sa1_samples": 64, "sa1_width": 8, "num_seeds": 24, "sa2_width": 12,
                 "head_hidden": 8, "region_width": 12, "num_regions": 8, "epochs": 1}


def write_config(path, **overrides):
    cfg = {"data_dir": "data", "out_dir": "runs", "dataset": {"train_scenes": 3, "test_scenes": 2},
           "detector": dict(TINY_DETECTOR)}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    path.write_text(json.dumps(cfg))
    return path


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def csv_rows(path, drop=("median_forward_ms",)):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: v for k, v in r.items() if k not in drop} for r in rows]


# -- config -----------------------------------------------------------------


def test_config_unknown_keys_rejected(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", detector={"not_a_key": 1})
    assert main(["gen", "--config", str(path)]) == 2
    assert "not_a_key" in capsys.readouterr().err
    path = write_config(tmp_path / "d.json", bogus=3)
    assert main(["gen", "--config", str(path)]) == 2
    assert "bogus" in capsys.readouterr().err


def test_config_paths_relative_to_file(tmp_path):
    cfg = load_run_config(write_config(tmp_path / "c.json"))
    assert cfg.data_dir == str(tmp_path / "data")
    assert cfg.detector.sa1_width == 8 and cfg.detector.optimizer == "adam"


def test_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        run_config_from_dict({"scenegen": {"group_order": 8}})
    with pytest.raises(ConfigurationError):
        run_config_from_dict({"thresholds": [0.0]})
    bad = tmp_path / "bad.json"
    bad.write_text('{\n "x": }')
    with pytest.raises(ConfigurationError, match="line 2"):
        load_run_config(bad)
    with pytest.raises(ConfigurationError):
        load_run_config(tmp_path / "missing.json")
    assert parse_thresholds("0.25, 0.5") == (0.25, 0.5)
    with pytest.raises(ConfigurationError):
        parse_thresholds("0.25,abc")


# -- gen --------------------------------------------------------------------


def test_gen_is_byte_identical(tmp_path, capsys):
    path = write_config(tmp_path / "c.json")
    assert main(["gen", "--config", str(path), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen", "--config", str(path), "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "manifest.json" in a
    assert "train: 3 scenes" in capsys.readouterr().out


def test_gen_refuses_non_empty_dir(tmp_path):
    path = write_config(tmp_path / "c.json")
    out = tmp_path / "data"
    assert main(["gen", "--config", str(path)]) == 0
    assert main(["gen", "--config", str(path)]) == 2
    assert main(["gen", "--config", str(path), "--force"]) == 0
    assert len(read_manifest(out / "manifest.json")["train"]) == 3


def test_gen_zero_objects(tmp_path):
    path = write_config(tmp_path / "c.json", scenegen={"object_count": [0, 0]})
    assert main(["gen", "--config", str(path)]) == 0
    for p in read_manifest(tmp_path / "data" / "manifest.json")["train"]:
        scene = load_scene(p)
        assert scene.gt_boxes == [] and not scene.labels.foreground.any()


# -- train / eval -----------------------------------------------------------


def test_train_without_dataset_exits_2(tmp_path):
    path = write_config(tmp_path / "c.json")
    assert main(["train", "--config", str(path)]) == 2


def test_train_zero_epochs_is_initialisation(tmp_path):
    path = write_config(tmp_path / "c.json", detector={"epochs": 0})
    assert main(["gen", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path)]) == 0
    params, _, manifest = load_checkpoint(tmp_path / "runs" / "checkpoint")
    init = Detector(load_run_config(path).detector).params
    assert manifest["epoch"] == 0
    assert all(torch.equal(params[n], init[n].detach()) for n in init)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    path = write_config(root / "c.json")
    assert main(["gen", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path)]) == 0
    return root, path


def test_eval_twice_identical_reports(trained):
    root, path = trained
    ckpt = str(root / "runs" / "checkpoint")
    for out in ("e1", "e2"):
        assert main(["eval", "--checkpoint", ckpt, "--config", str(path), "--out", str(root / out)]) == 0
    a = json.loads((root / "e1" / "report.json").read_text())
    b = json.loads((root / "e2" / "report.json").read_text())
    a["cost"].pop("median_forward_ms")
    b["cost"].pop("median_forward_ms")
    assert a == b
    assert (root / "e1" / "report.csv").read_bytes() == (root / "e2" / "report.csv").read_bytes()
    assert (root / "e1" / "loss.png").exists()


def test_eval_single_threshold(trained):
    root, path = trained
    ckpt = str(root / "runs" / "checkpoint")
    assert main(["eval", "--checkpoint", ckpt, "--config", str(path), "--thresholds", "0.25",
                 "--out", str(root / "e3")]) == 0
    report = json.loads((root / "e3" / "report.json").read_text())
    assert list(report["ap"]) == ["0.25"]


def test_eval_group_mismatch_exits_2(trained, tmp_path):
    root, path = trained
    other = write_config(tmp_path / "c8.json", scenegen={"group_order": 8}, detector={"group_order": 8})
    assert main(["gen", "--config", str(other)]) == 0
    ckpt = str(root / "runs" / "checkpoint")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "data" / "manifest.json")]) == 2


# -- verify -----------------------------------------------------------------


@pytest.fixture(scope="module")
def isolated_scene_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("scene") / "iso.scene.json"
    save_scene(generate_isolated_scene(SceneGenConfig(yaw_mode="grid", object_count=(2, 2)), 4), path)
    return path


def test_verify_oracle_eon_passes(isolated_scene_file, tmp_path, capsys):
    out = tmp_path / "v.json"
    code = main(["verify", "--random-params", "--variant", "eon", "--oracle", "--scene",
                 str(isolated_scene_file), "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert doc["asserted"] and doc["passed"]
    assert doc["rows"][0]["orbit_residual"] == 0.0
    assert "PASS" in capsys.readouterr().out


def test_verify_ion_reports_without_assertion(isolated_scene_file, capsys):
    assert main(["verify", "--random-params", "--variant", "ion", "--scene", str(isolated_scene_file)]) == 0
    doc = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert not doc["asserted"] and len(doc["rows"]) == 4


def test_verify_needs_a_model(isolated_scene_file):
    assert main(["verify", "--scene", str(isolated_scene_file)]) == 2


def test_verify_checkpoint(trained, isolated_scene_file):
    root, _ = trained
    assert main(["verify", "--checkpoint", str(root / "runs" / "checkpoint"), "--scene",
                 str(isolated_scene_file), "--object-id", "1"]) == 0


# -- ablate -----------------------------------------------------------------


def test_ablation_grid_labels():
    cfg = run_config_from_dict({"ablation": {"variants": ["baseline", "eon"], "group_orders": [2, 4],
                                             "objaug": [False, True]}})
    labels = [label for label, _ in ablation_rows(cfg)]
    assert labels[:2] == ["baseline_N1", "baseline_N1_objaug"]
    assert "eon_N4_oracle" in labels and "eon_N2_objaug_oracle" in labels
    assert len(labels) == len(set(labels)) == 2 + 8


def test_ablate_small_grid_is_deterministic(tmp_path):
    path = write_config(tmp_path / "c.json", ablation={"variants": ["baseline", "eon"], "oracle": False})
    assert main(["ablate", "--config", str(path), "--out", str(tmp_path / "a1")]) == 0
    assert main(["ablate", "--config", str(path), "--out", str(tmp_path / "a2")]) == 0
    rows = csv_rows(tmp_path / "a1" / "ablation.csv")
    assert len(rows) == 2
    assert [(r["variant"], r["N"]) for r in rows] == [("baseline", "1"), ("eon", "4")]
    assert all(r["status"] == "ok" and int(r["params"]) > 0 for r in rows)
    assert rows == csv_rows(tmp_path / "a2" / "ablation.csv")
    full = csv_rows(tmp_path / "a1" / "ablation.csv", drop=())
    assert all(float(r["median_forward_ms"]) > 0 for r in full)
    assert (tmp_path / "a1" / "ablation.png").exists()
