import json
import math
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from tipfl.cli import main
from tipfl.config import ConfigError, load_config
from tipfl.data import read_csv, read_image, write_csv

ROOT = Path(__file__).resolve().parents[1]


def tiny_config(tmp_path, **overrides):
    cfg = {
        "seed": 0,
        "out_dir": str(tmp_path / "run"),
        "model": {"arch": "small_convnet", "activation": "tanh"},
        "train": {"learning_rate": 0.1, "batch_size": 8, "local_epochs": 1},
        "federation": {"num_clients": 4, "participation": 0.5, "rounds": 3},
        "defense": {"kind": "tip"},
        "attack": {"iterations": 30},
        "explain": {"defenses": ["dp", "tip"]},
        "data": {"num_classes": 3, "samples_per_class": 20, "image_size": 8, "test_size": 12},
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            cfg.setdefault(section, {}).update(values)
        else:
            cfg[section] = values
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture
def trained(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 0
    return cfg, tmp_path / "run"


# --- config --------------------------------------------------------------------------

def test_shipped_configs_validate():
    for name in ("desk.json", "paper_default.json"):
        cfg = load_config(ROOT / "configs" / name)
        assert cfg.defense.epsilon == 5 and cfg.defense.channel_fraction == 0.1 and cfg.defense.mask_radius == 0.5


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tiny_config(tmp_path, defense={"epsilonn": 3}))
    with pytest.raises(ConfigError):
        load_config(tiny_config(tmp_path, extra_section={"a": 1}))


def test_cross_field_validation(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tiny_config(tmp_path, defense={"epsilon": -1}))
    with pytest.raises(ConfigError):
        load_config(tiny_config(tmp_path, attack={"iterations": 0}))


def test_snapshot_echoes_defaults(tmp_path):
    snap = json.loads(load_config(tiny_config(tmp_path)).snapshot())
    assert snap["defense"]["delta"] == 1e-5
    assert snap["attack"]["optimizer"] == "adam"
    assert snap["data"]["noise"] == 0.1


# --- train ---------------------------------------------------------------------------

def test_missing_config_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.json"
    assert main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["fly"]) == 1


def test_train_writes_outputs_and_is_deterministic(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "a" / "rounds.csv")
    assert [r["round"] for r in rows] == ["1", "2", "3"]
    assert all(len(r["client_ids"].split(";")) == 2 for r in rows)
    for f in ("rounds.csv", "model.tipm"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert json.loads((tmp_path / "a" / "config_snapshot.json").read_text())["out_dir"] == str(tmp_path / "a")


def test_seed_override_changes_run(tmp_path):
    cfg = tiny_config(tmp_path)
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--out", str(tmp_path / "b"), "--seed", "7"])
    assert (tmp_path / "a/model.tipm").read_bytes() != (tmp_path / "b/model.tipm").read_bytes()


def test_bad_target_layer_is_config_error(tmp_path):
    cfg = tiny_config(tmp_path, defense={"target_layers": ["9"]})
    assert main(["train", "--config", str(cfg)]) == 1


# --- attack --------------------------------------------------------------------------

def test_attack_zero_targets(trained):
    cfg, run = trained
    assert main(["attack", "--config", str(cfg), "--model", str(run / "model.tipm"), "--targets", "0"]) == 1


def test_attack_missing_or_mismatched_model(trained, tmp_path):
    cfg, run = trained
    assert main(["attack", "--config", str(cfg), "--model", str(tmp_path / "x.tipm"), "--targets", "1"]) == 1
    other = tiny_config(tmp_path, model={"arch": "linear"}, defense={"kind": "dp"})
    assert main(["attack", "--config", str(other), "--model", str(run / "model.tipm"), "--targets", "1"]) == 1


def test_tip_on_dense_only_model_is_config_error(tmp_path):
    cfg = tiny_config(tmp_path, model={"arch": "linear"})
    assert main(["train", "--config", str(cfg)]) == 1


def test_attack_convex_case(tmp_path):
    # dense-only model: tip has nothing to target, so the defended row uses dp
    cfg = tiny_config(tmp_path, model={"arch": "linear"}, federation={"rounds": 1},
                      attack={"iterations": 200, "defenses": ["none", "dp"]}, defense={"kind": "none"})
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert main(["attack", "--config", str(cfg), "--model", str(run / "model.tipm"), "--targets", "1"]) == 0
    rows = {r["defense"]: r for r in read_csv(run / "attack.csv")}
    assert float(rows["none"]["mse"]) < 1e-4 * 255**2
    assert float(rows["dp"]["psnr"]) < float(rows["none"]["psnr"])


def test_attack_tip_lowers_psnr(trained):
    cfg, run = trained
    assert main(["attack", "--config", str(cfg), "--model", str(run / "model.tipm"), "--targets", "2"]) == 0
    rows = read_csv(run / "attack.csv")
    assert [(r["target_id"], r["defense"]) for r in rows] == [("0", "none"), ("0", "tip"), ("1", "none"), ("1", "tip")]
    for t in ("0", "1"):
        none, tip = (float(r["psnr"]) for r in rows if r["target_id"] == t)
        assert tip < none
    img = read_image(run / "images" / "target0_tip_recon.ppm")
    assert img.shape == (3, 8, 8)
    assert (run / "images" / "target1_original.ppm").is_file()


# --- explain ----------------------------------------------------------------------------

def test_explain_rows_and_heatmaps(trained):
    cfg, run = trained
    assert main(["explain", "--config", str(cfg), "--model", str(run / "model.tipm"), "--samples", "3"]) == 0
    rows = read_csv(run / "explain.csv")
    assert len(rows) == 3 * 2
    assert {r["defense"] for r in rows} == {"dp", "tip"}
    for r in rows:
        ref = read_image(run / "heatmaps" / f"sample{r['sample_id']}_none.pgm")
        assert ref.shape == (8, 8) and ref.max() == 255
        assert (run / "heatmaps" / f"sample{r['sample_id']}_{r['defense']}.pgm").read_bytes()[:2] == b"P5"


def test_explain_self_comparison(tmp_path):
    cfg = tiny_config(tmp_path, explain={"defenses": ["none"]})
    assert main(["train", "--config", str(cfg)]) == 0
    run = tmp_path / "run"
    assert main(["explain", "--config", str(cfg), "--model", str(run / "model.tipm"), "--samples", "4"]) == 0
    rows = read_csv(run / "explain.csv")
    assert len(rows) == 4 and all(float(r["ssim"]) == 1.0 for r in rows)
    assert all(r["psnr"] == "inf" for r in rows)


def test_explain_zero_samples(trained):
    cfg, run = trained
    assert main(["explain", "--config", str(cfg), "--model", str(run / "model.tipm"), "--samples", "0"]) == 1


# --- report -------------------------------------------------------------------------------

def _fake_run(root, name, kind, accs, psnrs, ssims):
    d = root / name
    d.mkdir()
    write_csv(d / "rounds.csv", [(i + 1, "0", a, 1.0, 0.0) for i, a in enumerate(accs)],
              ("round", "client_ids", "accuracy", "loss", "wall_ms"))
    (d / "config_snapshot.json").write_text(json.dumps({"defense": {"kind": kind}}))
    rows = [(i, kind, "l2", 0.1, 1.0, p, s) for i, (p, s) in enumerate(zip(psnrs, ssims))]
    rows += [(i, "none", "l2", 0.0, 0.0, 99.0, 1.0) for i in range(len(psnrs))]
    write_csv(d / "attack.csv", rows, ("target_id", "defense", "distance_kind", "final_distance", "mse", "psnr", "ssim"))
    return d


def test_report_summary_and_svg(tmp_path):
    a = _fake_run(tmp_path, "dp_run", "dp", [0.2, 0.5, 0.7], [10.1, 12.3, 9.7], [0.3, 0.1, 0.25])
    b = _fake_run(tmp_path, "tip_run", "tip", [0.3, 0.9], [8.0, 6.5], [0.05, 0.02])
    out = tmp_path / "rep"
    assert main(["report", "--run", str(a), str(b), "--out", str(out)]) == 0
    rows = read_csv(out / "summary.csv")
    assert [(r["run"], r["defense"]) for r in rows] == [("dp_run", "dp"), ("tip_run", "tip")]
    assert float(rows[0]["final_accuracy"]) == 0.7
    assert math.isclose(float(rows[0]["mean_psnr"]), (10.1 + 12.3 + 9.7) / 3, rel_tol=1e-12)
    assert math.isclose(float(rows[1]["mean_ssim"]), (0.05 + 0.02) / 2, rel_tol=1e-12)
    root = ET.parse(out / "accuracy.svg").getroot()
    lines = root.findall("{http://www.w3.org/2000/svg}polyline")
    assert len(lines) == 2
    assert len(lines[0].get("points").split()) == 3


def test_report_missing_rounds(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["report", "--run", str(tmp_path / "empty"), "--out", str(tmp_path / "rep")]) == 1


def test_end_to_end_smoke_over_report(trained, tmp_path):
    cfg, run = trained
    main(["attack", "--config", str(cfg), "--model", str(run / "model.tipm"), "--targets", "1"])
    assert main(["report", "--run", str(run), "--out", str(tmp_path / "rep")]) == 0
    (row,) = read_csv(tmp_path / "rep" / "summary.csv")
    assert row["defense"] == "tip" and np.isfinite(float(row["mean_psnr"]))
