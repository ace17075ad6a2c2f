import csv
import json

import numpy as np

from capservo.cli import main
from capservo.estimator import init_model, save_model

SMALL = ["--set", "collection.n_trajectories=2", "--set", 'collection.stations=["forearm"]']
TINY_REPORT = ["--set", "report.sweep_runs=2", "--set", "report.eval_trajectories=1",
               "--set", "report.suite_trials=1", "--set", 'collection.stations=["wrist","shin"]']


def run(*argv):
    return main([str(a) for a in argv])


def test_collect_small_and_manifest(tmp_path, capsys):
    assert run("collect", "--out", tmp_path / "a", "--seed", 11, *SMALL) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 11
    stats = manifest["dataset"]
    # Contact aborts are dropped, so written plus aborted accounts for every attempt.
    assert stats["trajectories"] + stats["aborted"] == 2
    with open(tmp_path / "a" / "dataset.csv") as fh:
        ids = {row["traj_id"] for row in csv.DictReader(fh)}
    assert len(ids) == stats["trajectories"]
    out = capsys.readouterr().out
    assert f"trajectories={stats['trajectories']} aborted={stats['aborted']}/2" in out
    assert manifest["outputs"]["dataset.csv"]


def test_unknown_key_and_bad_values(tmp_path):
    assert run("collect", "--out", tmp_path, "--set", "collection.n_trajectoriez=2") == 2
    assert run("collect", "--out", tmp_path, "--set", "collection.n_trajectories=0") == 2
    assert run("collect", "--out", tmp_path, "--set", 'collection.stations=["elbow_pit"]') == 2
    assert run("collect", "--out", tmp_path, "--set", "nonsense") == 2
    assert run("frobnicate") == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("collect", "--out", tmp_path, "--config", bad) == 2


def test_config_file_is_merged(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "collection": {"n_trajectories": 1, "stations": ["wrist"]}}))
    assert run("collect", "--out", tmp_path / "o", "--config", cfg) == 0
    m = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert m["seed"] == 5 and m["config"]["collection"]["stations"] == ["wrist"]


def test_env_var_sets_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv("CAPSERVO_OUT", str(tmp_path / "root"))
    assert run("collect", *SMALL) == 0
    assert (tmp_path / "root" / "collect" / "dataset.csv").is_file()


def test_data_errors(tmp_path):
    assert run("train", "--out", tmp_path, "--dataset", tmp_path / "missing.csv") == 3
    junk = tmp_path / "junk.csv"
    junk.write_text("a,b\n1,2\n")
    assert run("train", "--out", tmp_path, "--dataset", junk) == 3
    assert run("servo", "--out", tmp_path, "--model", tmp_path / "missing.bin") == 3
    assert run("servo", "--out", tmp_path) == 2


def test_model_config_mismatch(tmp_path):
    save_model(init_model((30, 8, 4)), tmp_path / "small.bin")
    assert run("servo", "--out", tmp_path / "s", "--model", tmp_path / "small.bin") == 2


def test_train_seeded_rerun_is_identical(tmp_path, capsys):
    assert run("collect", "--out", tmp_path / "c", *SMALL) == 0
    data = tmp_path / "c" / "dataset.csv"
    for d in ("t1", "t2"):
        assert run("train", "--out", tmp_path / d, "--dataset", data, "--set", "train.epochs=1") == 0
    assert (tmp_path / "t1" / "model.bin").read_bytes() == (tmp_path / "t2" / "model.bin").read_bytes()
    m = json.loads((tmp_path / "t1" / "manifest.json").read_text())
    assert m["inputs"]["dataset"]["sha256"]
    assert (tmp_path / "t1" / "loss.csv").read_text().splitlines()[0] == "epoch,train_mse,val_mse"
    assert (tmp_path / "t1" / "loss.png").stat().st_size > 0


def test_servo_stub_and_strict_exit_codes(tmp_path, capsys):
    args = ("--set", "servo.angle_deg=0")
    assert run("servo", "--out", tmp_path / "ok", "--stub-estimator", "true", *args) == 0
    assert "outcome=success" in capsys.readouterr().out
    # A target below the skin drives the stub into contact.
    crash = ("--set", "servo.p_desired_cm_rad=[0,-1,0,0]", "--set", "servo.strict=true")
    assert run("servo", "--out", tmp_path / "hit", "--stub-estimator", "true", *args, *crash) == 4
    assert "outcome=contact_halt" in capsys.readouterr().out
    header = (tmp_path / "ok" / "servo_log.csv").read_text().splitlines()[0]
    assert header.startswith("step,t_s,x,y,z,tx,ty,tz")


def test_report_on_stub_gives_zero_tables(tmp_path):
    assert run("servo", "--out", tmp_path / "s", "--stub-estimator", "true",
               "--set", "servo.angle_deg=0", "--set", "servo.run_length_cm=10") == 0
    assert run("report", "--out", tmp_path / "r", "--stub-estimator", "true", *TINY_REPORT,
               "--logs", tmp_path / "s" / "servo_log.csv") == 0
    r = tmp_path / "r"
    with open(r / "station_errors.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [x["station"] for x in rows] == ["wrist", "shin", "average"]
    assert all(float(x[k]) == 0.0 for x in rows for k in ("dy_mae_cm", "dz_mae_cm", "thy_mae_deg", "thz_mae_deg"))
    with open(r / "log_errors.csv") as fh:
        (log_row,) = list(csv.DictReader(fh))
    assert float(log_row["dz_mae_cm"]) == 0.0
    with open(r / "heatmaps.csv") as fh:
        heat = list(csv.DictReader(fh))
    trans = [h for h in heat if h["series"] == "translational"]
    assert 0 < len(trans) <= 41 * 21
    assert all(-20 <= float(h["x"]) <= 20 and 0 <= float(h["y"]) <= 20 for h in trans)
    assert all(float(h["value"]) == 0.0 for h in heat)
    for png in ("heatmap_translational.png", "heatmap_rotational.png", "distance_curves.png"):
        assert (r / png).stat().st_size > 0
    manifest = json.loads((r / "manifest.json").read_text())
    assert set(manifest["outputs"]) >= {"task_success.csv", "station_errors.csv", "heatmaps.csv"}


def test_report_enumerates_missing_inputs(tmp_path, capsys):
    assert run("report", "--out", tmp_path, "--model", tmp_path / "m.bin", "--logs", tmp_path / "l.csv") == 3
    err = capsys.readouterr().err
    assert "m.bin" in err and "l.csv" in err


def test_reproduce_pipeline(tmp_path):
    argv = ["reproduce", "--out", tmp_path, "--stub-estimator", "true", *SMALL, *TINY_REPORT,
            "--set", "train.epochs=1", "--set", "servo.angle_deg=0", "--set", "servo.run_length_cm=10"]
    assert run(*argv) == 0
    for sub in ("collect", "train", "servo", "report"):
        assert (tmp_path / sub / "manifest.json").is_file()
    assert np.isfinite(float((tmp_path / "train" / "loss.csv").read_text().splitlines()[1].split(",")[1]))
