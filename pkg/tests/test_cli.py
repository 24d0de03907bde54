import csv
import json

import pytest

from sture.main import EXIT_OK, EXIT_USAGE, main
from sture.tracker import DET_FILE, GT_FILE

TRAIN_INI = "[train]\nP = 2\nQ = 2\nT = 3\nD = 4\nhidden = 5\niterations = 2\nlr = 0.001\n"
DATASET_INI = "identities = 4\nsequences = 3\nframes = 8\nmin_frames = 2\ninput_dim = 6\nsignal_dim = 2\n"


def _rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def _scenario(tmp_path, name="synthetic"):
    seq_dir = tmp_path / name
    assert main(["scenario", str(seq_dir)]) == EXIT_OK
    return seq_dir


def _train_inputs(tmp_path):
    config = tmp_path / "train.ini"
    config.write_text(TRAIN_INI, encoding="utf-8")
    dataset = tmp_path / "dataset.ini"
    dataset.write_text(DATASET_INI, encoding="utf-8")
    return config, dataset


def test_scenario_then_track(tmp_path):
    seq_dir = _scenario(tmp_path)
    out = tmp_path / "run"
    assert main(["track", str(seq_dir), "--out", str(out)]) == EXIT_OK
    assert (out / "synthetic.txt").is_file()
    assert (out / "synthetic.telemetry.csv").is_file()
    rows = _rows(out / "report.csv")
    assert rows[0][0] == "Sequence"
    assert [r[0] for r in rows[1:]] == ["synthetic", "OVERALL"]
    assert dict(zip(rows[0], rows[-1]))["MOTA"] == "1"
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    assert manifest["subcommand"] == "track"
    assert manifest["inputs"] == [str(seq_dir)]


def test_track_is_reproducible_with_force(tmp_path):
    seq_dir = _scenario(tmp_path)
    out = tmp_path / "run"
    assert main(["track", str(seq_dir), "--out", str(out)]) == EXIT_OK
    first = (out / "synthetic.txt").read_bytes()
    assert main(["track", str(seq_dir), "--out", str(out)]) == EXIT_USAGE
    assert main(["track", str(seq_dir), "--out", str(out), "--force"]) == EXIT_OK
    assert (out / "synthetic.txt").read_bytes() == first


def test_parallel_jobs_match_serial(tmp_path):
    a, b = _scenario(tmp_path, "a"), _scenario(tmp_path, "b")
    assert main(["track", str(a), str(b), "--out", str(tmp_path / "serial")]) == EXIT_OK
    assert main(["track", str(a), str(b), "--out", str(tmp_path / "parallel"), "--jobs", "2"]) == EXIT_OK
    for name in ("a.txt", "b.txt", "report.csv"):
        assert (tmp_path / "serial" / name).read_bytes() == (tmp_path / "parallel" / name).read_bytes()


def test_missing_detections_is_a_usage_error(tmp_path):
    seq_dir = _scenario(tmp_path)
    (seq_dir / DET_FILE).unlink()
    out = tmp_path / "run"
    assert main(["track", str(seq_dir), "--out", str(out)]) == EXIT_USAGE
    assert not out.exists()


def test_oracle_tracker_needs_ground_truth(tmp_path):
    seq_dir = _scenario(tmp_path)
    (seq_dir / GT_FILE).unlink()
    assert main(["track", str(seq_dir), "--sot", "oracle", "--out", str(tmp_path / "run")]) == EXIT_USAGE


def test_unknown_config_key_is_a_usage_error(tmp_path):
    seq_dir = _scenario(tmp_path)
    config = tmp_path / "bad.ini"
    config.write_text("tau_q = 1\n", encoding="utf-8")
    assert main(["track", str(seq_dir), "--config", str(config), "--out", str(tmp_path / "run")]) == EXIT_USAGE


def test_missing_checkpoint_is_a_usage_error(tmp_path):
    seq_dir = _scenario(tmp_path)
    args = ["track", str(seq_dir), "--checkpoint", str(tmp_path / "none.stu"), "--out", str(tmp_path / "run")]
    assert main(args) == EXIT_USAGE


def test_sweep_lists_every_value(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "sweep.csv")
    assert rows[0] == ["param", "value", "MOTA", "MOTP", "IDF1", "IDS"]
    assert [r[1] for r in rows[1:]] == ["2", "4", "8", "16"]
    assert all(r[0] == "T" for r in rows[1:])
    assert all(float(r[2]) > 0.9 for r in rows[1:])


def test_sweep_rejects_unknown_parameter(tmp_path):
    assert main(["sweep", "--param", "speed", "--values", "1", "--out", str(tmp_path / "s")]) == EXIT_USAGE
    assert main(["sweep", "--param", "tau_a", "--out", str(tmp_path / "s")]) == EXIT_USAGE


@pytest.mark.parametrize("command", ["eval", "evaluate"])
def test_eval_writes_a_report(tmp_path, command):
    seq_dir = _scenario(tmp_path)
    assert main(["track", str(seq_dir), "--out", str(tmp_path / "run")]) == EXIT_OK
    out = tmp_path / "eval"
    assert main([command, str(seq_dir / GT_FILE), str(tmp_path / "run" / "synthetic.txt"), "--out", str(out)]) == EXIT_OK
    rows = _rows(out / "report.csv")
    assert [r[0] for r in rows[1:]] == ["synthetic"]
    assert dict(zip(rows[0], rows[1]))["IDS"] == "0"
    assert (out / "report.txt").read_text(encoding="utf-8").endswith("\n")


@pytest.mark.parametrize("command", ["export", "export-embeddings"])
def test_train_then_export(tmp_path, command):
    config, dataset = _train_inputs(tmp_path)
    train_out = tmp_path / "train"
    assert main(["train", str(dataset), "--config", str(config), "--epochs", "1", "--out", str(train_out)]) == EXIT_OK
    for name in ("checkpoint.stu", "telemetry.csv", "retrieval.csv", "manifest.json"):
        assert (train_out / name).is_file()
    assert [r[0] for r in _rows(train_out / "retrieval.csv")] == ["features", "sture", "raw"]

    out = tmp_path / "export"
    args = [command, str(train_out / "checkpoint.stu"), str(dataset), "--config", str(config), "--out", str(out)]
    assert main(args) == EXIT_OK
    rows = _rows(out / "embeddings.csv")
    assert rows[0] == ["identity", "split", "index", "e0", "e1", "e2", "e3"]
    assert len(rows) > 1
    identities = [int(r[0]) for r in rows[1:]]
    assert identities == sorted(identities)


def test_train_rejects_a_bad_dataset_spec(tmp_path):
    config, dataset = _train_inputs(tmp_path)
    dataset.write_text("min_frames = 9\nframes = 8\n", encoding="utf-8")
    assert main(["train", str(dataset), "--config", str(config), "--out", str(tmp_path / "t")]) == EXIT_USAGE
