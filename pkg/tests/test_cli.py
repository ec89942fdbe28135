import json

import numpy as np
import pytest

from segkit import cli
from segkit.tensor import save_t4


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    lines = [json.loads(line) for line in out.out.splitlines() if line.startswith("{")]
    return code, lines, out


@pytest.fixture
def data_dir(tmp_path, capsys):
    code, lines, _ = run(capsys, "gen-data", "--out", tmp_path / "data", "--n", 4,
                         "--size", 32, "--seed", 3)
    assert code == 0 and lines[-1]["volumes"] == 4
    return tmp_path / "data"


def test_params_json(capsys):
    code, lines, _ = run(capsys, "params", "monet", "unet64")
    assert code == 0
    monet, unet = lines
    assert monet["total"] == 313_137 and monet["payload_bytes"] == 1_257_752
    assert abs(unet["total"] - 31_054_145) <= 0.03 * 31_054_145


def test_params_table(capsys):
    code, _, out = run(capsys, "params", "--table")
    assert code == 0
    rows = out.out.splitlines()
    assert rows[0].split()[:2] == ["Architecture", "Parameter"]
    assert rows[3].startswith("unet64") and "31,054,145" in rows[3] and "MB" in rows[3]


def test_train_eval_round_trip(tmp_path, capsys, data_dir):
    args = ["train", "--data", data_dir, "--out", tmp_path / "run", "--epochs", 2,
            "--batch", 2, "--val-split", 0.5, "--seed", 1]
    code, lines, _ = run(capsys, *args)
    assert code == 0
    assert [r["epoch"] for r in lines[:-1]] == [1, 2]
    assert lines[-1]["event"] == "done"
    log = (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()
    assert [json.loads(x) for x in log] == lines[:-1]

    code, lines2, _ = run(capsys, *args[:4], tmp_path / "run2", *args[5:])
    assert lines2[:-1] == lines[:-1]
    assert (tmp_path / "run" / "best.mck").read_bytes() == (
        tmp_path / "run2" / "best.mck").read_bytes()

    code, recs, out = run(capsys, "eval", tmp_path / "run" / "best.mck", "--data", data_dir)
    assert code == 0
    assert [r["scan_id"] for r in recs[:-1]] == ["0000", "0001", "0002", "0003"]
    summary = recs[-1]
    assert summary["scans"] == 4
    assert summary["mean_dice"] == pytest.approx(np.mean([r["dice"] for r in recs[:-1]]))
    assert "±" in summary["table"]


def test_train_zero_epochs(tmp_path, capsys, data_dir):
    code, lines, _ = run(capsys, "train", "--data", data_dir, "--out", tmp_path / "r",
                         "--epochs", 0)
    assert code == 0 and lines[-1]["epochs_run"] == 0
    assert (tmp_path / "r" / "best.mck").stat().st_size == 1_257_752


def test_config_file_and_override(tmp_path, capsys, data_dir):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\nbatch = 4\nlr = 0.001\naugment = off\n")
    code, lines, _ = run(capsys, "train", "--config", cfg, "--data", data_dir,
                         "--out", tmp_path / "r", "--lr", 0.002)
    assert code == 0
    assert len(lines) == 2 and lines[0]["lr"] == 0.002
    saved = json.loads((tmp_path / "r" / "run.json").read_text())
    assert saved["batch"] == 4 and saved["augment"] is False and saved["epochs"] == 1


def test_bad_config_value(tmp_path, capsys, data_dir):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("augment = maybe\n")
    code, _, out = run(capsys, "train", "--config", cfg, "--data", data_dir,
                       "--out", tmp_path / "r")
    assert code == 2 and "augment" in out.err


def test_missing_data_exit_code(tmp_path, capsys):
    code, lines, out = run(capsys, "train", "--data", tmp_path / "none", "--out", tmp_path / "r")
    assert code == cli.EXIT_USAGE == 2
    assert lines == [] and "error" in out.err
    code, _, _ = run(capsys, "eval", tmp_path / "x.mck", "--data", tmp_path / "none")
    assert code == 2


def test_non_finite_exit_code(tmp_path, capsys, data_dir):
    img = np.full((1, 1, 32, 32), np.nan, np.float32)
    save_t4(data_dir / "img_0002.t4", img)
    code, _, out = run(capsys, "train", "--data", data_dir, "--out", tmp_path / "r",
                       "--epochs", 1, "--val-split", 0)
    assert code == cli.EXIT_NONFINITE == 3
    assert "non-finite" in out.err


def test_bench_report(capsys, monkeypatch):
    monkeypatch.setenv("SEGKIT_THREADS", "1")
    code, lines, _ = run(capsys, "bench", "--arch", "monet", "--slices", 2, "--size", 32,
                         "--repeats", 3)
    assert code == 0
    rep = lines[0]
    assert rep["threads"] == 1 and len(rep["samples"]) == 3
    assert rep["mean"] == pytest.approx(np.mean(rep["samples"]), rel=1e-4)
    assert rep["std"] == pytest.approx(np.std(rep["samples"]), abs=1e-5)


def test_fedsim_report(tmp_path, capsys):
    code, lines, _ = run(capsys, "fedsim", "--nodes", 2, "--rounds", 2, "--size", 16,
                         "--samples", 2, "--holdout", 2, "--batch", 2, "--out", tmp_path)
    assert code == 0
    rep = lines[0]
    assert rep["total_bytes"] == 2 * 2 * 2 * rep["payload_bytes"]
    assert [r["round"] for r in rep["per_round"]] == [1, 2]
    assert json.loads((tmp_path / "fedsim_report.json").read_text()) == rep


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2
    code, _, _ = run(capsys, "gen-data")
    assert code == 2
