import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from didsee import cli
from didsee.schedule import build_schedule
from didsee.synthdata import load_samples


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.main(["gen-data", "--out", str(d), "--count", "6", "--size", "32x32", "--seed", "4"]) == 0
    return d


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "train.toml"
    p.write_text(
        "epochs = 1\nbatch_size = 3\nlearning_rate = 0.001\nval_max_samples = 2\n"
        "denoiser.base_channels = 8\ndenoiser.depth_levels = 2\ndenoiser.time_embed_dim = 16\n"
        "denoiser.max_groups = 4\n"
    )
    return p


def test_plot_schedule_files(tmp_path, capsys):
    code, out, _ = run(["plot-schedule", "--T", 1000, "--rescaled", "off", "--out", tmp_path], capsys)
    assert code == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["log_snr.png", "schedule_original.csv", "sqrt_alpha_bar.png"]
    rows = list(csv.DictReader(open(tmp_path / "schedule_original.csv")))
    assert list(rows[0]) == ["t", "beta", "alpha_bar", "sqrt_alpha_bar", "snr"]
    assert len(rows) == 1000
    assert abs(float(rows[-1]["sqrt_alpha_bar"]) - 0.068265) < 1e-6


def test_plot_schedule_rescaled_terminal_zero(tmp_path, capsys):
    assert run(["plot-schedule", "--rescaled", "on", "--out", tmp_path], capsys)[0] == 0
    rows = list(csv.DictReader(open(tmp_path / "schedule_rescaled.csv")))
    assert float(rows[-1]["sqrt_alpha_bar"]) == 0.0


def test_plot_schedule_idempotent_csv(tmp_path, capsys):
    run(["plot-schedule", "--out", tmp_path / "a"], capsys)
    run(["plot-schedule", "--out", tmp_path / "b"], capsys)
    for name in ("schedule_original.csv", "schedule_rescaled.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_data_deterministic_and_env_seed(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DIDSEE_SEED", "9")
    code, out, _ = run(["gen-data", "--out", tmp_path / "a", "--count", 2, "--size", "16x24"], capsys)
    assert code == 0 and json.loads(out)["seed"] == 9
    run(["gen-data", "--out", tmp_path / "b", "--count", 2, "--size", "16x24", "--seed", 9], capsys)
    for name in ("000001_raw.png", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    _, samples = load_samples(tmp_path / "a")
    assert samples[0].gt_depth.shape == (16, 24)


def test_eval_perfect_prediction(tmp_path, data_dir, capsys):
    _, samples = load_samples(data_dir)
    np.savez(tmp_path / cli.PRED_FILE, depth=np.stack([s.gt_depth for s in samples]),
             labels=np.stack([s.labels for s in samples]))
    code, out, _ = run(["eval", "--pred", tmp_path, "--data", data_dir, "--mask", "all"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["rmse"] == rep["rel"] == rep["mae"] == 0
    assert rep["delta_105"] == 100 and rep["semantic_accuracy"] == 100
    assert (tmp_path / "metrics_all.csv").exists() and (tmp_path / "metrics_all.json").exists()


def test_full_pipeline(tmp_path, data_dir, config_file, capsys):
    code, out, _ = run(["train", "--data", data_dir, "--config", config_file, "--out", tmp_path / "run"], capsys)
    assert code == 0, out
    ckpt = tmp_path / "run" / "model.npz"
    assert ckpt.exists() and (tmp_path / "run" / "train_log.csv").exists()
    for sub in ("p1", "p2"):
        assert run(["infer", "--ckpt", ckpt, "--data", data_dir, "--out", tmp_path / sub], capsys)[0] == 0
    a, b = np.load(tmp_path / "p1" / cli.PRED_FILE), np.load(tmp_path / "p2" / cli.PRED_FILE)
    assert np.array_equal(a["depth"], b["depth"]) and np.array_equal(a["labels"], b["labels"])
    assert (tmp_path / "p1" / "000005_depth.png").exists()
    for mask in ("all", "nonlambertian"):
        code, out, _ = run(["eval", "--pred", tmp_path / "p1", "--data", data_dir, "--mask", mask], capsys)
        assert code == 0
        assert np.isfinite(json.loads(out)["rel"])
    assert (tmp_path / "p1" / "metrics_all.csv").read_bytes() == \
        (run(["eval", "--pred", tmp_path / "p2", "--data", data_dir], capsys) and
         (tmp_path / "p2" / "metrics_all.csv").read_bytes())


def test_diagnose(tmp_path, data_dir, capsys):
    cfg = tmp_path / "multi.toml"
    cfg.write_text('epochs = 1\nbatch_size = 3\nstep_mode = "multi"\nscheduler_mode = "original"\n'
                   "joint_mode = false\nval_max_samples = 1\nval_steps = 1\n"
                   "denoiser.base_channels = 8\ndenoiser.depth_levels = 2\ndenoiser.time_embed_dim = 16\n"
                   "denoiser.max_groups = 4\n")
    assert run(["train", "--data", data_dir, "--config", cfg, "--out", tmp_path / "run"], capsys)[0] == 0
    code, out, _ = run(["diagnose", "--ckpt", tmp_path / "run" / "model.npz", "--data", data_dir,
                        "--steps", "1,2,5", "--out", tmp_path / "diag"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert set(rep["final_rmse"]) == {"1", "2", "5"}
    assert abs(rep["terminal_sqrt_alpha_bar"] - build_schedule("original").sqrt_alpha_bar(1000)) < 1e-12
    assert sorted(p.name for p in (tmp_path / "diag").iterdir()) == \
        ["exposure_bias.csv", "exposure_bias.json", "exposure_bias.png"]


def test_missing_files_exit_1(tmp_path, data_dir, capsys):
    code, _, err = run(["infer", "--ckpt", tmp_path / "nope.npz", "--data", data_dir, "--out", tmp_path], capsys)
    assert code == 1
    line = json.loads(err.strip().splitlines()[-1])
    assert line["exit_code"] == 1 and line["kind"] == "missing_file"
    assert run(["eval", "--pred", tmp_path / "none", "--data", data_dir], capsys)[0] == 1
    assert run(["train", "--data", tmp_path / "none", "--out", tmp_path], capsys)[0] == 1


@pytest.mark.parametrize("argv", [
    ["gen-data", "--out", "x"],
    ["gen-data", "--out", "x", "--count", "2", "--size", "big"],
    ["eval", "--pred", "a", "--data", "b", "--mask", "transparentish"],
    ["diagnose", "--ckpt", "a", "--data", "b", "--steps", "1,x"],
    ["plot-schedule", "--rescaled", "maybe"],
    ["frobnicate"],
])
def test_bad_flags_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == 2
    line = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert line["kind"] == "usage"


def test_bad_env_seed(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("DIDSEE_SEED", "abc")
    assert run(["gen-data", "--out", tmp_path, "--count", 1], capsys)[0] == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "didsee", "plot-schedule", "--T", "50", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert len(json.loads(proc.stdout)["files"]) == 4
