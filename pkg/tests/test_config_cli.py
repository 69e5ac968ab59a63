import dataclasses
import filecmp
import json

import numpy as np
import pytest

from attentivegru.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from attentivegru.config import ConfigError, RunConfig, desk_config, from_ini, load_config, to_ini
from attentivegru.sim import read_dataset


def run(*argv):
    return main([str(a) for a in argv])


# -- config ----------------------------------------------------------------------


def test_full_size_defaults():
    cfg = RunConfig()
    m, t = cfg.model, cfg.train
    assert (m.n_queries, m.n_blocks, m.kernel, m.dim) == (32, 3, 3, 64)
    assert t.lr == 1e-4 and t.final_lr_factor == 0.1 and t.batch_size == 1
    assert cfg.eval.k == 100


def test_desk_overrides():
    m = desk_config().model
    assert (m.range_bins, m.azimuth_bins, m.dim, m.n_queries, m.n_blocks, m.frames) == (32, 32, 16, 4, 2, 4)
    assert desk_config().eval.k == 50


def test_ini_round_trip_is_exact():
    cfg = desk_config()
    cfg.sim = dataclasses.replace(cfg.sim, accel_noise=0.123456789012345)
    cfg.sim_seed = 17
    back = from_ini(to_ini(cfg), RunConfig())
    assert back == cfg
    assert to_ini(back) == to_ini(cfg)


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        from_ini("[model]\nwidth = 3\n")
    with pytest.raises(ConfigError):
        from_ini("[model]\nmode = fancy\n")


def test_tiny_ini_applies_on_top_of_preset(tiny_ini):
    cfg = load_config(tiny_ini)
    assert cfg.model.dim == 4 and cfg.model.fusion_mode == "default"
    assert cfg.train.lr == desk_config().train.lr


# -- simulate --------------------------------------------------------------------


def test_simulate_deterministic(tmp_path, tiny_ini):
    for d in ("a", "b"):
        assert run("simulate", "--config", tiny_ini, "--out", tmp_path / d, "--num-sequences", 3, "--seed", 4) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and len(cmp.same_files) == 5
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["num_sequences"] == 3 and len(manifest["config_digest"]) > 8
    assert len(read_dataset(tmp_path / "a")) == 3


def test_simulate_zero_sequences_writes_manifest_only(tmp_path):
    assert run("simulate", "--out", tmp_path / "d", "--num-sequences", 0) == 0
    assert sorted(p.name for p in (tmp_path / "d").iterdir()) == ["config.ini", "manifest.json"]


def test_simulate_refuses_non_empty_dir(tmp_path):
    (tmp_path / "x.txt").write_text("keep")
    assert run("simulate", "--out", tmp_path, "--num-sequences", 1) == EXIT_DATA
    assert run("simulate", "--out", tmp_path, "--num-sequences", 1, "--force") == EXIT_OK


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        main(["simulate", "--bogus"])
    assert err.value.code == EXIT_USAGE
    assert run("simulate", "--num-sequences", 1) == EXIT_USAGE  # missing --out
    assert run("bench", "--lengths", "4") == EXIT_USAGE


# -- train / eval ----------------------------------------------------------------


@pytest.fixture
def tiny_data(tmp_path, tiny_ini):
    out = tmp_path / "data"
    assert run("simulate", "--config", tiny_ini, "--out", out, "--num-sequences", 8, "--seed", 1) == 0
    return out


def test_train_smoke_loss_decreases(tmp_path, tiny_ini, tiny_data):
    ini = tmp_path / "smoke.ini"
    ini.write_text(tiny_ini.read_text().replace("epochs = 3", "epochs = 100\nmax_steps = 50"))
    assert run("train", "--config", ini, "--data", tiny_data, "--out", tmp_path / "run") == 0
    steps = [float(v) for v in (tmp_path / "run" / "step_losses.txt").read_text().split()]
    assert len(steps) == 50
    assert np.mean(steps[-10:]) < np.mean(steps[:10])
    assert (tmp_path / "run" / "config.ini").exists() and (tmp_path / "run" / "loss_log.csv").exists()


def test_baseline_mode_trains(tmp_path, tiny_ini, tiny_data):
    assert run("train", "--config", tiny_ini, "--data", tiny_data, "--out", tmp_path / "b", "--mode", "baseline") == 0
    assert "mode = baseline" in (tmp_path / "b" / "config.ini").read_text()


def test_resume_reproduces_uninterrupted_losses(tmp_path, tiny_ini, tiny_data):
    assert run("train", "--config", tiny_ini, "--data", tiny_data, "--out", tmp_path / "full") == 0
    short = tmp_path / "short.ini"
    short.write_text(tiny_ini.read_text().replace("epochs = 3", "epochs = 3\nmax_steps = 7"))
    assert run("train", "--config", short, "--data", tiny_data, "--out", tmp_path / "part") == 0
    assert run("train", "--config", tiny_ini, "--data", tiny_data, "--out", tmp_path / "resumed",
               "--resume", tmp_path / "part" / "checkpoint") == 0
    full = (tmp_path / "full" / "step_losses.txt").read_text().split()
    part = (tmp_path / "part" / "step_losses.txt").read_text().split()
    rest = (tmp_path / "resumed" / "step_losses.txt").read_text().split()
    assert part + rest == full
    assert (tmp_path / "full" / "loss_log.csv").read_bytes() == (tmp_path / "resumed" / "loss_log.csv").read_bytes()


def test_eval_deterministic_and_complete(tmp_path, tiny_ini, tiny_data):
    assert run("train", "--config", tiny_ini, "--data", tiny_data, "--out", tmp_path / "run") == 0
    for d in ("e1", "e2"):
        assert run("eval", "--ckpt", tmp_path / "run", "--data", tiny_data, "--out", tmp_path / d) == 0
    assert (tmp_path / "e1" / "metrics.csv").read_bytes() == (tmp_path / "e2" / "metrics.csv").read_bytes()
    assert (tmp_path / "e1" / "detections.txt").read_bytes() == (tmp_path / "e2" / "detections.txt").read_bytes()
    assert (tmp_path / "e1" / "metrics.csv").read_text().startswith("class,threshold,AP,mAP,AUC\n")
    assert any((tmp_path / "e1" / "pr").iterdir())


def test_eval_on_empty_dataset(tmp_path, tiny_ini, tiny_data):
    assert run("train", "--config", tiny_ini, "--data", tiny_data, "--out", tmp_path / "run") == 0
    empty = tmp_path / "empty"
    assert run("simulate", "--config", tiny_ini, "--out", empty, "--num-sequences", 0) == 0
    assert run("eval", "--ckpt", tmp_path / "run", "--data", empty, "--out", tmp_path / "e") == 0
    assert (tmp_path / "e" / "metrics.csv").read_text() == "class,threshold,AP,mAP,AUC\n"


def test_eval_shape_mismatch_names_tensor(tmp_path, tiny_ini, tiny_data, capsys):
    assert run("train", "--config", tiny_ini, "--data", tiny_data, "--out", tmp_path / "run") == 0
    wide = tmp_path / "wide.ini"
    wide.write_text(tiny_ini.read_text().replace("dim = 4", "dim = 6"))
    capsys.readouterr()
    assert run("eval", "--ckpt", tmp_path / "run", "--data", tiny_data, "--out", tmp_path / "e",
               "--config", wide) == EXIT_DATA
    assert "stem.conv1.weight" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path, tiny_ini):
    assert run("train", "--config", tiny_ini, "--data", tmp_path / "nope", "--out", tmp_path / "r") == EXIT_DATA


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_exits_three(tmp_path, tiny_ini, tiny_data):
    ini = tmp_path / "hot.ini"
    ini.write_text(tiny_ini.read_text().replace("[train]", "[train]\nlr = 1e300"))
    assert run("train", "--config", ini, "--data", tiny_data, "--out", tmp_path / "r") == EXIT_NUMERIC


def test_overfit_tiny_run_scores_high_on_its_training_set(tmp_path, tiny_ini):
    ini = tmp_path / "overfit.ini"
    ini.write_text(tiny_ini.read_text().replace("n_objects = 1, 3", "n_objects = 1, 1\nclutter_rate = 0.0")
                   .replace("epochs = 3", "epochs = 200\nval_fraction = 0.0\nlr = 0.01\nfinal_lr_factor = 1.0"))
    data = tmp_path / "data"
    assert run("simulate", "--config", ini, "--out", data, "--num-sequences", 2, "--seed", 3) == 0
    assert run("train", "--config", ini, "--data", data, "--out", tmp_path / "run") == 0
    assert run("eval", "--ckpt", tmp_path / "run", "--data", data, "--out", tmp_path / "e") == 0
    rows = [r.split(",") for r in (tmp_path / "e" / "metrics.csv").read_text().splitlines()[1:]]
    assert float(next(r for r in rows if r[0] == "all")[3]) > 0.5


# -- bench / gradcheck -----------------------------------------------------------


def test_bench_rows(tmp_path, tiny_ini, capsys):
    out = tmp_path / "bench.csv"
    assert run("bench", "--config", tiny_ini, "--lengths", "2,4,8", "--repeats", 1, "--out", out) == 0
    rows = [r.split(",") for r in out.read_text().splitlines()]
    assert rows[0] == ["T", "wall_ms", "mac_count", "state_bytes"]
    macs = {int(r[0]): int(r[2]) for r in rows[1:]}
    assert abs(macs[8] / macs[4] - 2.0) < 0.01
    assert len({r[3] for r in rows[1:]}) == 1


def test_gradcheck_tolerance_floor_reports_failure(tmp_path, capsys):
    assert run("gradcheck", "--tolerance", "1e-12", "--out", tmp_path / "g.txt") == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "gradcheck failed" in err and "deform_conv2d" in err
