import os

import numpy as np
import pytest

from navlab.cli import main
from navlab.config import ConfigError, dump_config, load_config
from navlab.evalstats import read_episodes_csv

DESK_CFG = """
[map]
width = 16
height = 16
category_count = 8
objects_per_category = 2
seen_count = 6

[world]
view_size = 7
horizon = 48
train_pool = 4
eval_pool = 2
calib_pool = 2

[policy]
layers = 2
heads = 2
hidden = 32
mlp_hidden = 64
context_len = 12
vis_dim = 16
goal_dim = 16
action_embed_dim = 8
mask_embed_dim = 16
latent_dim = 12
cell_dim = 8
view_channels = 6
mask_channels = 4
seg_channels = 8

[train]
mode = ealm
num_envs = 2
steps_per_update = 12
total_env_steps = 48
minibatches = 2
seed = 5
"""


@pytest.fixture()
def cfg_file(tmp_path):
    path = tmp_path / "desk.cfg"
    path.write_text(DESK_CFG)
    return str(path)


@pytest.fixture()
def trained_run(tmp_path, cfg_file):
    out = tmp_path / "run"
    code = main(["train", "--config", cfg_file, "--out", str(out)])
    assert code == 0
    return out


class TestConfig:
    def test_roundtrip(self, cfg_file):
        world, policy, train = load_config(cfg_file)
        assert world.map_params.width == 16
        assert policy.hidden == 32
        assert train.mode == "ealm"
        assert policy.view_size == world.view_size  # propagated
        text = dump_config(world, policy, train)
        assert "[policy]" in text and "hidden = 32" in text

    def test_unknown_key_named(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nlearning_rate_typo = 1\n")
        with pytest.raises(ConfigError, match="learning_rate_typo"):
            load_config(str(path))

    def test_unknown_section_named(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(ConfigError, match="optimizer"):
            load_config(str(path))

    def test_bad_value_flagged_with_location(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("[train]\nnum_envs = eight\n")
        with pytest.raises(ConfigError, match="num_envs"):
            load_config(str(path))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "nope.cfg"))


class TestTrainCommand:
    def test_creates_expected_files(self, trained_run):
        assert (trained_run / "train_log.csv").exists()
        assert (trained_run / "checkpoint_final.ckpt").exists()
        assert (trained_run / "manifest.json").exists()
        assert (trained_run / "status.json").exists()

    def test_unknown_mode_exit_2(self, cfg_file, tmp_path, capsys):
        code = main(["train", "--config", cfg_file, "--mode", "q_learning",
                     "--out", str(tmp_path / "x")])
        assert code == 2
        err = capsys.readouterr().err
        assert "ealm" in err and "hard_switch" in err

    def test_refuses_overwrite_without_force(self, trained_run, cfg_file):
        code = main(["train", "--config", cfg_file, "--out", str(trained_run)])
        assert code == 1

    def test_force_overwrites(self, trained_run, cfg_file):
        code = main(["train", "--config", cfg_file, "--out", str(trained_run), "--force"])
        assert code == 0

    def test_bad_config_exit_2(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[train]\nmode = nonsense\n")
        code = main(["train", "--config", str(bad), "--out", str(tmp_path / "o")])
        assert code == 2


class TestEvalCommand:
    def test_eval_gt_and_none(self, trained_run, cfg_file, tmp_path):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        for name, source in (("g", "gt"), ("n", "none")):
            out = tmp_path / name
            code = main(["eval", "--checkpoint", ckpt, "--config", cfg_file,
                         "--out", str(out), "--episodes", "3", "--seeds", "1,2",
                         "--mask-source", source])
            assert code == 0
            rows = read_episodes_csv(str(out / "episodes.csv"))
            assert len(rows) == 3 * 2 * 2  # episodes x seeds x splits
            assert (out / "eval_report.csv").exists()

    def test_eval_noisy_with_table(self, trained_run, cfg_file, tmp_path):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        table = tmp_path / "table.tsv"
        table.write_text("0\t0.1\n")
        out = tmp_path / "noisy"
        code = main(["eval", "--checkpoint", ckpt, "--config", cfg_file,
                     "--out", str(out), "--episodes", "2", "--seeds", "1",
                     "--mask-source", "noisy", "--calibration-table", str(table)])
        assert code == 0

    def test_missing_calibration_table_errors(self, trained_run, cfg_file, tmp_path):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        code = main(["eval", "--checkpoint", ckpt, "--config", cfg_file,
                     "--out", str(tmp_path / "x"), "--episodes", "2", "--seeds", "1",
                     "--mask-source", "noisy", "--calibration-table",
                     str(tmp_path / "missing.tsv")])
        assert code == 1

    def test_zero_episodes_errors(self, trained_run, cfg_file, tmp_path):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        code = main(["eval", "--checkpoint", ckpt, "--config", cfg_file,
                     "--out", str(tmp_path / "x"), "--episodes", "0", "--seeds", "1"])
        assert code == 1

    def test_lane_cap_env_var(self, trained_run, cfg_file, tmp_path, monkeypatch):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        monkeypatch.setenv("EALM_NAVLAB_THREADS", "1")
        out = tmp_path / "capped"
        code = main(["eval", "--checkpoint", ckpt, "--config", cfg_file,
                     "--out", str(out), "--episodes", "2", "--seeds", "1"])
        assert code == 0


class TestCompareCommand:
    def test_self_compare_p_half(self, trained_run, cfg_file, tmp_path, capsys):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        out = tmp_path / "e"
        main(["eval", "--checkpoint", ckpt, "--config", cfg_file, "--out", str(out),
              "--episodes", "3", "--seeds", "1,2,3"])
        capsys.readouterr()
        code = main(["compare", "--a", str(out / "episodes.csv"),
                     "--b", str(out / "episodes.csv")])
        assert code == 0
        text = capsys.readouterr().out
        assert "p=0.5" in text
        assert "fail to reject" in text

    def test_malformed_csv_errors(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("split,seed\nseen,1\n")
        good = tmp_path / "bad2.csv"
        good.write_text(bad.read_text())
        code = main(["compare", "--a", str(bad), "--b", str(good)])
        assert code == 1
        assert "row" in capsys.readouterr().err


class TestDemoExpert:
    def test_replay_ends_with_success_line(self, capsys, cfg_file, tmp_path):
        # Long-horizon config so the expert always finishes.
        cfg = (tmp_path / "long.cfg")
        cfg.write_text(DESK_CFG.replace("horizon = 48", "horizon = 128"))
        code = main(["demo-expert", "--config", str(cfg), "--short"])
        assert code == 0
        out = capsys.readouterr().out.strip().splitlines()
        assert out[-1].startswith("SUCCESS steps=")

    def test_replay_prints_frames(self, capsys, cfg_file, tmp_path):
        cfg = (tmp_path / "long.cfg")
        cfg.write_text(DESK_CFG.replace("horizon = 48", "horizon = 128"))
        main(["demo-expert", "--config", str(cfg), "--short"])
        out = capsys.readouterr().out
        assert "step 0: START" in out
        assert "#" in out  # map walls rendered


class TestCalibrateCommand:
    def test_singleton_grid_table(self, trained_run, cfg_file, tmp_path, capsys):
        ckpt = str(trained_run / "checkpoint_final.ckpt")
        out = tmp_path / "calib"
        code = main(["calibrate", "--checkpoint", ckpt, "--config", cfg_file,
                     "--out", str(out), "--episodes-per-category", "1",
                     "--grid", "0.3"])
        assert code == 0
        table = (out / "calibration.tsv").read_text().strip().splitlines()
        assert len(table) == 8
        assert all(line.endswith("0.3") for line in table)
        assert (out / "sweep.csv").exists()


class TestReportCommand:
    def test_renders_svgs(self, trained_run):
        code = main(["report", "--run", str(trained_run)])
        assert code == 0
        report = trained_run / "report"
        assert (report / "curve_sr.svg").exists()
        assert (report / "curve_lambda.svg").exists()

    def test_missing_log_errors(self, tmp_path):
        code = main(["report", "--run", str(tmp_path)])
        assert code == 1
