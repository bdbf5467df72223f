import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfo.cli import main, parse_grid, parse_seeds
from rfo.config import ConfigError, TrainConfig, load_config, parse_text

TINY = ["iterations=2", "num_envs=2", "horizon=4", "episode_length=8", "critic_epochs=1", "eval_episodes=4",
        "eval_periodic_episodes=2", "actor_hidden=8,8", "critic_hidden=8", "kl_pairs=4", "kl_draws=8",
        "checkpoint_every=1"]


def _set(items):
    out = []
    for x in items:
        out += ["--set", x]
    return out


def test_defaults_follow_the_reference_settings():
    c = TrainConfig()
    assert (c.gamma, c.lam, c.beta1, c.beta2, c.critic_epochs) == (0.99, 0.95, 0.9, 0.999, 16)
    assert (c.flow_steps, c.c_past, c.c_uni, c.eval_episodes) == (4, 0.2, 0.2, 128)


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(env="pendulum-swingup", c_past=0.4, normalize_obs=False, actor_hidden="32,32")
    path = tmp_path / "a.cfg"
    path.write_text(cfg.to_text())
    assert load_config(path) == cfg


def test_parse_errors_name_line_and_key(tmp_path):
    with pytest.raises(ConfigError, match=r"x.cfg:3: unknown config key 'nope'"):
        parse_text("# c\nseed = 1\nnope = 2\n", "x.cfg")
    with pytest.raises(ConfigError, match=r":1: bad value for 'seed'"):
        parse_text("seed = one", "y.cfg")
    with pytest.raises(ConfigError, match="expected 'key = value'"):
        parse_text("seed", "z.cfg")
    with pytest.raises(ConfigError, match="algo"):
        load_config(None, ["algo=ppo"])
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
    with pytest.raises(ConfigError, match="M = 1"):
        load_config(None, ["actor_epochs=2"])


def test_aliases_and_overrides():
    cfg = load_config(None, ["K=8", "C=2", "c_uni=0.4"])
    assert (cfg.flow_steps, cfg.chunk_size, cfg.c_uni) == (8, 2, 0.4)


def test_seed_specs():
    assert parse_seeds("3") == [3]
    assert parse_seeds("1..10") == list(range(1, 11))
    assert parse_seeds("0,2,5") == [0, 2, 5]
    with pytest.raises(ConfigError):
        parse_seeds("5..1")
    with pytest.raises(ConfigError):
        parse_seeds("a,b")


@given(st.integers(-50, 50), st.integers(0, 50))
def test_seed_range_is_inclusive(a, n):
    assert parse_seeds(f"{a}..{a + n}") == list(range(a, a + n + 1))


def test_grid_parsing():
    assert parse_grid(["K=1,2", "c_past=0.1,0.2"]) == [("flow_steps", [1, 2]), ("c_past", [0.1, 0.2])]
    with pytest.raises(ConfigError):
        parse_grid(["K"])


def test_cli_train_eval_klmonitor_plot(tmp_path, capsys):
    out = tmp_path / "runs"
    assert main(["train", "--out", str(out), "--seed", "1..2", *_set(TINY)]) == 0
    for s in (1, 2):
        assert (out / f"seed_{s}" / "metrics.csv").exists()
    a = (out / "seed_1" / "metrics.csv").read_bytes()
    assert main(["train", "--out", str(tmp_path / "again"), "--seed", "1", *_set(TINY)]) == 0
    assert (tmp_path / "again" / "seed_1" / "metrics.csv").read_bytes() == a

    assert main(["eval", str(out / "seed_1" / "final.rfo"), "--episodes", "3"]) == 0
    assert "±" in capsys.readouterr().out
    rows = list(csv.DictReader(open(out / "seed_1" / "eval.csv")))
    assert len(rows) == 3

    assert main(["kl-monitor", str(out / "seed_1"), "--pairs", "4", "--draws", "8"]) == 0
    kl = list(csv.DictReader(open(out / "seed_1" / "kl_monitor.csv")))
    assert len(kl) == 2 and all(np.isfinite(float(r["kl"])) and float(r["kl"]) >= 0 for r in kl)

    svg = tmp_path / "curve.svg"
    assert main(["plot", str(out), "--column", "segment_return", "--window", "2", "--out", str(svg)]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")


def test_cli_ablate_writes_one_file_per_cell(tmp_path):
    out = tmp_path / "grid"
    assert main(["ablate", "K=1,2", "c_uni=0.1,0.2", "--out", str(out), *_set(TINY)]) == 0
    assert len(list(out.glob("*/seed_0/metrics.csv"))) == 4
    assert len(list(csv.DictReader(open(out / "ablation.csv")))) == 4


def test_cli_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("seed = 1\nflow_stepz = 3\n")
    assert main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err
    assert main(["train", "--set", "lam=2", "--out", str(tmp_path)]) == 2
    assert main(["eval", str(tmp_path / "none.rfo"), "--config", str(bad)]) == 2
    assert main(["kl-monitor", str(tmp_path)]) == 2  # no config.cfg there


def test_cli_gradcheck_table(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("tape", "net", "env", "flow", "cfm", "critic", "rpg"):
        assert name in out
    assert "FAIL" not in out
