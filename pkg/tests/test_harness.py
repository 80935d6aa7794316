import json
import math

import numpy as np
import pytest
import yaml

from flexarm.cli import main
from flexarm.config import ExperimentConfig
from flexarm.errors import ValidationError
from flexarm.harness import metrics_from_csv, read_csv

SHORT = {"schedule": {"start_deg": 10.0, "moves": [[40.0, 3.0, 1.0]]}}
TINY_TRAIN = {
    "sac": {"hidden": [8, 8], "batch_size": 16, "initial_random_steps": 20, "max_time_steps_per_episode": 10,
            "checkpoint_every": 1},
    "schedule": {"start_deg": 20.0, "moves": [[30.0, 2.0, 0.5]]},
    "evaluation": {"pairs": 2},
}


def write_cfg(tmp_path, data, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(data))
    return str(p)


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys else None
    return code, out


# --------------------------------------------------------------------------- config


def test_config_defaults_and_hash_stability():
    a, b = ExperimentConfig.from_dict(), ExperimentConfig.from_dict()
    assert a.hash == b.hash and len(a.hash) == 16
    assert a.with_overrides(seed=1).hash != a.hash
    assert a.sac_config().learning_rate == 1e-4 and a.sac_config().n_modes == 3


@pytest.mark.parametrize(
    "bad",
    [{"beam": {"Lx": 1}}, {"sac": {"learning_rate": -1e-4}}, {"model": {"n_modes": 0}},
     {"uncertainty": {"levels_pct": [50]}}, {"planner": {"checkpoint": "/nope.ckpt"}},
     {"schedule": {"moves": [[10, 0, 1]]}}, {"schema_version": 2}, {"controller": {"kind": "lqr"}}],
)
def test_config_rejections(bad):
    with pytest.raises(ValidationError):
        ExperimentConfig.from_dict(bad)


# --------------------------------------------------------------------------- commands


def test_modes_command(tmp_path, capsys):
    code, out = run(["modes", "--out", tmp_path / "m"], capsys)
    assert code == 0 and "max |det| residual" in out.out
    header, cols = read_csv(tmp_path / "m" / "modes.csv")
    assert header["kind"] == "modes" and "config_hash" in header and header["seed"] == "0"
    assert np.all(np.diff(cols["beta"]) > 0) and np.max(cols["det_residual"]) < 1e-8
    assert (tmp_path / "m" / "config.resolved.yaml").exists()


def test_modes_rejects_zero_modes(tmp_path, capsys):
    code, out = run(["modes", "--config", write_cfg(tmp_path, {"model": {"n_modes": 0}}), "--out", tmp_path], capsys)
    assert code == 2 and "n_modes" in out.err


def test_simulate_is_byte_identical_and_regenerable(tmp_path, capsys):
    cfg = write_cfg(tmp_path, SHORT)
    for d in ("a", "b"):
        assert run(["simulate", "--config", cfg, "--seed", 4, "--out", tmp_path / d], capsys)[0] == 0
    for f in ("trajectory.csv", "metrics.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header, cols = read_csv(tmp_path / "a" / "trajectory.csv")
    assert header["seed"] == "4" and header["schema_version"] == "1"
    assert list(cols) == ["t", "theta", "theta_dot", "tip_omega", "tip_omega_dot", "torque", "energy_T",
                          "energy_U", "theta_d"]
    stored = json.loads((tmp_path / "a" / "metrics.json").read_text())
    again = metrics_from_csv(tmp_path / "a" / "trajectory.csv")
    assert again.angular_rmse_deg == stored["angular_rmse_deg"]
    assert again.tip_velocity_rmse == stored["tip_velocity_rmse"]
    assert again.config_hash == stored["config_hash"] == header["config_hash"]


def test_simulate_empty_schedule(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"schedule": {"start_deg": 0.0, "moves": []}})
    code, _ = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0
    _, cols = read_csv(tmp_path / "o" / "trajectory.csv")
    assert all(len(v) == 0 for v in cols.values())


def test_simulate_svg_option(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**SHORT, "output": {"svg": True}})
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)[0] == 0
    assert (tmp_path / "o" / "theta.svg").read_text().startswith("<svg")


def test_drl_simulate_needs_checkpoint(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**SHORT, "planner": {"kind": "drl"}})
    code, out = run(["simulate", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "checkpoint" in out.err
    code, out = run(["compare", "--out", tmp_path / "c"], capsys)
    assert code == 2


def test_output_path_that_is_a_file(tmp_path, capsys):
    f = tmp_path / "file"
    f.write_text("x")
    code, out = run(["modes", "--out", f], capsys)
    assert code == 7


def test_uncertainty_single_point_equals_simulate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {**SHORT, "uncertainty": {"levels_pct": [0]}})
    assert run(["uncertainty", "--config", cfg, "--out", tmp_path / "u"], capsys)[0] == 0
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "s"], capsys)[0] == 0
    _, grid = read_csv(tmp_path / "u" / "uncertainty.csv")
    sim = json.loads((tmp_path / "s" / "metrics.json").read_text())
    assert grid["angular_rmse_deg"][0] == sim["angular_rmse_deg"]


def test_lyapunov_command(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"lyapunov": {"targets_deg": [30.0], "duration": 2.0}})
    code, out = run(["lyapunov", "--config", cfg, "--out", tmp_path / "l"], capsys)
    assert code == 0 and "violations 0" in out.out
    _, cols = read_csv(tmp_path / "l" / "lyapunov.csv")
    assert np.all(cols["violation"] == 0) and np.all(cols["V"] <= cols["bound"] * 1.01)


def test_lyapunov_from_rest_stays_near_zero(tmp_path, capsys):
    from flexarm.harness import lyapunov_traces

    cfg = ExperimentConfig.from_dict({"lyapunov": {"start_deg": 20.0, "targets_deg": [20.0], "duration": 1.0}})
    tr = lyapunov_traces(cfg)[0]
    # the rest state keeps the small steady offset of the truncated model, far below a 1 deg step
    one_degree = 0.5 * 12000.0 * math.radians(1.0) ** 2
    assert tr.V[0] < 0.01 * one_degree
    assert np.max(tr.V) <= tr.V[0] * 1.01
    # that offset is a fixed point, so V cannot follow the decaying envelope
    assert tr.violations > 0 and abs(tr.final_error) < math.radians(0.1)


def test_lyapunov_refuses_uncertified_gains(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"controller": {"pde": {"Kd": 50.0}}})
    code, out = run(["lyapunov", "--config", cfg, "--out", tmp_path / "l"], capsys)
    assert code == 5 and "Lemma 2" in out.err
    assert not (tmp_path / "l" / "lyapunov.csv").exists()


def test_train_rejects_negative_learning_rate(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"sac": {"learning_rate": -1e-4}})
    code, out = run(["train", "--config", cfg, "--out", tmp_path / "t"], capsys)
    assert code == 2 and "learning_rate" in out.err


def test_train_resume_and_compare(tmp_path, capsys):
    cfg = write_cfg(tmp_path, TINY_TRAIN)
    out = tmp_path / "new" / "dir"
    assert run(["train", "--config", cfg, "--out", out, "--episodes", 3], capsys)[0] == 0
    assert (out / "checkpoint.ckpt").exists()
    straight = (out / "train_log.csv").read_bytes()

    part = tmp_path / "part"
    assert run(["train", "--config", cfg, "--out", part, "--episodes", 2], capsys)[0] == 0
    code, _ = run(["train", "--config", cfg, "--out", part, "--episodes", 3,
                   "--checkpoint", part / "checkpoint.ckpt"], capsys)
    assert code == 0
    assert (part / "train_log.csv").read_bytes() == straight

    code, printed = run(["compare", "--config", cfg, "--out", tmp_path / "cmp", "--checkpoint",
                         out / "checkpoint.ckpt"], capsys)
    assert code == 0 and "PDE+DRL" in printed.out
    summary = json.loads((tmp_path / "cmp" / "compare_summary.json").read_text())
    assert summary["suite_pairs"] == 2 and set(summary["arms"]) == {"PDE+DRL", "PDE+CPT", "PID+CPT"}
    _, arms = read_csv(tmp_path / "cmp" / "compare.csv")
    assert np.all(np.isfinite(arms["tip_velocity_rmse"]))
    assert all(math.isfinite(v["tip_velocity_rmse"]) for v in summary["arms"].values())


def test_pde_offset_is_curvature_truncation():
    from flexarm.harness import run_cpt

    # the PDE law feeds back the root curvature, which converges slowly in the mode count;
    # its steady offset shrinks with more modes while the integrating PID has none
    offsets, rmse = [], {}
    for n in (3, 5):
        cfg = ExperimentConfig.from_dict({"model": {"n_modes": n}})
        pde = run_cpt(cfg, cfg.controller("pde"))
        offsets.append(abs(pde.theta[0] - pde.theta_d[0]))
        rmse[n] = float(np.sqrt(np.mean((pde.theta - pde.theta_d) ** 2)))
    assert offsets[1] < 0.5 * offsets[0]
    pid = run_cpt(cfg, cfg.controller("pid"))
    assert abs(pid.theta[0] - pid.theta_d[0]) < 1e-9
    assert rmse[5] < float(np.sqrt(np.mean((pid.theta - pid.theta_d) ** 2)))
