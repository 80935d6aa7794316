import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from flexarm import sac as sac_mod
from flexarm.beam import BeamParams
from flexarm.errors import FlexArmError, NumericalIntegrationError, ValidationError
from flexarm.sac import (
    DEG,
    FlexArmEnv,
    ReplayBuffer,
    SACAgent,
    SACConfig,
    Transition,
    env_reset,
    env_step,
    load_checkpoint,
    moving_average,
    plan,
    sac_update,
    sample_episode,
    train,
)

NOMINAL = SACConfig(randomize=False)
TINY = SACConfig(
    hidden=(8, 8), batch_size=16, initial_random_steps=30, max_time_steps_per_episode=20,
    training_episodes=6, checkpoint_every=3, seed=3,
)


@pytest.fixture(scope="module")
def env():
    return FlexArmEnv(NOMINAL)


def test_defaults_follow_the_hyperparameter_table():
    c = SACConfig()
    assert (c.batch_size, c.experience_buffer_length, c.discount_factor) == (128, 1_000_000, 0.99)
    assert (c.learning_rate, c.target_smoothing_factor, c.initial_random_steps) == (1e-4, 0.001, 500)
    assert (c.max_time_steps_per_episode, c.time_step, c.theta_dot_max_deg) == (300, 0.1, 5.0)
    assert (c.W_e, c.W_theta_dot, c.W_omega_dot, c.R_reach, c.R_failure) == (-5e-3, -1e-3, -0.3, 200, -200)
    assert c.ticks_per_step == 100 and c.theta_dot_max == pytest.approx(5 * DEG)


@pytest.mark.parametrize(
    "field,value",
    [("learning_rate", -1e-4), ("batch_size", 0), ("discount_factor", 1.5), ("time_step", 0.1005),
     ("randomization", 1.2), ("target_smoothing_factor", 0.0)],
)
def test_config_rejects_bad_values(field, value):
    with pytest.raises(ValidationError):
        SACConfig(**{field: value})


def test_config_round_trip():
    c = SACConfig(hidden=(32, 16), seed=9)
    assert SACConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValidationError):
        SACConfig.from_dict({"bogus": 1})


# --------------------------------------------------------------------------- environment


def test_reset_without_randomization_uses_nominal(env):
    obs = env_reset(env, np.random.default_rng(0))
    assert env.plant == BeamParams() and env.factors == {}
    assert obs.theta_dot == 0 and np.all(env.state.eta_dot == 0)
    assert obs.e_T == pytest.approx(env.thetaT - env.state.theta)


def test_episode_ranges():
    rng = np.random.default_rng(1)
    draws = [sample_episode(SACConfig(), rng) for _ in range(10_000)]
    th = np.array([(a, b) for a, b, _ in draws])
    assert np.all(th >= 0) and np.all(th <= 90 * DEG)
    E = np.array([f["E"] for _, _, f in draws])
    assert 0.9 <= E.min() < 0.905 and 1.095 < E.max() <= 1.1
    assert stats.kstest((E - 0.9) / 0.2, "uniform").pvalue > 0.01
    assert set(draws[0][2]) == {"L", "m", "M", "I_m", "rho", "E"}


def test_randomized_reset_rebuilds_plant_but_not_controller():
    env = FlexArmEnv(SACConfig())
    env.reset(np.random.default_rng(4))
    assert env.plant != BeamParams()
    assert env.controller.model_params == BeamParams()
    assert env.model.params == env.plant


def test_zero_action_holds_reference(env):
    obs0 = env.reset_to(30 * DEG, 50 * DEG)
    th_d = env.theta_d
    obs, r, done, info = env_step(env, 0.0)
    assert env.theta_d == th_d and not done
    assert obs.theta == pytest.approx(obs0.theta, abs=1e-12)
    assert r == pytest.approx(-5e-3 * 20.0, rel=1e-6)
    assert sum(info["terms"].values()) == r


def test_failure_below_range(env):
    env.reset_to(0.2 * DEG, 40 * DEG)
    obs, r, done, info = env.step(-1.0)
    assert info["failed"] and done and info["terms"]["failure"] == -200
    assert r == pytest.approx(sum(info["terms"].values()))


def test_reach_when_already_there(env):
    env.reset_to(42 * DEG, 42 * DEG)
    obs, r, done, info = env.step(0.0)
    assert info["reached"] and done and info["terms"]["reach"] == 200
    assert r == pytest.approx(200 + info["terms"]["vibration"] + info["terms"]["rate"] + info["terms"]["angle"])


def test_actions_are_clipped_and_length_bounded():
    cfg = replace(NOMINAL, max_time_steps_per_episode=3)
    e = FlexArmEnv(cfg)
    e.reset_to(45 * DEG, 80 * DEG)
    for _ in range(3):
        _, _, done, info = e.step(7.0)
        assert info["action"] == 1.0
        assert abs(info["theta_d_dot"]) <= cfg.theta_dot_max
    assert done and info["truncated"]
    with pytest.raises(FlexArmError):
        e.step(0.0)


def test_step_before_reset():
    with pytest.raises(FlexArmError):
        FlexArmEnv(NOMINAL).step(0.0)


def test_blow_up_ends_episode_as_failure(env, monkeypatch):
    def boom(*a, **k):
        raise NumericalIntegrationError("integration blew up at t=0.05 s", t=0.05)

    monkeypatch.setattr(sac_mod, "run_closed_loop", boom)
    env.reset_to(30 * DEG, 40 * DEG)
    _, r, done, info = env.step(0.5)
    assert done and info["failed"] and info["blown_up"] and r == -200
    assert "blew up" in info["diagnostic"]


def test_velocity_filter_smooths_the_command():
    e = FlexArmEnv(replace(NOMINAL, velocity_filter_tau=0.05))
    e.reset_to(30 * DEG, 60 * DEG)
    ref = e.reference(1.0)
    assert ref[0, 1] < 0.1 * NOMINAL.theta_dot_max
    # two time constants into the step
    assert ref[-1, 1] == pytest.approx((1 - 0.98**100) * NOMINAL.theta_dot_max, rel=1e-12)


# --------------------------------------------------------------------------- buffer


def test_transition_action_bound():
    with pytest.raises(ValidationError):
        Transition(np.zeros(6), np.array([1.5]), 0.0, np.zeros(6), False)


def test_buffer_capacity_and_wrap():
    buf = ReplayBuffer(5)
    for i in range(12):
        buf.add(np.full(6, i), [0.0], float(i), np.zeros(6), False)
    assert len(buf) == 5
    assert sorted(buf.r[:5]) == [7, 8, 9, 10, 11]


def test_buffer_sampling_uniform_and_distinct():
    buf = ReplayBuffer(50)
    for i in range(50):
        buf.add(np.zeros(6), [0.0], float(i), np.zeros(6), False)
    rng = np.random.default_rng(0)
    counts = np.zeros(50)
    for _ in range(2000):
        r = buf.sample(rng, 10)[2]
        assert len(set(r)) == 10
        counts[r.astype(int)] += 1
    assert stats.chisquare(counts).pvalue > 0.001
    with pytest.raises(ValidationError):
        buf.sample(rng, 51)


# --------------------------------------------------------------------------- learner


def random_buffer(n, rng):
    buf = ReplayBuffer(n)
    for _ in range(n):
        buf.add(rng.normal(size=6), rng.uniform(-1, 1, 1), rng.normal(), rng.normal(size=6), rng.random() < 0.05)
    return buf


def test_polyak_with_unit_factor_copies():
    rng = np.random.default_rng(0)
    agent = SACAgent(SACConfig(hidden=(16, 16)), rng)
    agent.update(random_buffer(200, rng).sample(rng, 128), rng, tau=1.0)
    np.testing.assert_array_equal(agent.q1_target.params, agent.q1.params)
    np.testing.assert_array_equal(agent.q2_target.params, agent.q2.params)


def test_single_terminal_transition_fixed_point():
    rng = np.random.default_rng(1)
    cfg = SACConfig(hidden=(16, 16), entropy_temperature=0.0, learning_rate=1e-3, batch_size=8)
    agent = SACAgent(cfg, rng)
    s, a = rng.normal(size=6), np.array([0.3])
    batch = (np.tile(s, (8, 1)), np.tile(a, (8, 1)), np.full(8, 2.5), np.tile(s, (8, 1)), np.ones(8))
    for _ in range(1500):
        agent.update(batch, rng)
    x = np.concatenate([s, a])
    assert agent.q1(x)[0] == pytest.approx(2.5, abs=1e-3)
    assert agent.q2(x)[0] == pytest.approx(2.5, abs=1e-3)


def test_single_transition_bootstrap_fixed_point():
    rng = np.random.default_rng(2)
    cfg = SACConfig(hidden=(16, 16), entropy_temperature=0.0, learning_rate=1e-3, batch_size=8,
                    discount_factor=0.5)
    agent = SACAgent(cfg, rng)
    s, s2, a = rng.normal(size=6), rng.normal(size=6), np.array([-0.4])
    batch = (np.tile(s, (8, 1)), np.tile(a, (8, 1)), np.full(8, 1.0), np.tile(s2, (8, 1)), np.zeros(8))
    for _ in range(3000):
        agent.update(batch, rng, tau=0.05)
    nxt = np.concatenate([s2, agent.policy.deterministic(s2)[0]])
    boot = min(agent.q1_target(nxt)[0], agent.q2_target(nxt)[0])
    assert agent.q1(np.concatenate([s, a]))[0] == pytest.approx(1.0 + 0.5 * boot, abs=0.05)


def test_thousand_updates_stay_finite():
    rng = np.random.default_rng(3)
    agent = SACAgent(SACConfig(learn_temperature=True), rng)
    buf = random_buffer(1000, rng)
    for _ in range(1000):
        losses = sac_update(agent, buf, rng)
    assert all(math.isfinite(v) for v in losses.values())
    assert np.all(np.isfinite(agent.policy.net.params))


def test_update_needs_a_full_batch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        sac_update(SACAgent(SACConfig(), rng), random_buffer(10, rng), rng)


def test_plan_bounds_and_determinism():
    rng = np.random.default_rng(0)
    agent = SACAgent(SACConfig(), rng)
    cfg = SACConfig()
    for _ in range(200):
        x = rng.normal(0, 5, 6)
        u = plan(agent.policy, x, cfg)
        assert abs(u) <= cfg.theta_dot_max
        assert u == plan(agent.policy, x, cfg)
        assert abs(plan(agent.policy, x, cfg, rng)) <= cfg.theta_dot_max
    with pytest.raises(ValidationError):
        plan(agent.policy, np.full(6, np.nan), cfg)


# --------------------------------------------------------------------------- training loop


def test_initial_steps_are_random_and_learning_starts_after(tmp_path):
    st = train(replace(TINY, training_episodes=2), tmp_path)
    assert st.total_steps == 40
    assert st.agent.updates == st.total_steps - TINY.initial_random_steps
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert log[0] == "episode,steps,return,reach_flag,failure_flag,avg_abs_tip_velocity" and len(log) == 3


def test_resume_reproduces_an_uninterrupted_run(tmp_path):
    full = train(TINY, tmp_path / "full")
    part = train(TINY, tmp_path / "part", episodes=3)
    assert part.episode == 3
    resumed = train(TINY, tmp_path / "part", resume=tmp_path / "part" / "checkpoint.ckpt")
    assert resumed.episode == 6
    np.testing.assert_array_equal(resumed.agent.policy.net.params, full.agent.policy.net.params)
    np.testing.assert_array_equal(resumed.agent.q1.params, full.agent.q1.params)
    assert resumed.history == full.history
    assert (tmp_path / "full" / "train_log.csv").read_bytes() == (tmp_path / "part" / "train_log.csv").read_bytes()


def test_checkpoint_holds_optimizer_and_buffer(tmp_path):
    st = train(replace(TINY, training_episodes=3), tmp_path)
    back, cfg, meta = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert cfg.hidden == (8, 8) and meta["episode"] == 3
    assert back.agent.opt_pi.t == st.agent.opt_pi.t > 0
    np.testing.assert_array_equal(back.agent.opt_q1.v, st.agent.opt_q1.v)
    assert len(back.buffer) == len(st.buffer)


def test_moving_average():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4], 2), [1, 1.5, 2.5, 3.5])
