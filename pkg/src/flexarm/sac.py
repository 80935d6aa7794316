"""Soft actor-critic motion planner: environment, replay buffer, learner and training loop.

The planner acts at 10 Hz by choosing a joint-velocity command in ``[-1, 1]`` (scaled
by ``theta_dot_max``). The reference angle integrates that command and the PDE
controller tracks it at 1 kHz on the flexible-link plant.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .beam import BeamParams
from .closed_loop import CONTROL_DT, SUBSTEPS, run_closed_loop, settle
from .control import Controller, PDEGains
from .dynamics import DynamicsModel, build_model
from .errors import FlexArmError, NumericalIntegrationError, TrainingError, ValidationError
from .nn import GaussianPolicy, Mlp, OptState, adam_step, load_arrays, polyak_update, save_arrays
from .trajectory import cpt, reference_table

log = logging.getLogger(__name__)

OBS_DIM = 6
ACT_DIM = 1
DEG = math.pi / 180.0
RANDOMIZED_FIELDS = ("L", "m", "M", "I_m", "rho", "E")  # rho scales rhoA, E scales EI
TRAIN_LOG_COLUMNS = ("episode", "steps", "return", "reach_flag", "failure_flag", "avg_abs_tip_velocity")


@dataclass(frozen=True)
class SACConfig:
    """Planner and learner settings. Field names double as config-file keys."""

    batch_size: int = 128
    experience_buffer_length: int = 1_000_000
    discount_factor: float = 0.99
    learning_rate: float = 1e-4
    target_smoothing_factor: float = 0.001
    training_episodes: int = 1500
    initial_random_steps: int = 500
    max_time_steps_per_episode: int = 300
    time_step: float = 0.1
    W_e: float = -5e-3
    W_theta_dot: float = -1e-3
    W_omega_dot: float = -0.3
    R_reach: float = 200.0
    R_failure: float = -200.0
    reach_angle_deg: float = 0.1
    reach_rate_deg_s: float = 0.1
    reach_tip_velocity: float = 0.1
    theta_dot_max_deg: float = 5.0
    entropy_temperature: float = 0.05
    learn_temperature: bool = False
    target_entropy: float = -1.0
    randomization: float = 0.1
    randomize: bool = True
    theta_min_deg: float = 0.0
    theta_max_deg: float = 90.0
    velocity_filter_tau: float = 0.0
    hidden: tuple = (64, 64)
    n_modes: int = 3
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        positive = (
            "batch_size", "experience_buffer_length", "learning_rate", "target_smoothing_factor",
            "training_episodes", "max_time_steps_per_episode", "time_step", "theta_dot_max_deg",
            "reach_angle_deg", "reach_rate_deg_s", "reach_tip_velocity", "n_modes", "checkpoint_every",
        )
        for name in positive:
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ValidationError(f"{name} must be positive, got {v!r}")
        if not 0 <= self.discount_factor <= 1:
            raise ValidationError(f"discount_factor must lie in [0, 1], got {self.discount_factor}")
        if not 0 < self.target_smoothing_factor <= 1:
            raise ValidationError("target_smoothing_factor must lie in (0, 1]")
        if self.initial_random_steps < 0 or self.entropy_temperature < 0 or self.velocity_filter_tau < 0:
            raise ValidationError("initial_random_steps, entropy_temperature and velocity_filter_tau must be >= 0")
        if not 0 <= self.randomization < 1:
            raise ValidationError(f"randomization must lie in [0, 1), got {self.randomization}")
        if self.batch_size > self.experience_buffer_length:
            raise ValidationError("batch_size cannot exceed experience_buffer_length")
        if not self.theta_min_deg < self.theta_max_deg:
            raise ValidationError("theta_min_deg must be below theta_max_deg")
        ticks = self.time_step / CONTROL_DT
        if abs(ticks - round(ticks)) > 1e-9:
            raise ValidationError("time_step must be a whole number of 1 ms control ticks")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def theta_dot_max(self) -> float:
        return self.theta_dot_max_deg * DEG

    @property
    def ticks_per_step(self) -> int:
        return int(round(self.time_step / CONTROL_DT))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SACConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValidationError(f"unknown planner keys: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------- environment


@dataclass(frozen=True)
class EnvObservation:
    e_T: float  # rad, target minus joint angle
    theta: float  # rad
    theta_dot: float  # rad/s
    tau: float  # N*m
    omega_L: float  # m
    omega_L_dot: float  # m/s

    def as_array(self) -> np.ndarray:
        return np.array([self.e_T, self.theta, self.theta_dot, self.tau, self.omega_L, self.omega_L_dot])


def observation_scale(cfg: SACConfig, bp: BeamParams) -> np.ndarray:
    """Per-entry divisors that bring raw observations to order one."""
    quarter = 0.5 * math.pi
    return np.array([quarter, quarter, cfg.theta_dot_max, 0.5 * bp.m * bp.g * bp.L, 0.05, 0.05])


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    done: bool

    def __post_init__(self):
        if np.any(np.abs(self.a) > 1.0):
            raise ValidationError("actions must lie in [-1, 1]")


def sample_episode(cfg: SACConfig, rng: np.random.Generator) -> tuple[float, float, dict]:
    """Random start angle, target angle (rad) and plant parameter factors for one episode."""
    th0 = rng.uniform(cfg.theta_min_deg, cfg.theta_max_deg) * DEG
    thT = rng.uniform(cfg.theta_min_deg, cfg.theta_max_deg) * DEG
    factors = {}
    if cfg.randomize and cfg.randomization > 0:
        r = cfg.randomization
        factors = {k: float(1.0 + rng.uniform(-r, r)) for k in RANDOMIZED_FIELDS}
    return th0, thT, factors


class FlexArmEnv:
    """Episodic reaching task on the flexible link under the PDE controller.

    The controller always uses the nominal parameters. With randomization on, the
    simulated plant gets independently perturbed ``[L, m, M, I_m, rhoA, EI]`` each reset.
    """

    def __init__(
        self,
        cfg: SACConfig,
        params: BeamParams | None = None,
        gains: PDEGains | None = None,
        model_kwargs: dict | None = None,
    ):
        self.cfg = cfg
        self.model_kwargs = dict(model_kwargs or {})
        self.nominal = params or BeamParams()
        self.controller = Controller("pde", gains or PDEGains(), self.nominal, feedforward=False)
        self.controller.certify()
        self.scale = observation_scale(cfg, self.nominal)
        self._nominal_model = build_model(self.nominal, cfg.n_modes, **self.model_kwargs)
        self.model: DynamicsModel | None = None
        self.plant: BeamParams | None = None
        self.factors: dict = {}
        self.t_step = 0

    # -- episode lifecycle -------------------------------------------------
    def reset(self, rng: np.random.Generator) -> EnvObservation:
        return self.reset_to(*sample_episode(self.cfg, rng))

    def reset_to(self, theta0: float, thetaT: float, factors: dict | None = None) -> EnvObservation:
        """Start at rest exactly at ``theta0`` with target ``thetaT`` and the given parameter factors."""
        factors = dict(factors or {})
        if factors:
            self.plant = self.nominal.scaled(**factors)
            self.model = build_model(self.plant, self.cfg.n_modes, **self.model_kwargs)
        else:
            self.plant = self.nominal
            self.model = self._nominal_model
        self.factors = factors
        rest = settle(self.model, self.controller, theta0)
        self.state = rest.state
        self.theta_d = rest.theta_d
        self.theta_d_dot = 0.0
        self.tau = rest.torque
        self.thetaT = float(thetaT)
        self.t_step = 0
        self.done = False
        self._obs = self._observe()
        return self._obs

    def set_target(self, thetaT: float) -> EnvObservation:
        """Change the goal mid-episode (used when chaining moves)."""
        self.thetaT = float(thetaT)
        self._obs = self._observe()
        return self._obs

    def _observe(self) -> EnvObservation:
        from .dynamics import tip_state

        wL, wLd = tip_state(self.model, self.state)
        s = self.state
        return EnvObservation(self.thetaT - s.theta, s.theta, s.theta_dot, self.tau, wL, wLd)

    def scaled(self, obs: EnvObservation) -> np.ndarray:
        return obs.as_array() / self.scale

    # -- stepping ----------------------------------------------------------
    def reference(self, action: float) -> np.ndarray:
        """Tick table for one planner step; also advances the internal reference."""
        cfg = self.cfg
        n = cfg.ticks_per_step
        cmd = cfg.theta_dot_max * action
        ref = np.zeros((n, 3))
        th, thd = self.theta_d, self.theta_d_dot
        k = CONTROL_DT / cfg.velocity_filter_tau if cfg.velocity_filter_tau > 0 else None
        for i in range(n):
            thd = cmd if k is None else thd + (cmd - thd) * min(k, 1.0)
            th += thd * CONTROL_DT
            ref[i, 0] = th
            ref[i, 1] = thd
        self.theta_d, self.theta_d_dot = th, thd
        return ref

    def reward_terms(self, obs: EnvObservation, reached: bool, failed: bool) -> dict:
        cfg = self.cfg
        return {
            "angle": cfg.W_e * abs(obs.e_T) / DEG,
            "rate": cfg.W_theta_dot * abs(obs.theta_dot) / DEG,
            "vibration": cfg.W_omega_dot * abs(obs.omega_L_dot),
            "reach": cfg.R_reach if reached else 0.0,
            "failure": cfg.R_failure if failed else 0.0,
        }

    def is_reached(self, obs: EnvObservation) -> bool:
        cfg = self.cfg
        return (
            abs(obs.e_T) < cfg.reach_angle_deg * DEG
            and abs(obs.theta_dot) < cfg.reach_rate_deg_s * DEG
            and abs(obs.omega_L_dot) < cfg.reach_tip_velocity
        )

    def step(self, action) -> tuple[EnvObservation, float, bool, dict]:
        cfg = self.cfg
        if self.model is None:
            raise FlexArmError("call reset before step")
        if self.t_step >= cfg.max_time_steps_per_episode:
            raise FlexArmError("episode already reached its step limit")
        a = float(np.clip(np.asarray(action, dtype=float).reshape(-1)[0], -1.0, 1.0))
        if not math.isfinite(a):
            raise ValidationError("action must be finite")
        ref = self.reference(a)
        info = {"action": a, "theta_d_dot": cfg.theta_dot_max * a, "diagnostic": ""}
        lo, hi = cfg.theta_min_deg * DEG, cfg.theta_max_deg * DEG
        try:
            run = run_closed_loop(self.model, self.controller, ref, self.state)
            self.state = replace(run.final, t=self.state.t + cfg.time_step)
            self.tau = float(run.torque[-1])
            info["tip_omega_dot"] = run.tip_omega_dot
            info["run"] = run
            failed = bool(np.any(run.theta < lo) or np.any(run.theta > hi))
            obs = self._observe()
            blown = False
        except NumericalIntegrationError as exc:
            info["diagnostic"] = str(exc)
            info["tip_omega_dot"] = np.zeros(0)
            info["run"] = None
            obs, failed, blown = self._obs, True, True
        reached = (not failed) and self.is_reached(obs)
        terms = self.reward_terms(obs, reached, failed)
        if blown:
            terms = {k: (v if k == "failure" else 0.0) for k, v in terms.items()}
        reward = float(sum(terms.values()))
        self.t_step += 1
        truncated = self.t_step >= cfg.max_time_steps_per_episode
        self.done = reached or failed or truncated
        info.update(terms=terms, reached=reached, failed=failed, truncated=truncated, blown_up=blown)
        self._obs = obs
        return obs, reward, self.done, info


def env_reset(env: FlexArmEnv, rng: np.random.Generator) -> EnvObservation:
    return env.reset(rng)


def env_step(env: FlexArmEnv, action) -> tuple[EnvObservation, float, bool, dict]:
    return env.step(action)


# --------------------------------------------------------------------------- replay buffer


class ReplayBuffer:
    """Fixed-capacity ring of transitions, sampled uniformly without replacement within a batch."""

    def __init__(self, capacity: int, obs_dim: int = OBS_DIM, act_dim: int = ACT_DIM):
        if capacity < 1:
            raise ValidationError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self._grow(min(self.capacity, 4096))
        self.ptr = 0
        self.size = 0

    def _grow(self, n):
        old = getattr(self, "s", None)
        s, a, r, s2, d = np.zeros((n, self.obs_dim)), np.zeros((n, self.act_dim)), np.zeros(n), np.zeros((n, self.obs_dim)), np.zeros(n)
        if old is not None:
            k = self.s.shape[0]
            s[:k], a[:k], r[:k], s2[:k], d[:k] = self.s, self.a, self.r, self.s2, self.d
        self.s, self.a, self.r, self.s2, self.d = s, a, r, s2, d

    def __len__(self):
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        if self.ptr >= self.s.shape[0]:
            self._grow(min(self.capacity, 2 * self.s.shape[0]))
        i = self.ptr
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = s, a, r, s2, float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int):
        if batch > self.size:
            raise ValidationError(f"cannot draw {batch} distinct transitions from {self.size}")
        idx = rng.choice(self.size, size=batch, replace=False)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]

    def state_arrays(self) -> dict:
        n = self.size
        return {"buf_s": self.s[:n], "buf_a": self.a[:n], "buf_r": self.r[:n], "buf_s2": self.s2[:n], "buf_d": self.d[:n]}

    @classmethod
    def from_arrays(cls, capacity: int, arrays: dict, ptr: int) -> "ReplayBuffer":
        buf = cls(capacity, arrays["buf_s"].shape[1], arrays["buf_a"].shape[1])
        n = arrays["buf_s"].shape[0]
        buf._grow(max(n, min(capacity, 4096)))
        buf.s[:n], buf.a[:n], buf.r[:n], buf.s2[:n], buf.d[:n] = (
            arrays["buf_s"], arrays["buf_a"], arrays["buf_r"], arrays["buf_s2"], arrays["buf_d"],
        )
        buf.size, buf.ptr = n, int(ptr)
        return buf


# --------------------------------------------------------------------------- learner


class SACAgent:
    """Policy, twin critics with slowly tracking targets, and their optimizers."""

    def __init__(self, cfg: SACConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        h = cfg.hidden
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.policy = GaussianPolicy(OBS_DIM, ACT_DIM, h, rng)
        self.q1 = Mlp((OBS_DIM + ACT_DIM, *h, 1), rng)
        self.q2 = Mlp((OBS_DIM + ACT_DIM, *h, 1), rng)
        self.q1_target = self.q1.copy()
        self.q2_target = self.q2.copy()
        lr = cfg.learning_rate
        self.opt_pi = OptState.zeros(self.policy.net.n_params, lr)
        self.opt_q1 = OptState.zeros(self.q1.n_params, lr)
        self.opt_q2 = OptState.zeros(self.q2.n_params, lr)
        self.log_beta = np.array([math.log(cfg.entropy_temperature) if cfg.entropy_temperature > 0 else -np.inf])
        self.opt_beta = OptState.zeros(1, lr)
        self.updates = 0

    @property
    def beta(self) -> float:
        return float(np.exp(self.log_beta[0]))

    def act(self, obs_scaled: np.ndarray, rng: np.random.Generator | None = None) -> np.ndarray:
        """Stochastic action when ``rng`` is given, otherwise ``tanh(mean)``."""
        if rng is None:
            return self.policy.deterministic(obs_scaled)[0]
        return self.policy.sample(obs_scaled, rng.standard_normal((1, ACT_DIM))).action[0]

    def update(self, batch, rng: np.random.Generator, tau: float | None = None) -> dict:
        cfg = self.cfg
        s, a, r, s2, d = batch
        B = s.shape[0]
        beta = self.beta

        nxt = self.policy.sample(s2, rng.standard_normal((B, ACT_DIM)))
        x2 = np.hstack([s2, nxt.action])
        q_next = np.minimum(self.q1_target(x2)[:, 0], self.q2_target(x2)[:, 0]) - beta * nxt.log_prob
        y = r + cfg.discount_factor * (1.0 - d) * q_next

        x = np.hstack([s, a])
        losses = {}
        for name, net, opt in (("q1", self.q1, self.opt_q1), ("q2", self.q2, self.opt_q2)):
            q = net(x)[:, 0]
            diff = q - y
            losses[name] = 0.5 * float(np.mean(diff * diff))
            g, _ = net.backward((diff / B)[:, None])
            adam_step(opt, net.params, g)

        cur = self.policy.sample(s, rng.standard_normal((B, ACT_DIM)))
        xa = np.hstack([s, cur.action])
        q1v = self.q1(xa)[:, 0]
        q2v = self.q2(xa)[:, 0]
        pick1 = q1v <= q2v
        qmin = np.where(pick1, q1v, q2v)
        # d(-mean min Q)/d action, routed through whichever critic is smaller per sample
        _, gx1 = self.q1.backward(np.where(pick1, -1.0 / B, 0.0)[:, None])
        _, gx2 = self.q2.backward(np.where(pick1, 0.0, -1.0 / B)[:, None])
        grad_a = (gx1 + gx2)[:, OBS_DIM:]
        losses["policy"] = float(np.mean(beta * cur.log_prob - qmin))
        # the policy cache still belongs to `cur` (the critics have their own caches)
        g_pi = self.policy.backward(cur, grad_a, np.full(B, beta / B))
        adam_step(self.opt_pi, self.policy.net.params, g_pi)

        if cfg.learn_temperature:
            g_beta = -np.mean(cur.log_prob + cfg.target_entropy)
            adam_step(self.opt_beta, self.log_beta, np.array([g_beta]))
            losses["beta"] = self.beta

        t = cfg.target_smoothing_factor if tau is None else tau
        polyak_update(self.q1_target, self.q1, t)
        polyak_update(self.q2_target, self.q2, t)
        self.updates += 1
        losses["entropy"] = float(-np.mean(cur.log_prob))
        if not all(math.isfinite(v) for v in losses.values()):
            raise TrainingError(f"non-finite loss at update {self.updates}: {losses}")
        return losses

    # -- persistence -------------------------------------------------------
    def arrays(self) -> dict:
        out = {
            "policy": self.policy.net.params,
            "q1": self.q1.params,
            "q2": self.q2.params,
            "q1_target": self.q1_target.params,
            "q2_target": self.q2_target.params,
            "log_beta": self.log_beta,
        }
        for name in ("pi", "q1", "q2", "beta"):
            opt = getattr(self, f"opt_{name}")
            out[f"opt_{name}_m"] = opt.m
            out[f"opt_{name}_v"] = opt.v
        return out

    def meta(self) -> dict:
        return {
            "updates": self.updates,
            "opt_steps": {n: getattr(self, f"opt_{n}").t for n in ("pi", "q1", "q2", "beta")},
            "layer_sizes": {
                "policy": list(self.policy.net.sizes),
                "q1": list(self.q1.sizes),
                "q2": list(self.q2.sizes),
            },
        }

    def load(self, arrays: dict, meta: dict) -> None:
        self.policy.net.params[:] = arrays["policy"]
        for n in ("q1", "q2", "q1_target", "q2_target"):
            getattr(self, n).params[:] = arrays[n]
        self.log_beta[:] = arrays["log_beta"]
        for n in ("pi", "q1", "q2", "beta"):
            opt = getattr(self, f"opt_{n}")
            opt.m[:] = arrays[f"opt_{n}_m"]
            opt.v[:] = arrays[f"opt_{n}_v"]
            opt.t = int(meta["opt_steps"][n])
        self.updates = int(meta["updates"])


def sac_update(agent: SACAgent, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
    if len(buffer) < agent.cfg.batch_size:
        raise ValidationError(f"buffer holds {len(buffer)} transitions, need {agent.cfg.batch_size}")
    return agent.update(buffer.sample(rng, agent.cfg.batch_size), rng)


# --------------------------------------------------------------------------- training


@dataclass
class TrainState:
    agent: SACAgent
    buffer: ReplayBuffer
    env_rng: np.random.Generator
    agent_rng: np.random.Generator
    episode: int = 0
    total_steps: int = 0
    history: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def _rngs(seed: int):
    init, env, agent = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(init), np.random.default_rng(env), np.random.default_rng(agent)


def new_train_state(cfg: SACConfig) -> TrainState:
    init_rng, env_rng, agent_rng = _rngs(cfg.seed)
    return TrainState(SACAgent(cfg, init_rng), ReplayBuffer(cfg.experience_buffer_length), env_rng, agent_rng)


def save_checkpoint(path, st: TrainState, cfg: SACConfig, extra_meta: dict | None = None) -> None:
    arrays = dict(st.agent.arrays())
    arrays.update(st.buffer.state_arrays())
    arrays["history"] = np.array(st.history, dtype=float).reshape(-1, len(TRAIN_LOG_COLUMNS))
    meta = {
        "kind": "sac-planner",
        "config": cfg.to_dict(),
        "episode": st.episode,
        "total_steps": st.total_steps,
        "buffer_ptr": st.buffer.ptr,
        "env_rng": st.env_rng.bit_generator.state,
        "agent_rng": st.agent_rng.bit_generator.state,
        **st.agent.meta(),
        **(extra_meta or {}),
    }
    save_arrays(path, arrays, meta)


def load_checkpoint(path, cfg: SACConfig | None = None) -> tuple[TrainState, SACConfig, dict]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "sac-planner":
        raise ValidationError(f"{path} is not a planner checkpoint")
    saved = SACConfig.from_dict({**meta["config"], "hidden": tuple(meta["config"]["hidden"])})
    cfg = cfg or saved
    if cfg.hidden != saved.hidden:
        raise ValidationError(f"checkpoint hidden layers {saved.hidden} differ from config {cfg.hidden}")
    st = new_train_state(cfg)
    st.agent.load(arrays, meta)
    if "buf_s" in arrays:
        st.buffer = ReplayBuffer.from_arrays(cfg.experience_buffer_length, arrays, meta["buffer_ptr"])
    st.env_rng.bit_generator.state = meta["env_rng"]
    st.agent_rng.bit_generator.state = meta["agent_rng"]
    st.episode = int(meta["episode"])
    st.total_steps = int(meta["total_steps"])
    st.history = [tuple(row) for row in arrays["history"].tolist()]
    return st, cfg, meta


def format_train_log(history) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(TRAIN_LOG_COLUMNS)
    for ep, steps, ret, reach, fail, vib in history:
        w.writerow([int(ep), int(steps), f"{ret:.10g}", int(reach), int(fail), f"{vib:.10g}"])
    return out.getvalue()


def run_episode(env: FlexArmEnv, st: TrainState, cfg: SACConfig) -> tuple:
    obs = env.reset(st.env_rng)
    s = env.scaled(obs)
    ret, steps, vib_sum, vib_n = 0.0, 0, 0.0, 0
    reached = failed = False
    while True:
        if st.total_steps < cfg.initial_random_steps:
            a = st.agent_rng.uniform(-1.0, 1.0, ACT_DIM)
        else:
            a = st.agent.act(s, st.agent_rng)
        obs, r, done, info = env.step(a)
        s2 = env.scaled(obs)
        terminal = info["reached"] or info["failed"]
        st.buffer.add(s, a, r, s2, terminal)
        st.total_steps += 1
        steps += 1
        ret += r
        w = info["tip_omega_dot"]
        vib_sum += float(np.sum(np.abs(w)))
        vib_n += len(w)
        if info["blown_up"]:
            log.warning("episode %d: %s", st.episode, info["diagnostic"])
        if st.total_steps > cfg.initial_random_steps and len(st.buffer) >= cfg.batch_size:
            st.losses.append(sac_update(st.agent, st.buffer, st.agent_rng))
        s = s2
        reached, failed = info["reached"], info["failed"]
        if done:
            break
    return (st.episode, steps, ret, int(reached), int(failed), vib_sum / max(vib_n, 1))


def train(
    cfg: SACConfig,
    out_dir,
    *,
    resume: str | Path | None = None,
    params: BeamParams | None = None,
    gains: PDEGains | None = None,
    model_kwargs: dict | None = None,
    episodes: int | None = None,
    progress=None,
    extra_meta: dict | None = None,
) -> TrainState:
    """Train for ``cfg.training_episodes`` episodes (or stop early after ``episodes`` more).

    Writes ``checkpoint.ckpt`` every ``checkpoint_every`` episodes and at the end, plus
    ``train_log.csv`` with one row per finished episode.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        st, cfg, _ = load_checkpoint(resume, cfg)
    else:
        st = new_train_state(cfg)
    env = FlexArmEnv(cfg, params, gains, model_kwargs)
    ckpt = out / "checkpoint.ckpt"
    stop = cfg.training_episodes if episodes is None else min(cfg.training_episodes, st.episode + episodes)
    while st.episode < stop:
        try:
            row = run_episode(env, st, cfg)
        except TrainingError:
            save_checkpoint(out / "failed.ckpt", st, cfg, extra_meta)
            raise
        st.history.append(row)
        st.episode += 1
        if progress is not None:
            progress(st, row)
        if st.episode % cfg.checkpoint_every == 0 or st.episode == stop:
            save_checkpoint(ckpt, st, cfg, extra_meta)
            (out / "train_log.csv").write_text(format_train_log(st.history))
    return st


def moving_average(x, window: int = 100) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


# --------------------------------------------------------------------------- planning and evaluation


def plan(policy: GaussianPolicy, obs_scaled, cfg: SACConfig, rng: np.random.Generator | None = None) -> float:
    """Joint-velocity command (rad/s) for a scaled observation; deterministic unless ``rng`` is given."""
    x = np.asarray(obs_scaled, dtype=float)
    if x.shape != (OBS_DIM,) or not np.all(np.isfinite(x)):
        raise ValidationError("observation must be a finite vector of length 6")
    if rng is None:
        a = policy.deterministic(x)[0, 0]
    else:
        a = policy.sample(x, rng.standard_normal((1, ACT_DIM))).action[0, 0]
    return float(np.clip(a, -1.0, 1.0) * cfg.theta_dot_max)


def load_policy(path) -> tuple[GaussianPolicy, SACConfig]:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "sac-planner":
        raise ValidationError(f"{path} is not a planner checkpoint")
    cfg = SACConfig.from_dict({**meta["config"], "hidden": tuple(meta["config"]["hidden"])})
    net = Mlp(meta["layer_sizes"]["policy"], params=arrays["policy"])
    return GaussianPolicy(OBS_DIM, ACT_DIM, cfg.hidden, net=net), cfg


def evaluation_pairs(n: int = 20, seed: int = 20240) -> list[tuple[float, float]]:
    """Fixed (start, target) angles in degrees, at least 5 deg apart, rounded to 0.1 deg."""
    rng = np.random.default_rng(seed)
    pairs = []
    while len(pairs) < n:
        a, b = np.round(rng.uniform(0.0, 90.0, 2), 1)
        if abs(a - b) >= 5.0:
            pairs.append((float(a), float(b)))
    return pairs


@dataclass
class PairResult:
    theta0_deg: float
    thetaT_deg: float
    drl_tip_rmse: float
    cpt_tip_rmse: float
    drl_reached: bool
    drl_failed: bool
    drl_final_error_deg: float
    cpt_final_error_deg: float


def rollout_policy(env: FlexArmEnv, policy: GaussianPolicy, theta0: float, thetaT: float, steps: int):
    """Deterministic rollout over exactly ``steps`` planner steps (no early stop)."""
    obs = env.reset_to(theta0, thetaT)
    tip = []
    reached = failed = False
    theta = []
    for _ in range(steps):
        rate = plan(policy, env.scaled(obs), env.cfg)
        obs, _, _, info = env.step(rate / env.cfg.theta_dot_max)
        tip.append(info["tip_omega_dot"])
        theta.append(obs.theta)
        reached |= info["reached"]
        failed |= info["failed"]
        if info["blown_up"]:
            return np.array([np.inf]), True, True, obs
    return np.concatenate(tip), reached, failed, obs


def evaluate(
    policy: GaussianPolicy,
    cfg: SACConfig,
    pairs=None,
    *,
    cpt_duration: float = 10.0,
    params: BeamParams | None = None,
    gains: PDEGains | None = None,
    model_kwargs: dict | None = None,
) -> list[PairResult]:
    """Tip-velocity RMSE with the planner versus a cubic reference, nominal plant, same start state."""
    cfg = replace(cfg, randomize=False)
    env = FlexArmEnv(cfg, params, gains, model_kwargs)
    steps = cfg.max_time_steps_per_episode
    n_ticks = steps * cfg.ticks_per_step
    ctrl = Controller("pde", env.controller.gains, env.nominal)
    results = []
    for a_deg, b_deg in pairs or evaluation_pairs():
        th0, thT = a_deg * DEG, b_deg * DEG
        tip, reached, failed, obs = rollout_policy(env, policy, th0, thT, steps)
        rest = settle(env.model, ctrl, th0)
        ref = reference_table(cpt(rest.theta_d, thT + (rest.theta_d - th0), cpt_duration), n_ticks, CONTROL_DT)
        run = run_closed_loop(env.model, ctrl, ref, rest.state)
        results.append(
            PairResult(
                a_deg, b_deg,
                float(np.sqrt(np.mean(tip**2))),
                float(np.sqrt(np.mean(run.tip_omega_dot**2))),
                bool(reached), bool(failed),
                float((obs.theta - thT) / DEG),
                float((run.theta[-1] - thT) / DEG),
            )
        )
    return results
