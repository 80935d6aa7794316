"""Experiment orchestration: runs, metrics, and deterministic CSV/JSON/SVG emission."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .beam import BeamParams, frequency_function, modal_basis, solve_eigenfrequencies
from .closed_loop import CONTROL_DT, ClosedLoopRun, rest_for_reference, run_closed_loop
from .config import SCHEMA_VERSION, ExperimentConfig
from .control import Controller, lyapunov_value
from .dynamics import DynamicsModel, build_model
from .errors import CertificationError, FlexArmError, ValidationError
from .sac import DEG, FlexArmEnv, evaluate, evaluation_pairs, load_policy, plan
from .trajectory import Schedule, reference_table

TRAJECTORY_COLUMNS = (
    "t", "theta", "theta_dot", "tip_omega", "tip_omega_dot", "torque", "energy_T", "energy_U", "theta_d",
)


# --------------------------------------------------------------------------- CSV plumbing


def fmt(x) -> str:
    """Shortest text that reads back as the same float (integers and strings pass through)."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def csv_text(kind: str, columns, rows, cfg: ExperimentConfig | None) -> str:
    """CSV with a leading provenance comment: schema version, kind, config hash, seed."""
    out = io.StringIO()
    prov = f"# flexarm schema_version={SCHEMA_VERSION} kind={kind}"
    if cfg is not None:
        prov += f" config_hash={cfg.hash} seed={cfg.data['seed']}"
    out.write(prov + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return out.getvalue()


def write_csv(path, kind, columns, rows, cfg=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(csv_text(kind, columns, rows, cfg))
    return path


def read_csv(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Provenance fields and numeric columns of a file written by ``write_csv``."""
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# flexarm"):
        raise ValidationError(f"{path} lacks a flexarm provenance line")
    prov = dict(tok.split("=", 1) for tok in lines[0][2:].split()[1:])
    if int(prov["schema_version"]) != SCHEMA_VERSION:
        raise ValidationError(f"{path} uses schema {prov['schema_version']}, expected {SCHEMA_VERSION}")
    reader = csv.reader(lines[1:])
    header = next(reader)
    data = list(reader)
    cols = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in data]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = np.array(vals, dtype=object)
    return prov, cols


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def svg_chart(path, t, series: dict, title: str, ylabel: str, width=640, height=320) -> Path:
    """Minimal line chart; one polyline per series."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    t = np.asarray(t, float)
    ys = [np.asarray(v, float) for v in series.values()]
    pad = 48
    if len(t) == 0:
        t = np.array([0.0, 1.0])
        ys = [np.zeros(2) for _ in ys]
    lo = min(float(np.min(y)) for y in ys) if ys else 0.0
    hi = max(float(np.max(y)) for y in ys) if ys else 1.0
    if hi - lo < 1e-12:
        lo, hi = lo - 1.0, hi + 1.0
    t0, t1 = float(t[0]), float(t[-1]) if t[-1] > t[0] else float(t[0]) + 1.0
    stride = max(1, len(t) // 2000)

    def xy(tt, yy):
        x = pad + (tt - t0) / (t1 - t0) * (width - 2 * pad)
        y = height - pad - (yy - lo) / (hi - lo) * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
        f'<text x="12" y="{height / 2}" font-size="11" transform="rotate(-90 12 {height / 2})">{ylabel}</text>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="11">t (s)</text>',
        f'<text x="{pad - 4}" y="{pad}" text-anchor="end" font-size="10">{hi:.4g}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{lo:.4g}</text>',
        f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>',
    ]
    for k, (name, y) in enumerate(zip(series, ys)):
        pts = " ".join(xy(a, b) for a, b in zip(t[::stride], y[::stride]))
        c = colors[k % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * (k + 1)}" text-anchor="end" font-size="11" fill="{c}">{name}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


# --------------------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricsReport:
    angular_rmse_deg: float
    tip_deflection_peak: float
    tip_velocity_rmse: float
    torque_peak: float
    seed: int
    config_hash: str

    def __post_init__(self):
        for v in (self.angular_rmse_deg, self.tip_velocity_rmse):
            if not v >= 0 and not math.isnan(v):
                raise ValidationError("RMSE values must be non-negative")


def _rms(x) -> float:
    x = np.asarray(x, float)
    return float(np.sqrt(np.mean(x * x))) if x.size else 0.0


def _peak(x) -> float:
    x = np.asarray(x, float)
    return float(np.max(np.abs(x))) if x.size else 0.0


def metrics_from_columns(cols: dict, seed: int, config_hash: str) -> MetricsReport:
    return MetricsReport(
        angular_rmse_deg=_rms(cols["theta"] - cols["theta_d"]) / DEG,
        tip_deflection_peak=_peak(cols["tip_omega"]),
        tip_velocity_rmse=_rms(cols["tip_omega_dot"]),
        torque_peak=_peak(cols["torque"]),
        seed=int(seed),
        config_hash=str(config_hash),
    )


def metrics_from_csv(path) -> MetricsReport:
    """Recompute the report from a trajectory CSV (bit-identical to the one written alongside it)."""
    prov, cols = read_csv(path)
    return metrics_from_columns(cols, int(prov.get("seed", 0)), prov.get("config_hash", ""))


# --------------------------------------------------------------------------- runs


def model_kwargs(cfg: ExperimentConfig) -> dict:
    m = cfg.data["model"]
    kw = {"freeze_nu_rate": bool(m["freeze_nu_rate"])}
    if m["damping_ratios"] is not None:
        kw["damping_ratios"] = list(m["damping_ratios"])
    return kw


def build_plant(cfg: ExperimentConfig, params: BeamParams | None = None) -> DynamicsModel:
    return build_model(params or cfg.beam_params(), cfg.data["model"]["n_modes"], **model_kwargs(cfg))


def schedule(cfg: ExperimentConfig) -> Schedule:
    s = cfg.data["schedule"]
    moves = [(a * DEG, float(d), float(w)) for a, d, w in s["moves"]]
    return Schedule.from_waypoints(s["start_deg"] * DEG, moves)


@dataclass
class Run:
    """Tick-sampled closed-loop log of one experiment arm."""

    t: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    tip_omega: np.ndarray
    tip_omega_dot: np.ndarray
    torque: np.ndarray
    energy_T: np.ndarray
    energy_U: np.ndarray
    theta_d: np.ndarray
    saturated: int = 0

    @classmethod
    def empty(cls) -> "Run":
        z = np.zeros(0)
        return cls(z, z, z, z, z, z, z, z, z)

    @classmethod
    def from_closed_loop(cls, r: ClosedLoopRun, theta_d=None) -> "Run":
        return cls(r.t, r.theta, r.theta_dot, r.tip_omega, r.tip_omega_dot, r.torque, r.energy_T, r.energy_U,
                   r.theta_d if theta_d is None else theta_d, r.saturated)

    def columns(self) -> dict:
        return {c: getattr(self, c) for c in TRAJECTORY_COLUMNS}

    def rows(self):
        return zip(*(getattr(self, c) for c in TRAJECTORY_COLUMNS))


def run_cpt(cfg: ExperimentConfig, controller: Controller, plant: DynamicsModel | None = None) -> Run:
    """Track the configured cubic schedule from the closed-loop rest state at its start angle."""
    sched = schedule(cfg)
    n_ticks = int(round(sched.duration / CONTROL_DT)) if sched.segments else 0
    if n_ticks == 0:
        return Run.empty()
    plant = plant or build_plant(cfg)
    rest = rest_for_reference(plant, controller, sched.theta_start)
    ref = reference_table(sched, n_ticks, CONTROL_DT)
    r = run_closed_loop(plant, controller, ref, rest.state, e_int=rest.e_int)
    return Run.from_closed_loop(r)


def run_drl(cfg: ExperimentConfig, checkpoint) -> Run:
    """Let the trained planner drive the PDE controller through the schedule's targets.

    Each move hands the planner its target for the move's duration plus dwell.
    The logged ``theta_d`` is the configured cubic schedule so angular errors stay comparable.
    """
    sched = schedule(cfg)
    moves = cfg.data["schedule"]["moves"]
    if not moves:
        return Run.empty()
    policy, _ = load_policy(checkpoint)
    sac_cfg = cfg.sac_config()
    step_s = sac_cfg.time_step
    plan_steps = [int(round((d + w) / step_s)) for _, d, w in moves]
    sac_cfg = replace(sac_cfg, randomize=False, max_time_steps_per_episode=max(1, sum(plan_steps)))
    env = FlexArmEnv(sac_cfg, cfg.beam_params(), cfg.pde_gains(), model_kwargs(cfg))
    obs = env.reset_to(sched.theta_start, moves[0][0] * DEG)
    runs = []
    for (target, _, _), n in zip(moves, plan_steps):
        obs = env.set_target(target * DEG)
        for _ in range(n):
            rate = plan(policy, env.scaled(obs), sac_cfg)
            obs, _, _, info = env.step(rate / sac_cfg.theta_dot_max)
            if info["run"] is None:
                raise FlexArmError(f"planner run blew up: {info['diagnostic']}")
            runs.append(info["run"])
    cat = {k: np.concatenate([getattr(r, k) for r in runs]) for k in
           ("theta", "theta_dot", "tip_omega", "tip_omega_dot", "torque", "energy_T", "energy_U")}
    n_ticks = len(cat["theta"])
    t = CONTROL_DT * np.arange(n_ticks)
    th_d = sched.sample(t)[0]
    return Run(t, cat["theta"], cat["theta_dot"], cat["tip_omega"], cat["tip_omega_dot"], cat["torque"],
               cat["energy_T"], cat["energy_U"], th_d, sum(r.saturated for r in runs))


def _checkpoint_path(cfg: ExperimentConfig, override=None) -> Path:
    p = override or cfg.data["planner"]["checkpoint"]
    if p is None:
        raise ValidationError("a trained planner checkpoint is required (planner.checkpoint or --checkpoint)")
    path = cfg.resolve(p)
    if not path.exists():
        raise ValidationError(f"checkpoint {path} does not exist")
    return path


# --------------------------------------------------------------------------- commands


def cmd_modes(cfg: ExperimentConfig, out_dir) -> dict:
    bp = cfg.beam_params()
    n = cfg.data["model"]["n_modes"]
    beta = solve_eigenfrequencies(bp, n)
    basis = modal_basis(bp, n)
    res = basis.boundary_residuals()
    gram = basis.gram()
    rows = []
    for i, b in enumerate(beta):
        rows.append([i + 1, b, b * bp.L, b * b * math.sqrt(bp.EI / bp.rhoA),
                     abs(frequency_function(b, bp.p, bp.L)), float(np.max(np.abs(res[i])))])
    out = Path(out_dir)
    write_csv(out / "modes.csv", "modes",
              ("mode", "beta", "beta_L", "omega_rad_s", "det_residual", "bc_residual"), rows, cfg)
    write_csv(out / "orthonormality.csv", "orthonormality",
              ["mode"] + [f"m{j + 1}" for j in range(n)], [[i + 1, *gram[i]] for i in range(n)], cfg)
    off = gram - np.eye(n)
    return {
        "beta": [float(b) for b in beta],
        "beta_L": [float(b * bp.L) for b in beta],
        "max_det_residual": max(r[4] for r in rows),
        "max_bc_residual": max(r[5] for r in rows),
        "max_orthonormality_error": float(np.max(np.abs(off))),
    }


def cmd_simulate(cfg: ExperimentConfig, out_dir, checkpoint=None) -> MetricsReport:
    out = Path(out_dir)
    planner = cfg.data["planner"]["kind"]
    if planner == "drl":
        if cfg.data["controller"]["kind"] != "pde":
            raise ValidationError("the trained planner drives the PDE controller only")
        run = run_drl(cfg, _checkpoint_path(cfg, checkpoint))
    else:
        run = run_cpt(cfg, cfg.controller())
    path = write_csv(out / "trajectory.csv", "trajectory", TRAJECTORY_COLUMNS, run.rows(), cfg)
    report = metrics_from_csv(path)
    write_json(out / "metrics.json", {**asdict(report), "saturation_events": run.saturated,
                                      "controller": cfg.data["controller"]["kind"], "planner": planner})
    if cfg.data["output"]["svg"]:
        svg_chart(out / "theta.svg", run.t, {"theta": run.theta / DEG, "theta_d": run.theta_d / DEG},
                  "Joint angle", "deg")
        svg_chart(out / "tip_velocity.svg", run.t, {"tip velocity": run.tip_omega_dot}, "Tip velocity", "m/s")
        svg_chart(out / "torque.svg", run.t, {"torque": run.torque}, "Hub torque", "N m")
    return report


def cmd_compare(cfg: ExperimentConfig, out_dir, checkpoint=None) -> dict:
    """Three arms on the configured schedule plus the planner-versus-cubic evaluation suite."""
    ckpt = _checkpoint_path(cfg, checkpoint)
    out = Path(out_dir)
    arms = {
        "PDE+DRL": run_drl(cfg, ckpt),
        "PDE+CPT": run_cpt(cfg, cfg.controller("pde")),
        "PID+CPT": run_cpt(cfg, cfg.controller("pid")),
    }
    rows = []
    for name, run in arms.items():
        m = metrics_from_columns(run.columns(), cfg.data["seed"], cfg.hash)
        rows.append([name, m.tip_velocity_rmse, m.angular_rmse_deg, m.torque_peak, m.tip_deflection_peak])
    write_csv(out / "compare.csv", "compare",
              ("arm", "tip_velocity_rmse", "angular_rmse_deg", "torque_peak", "tip_deflection_peak"), rows, cfg)

    policy, _ = load_policy(ckpt)
    ev = cfg.data["evaluation"]
    pairs = evaluation_pairs(ev["pairs"], ev["seed"])
    results = evaluate(policy, cfg.sac_config(), pairs, cpt_duration=ev["cpt_duration"],
                       params=cfg.beam_params(), gains=cfg.pde_gains(), model_kwargs=model_kwargs(cfg))
    srows = [[r.theta0_deg, r.thetaT_deg, r.drl_tip_rmse, r.cpt_tip_rmse, r.cpt_tip_rmse / r.drl_tip_rmse,
              r.drl_reached, r.drl_failed, r.drl_final_error_deg, r.cpt_final_error_deg] for r in results]
    write_csv(out / "suite.csv", "suite",
              ("theta0_deg", "thetaT_deg", "drl_tip_rmse", "cpt_tip_rmse", "reduction", "drl_reached",
               "drl_failed", "drl_final_error_deg", "cpt_final_error_deg"), srows, cfg)
    reductions = np.array([r[4] for r in srows])
    summary = {
        "arms": {r[0]: {"tip_velocity_rmse": r[1], "angular_rmse_deg": r[2], "torque_peak": r[3]} for r in rows},
        "suite_pairs": len(results),
        "suite_fraction_drl_better": float(np.mean(reductions > 1.0)),
        "suite_median_reduction": float(np.median(reductions)),
        "suite_reach_rate": float(np.mean([r.drl_reached for r in results])),
        "config_hash": cfg.hash,
        "seed": cfg.data["seed"],
    }
    write_json(out / "compare_summary.json", summary)
    return summary


def cmd_uncertainty(cfg: ExperimentConfig, out_dir) -> list[dict]:
    """Angular RMSE on the cubic schedule when the controller's model parameters are off by a percentage."""
    plant = build_plant(cfg)
    nominal = cfg.beam_params()
    params = cfg.data["uncertainty"]["parameters"]
    cells = []
    for lvl in cfg.data["uncertainty"]["levels_pct"]:
        f = 1.0 + lvl / 100.0
        cell = {"level_pct": lvl, "angular_rmse_deg": math.nan, "tip_velocity_rmse": math.nan,
                "torque_peak": math.nan, "saturation_events": 0, "status": "ok"}
        try:
            ctrl = cfg.controller("pde", nominal.scaled(**{p: f for p in params}))
            ctrl.certify()
            run = run_cpt(cfg, ctrl, plant)
            m = metrics_from_columns(run.columns(), cfg.data["seed"], cfg.hash)
            cell.update(angular_rmse_deg=m.angular_rmse_deg, tip_velocity_rmse=m.tip_velocity_rmse,
                        torque_peak=m.torque_peak, saturation_events=run.saturated)
        except CertificationError as exc:
            cell["status"] = f"certification: {exc}"
        except FlexArmError as exc:
            cell["status"] = f"{type(exc).__name__}: {exc}"
        cells.append(cell)
    write_csv(Path(out_dir) / "uncertainty.csv", "uncertainty",
              ("level_pct", "angular_rmse_deg", "tip_velocity_rmse", "torque_peak", "saturation_events", "status"),
              [[c["level_pct"], c["angular_rmse_deg"], c["tip_velocity_rmse"], c["torque_peak"],
                c["saturation_events"], c["status"]]
               for c in cells], cfg)
    return cells


@dataclass
class LyapunovTrace:
    target_deg: float
    t: np.ndarray
    V: np.ndarray
    bound: np.ndarray
    violations: int
    final_error: float
    lam: float


def lyapunov_traces(cfg: ExperimentConfig) -> list[LyapunovTrace]:
    ctrl = cfg.controller("pde")
    rate = ctrl.certify()  # raises before any simulation if the gains are not certified
    ly = cfg.data["lyapunov"]
    plant = build_plant(cfg)
    n_ticks = int(round(ly["duration"] / CONTROL_DT)) + 1
    rest = rest_for_reference(plant, ctrl, ly["start_deg"] * DEG)
    traces = []
    for target in ly["targets_deg"]:
        ref = np.zeros((n_ticks, 3))
        ref[:, 0] = target * DEG
        r = run_closed_loop(plant, ctrl, ref, rest.state)
        V = lyapunov_value(ctrl.gains, ctrl.model_params.I_m, r.e, r.e_dot)
        t = r.t - r.t[0]
        bound = V[0] * np.exp(-rate.lam * t)
        viol = int(np.sum(V > bound * (1.0 + ly["slack"])))
        traces.append(LyapunovTrace(float(target), t, V, bound, viol, float(r.e[-1]), rate.lam))
    return traces


def cmd_lyapunov(cfg: ExperimentConfig, out_dir) -> list[LyapunovTrace]:
    traces = lyapunov_traces(cfg)
    slack = cfg.data["lyapunov"]["slack"]
    rows = []
    for tr in traces:
        for t, V, b in zip(tr.t, tr.V, tr.bound):
            rows.append([tr.target_deg, t, V, b, int(V > b * (1.0 + slack))])
    write_csv(Path(out_dir) / "lyapunov.csv", "lyapunov", ("target_deg", "t", "V", "bound", "violation"), rows, cfg)
    return traces
