"""Controller + plant co-simulation at a 1 kHz control rate with RK4 substeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as kn
from .control import Controller, h_term
from .dynamics import DynamicsModel, SimState, base_curvature, static_equilibrium, tip_state
from .errors import NumericalIntegrationError

CONTROL_DT = 1e-3
SUBSTEPS = 10


@dataclass
class ClosedLoopRun:
    """Per-tick samples of a closed-loop run (all arrays share one length)."""

    t: np.ndarray
    theta: np.ndarray
    theta_dot: np.ndarray
    theta_d: np.ndarray
    theta_d_dot: np.ndarray
    tip_omega: np.ndarray
    tip_omega_dot: np.ndarray
    torque: np.ndarray
    energy_T: np.ndarray
    energy_U: np.ndarray
    e: np.ndarray
    e_dot: np.ndarray
    final: SimState
    e_int: float
    saturated: int

    def __len__(self):
        return len(self.t)


def run_closed_loop(
    model: DynamicsModel,
    controller: Controller,
    ref: np.ndarray,
    s0: SimState,
    *,
    e_int: float = 0.0,
    dt: float = CONTROL_DT / SUBSTEPS,
    substeps: int = SUBSTEPS,
) -> ClosedLoopRun:
    """Track ``ref`` (rows of ``theta_d, theta_d_dot, theta_d_ddot`` per tick) from ``s0``."""
    ref = np.ascontiguousarray(ref, dtype=float)
    n_ticks = ref.shape[0]
    q, qd = s0.q, s0.qd
    log = np.zeros((n_ticks, 10))
    status, done, e_int_out, n_sat = kn.run_closed_loop(
        q, qd, ref, controller.kernel_kind, controller.kernel_params(), float(e_int), dt, substeps,
        model.S, model.PhiL, model.Phi2_0, model.ix, model.inu, model.bv, model.G, model.K, model.C, log,
    )
    tick = dt * substeps
    if status != kn.STATUS_OK:
        last = SimState(s0.t + done * tick, *log[max(done - 1, 0), :2], np.zeros(model.n_modes), np.zeros(model.n_modes))
        raise NumericalIntegrationError(
            f"closed-loop integration blew up at t={s0.t + done * tick:.4f} s "
            f"(last good theta={last.theta:.6g} rad, theta_dot={last.theta_dot:.6g} rad/s)",
            t=s0.t + done * tick,
            state=last,
        )
    t = s0.t + tick * np.arange(n_ticks)
    return ClosedLoopRun(
        t=t,
        theta=log[:, 0].copy(),
        theta_dot=log[:, 1].copy(),
        theta_d=ref[:, 0].copy(),
        theta_d_dot=ref[:, 1].copy(),
        tip_omega=log[:, 2].copy(),
        tip_omega_dot=log[:, 3].copy(),
        torque=log[:, 4].copy(),
        energy_T=log[:, 5].copy(),
        energy_U=log[:, 6].copy(),
        e=log[:, 7].copy(),
        e_dot=log[:, 8].copy(),
        final=SimState.from_q(s0.t + tick * n_ticks, q, qd),
        e_int=float(e_int_out),
        saturated=int(n_sat),
    )


@dataclass(frozen=True)
class RestPoint:
    """Closed-loop rest state: plant at rest at ``state.theta`` under reference ``theta_d``."""

    state: SimState
    theta_d: float
    e_int: float
    torque: float


def settle(model: DynamicsModel, controller: Controller, theta: float) -> RestPoint:
    """Reference and controller memory that hold the plant at rest exactly at ``theta``.

    The elastic sag and holding torque come from the static balance of the plant.
    The PDE law then needs ``theta_d = theta + (torque + H) / Kp``, while PID holds
    ``theta_d = theta`` through its integral. Starting a run here avoids the
    start-up transient a mismatched initial reference would cause.
    """
    s, tau = static_equilibrium(model, theta)
    g = controller.gains
    if controller.kind == "pid":
        if g.Ki == 0:
            return RestPoint(s, theta + tau / g.Kp, 0.0, tau)
        return RestPoint(s, theta, tau / g.Ki, tau)
    omega_L, _ = tip_state(model, s)
    H = h_term(controller.model_params, theta, omega_L, base_curvature(model, s), 0.0)
    return RestPoint(s, theta + (tau + H) / g.Kp, 0.0, tau)


def rest_for_reference(model: DynamicsModel, controller: Controller, theta_d: float) -> RestPoint:
    """Rest state the closed loop settles into under a constant reference ``theta_d``.

    For the PDE law the plant comes to rest slightly off the reference when the
    modal model cannot cancel the hub load exactly; the offset is solved for here.
    """
    if controller.kind == "pid":
        return settle(model, controller, theta_d)
    from scipy.optimize import brentq

    def gap(theta):
        return settle(model, controller, theta).theta_d - theta_d

    lo, hi = theta_d - 0.5, theta_d + 0.5
    if gap(lo) * gap(hi) > 0:
        raise NumericalIntegrationError(f"no closed-loop rest state within 0.5 rad of theta_d={theta_d}")
    theta = brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)
    rp = settle(model, controller, theta)
    return RestPoint(rp.state, float(theta_d), 0.0, rp.torque)
