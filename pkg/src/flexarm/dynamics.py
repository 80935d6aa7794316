"""Lagrangian modal model of the flexible link, time stepping and audit quantities.

Generalized coordinates are ``q = (theta, eta_1..eta_n)`` with the elastic field
reconstructed as ``omega(x, t) = sum_i Phi_i(x) eta_i(t) - nu(x; theta)``. Because
``nu(x; theta) = cos(theta) nu0(x)``, the sag profile moves with the joint angle;
its rate ``d nu / d theta * theta_dot`` is kept in the kinetic energy unless
``freeze_nu_rate`` is set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels as kn
from .beam import BeamParams, ModalBasis, NuProfile, gauss_legendre, modal_basis, nu_profile
from .errors import NumericalIntegrationError, SolverError, ValidationError

QUAD_NODES = 64


@dataclass(frozen=True)
class SimState:
    t: float
    theta: float
    theta_dot: float
    eta: np.ndarray
    eta_dot: np.ndarray

    @classmethod
    def at_rest(cls, theta: float, n_modes: int, t: float = 0.0) -> "SimState":
        return cls(t, float(theta), 0.0, np.zeros(n_modes), np.zeros(n_modes))

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([[self.theta], self.eta])

    @property
    def qd(self) -> np.ndarray:
        return np.concatenate([[self.theta_dot], self.eta_dot])

    @classmethod
    def from_q(cls, t: float, q: np.ndarray, qd: np.ndarray) -> "SimState":
        return cls(float(t), float(q[0]), float(qd[0]), np.array(q[1:], dtype=float), np.array(qd[1:], dtype=float))

    def is_finite(self) -> bool:
        return bool(
            np.isfinite([self.t, self.theta, self.theta_dot]).all()
            and np.isfinite(self.eta).all()
            and np.isfinite(self.eta_dot).all()
        )


@dataclass(frozen=True)
class DynamicsModel:
    """Precomputed modal integrals and compiled-kernel data for one parameter set."""

    params: BeamParams
    basis: ModalBasis
    nu0: NuProfile
    freeze_nu_rate: bool
    S: np.ndarray = field(repr=False)
    PhiL: np.ndarray = field(repr=False)
    Phi2_0: np.ndarray = field(repr=False)
    ix: np.ndarray = field(repr=False)
    inu: np.ndarray = field(repr=False)
    bv: np.ndarray = field(repr=False)
    G: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    C: np.ndarray = field(repr=False)

    @property
    def n_modes(self) -> int:
        return self.basis.n_modes

    @property
    def kernel_args(self) -> tuple:
        return (self.S, self.PhiL, self.ix, self.inu, self.bv, self.G, self.K, self.C)

    @property
    def natural_frequencies(self) -> np.ndarray:
        """Clamped-root modal frequencies ``beta^2 sqrt(EI / rhoA)`` in rad/s."""
        return self.basis.beta**2 * math.sqrt(self.params.EI / self.params.rhoA)

    def mass_matrix(self, theta: float) -> np.ndarray:
        n = self.n_modes + 1
        out = np.empty((n, n))
        kn.mass_matrix(float(theta), self.S, self.PhiL, self.ix, self.inu, self.G, out)
        return out

    def generalized_force(self, q, qd, tau: float) -> np.ndarray:
        out = np.empty(self.n_modes + 1)
        kn.generalized_force(
            np.asarray(q, float), np.asarray(qd, float), float(tau),
            self.S, self.PhiL, self.ix, self.inu, self.bv, self.K, self.C, out,
        )
        return out

    def accelerations(self, s: SimState, tau: float) -> np.ndarray:
        Mq = self.mass_matrix(s.theta)
        h = self.generalized_force(s.q, s.qd, tau)
        try:
            return np.linalg.solve(Mq, h)
        except np.linalg.LinAlgError as exc:
            raise NumericalIntegrationError(f"singular mass matrix at t={s.t}", t=s.t, state=s) from exc

    def with_freeze(self, freeze: bool) -> "DynamicsModel":
        S = self.S.copy()
        S[kn.S_FREEZE] = 1.0 if freeze else 0.0
        return replace(self, freeze_nu_rate=freeze, S=S)


def assemble_dynamics(
    bp: BeamParams,
    basis: ModalBasis,
    *,
    freeze_nu_rate: bool = False,
    damping_ratios=None,
) -> DynamicsModel:
    """Project the beam energies onto the modal basis.

    ``damping_ratios`` (one per mode, default zero) adds ``2 zeta_i w_i rhoA eta_dot_i``
    modal damping; the bare model is conservative.
    """
    if abs(basis.L - bp.L) > 1e-12 * bp.L:
        raise ValidationError("modal basis was built for a different link length")
    n = basis.n_modes
    nu0 = nu_profile(bp, 0.0)
    x, w = gauss_legendre(bp.L, QUAD_NODES)
    phi = basis(x)
    phi2 = basis(x, 2)
    nux = nu0(x)
    nu2 = nu0(x, 2)

    G = (phi * w) @ phi.T
    K = (phi2 * w) @ phi2.T
    G = 0.5 * (G + G.T)
    K = 0.5 * (K + K.T)
    ix = phi @ (w * x)
    inu = phi @ (w * nux)
    bv = phi2 @ (w * nu2)
    PhiL = basis(bp.L)[:, 0]
    Phi2_0 = basis(0.0, 2)[:, 0]

    zeta = np.zeros(n) if damping_ratios is None else np.asarray(damping_ratios, float)
    if zeta.shape != (n,) or np.any(zeta < 0):
        raise ValidationError("damping_ratios must be non-negative, one per mode")
    wn = basis.beta**2 * math.sqrt(bp.EI / bp.rhoA)
    C = np.diag(2.0 * zeta * wn * bp.rhoA)

    S = np.zeros(kn.S_SIZE)
    S[kn.S_IM] = bp.I_m
    S[kn.S_RHOA] = bp.rhoA
    S[kn.S_EI] = bp.EI
    S[kn.S_MTIP] = bp.M
    S[kn.S_MLINK] = bp.m
    S[kn.S_L] = bp.L
    S[kn.S_G] = bp.g
    S[kn.S_IXX] = np.sum(w * x * x)
    S[kn.S_IXN] = np.sum(w * x * nux)
    S[kn.S_INN] = np.sum(w * nux * nux)
    S[kn.S_NL] = float(nu0(bp.L))
    S[kn.S_CNN] = np.sum(w * nu2 * nu2)
    S[kn.S_FREEZE] = 1.0 if freeze_nu_rate else 0.0
    S[kn.S_N2_0] = float(nu0(0.0, 2))

    model = DynamicsModel(bp, basis, nu0, freeze_nu_rate, S, PhiL, Phi2_0, ix, inu, bv, G, K, C)
    try:
        np.linalg.cholesky(model.mass_matrix(0.0))
    except np.linalg.LinAlgError as exc:
        raise SolverError("mass matrix is not positive definite at the reference configuration") from exc
    return model


def build_model(bp: BeamParams, n_modes: int = 3, **kwargs) -> DynamicsModel:
    return assemble_dynamics(bp, modal_basis(bp, n_modes), **kwargs)


# --------------------------------------------------------------------------- stepping


def step(model: DynamicsModel, s: SimState, tau: float, dt: float) -> SimState:
    """One classical RK4 step under constant torque."""
    if not (0.0 < dt <= 1e-2):
        raise ValidationError(f"dt must be in (0, 1e-2], got {dt}")
    if not s.is_finite():
        raise NumericalIntegrationError("non-finite input state", t=s.t, state=s)
    q, qd = s.q, s.qd
    work = np.empty((6, len(q)))
    ok = kn.rk4_step(q, qd, float(tau), float(dt), *model.kernel_args, work)
    if not ok:
        raise NumericalIntegrationError(f"integration blew up at t={s.t + dt:.6g} s", t=s.t + dt, state=s)
    return SimState.from_q(s.t + dt, q, qd)


@dataclass
class Trajectory:
    """Open-loop run output: times, coordinates, velocities and matrix-form energies."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    T: np.ndarray
    U: np.ndarray

    @property
    def final(self) -> SimState:
        return SimState.from_q(self.t[-1], self.q[-1], self.qd[-1])


def simulate_open_loop(
    model: DynamicsModel,
    s0: SimState,
    torques,
    dt: float = 1e-4,
    substeps: int = 1,
    log_every: int = 1,
) -> Trajectory:
    """Apply each entry of ``torques`` for ``substeps`` steps of size ``dt``."""
    if not (0.0 < dt <= 1e-2):
        raise ValidationError(f"dt must be in (0, 1e-2], got {dt}")
    torques = np.ascontiguousarray(torques, dtype=float)
    n = model.n_modes + 1
    total = len(torques) * substeps
    rows = total // log_every + 2
    log = np.zeros((rows, 3 + 2 * n))
    q, qd = s0.q, s0.qd
    status, t, nrow = kn.integrate_open_loop(q, qd, torques, dt, substeps, *model.kernel_args, log_every, log)
    if status != kn.STATUS_OK:
        raise NumericalIntegrationError(f"integration blew up at t={s0.t + t:.6g} s", t=s0.t + t)
    log = log[:nrow]
    return Trajectory(
        t=s0.t + log[:, 0], q=log[:, 1 : 1 + n], qd=log[:, 1 + n : 1 + 2 * n], T=log[:, 1 + 2 * n], U=log[:, 2 + 2 * n]
    )


# --------------------------------------------------------------------------- field quantities


def tip_state(model: DynamicsModel, s: SimState) -> tuple[float, float]:
    """Elastic tip deflection and its rate, ``(omega(L), omega_dot(L))``."""
    nL = model.S[kn.S_NL]
    omega = float(model.PhiL @ s.eta) - math.cos(s.theta) * nL
    omega_dot = float(model.PhiL @ s.eta_dot) + math.sin(s.theta) * s.theta_dot * nL
    return omega, omega_dot


def base_curvature(model: DynamicsModel, s: SimState) -> float:
    """Root curvature ``omega''(0)``."""
    return float(model.Phi2_0 @ s.eta) - math.cos(s.theta) * model.S[kn.S_N2_0]


def field(model: DynamicsModel, s: SimState, x, deriv: int = 0) -> np.ndarray:
    """Elastic field ``omega`` (or a spatial derivative) at positions ``x``."""
    x = np.atleast_1d(np.asarray(x, float))
    return s.eta @ model.basis(x, deriv) - math.cos(s.theta) * model.nu0(x, deriv)


def field_rate(model: DynamicsModel, s: SimState, x) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, float))
    return s.eta_dot @ model.basis(x) + math.sin(s.theta) * s.theta_dot * model.nu0(x)


def total_energy(model: DynamicsModel, s: SimState, nodes: int = 2 * QUAD_NODES) -> tuple[float, float]:
    """Kinetic and potential energy by direct quadrature of the reconstructed fields."""
    bp = model.params
    x, w = gauss_legendre(bp.L, nodes)
    omega_dot = field_rate(model, s, x)
    if model.freeze_nu_rate:
        omega_dot = s.eta_dot @ model.basis(x)
    ydot = x * s.theta_dot + omega_dot
    if model.freeze_nu_rate:
        ydot_L = bp.L * s.theta_dot + float(model.PhiL @ s.eta_dot)
    else:
        ydot_L = bp.L * s.theta_dot + tip_state(model, s)[1]
    T = 0.5 * bp.I_m * s.theta_dot**2 + 0.5 * bp.rhoA * np.sum(w * ydot**2) + 0.5 * bp.M * ydot_L**2
    omegaL = tip_state(model, s)[0]
    curv = field(model, s, x, 2)
    U = (
        0.5 * bp.m * bp.g * bp.L * math.sin(s.theta)
        + bp.M * bp.g * (bp.L * math.sin(s.theta) + omegaL * math.cos(s.theta))
        + 0.5 * bp.EI * np.sum(w * curv**2)
    )
    return float(T), float(U)


@dataclass(frozen=True)
class PDEResidual:
    hub: float
    field_norm: float
    tip: float


def pde_residual(model: DynamicsModel, s: SimState, tau: float, nodes: int = 2 * QUAD_NODES) -> PDEResidual:
    """Residuals of the hub equation, field equation (L2 norm over x) and tip shear condition."""
    bp = model.params
    qdd = model.accelerations(s, tau)
    thdd, etadd = qdd[0], qdd[1:]
    th, thd = s.theta, s.theta_dot
    c, sn = math.cos(th), math.sin(th)
    omegaL, _ = tip_state(model, s)
    hub = bp.I_m * thdd - bp.EI * base_curvature(model, s) + 0.5 * bp.m * bp.g * bp.L * c - bp.M * bp.g * omegaL * sn - tau

    # omega_ddot = Phi eta_ddot + (cos th thd^2 + sin th thdd) nu0 ; nu carries cos(theta)
    x, w = gauss_legendre(bp.L, nodes)
    nu_acc = 0.0 if model.freeze_nu_rate else 1.0
    omega_dd = etadd @ model.basis(x) + nu_acc * (c * thd**2 + sn * thdd) * model.nu0(x)
    omega4 = s.eta @ model.basis(x, 4) - c * model.nu0(x, 4)
    r = bp.rhoA * x * thdd + bp.rhoA * omega_dd + bp.EI * omega4
    field_norm = math.sqrt(float(np.sum(w * r * r)))

    L = bp.L
    omega_dd_L = float(etadd @ model.PhiL) + nu_acc * (c * thd**2 + sn * thdd) * float(model.nu0(L))
    omega3_L = float(s.eta @ model.basis(L, 3)[:, 0]) - c * float(model.nu0(L, 3))
    tip = bp.M * L * thdd + bp.M * omega_dd_L - bp.EI * omega3_L + bp.M * bp.g * c
    return PDEResidual(float(hub), field_norm, float(tip))


def static_equilibrium(model: DynamicsModel, theta: float) -> tuple[SimState, float]:
    """Modal coordinates and holding torque for a link at rest at ``theta``."""
    n = model.n_modes
    zeros = np.zeros(n + 1)
    q = np.concatenate([[theta], np.zeros(n)])
    # dU/d eta is affine in eta: solve K_eff eta = -b0
    h0 = model.generalized_force(q, zeros, 0.0)[1:]
    Kmat = np.empty((n, n))
    for j in range(n):
        qj = q.copy()
        qj[1 + j] = 1.0
        Kmat[:, j] = h0 - model.generalized_force(qj, zeros, 0.0)[1:]
    eta = np.linalg.solve(Kmat, h0)
    q[1:] = eta
    tau = -model.generalized_force(q, zeros, 0.0)[0]
    return SimState(0.0, float(theta), 0.0, eta, np.zeros(n)), float(tau)
