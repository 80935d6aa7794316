"""PID baseline and the nonlinear boundary-feedback (PDE) tracking controller.

The PDE law is ``tau = Kp e + Kd e_dot - H`` with
``H = EI omega''(0) - m g L cos(theta) / 2 + M g omega(L) sin(theta) - I_m theta_ddot_d``,
which cancels the hub equation exactly and leaves ``I_m e'' + Kd e' + Kp e = 0``.
Its quadratic Lyapunov function ``V = Kp e^2/2 + I_m e_dot^2/2 + alpha I_m e e_dot``
decays at a certified rate once the gains satisfy ``alpha I_m < Kp``, ``alpha < 1``
and ``alpha I_m < Kd``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as kn
from .beam import BeamParams
from .errors import CertificationError, ValidationError

DEFAULT_TAU_MAX = 50e3
PID_INTEGRAL_LIMIT = 1.0


@dataclass(frozen=True)
class PIDGains:
    Kp: float = 150000.0
    Ki: float = 100000.0
    Kd: float = 20000.0

    def __post_init__(self):
        vals = (self.Kp, self.Ki, self.Kd)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValidationError(f"PID gains must be finite and non-negative, got {vals}")
        if all(v == 0 for v in vals):
            raise ValidationError("PID gains cannot all be zero")


@dataclass(frozen=True)
class PDEGains:
    Kp: float = 12000.0
    Kd: float = 15000.0
    alpha: float = 0.5

    def __post_init__(self):
        vals = (self.Kp, self.Kd, self.alpha)
        if any(not math.isfinite(v) or v <= 0 for v in vals):
            raise ValidationError(f"PDE gains must be finite and positive, got {vals}")


@dataclass(frozen=True)
class CertifiedRate:
    lambda1: float
    lambda2: float
    lambda3: float
    lam: float


def pid_torque(g: PIDGains, e: float, e_int: float, e_dot: float) -> float:
    return g.Kp * e + g.Ki * e_int + g.Kd * e_dot


def h_term(bp: BeamParams, theta: float, omega_L: float, curvature0: float, theta_ddot_d: float) -> float:
    """Model-based compensation ``H`` built from the controller's parameter set ``bp``."""
    return (
        bp.EI * curvature0
        - 0.5 * bp.m * bp.g * bp.L * math.cos(theta)
        + bp.M * bp.g * omega_L * math.sin(theta)
        - bp.I_m * theta_ddot_d
    )


def pde_torque(
    g: PDEGains,
    bp: BeamParams,
    e: float,
    e_dot: float,
    theta: float,
    omega_L: float,
    curvature0: float,
    theta_ddot_d: float,
) -> float:
    return g.Kp * e + g.Kd * e_dot - h_term(bp, theta, omega_L, curvature0, theta_ddot_d)


def certify_gains(g: PDEGains, I_m: float, margin: float = 0.99) -> CertifiedRate:
    """Check the positivity and decay conditions and return the certified rates.

    ``lambda1 = 2 alpha`` (from ``alpha Kp = lambda1 Kp / 2``),
    ``lambda2 = 2 (Kd - alpha I_m) / I_m``, ``lambda3 = Kd / I_m`` and
    ``lambda = margin * min(...)`` keeps the required strict inequality.
    """
    if not I_m > 0:
        raise ValidationError(f"I_m must be positive, got {I_m}")
    if not g.alpha * I_m < g.Kp:
        raise CertificationError(f"Lemma 1 violated: alpha*I_m = {g.alpha * I_m:.6g} >= Kp = {g.Kp:.6g}")
    if not g.alpha < 1:
        raise CertificationError(f"Lemma 1 violated: alpha = {g.alpha} >= 1")
    if not g.alpha * I_m < g.Kd:
        raise CertificationError(f"Lemma 2 violated: alpha*I_m = {g.alpha * I_m:.6g} >= Kd = {g.Kd:.6g}")
    if not 0 < margin < 1:
        raise ValidationError("margin must lie in (0, 1)")
    l1 = 2.0 * g.alpha
    l2 = 2.0 * (g.Kd - g.alpha * I_m) / I_m
    l3 = g.Kd / I_m
    return CertifiedRate(l1, l2, l3, margin * min(l1, l2, l3))


def lyapunov_value(g: PDEGains, I_m: float, e, e_dot):
    e = np.asarray(e, dtype=float)
    e_dot = np.asarray(e_dot, dtype=float)
    V = 0.5 * g.Kp * e**2 + 0.5 * I_m * e_dot**2 + g.alpha * I_m * e * e_dot
    return float(V) if V.ndim == 0 else V


def lyapunov_matrix(g: PDEGains, I_m: float) -> np.ndarray:
    """Symmetric matrix ``P`` with ``V = [e, e_dot] P [e, e_dot]^T``."""
    c = 0.5 * g.alpha * I_m
    return np.array([[0.5 * g.Kp, c], [c, 0.5 * I_m]])


# --------------------------------------------------------------------------- kernel glue


@dataclass(frozen=True)
class Controller:
    """Controller choice plus the parameter set it believes in.

    ``model_params`` may differ from the simulated plant (robustness studies).
    ``feedforward`` toggles the ``I_m theta_ddot_d`` term.
    """

    kind: str
    gains: PIDGains | PDEGains
    model_params: BeamParams
    feedforward: bool = True
    tau_max: float = DEFAULT_TAU_MAX
    integral_limit: float = PID_INTEGRAL_LIMIT

    def __post_init__(self):
        if self.kind not in ("pid", "pde"):
            raise ValidationError(f"controller kind must be 'pid' or 'pde', got {self.kind!r}")
        want = PIDGains if self.kind == "pid" else PDEGains
        if not isinstance(self.gains, want):
            raise ValidationError(f"{self.kind} controller needs {want.__name__}")
        if not self.tau_max > 0:
            raise ValidationError("tau_max must be positive")

    @property
    def kernel_kind(self) -> int:
        return kn.CTRL_PID if self.kind == "pid" else kn.CTRL_PDE

    def kernel_params(self) -> np.ndarray:
        P = np.zeros(kn.C_SIZE)
        g = self.gains
        bp = self.model_params
        P[kn.C_KP] = g.Kp
        P[kn.C_KD] = g.Kd
        if isinstance(g, PIDGains):
            P[kn.C_KI] = g.Ki
        else:
            P[kn.C_ALPHA] = g.alpha
        P[kn.C_EI] = bp.EI
        P[kn.C_MLINK] = bp.m
        P[kn.C_L] = bp.L
        P[kn.C_MTIP] = bp.M
        P[kn.C_IM] = bp.I_m
        P[kn.C_G] = bp.g
        P[kn.C_FF] = 1.0 if self.feedforward else 0.0
        P[kn.C_TAUMAX] = self.tau_max
        P[kn.C_IMAX] = self.integral_limit
        return P

    def certify(self) -> CertifiedRate | None:
        if self.kind == "pde":
            return certify_gains(self.gains, self.model_params.I_m)
        return None
