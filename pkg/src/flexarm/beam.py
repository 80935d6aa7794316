"""Beam parameters, the gravity-sag boundary transform and the clamped/tip-mass modal basis.

The elastic deflection ``omega(x, t)`` of the link is split as ``omega = z - nu``
where ``nu(x; theta)`` absorbs the non-homogeneous tip boundary condition caused
by the payload weight, and ``z`` is expanded in the modes of the homogeneous
problem::

    z(0) = z'(0) = z''(L) = 0,      z''''(L) + p z'''(L) = 0,      p = rhoA / M.

Mode shapes use the clamped-root family
``Phi(x) = C2 (cos bx - cosh bx) + C4 (sin bx - sinh bx)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from .errors import NumericalIntegrationError, SingularConfigurationError, SolverError, ValidationError

GAUSS_NODES = 64


@dataclass(frozen=True)
class BeamParams:
    """Physical constants of the link, payload and hub (SI units).

    ``m`` defaults to ``rho * A * L`` and ``I_m`` to ``rho * A * L**3 / 3``.
    """

    L: float = 4.5
    rho: float = 7850.0
    A: float = 6.84e-4
    E: float = 200e9
    I: float = 3.71e-7
    M: float = 20.0
    m: float | None = None
    I_m: float | None = None
    g: float = 9.81

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not np.isfinite(v) or v <= 0:
                raise ValidationError(f"BeamParams.{f.name} must be positive and finite, got {v!r}")
        if self.m is None:
            object.__setattr__(self, "m", self.rho * self.A * self.L)
        if self.I_m is None:
            object.__setattr__(self, "I_m", self.rho * self.A * self.L**3 / 3.0)

    @property
    def EI(self) -> float:
        return self.E * self.I

    @property
    def rhoA(self) -> float:
        return self.rho * self.A

    @property
    def p(self) -> float:
        return self.rhoA / self.M

    def scaled(self, **factors: float) -> "BeamParams":
        """Copy with selected fields multiplied by the given factors."""
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        for name, k in factors.items():
            if name not in values:
                raise ValidationError(f"unknown BeamParams field {name!r}")
            values[name] = values[name] * k
        return BeamParams(**values)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class DerivedParams(NamedTuple):
    p: float
    EI: float
    rhoA: float


def derived_params(bp: BeamParams) -> DerivedParams:
    return DerivedParams(p=bp.p, EI=bp.EI, rhoA=bp.rhoA)


# --------------------------------------------------------------------------- transform


def _gamma_denominator(q: float) -> tuple[float, float]:
    """Denominator of Gamma1 in terms of q = pL, and the magnitude of its terms."""
    e = math.exp(-q)
    den = (3.0 * q * q - 6.0) * e + 6.0 - 6.0 * q
    scale = abs(3.0 * q * q - 6.0) * e + 6.0 + 6.0 * q
    return den, scale


def gamma_coefficients(p: float, L: float) -> tuple[float, float]:
    """Return ``(Gamma1, Gamma2)`` of the sag profile.

    ``Gamma2 = Gamma1 exp(-pL) / (2 p^2) - L / (2 p)`` so that ``nu''(L) = 0``.
    Raises :class:`SingularConfigurationError` when the Gamma1 denominator is lost
    to cancellation (``pL -> 0``).
    """
    if not (p > 0 and L > 0):
        raise ValidationError(f"p and L must be positive, got p={p!r}, L={L!r}")
    q = p * L
    den, scale = _gamma_denominator(q)
    if abs(den) < 1e-12 * scale:
        raise SingularConfigurationError(
            f"Gamma1 denominator vanishes for pL={q:.3e} (|den|={abs(den):.3e}, term scale={scale:.3e})"
        )
    gamma1 = 2.0 * q**3 / den
    gamma2 = gamma1 * math.exp(-q) / (2.0 * p * p) - L / (2.0 * p)
    return gamma1, gamma2


@dataclass(frozen=True)
class NuProfile:
    """Boundary-homogenizing profile ``nu(x; theta) = -f * s(x)``.

    ``s`` is the unit shape with ``s'''' + p s''' = 1``; ``f = rhoA g cos(theta) / EI``.
    """

    gamma1: float
    gamma2: float
    p: float
    L: float
    f: float

    def shape(self, x, deriv: int = 0):
        """Unit shape ``s(x)`` or one of its first four derivatives."""
        x = np.asarray(x, dtype=float)
        p, g1, g2 = self.p, self.gamma1, self.gamma2
        em1 = np.expm1(-p * x)
        if deriv == 0:
            return -g1 / p**4 * (em1 + p * x) + x**3 / (6.0 * p) + g2 * x**2
        if deriv == 1:
            return g1 / p**3 * em1 + x**2 / (2.0 * p) + 2.0 * g2 * x
        if deriv == 2:
            return -g1 / p**2 * np.exp(-p * x) + x / p + 2.0 * g2
        if deriv == 3:
            return g1 / p * np.exp(-p * x) + 1.0 / p
        if deriv == 4:
            return -g1 * np.exp(-p * x)
        raise ValidationError(f"derivative order must be 0..4, got {deriv}")

    def __call__(self, x, deriv: int = 0):
        return -self.f * self.shape(x, deriv)

    def residuals(self) -> np.ndarray:
        """Boundary residuals ``[nu(0), nu'(0), nu''(L), nu''''(L) + p nu'''(L) + f]``."""
        L = self.L
        return np.array(
            [
                self(0.0),
                self(0.0, 1),
                self(L, 2),
                self(L, 4) + self.p * self(L, 3) + self.f,
            ]
        )


def nu_profile(bp: BeamParams, theta: float) -> NuProfile:
    g1, g2 = gamma_coefficients(bp.p, bp.L)
    f = bp.rhoA * bp.g / bp.EI * math.cos(theta)
    return NuProfile(gamma1=g1, gamma2=g2, p=bp.p, L=bp.L, f=f)


# --------------------------------------------------------------------------- frequency equation


def boundary_matrix(beta: float, p: float, L: float) -> np.ndarray:
    """2x2 matrix of the remaining boundary conditions acting on ``(C2, C4) * beta^2``."""
    bl = beta * L
    c, s, ch, sh = math.cos(bl), math.sin(bl), math.cosh(bl), math.sinh(bl)
    return np.array(
        [
            [-c - ch, -s - sh],
            [beta**2 * (c - ch) + p * beta * (s - sh), beta**2 * (s - sh) - p * beta * (c + ch)],
        ]
    )


def frequency_function(beta: float, p: float, L: float) -> float:
    """Boundary determinant normalized by its row norms; lies in [-1, 1].

    The determinant is expanded in closed form,
    ``2 b^2 (cos bL sinh bL - sin bL cosh bL) + 2 p b (1 + cos bL cosh bL)``,
    which avoids the cancellation of the naive 2x2 product at large ``bL``.
    """
    bl = beta * L
    c, s, ch, sh = math.cos(bl), math.sin(bl), math.cosh(bl), math.sinh(bl)
    det = 2.0 * beta**2 * (c * sh - s * ch) + 2.0 * p * beta * (1.0 + c * ch)
    r1 = math.hypot(c + ch, s + sh)
    r2 = math.hypot(beta**2 * (c - ch) + p * beta * (s - sh), beta**2 * (s - sh) - p * beta * (c + ch))
    return det / (r1 * r2)


def _bisect(fun, a: float, b: float, fa: float, tol: float) -> float:
    while b - a > tol:
        mid = 0.5 * (a + b)
        fm = fun(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == (fa > 0):
            a, fa = mid, fm
        else:
            b = mid
    return 0.5 * (a + b)


def solve_eigenfrequencies(
    bp: BeamParams,
    n: int,
    *,
    p: float | None = None,
    step: float | None = None,
    tol: float = 1e-12,
) -> np.ndarray:
    """The ``n`` smallest positive roots of the frequency equation (1/m), ascending.

    Uniform scan with step ``0.05/L`` over ``(0, 12/L]``, extended in further
    ``12/L`` windows until ``n`` sign changes are found, then bisection to ``tol``.
    ``p`` overrides ``rhoA/M`` (used for limit studies).
    """
    n = int(n)
    if n < 1:
        raise ValidationError(f"number of modes must be >= 1, got {n}")
    L = bp.L
    p = bp.p if p is None else float(p)
    if not p > 0:
        raise ValidationError(f"p must be positive, got {p}")
    step = 0.05 / L if step is None else step
    fun = lambda b: frequency_function(b, p, L)  # noqa: E731

    roots: list[float] = []
    lo = 1e-6 / L
    f_lo = fun(lo)
    window_end = 12.0 / L
    hard_limit = 12.0 / L * max(4, n)
    while len(roots) < n:
        hi = min(lo + step, window_end)
        f_hi = fun(hi)
        if f_lo == 0.0:
            roots.append(lo)
        elif (f_lo > 0) != (f_hi > 0):
            roots.append(_bisect(fun, lo, hi, f_lo, tol))
        lo, f_lo = hi, f_hi
        if lo >= window_end and len(roots) < n:
            if window_end >= hard_limit:
                raise SolverError(
                    f"found {len(roots)} of {n} roots scanning beta in (0, {window_end:.6g}] 1/m "
                    f"(beta*L up to {window_end * L:.3f}) with step {step:.3g}"
                )
            window_end += 12.0 / L
    beta = np.array(roots[:n])
    if np.any(np.diff(beta) <= 0.1 / L):
        raise SolverError(f"roots not separated by more than 0.1/L: {beta}")
    return beta


# --------------------------------------------------------------------------- modal basis


def gauss_legendre(L: float, n: int = GAUSS_NODES) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of an ``n``-point Gauss-Legendre rule on ``[0, L]``."""
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * L * (t + 1.0), 0.5 * L * w


def _shape_ratio(beta: float, L: float) -> tuple[float, float]:
    """``r = C4/C2`` from ``z''(L) = 0`` and ``1 + r`` computed without cancellation."""
    bl = beta * L
    c, s = math.cos(bl), math.sin(bl)
    ch, sh = math.cosh(bl), math.sinh(bl)
    r = -(c + ch) / (s + sh)
    one_plus_r = (s - c - math.exp(-bl)) / (s + sh)
    return r, one_plus_r


@dataclass(frozen=True)
class ModalBasis:
    """Mode shapes ``Phi_i(x) = C2_i [(cos + r sin)(b x) - (cosh + r sinh)(b x)]``.

    ``normalization`` is ``"mass"`` (default) for
    ``int Phi_i Phi_j dx + Phi_i(L) Phi_j(L) / p = delta_ij``, the inner product in
    which tip-mass modes are orthogonal, or ``"l2"`` for ``int Phi_i^2 dx = 1``.
    """

    L: float
    p: float
    beta: np.ndarray
    ratio: np.ndarray
    one_plus_ratio: np.ndarray
    scale: np.ndarray
    normalization: str = "mass"
    _quad: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_modes(self) -> int:
        return len(self.beta)

    @property
    def coeffs(self) -> np.ndarray:
        """``(C2_i, C4_i)`` pairs, shape ``(n, 2)``."""
        return np.column_stack([self.scale, self.scale * self.ratio])

    def __call__(self, x, deriv: int = 0) -> np.ndarray:
        """Evaluate all modes (or a derivative up to order 4). Shape ``(n, len(x))``."""
        if deriv not in (0, 1, 2, 3, 4):
            raise ValidationError(f"derivative order must be 0..4, got {deriv}")
        x = np.atleast_1d(np.asarray(x, dtype=float))
        b = self.beta[:, None]
        r = self.ratio[:, None]
        opr = self.one_plus_ratio[:, None]
        bx = b * x[None, :]
        c, s = np.cos(bx), np.sin(bx)
        # cosh + r sinh = ((1+r) e^bx + (1-r) e^-bx) / 2, with 1+r ~ e^(-2bL) kept exact
        ep, em = np.exp(bx), np.exp(-bx)
        hyp_even = 0.5 * (opr * ep + (1.0 - r) * em)
        hyp_odd = 0.5 * (opr * ep - (1.0 - r) * em)
        trig = [c + r * s, -s + r * c, -c - r * s, s - r * c, c + r * s][deriv]
        hyp = hyp_even if deriv % 2 == 0 else hyp_odd
        return self.scale[:, None] * b**deriv * (trig - hyp)

    def quadrature(self):
        if self._quad is None:
            object.__setattr__(self, "_quad", gauss_legendre(self.L))
        return self._quad

    def gram(self, nodes: int = GAUSS_NODES, inner: str | None = None) -> np.ndarray:
        """Gram matrix of the modes under ``inner`` (defaults to the normalization)."""
        inner = inner or self.normalization
        x, w = gauss_legendre(self.L, nodes)
        phi = self(x)
        G = (phi * w) @ phi.T
        if inner == "mass":
            tip = self(self.L)[:, 0]
            G = G + np.outer(tip, tip) / self.p
        return G

    def boundary_residuals(self) -> np.ndarray:
        """Per-mode ``[z(0), z'(0), z''(L), z''''(L) + p z'''(L)]`` relative to ``max|Phi''|``."""
        L = self.L
        x, _ = self.quadrature()
        curv_scale = np.max(np.abs(self(np.concatenate([[0.0], x, [L]]), 2)), axis=1)
        res = np.column_stack(
            [
                self(0.0)[:, 0],
                self(0.0, 1)[:, 0] / self.beta,
                self(L, 2)[:, 0] / self.beta**2,
                (self(L, 4)[:, 0] + self.p * self(L, 3)[:, 0]) / self.beta**4,
            ]
        )
        return res * (self.beta**2 / curv_scale)[:, None]


def build_modal_basis(bp: BeamParams, beta, *, normalization: str = "mass", p: float | None = None) -> ModalBasis:
    """Construct normalized mode shapes for the given spatial eigenvalues."""
    if normalization not in ("mass", "l2"):
        raise ValidationError(f"normalization must be 'mass' or 'l2', got {normalization!r}")
    beta = np.asarray(beta, dtype=float)
    if beta.ndim != 1 or len(beta) == 0 or np.any(beta <= 0):
        raise ValidationError("beta must be a non-empty vector of positive values")
    p = bp.p if p is None else float(p)
    pairs = [_shape_ratio(b, bp.L) for b in beta]
    ratio = np.array([r for r, _ in pairs])
    opr = np.array([o for _, o in pairs])
    raw = ModalBasis(bp.L, p, beta, ratio, opr, np.ones_like(beta), normalization)
    norms = np.diag(raw.gram(inner=normalization))
    if np.any(~np.isfinite(norms)) or np.any(norms <= 0):
        raise NumericalIntegrationError(f"non-positive normalization integral: {norms}")
    return ModalBasis(bp.L, p, beta, ratio, opr, 1.0 / np.sqrt(norms), normalization)


def modal_basis(bp: BeamParams, n_modes: int = 3, *, normalization: str = "mass") -> ModalBasis:
    """Convenience: solve the frequency equation and build the basis."""
    return build_modal_basis(bp, solve_eigenfrequencies(bp, n_modes), normalization=normalization)
