"""Cubic point-to-point references and chained schedules with dwell times."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class CubicSegment:
    t0: float
    tf: float
    theta0: float
    thetaT: float
    a0: float
    a1: float
    a2: float
    a3: float

    def sample(self, t):
        """``(theta_d, theta_d_dot, theta_d_ddot)``; clamped to the end points outside ``[t0, tf]``."""
        t = np.asarray(t, dtype=float)
        tau = np.clip(t - self.t0, 0.0, self.tf - self.t0)
        inside = (t >= self.t0) & (t <= self.tf)
        th = self.a0 + tau * (self.a1 + tau * (self.a2 + tau * self.a3))
        thd = np.where(inside, self.a1 + tau * (2.0 * self.a2 + 3.0 * self.a3 * tau), 0.0)
        thdd = np.where(inside, 2.0 * self.a2 + 6.0 * self.a3 * tau, 0.0)
        if th.ndim == 0:
            return float(th), float(thd), float(thdd)
        return th, thd, thdd


def cpt(theta0: float, thetaT: float, duration: float, t0: float = 0.0) -> CubicSegment:
    """Zero-end-velocity cubic from ``theta0`` to ``thetaT`` over ``duration`` seconds."""
    if not (math.isfinite(duration) and duration > 0):
        raise ValidationError(f"duration must be positive, got {duration}")
    d = thetaT - theta0
    T = float(duration)
    return CubicSegment(t0, t0 + T, theta0, thetaT, theta0, 0.0, 3.0 * d / T**2, -2.0 * d / T**3)


@dataclass(frozen=True)
class Schedule:
    """Piecewise reference made of cubic moves separated by holds."""

    segments: tuple[CubicSegment, ...]
    theta_start: float
    t_end: float

    @classmethod
    def from_waypoints(cls, theta_start: float, moves, t0: float = 0.0) -> "Schedule":
        """Build from ``[(target, duration, dwell), ...]`` (angles in rad, times in s)."""
        segs = []
        t = t0
        th = theta_start
        for target, duration, dwell in moves:
            if dwell < 0:
                raise ValidationError(f"dwell must be non-negative, got {dwell}")
            seg = cpt(th, target, duration, t)
            segs.append(seg)
            t = seg.tf + dwell
            th = target
        return cls(tuple(segs), theta_start, t)

    @property
    def duration(self) -> float:
        return self.t_end - (self.segments[0].t0 if self.segments else self.t_end)

    def sample(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        th = np.full_like(t, self.theta_start)
        thd = np.zeros_like(t)
        thdd = np.zeros_like(t)
        for seg in self.segments:
            a, b, c = seg.sample(t)
            after = t >= seg.t0
            th = np.where(after, a, th)
            thd = np.where(after, b, thd)
            thdd = np.where(after, c, thdd)
        return th, thd, thdd


def sample(traj, t):
    """Reference angle, rate and acceleration of a segment or schedule at time(s) ``t``."""
    return traj.sample(t)


def reference_table(traj, n_ticks: int, dt: float, t0: float = 0.0) -> np.ndarray:
    """Tick-sampled ``(n_ticks, 3)`` array for the control kernels."""
    t = t0 + dt * np.arange(n_ticks)
    th, thd, thdd = traj.sample(t)
    return np.ascontiguousarray(np.column_stack([th, thd, thdd]))
