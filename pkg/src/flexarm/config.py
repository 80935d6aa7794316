"""Experiment configuration: YAML file, defaults, validation and a stable content hash."""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .beam import BeamParams
from .control import Controller, PDEGains, PIDGains
from .errors import ValidationError
from .sac import SACConfig

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "beam": {"L": 4.5, "rho": 7850.0, "A": 6.84e-4, "E": 200e9, "I": 3.71e-7, "M": 20.0,
             "m": None, "I_m": None, "g": 9.81},
    "model": {"n_modes": 3, "freeze_nu_rate": False, "damping_ratios": None},
    "controller": {
        "kind": "pde",
        "tau_max": 50e3,
        "pid": {"Kp": 150000.0, "Ki": 100000.0, "Kd": 20000.0, "integral_limit": 1.0},
        "pde": {"Kp": 12000.0, "Kd": 15000.0, "alpha": 0.5},
    },
    "planner": {"kind": "cpt", "checkpoint": None},
    # (target deg, move duration s, dwell s) after starting at start_deg
    "schedule": {"start_deg": 0.0, "moves": [[60.0, 10.0, 5.0], [20.0, 10.0, 5.0]]},
    "sac": {f.name: f.default for f in fields(SACConfig)},
    "evaluation": {"pairs": 20, "seed": 20240, "cpt_duration": 10.0},
    "uncertainty": {"parameters": ["E", "I", "m", "L", "M"], "levels_pct": [-40, -20, 0, 20, 40]},
    "lyapunov": {"start_deg": 0.0, "targets_deg": [15.0, 30.0, 60.0], "duration": 5.0, "slack": 0.01},
    "output": {"dir": "out", "svg": False},
}
DEFAULTS["sac"]["hidden"] = list(DEFAULTS["sac"]["hidden"])
# the planner simulates with model.n_modes and draws from the top-level seed
del DEFAULTS["sac"]["n_modes"], DEFAULTS["sac"]["seed"]


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and base[k] and k not in ("sac",):
            if not isinstance(v, dict):
                raise ValidationError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        elif k == "sac":
            if not isinstance(v, dict):
                raise ValidationError("config key 'sac' must be a mapping")
            unknown = set(v) - set(base[k])
            if unknown:
                raise ValidationError(f"unknown config keys under 'sac': {sorted(unknown)}")
            out[k].update(v)
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved experiment settings."""

    data: dict
    source: Path | None = None

    @classmethod
    def from_dict(cls, d: dict | None = None, source=None) -> "ExperimentConfig":
        merged = _merge(DEFAULTS, d or {})
        if merged["schema_version"] != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {merged['schema_version']}, expected {SCHEMA_VERSION}")
        cfg = cls(merged, Path(source) if source else None)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ValidationError(f"config {path} must be a mapping at top level")
        return cls.from_dict(raw or {}, path)

    def with_overrides(self, **top) -> "ExperimentConfig":
        d = copy.deepcopy(self.data)
        for k, v in top.items():
            section, _, key = k.partition("__")
            if key:
                d[section][key] = v
            else:
                d[section] = v
        return ExperimentConfig.from_dict(d, self.source)

    # -- derived objects ---------------------------------------------------
    def validate(self) -> None:
        self.beam_params()
        self.sac_config()
        self.controller()
        d = self.data
        if not isinstance(d["seed"], int) or d["seed"] < 0:
            raise ValidationError("seed must be a non-negative integer")
        n = d["model"]["n_modes"]
        if not isinstance(n, int) or n < 1:
            raise ValidationError(f"model.n_modes must be a positive integer, got {n!r}")
        if d["planner"]["kind"] not in ("cpt", "drl"):
            raise ValidationError("planner.kind must be 'cpt' or 'drl'")
        ckpt = d["planner"]["checkpoint"]
        if ckpt is not None and not self.resolve(ckpt).exists():
            raise ValidationError(f"planner.checkpoint {ckpt} does not exist")
        for mv in d["schedule"]["moves"]:
            if len(mv) != 3:
                raise ValidationError(f"schedule moves are (target_deg, duration_s, dwell_s), got {mv}")
            if not (mv[1] > 0 and mv[2] >= 0):
                raise ValidationError(f"move duration must be > 0 and dwell >= 0, got {mv}")
        for p in d["uncertainty"]["parameters"]:
            if p not in ("E", "I", "m", "L", "M", "rho", "A", "I_m"):
                raise ValidationError(f"uncertainty parameter {p!r} is not a beam parameter")
        for lvl in d["uncertainty"]["levels_pct"]:
            if not -40 <= lvl <= 40:
                raise ValidationError(f"uncertainty level {lvl}% is outside [-40, 40]")
        ev = d["evaluation"]
        if ev["pairs"] < 1 or not ev["cpt_duration"] > 0:
            raise ValidationError("evaluation.pairs must be >= 1 and cpt_duration > 0")
        ly = d["lyapunov"]
        if not (ly["duration"] > 0 and ly["slack"] >= 0):
            raise ValidationError("lyapunov.duration must be > 0 and slack >= 0")

    def beam_params(self) -> BeamParams:
        return BeamParams(**self.data["beam"])

    def sac_config(self) -> SACConfig:
        d = dict(self.data["sac"])
        d["hidden"] = tuple(d["hidden"])
        d["n_modes"] = self.data["model"]["n_modes"]
        d["seed"] = self.data["seed"]
        return SACConfig(**d)

    def pid_gains(self) -> PIDGains:
        g = self.data["controller"]["pid"]
        return PIDGains(g["Kp"], g["Ki"], g["Kd"])

    def pde_gains(self) -> PDEGains:
        g = self.data["controller"]["pde"]
        return PDEGains(g["Kp"], g["Kd"], g["alpha"])

    def controller(self, kind: str | None = None, model_params: BeamParams | None = None) -> Controller:
        c = self.data["controller"]
        kind = kind or c["kind"]
        gains = self.pid_gains() if kind == "pid" else self.pde_gains() if kind == "pde" else None
        if gains is None:
            raise ValidationError(f"controller.kind must be 'pid' or 'pde', got {kind!r}")
        return Controller(kind, gains, model_params or self.beam_params(), tau_max=c["tau_max"],
                          integral_limit=c["pid"]["integral_limit"])

    def resolve(self, p) -> Path:
        p = Path(p)
        if not p.is_absolute() and self.source is not None:
            cand = self.source.parent / p
            if cand.exists():
                return cand
        return p

    # -- provenance --------------------------------------------------------
    def canonical_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"), default=_json_default)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def dump(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=False)


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")
