"""Controller configuration and its TOML file format.

A controller file looks like::

    format = "fastslow-controller v1"

    [controller]
    dt = 0.1
    horizon = 30

    [weights]
    contour = 200.0

Every key is optional; omitted keys keep the defaults below.  Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

CONTROLLER_FORMAT = "fastslow-controller v1"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CostWeights:
    lag: float = 50.0
    contour: float = 200.0
    heading: float = 200.0
    speed: float = 2.0
    turn: float = 2.0
    v_cmd: float = 1.0
    omega_cmd: float = 1.0
    v_ref: float = 50.0
    rate_v_cmd: float = 10.0
    rate_omega_cmd: float = 15.0
    rate_v_ref: float = 5.0


@dataclass(frozen=True)
class ChanceConstraintConfig:
    e_c_max: float = 2.0
    r_c: float = 1.0
    r_v_cmd: float = 1.0
    r_omega_cmd: float = 1.0
    v_cmd_min: float = -1.0
    v_cmd_max: float = 3.0
    omega_cmd_min: float = -2.0
    omega_cmd_max: float = 2.0
    v_ref_min: float = 0.0
    v_ref_max: float = 3.5


@dataclass(frozen=True)
class LearningConfig:
    n0: float = 100.0
    recent_samples: int = 30
    upcoming_margin: int = 1
    outlier_z: float = 2.0
    outlier_alpha: float = 0.05
    likelihood: str = "student_t"


@dataclass(frozen=True)
class PriorConfig:
    tau_v: float = 0.5
    tau_omega: float = 0.5
    sigma2_v: float = 0.25
    sigma2_omega: float = 0.25
    a0: float = 2.0
    v0_scale: float = 1.0


@dataclass(frozen=True)
class ControllerConfig:
    dt: float = 0.1
    horizon: int = 30
    sqp_passes: int = 3
    k_v: float = -5.0
    k_theta: float = -5.0
    closed_loop_covariance: bool = True
    trust_speed: float = 0.5
    trust_turn: float = 0.5
    slack_linear: float = 1e4
    slack_quadratic: float = 1e4
    weights: CostWeights = field(default_factory=CostWeights)
    constraints: ChanceConstraintConfig = field(default_factory=ChanceConstraintConfig)
    learning: LearningConfig = field(default_factory=LearningConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "ControllerConfig":
        return dataclasses.replace(self, **changes)


def _nonneg_fields(obj):
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            yield f.name, float(v)


def validate(cfg: ControllerConfig) -> None:
    if not (cfg.dt > 0 and math.isfinite(cfg.dt)):
        raise ConfigError("dt must be positive")
    if cfg.horizon < 1 or cfg.sqp_passes < 1:
        raise ConfigError("horizon and sqp_passes must be >= 1")
    for name, v in _nonneg_fields(cfg.weights):
        if not (v >= 0 and math.isfinite(v)):
            raise ConfigError(f"weight {name} must be finite and >= 0")
    c = cfg.constraints
    for name, v in _nonneg_fields(c):
        if not math.isfinite(v):
            raise ConfigError(f"constraint {name} must be finite")
    if min(c.r_c, c.r_v_cmd, c.r_omega_cmd) < 0 or c.e_c_max <= 0:
        raise ConfigError("quantiles must be >= 0 and e_c_max > 0")
    if not (c.v_cmd_min < c.v_cmd_max and c.omega_cmd_min < c.omega_cmd_max
            and c.v_ref_min < c.v_ref_max):
        raise ConfigError("input bounds must satisfy min < max")
    ln = cfg.learning
    if ln.n0 <= 0 or ln.recent_samples < 1 or ln.upcoming_margin < 0:
        raise ConfigError("n0 > 0, recent_samples >= 1 and upcoming_margin >= 0 required")
    if not 0 < ln.outlier_alpha < 1 or ln.outlier_z <= 0:
        raise ConfigError("outlier_alpha in (0, 1) and outlier_z > 0 required")
    if ln.likelihood not in ("student_t", "gaussian"):
        raise ConfigError("likelihood must be 'student_t' or 'gaussian'")
    p = cfg.prior
    if min(p.tau_v, p.tau_omega, p.sigma2_v, p.sigma2_omega, p.a0, p.v0_scale) <= 0:
        raise ConfigError("prior parameters must be positive")
    if min(cfg.trust_speed, cfg.trust_turn) <= 0 or min(cfg.slack_linear, cfg.slack_quadratic) < 0:
        raise ConfigError("trust region must be positive and slack penalties >= 0")


_SECTIONS = {
    "weights": CostWeights,
    "constraints": ChanceConstraintConfig,
    "learning": LearningConfig,
    "prior": PriorConfig,
}


def _build(cls, table: dict, where: str):
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in names or key in _SECTIONS:
            raise ConfigError(f"unknown key '{key}' in [{where}]")
        default = getattr(cls(), key) if cls is not ControllerConfig else \
            names[key].default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"[{where}] {key} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"[{where}] {key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"[{where}] {key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"[{where}] {key} must be a string")
        kwargs[key] = value
    return kwargs


def config_from_dict(data: dict) -> ControllerConfig:
    data = dict(data)
    fmt = data.pop("format", CONTROLLER_FORMAT)
    if fmt != CONTROLLER_FORMAT:
        raise ConfigError(f"unsupported controller format '{fmt}'")
    top = data.pop("controller", {})
    if not isinstance(top, dict):
        raise ConfigError("[controller] must be a table")
    kwargs = _build(ControllerConfig, top, "controller")
    for name, cls in _SECTIONS.items():
        table = data.pop(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        kwargs[name] = cls(**_build(cls, table, name))
    if data:
        raise ConfigError(f"unknown sections: {sorted(data)}")
    try:
        return ControllerConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ControllerConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def config_to_toml(cfg: ControllerConfig) -> str:
    lines = [f'format = "{CONTROLLER_FORMAT}"', "", "[controller]"]

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, float):
            return repr(v)
        return str(v)

    for f in dataclasses.fields(cfg):
        if f.name not in _SECTIONS:
            lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    for name in _SECTIONS:
        lines += ["", f"[{name}]"]
        sub = getattr(cfg, name)
        for f in dataclasses.fields(sub):
            lines.append(f"{f.name} = {fmt(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ControllerConfig, path) -> None:
    Path(path).write_text(config_to_toml(cfg), encoding="utf-8")
