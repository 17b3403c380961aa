"""Experiment configuration: dataclasses, TOML round-trip, validation and hashing.

A config file has one table per section (``plant``, ``expert``, ``data``,
``train``, ``models``, ``sweep``, ``output``).  Missing keys take the defaults
below; unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .train import Hyperparams
from .walker import ExpertGains, WalkerParams

PLANTS = ("walker", "reset_integrator")
CONTROLLERS = ("robust", "nonrobust", "energy", "zero")


class ConfigError(ValueError):
    pass


@dataclass
class PlantConfig:
    kind: str = "walker"
    m: float = 5.0
    m_h: float = 10.0
    a: float = 0.5
    b: float = 0.5
    slope: float = 0.0525
    gravity: float = 9.81
    # reset-integrator toy
    x_reset: float = 0.9
    shrink: float = 0.5
    delta_d: float = 0.005

    def walker_params(self, m_h: Optional[float] = None) -> WalkerParams:
        return WalkerParams(self.m, self.m_h if m_h is None else m_h, self.a, self.b, self.slope, self.gravity)


@dataclass
class ExpertConfig:
    k_energy: float = 2.0
    u_max_ankle: float = 10.0
    u_max_hip: float = 10.0
    e_ref: Optional[float] = None  # None: time-averaged energy of the passive limit cycle
    # reset-integrator toy expert
    x_target: float = 1.0
    gain: float = 0.5
    gain_y: float = 2.0

    def gains(self) -> ExpertGains:
        return ExpertGains(self.k_energy, self.u_max_ankle, self.u_max_hip)


@dataclass
class DataConfig:
    n_ic: int = 6  # walker: n_ic**2 uniform swing initial conditions
    ic_halfwidth: tuple = (0.1, 0.5)  # (rad, rad/s) around the limit-cycle swing state
    collect_delta: float = 0.25  # radius of the uniform flow noise while collecting
    max_steps: int = 2
    t_max: float = 20.0
    step: float = 1e-3
    sample_dt: float = 0.02  # consecutive samples must lie well within 2 eps_c of each other
    eps_c: float = 0.3
    eps_d: float = 0.3
    sigma: float = 0.3
    ring_n_target: int = 1000
    ring_resolution: float = 0.0  # > 0: grid ring (low-dimensional plants) instead of rejection sampling
    standoff: float = 0.1
    seed: int = 0
    # reset-integrator toy initial conditions
    ic_spacing: float = 0.05
    ic_x0: float = 0.1
    ic_cap_radius: float = 0.4


@dataclass
class SweepConfig:
    n_grid: int = 20
    ic_halfwidth: tuple = (0.1, 0.5)
    deltas: tuple = (0.0, 0.1, 0.2, 0.3, 0.4)
    masses: tuple = ()  # true hip masses; empty: nominal plant
    seeds: tuple = (0, 1, 2)
    max_steps: int = 20
    t_max: float = 20.0
    step: float = 1e-3
    controllers: tuple = CONTROLLERS


@dataclass
class OutputConfig:
    directory: str = "runs/default"


@dataclass
class ExperimentConfig:
    name: str = "noise"
    plant: PlantConfig = field(default_factory=PlantConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: Hyperparams = field(default_factory=Hyperparams)
    # trained barrier name -> Delta_c used in its flow constraint
    models: dict = field(default_factory=lambda: {"robust": 0.25, "nonrobust": 0.0})
    sweep: SweepConfig = field(default_factory=SweepConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ExperimentConfig":
        validate(self)
        return self

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def hash(self) -> str:
        return config_hash(self)

    def stage_hash(self, stage: str) -> str:
        """Hash of the sections a stage depends on (``collect``, ``train``, ``sweep``)."""
        d = self.to_dict()
        keep = {"collect": ("plant", "expert", "data"),
                "train": ("plant", "expert", "data", "train", "models"),
                "sweep": ("plant", "expert", "data", "train", "models", "sweep")}[stage]
        return _digest({k: d[k] for k in keep})


def _plain(o):
    if isinstance(o, dict):
        return {k: _plain(v) for k, v in o.items() if v is not None}
    if isinstance(o, (list, tuple)):
        return [_plain(v) for v in o]
    return o


def _digest(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def config_hash(cfg: ExperimentConfig) -> str:
    """Short content hash of everything except the output location."""
    d = cfg.to_dict()
    d.pop("output", None)
    return _digest(d)


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        default = getattr(cls(), k) if cls is not Hyperparams else getattr(Hyperparams(), k)
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{where}]: {e}") from e


def from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    sections = {"plant": PlantConfig, "expert": ExpertConfig, "data": DataConfig, "train": Hyperparams,
                "sweep": SweepConfig, "output": OutputConfig}
    unknown = set(d) - set(sections) - {"name", "models"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    kw = {k: _build(cls, d[k], k) for k, cls in sections.items() if k in d}
    if "name" in d:
        kw["name"] = str(d["name"])
    if "models" in d:
        kw["models"] = {str(k): v for k, v in d["models"].items()}
    return ExperimentConfig(**kw).validate()


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from e
    return from_dict(d)


def dump_config(cfg: ExperimentConfig, path=None) -> str:
    text = tomli_w.dumps(cfg.to_dict())
    if path is not None:
        Path(path).write_text(text)
    return text


def _coerce(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if text.startswith(("[", "{")):
        return json.loads(text)
    return text


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings (values parsed as int, float, bool, JSON list or table, or string)."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _coerce(val.strip())
    return from_dict(d)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Same config with the data and training seeds set to ``seed``."""
    return replace(cfg, data=replace(cfg.data, seed=seed), train=replace(cfg.train, seed=seed))


def validate(cfg: ExperimentConfig) -> None:
    p, x, dc, sw = cfg.plant, cfg.expert, cfg.data, cfg.sweep
    if p.kind not in PLANTS:
        raise ConfigError(f"plant.kind must be one of {PLANTS}")
    try:
        p.walker_params()
    except ValueError as e:
        raise ConfigError(f"[plant]: {e}") from e
    if min(x.k_energy, x.u_max_ankle, x.u_max_hip) <= 0:
        raise ConfigError("expert gains and torque limits must be positive")
    if dc.n_ic < 1:
        raise ConfigError("data.n_ic must be >= 1")
    if len(dc.ic_halfwidth) != 2 or min(dc.ic_halfwidth) < 0:
        raise ConfigError("data.ic_halfwidth must be two non-negative numbers")
    if dc.collect_delta < 0:
        raise ConfigError("data.collect_delta must be non-negative")
    if min(dc.eps_c, dc.eps_d, dc.sigma, dc.step, dc.sample_dt, dc.t_max) <= 0:
        raise ConfigError("data.eps_c, eps_d, sigma, step, sample_dt and t_max must be positive")
    if dc.ring_n_target < 1:
        raise ConfigError("data.ring_n_target must be >= 1")
    if dc.ring_resolution < 0 or dc.standoff < 0:
        raise ConfigError("data.ring_resolution and data.standoff must be non-negative")
    if dc.max_steps < 1:
        raise ConfigError("data.max_steps must be >= 1")
    for name, delta in cfg.models.items():
        if isinstance(delta, bool) or not isinstance(delta, (int, float)) or delta < 0:
            raise ConfigError(f"models.{name} must be a non-negative Delta_c")
    if cfg.train.layer_dims[0] != (4 if p.kind == "walker" else 2) or cfg.train.layer_dims[-1] != 1:
        raise ConfigError("train.layer_dims must map the state dimension to one output")
    bad = set(sw.controllers) - set(CONTROLLERS)
    if bad:
        raise ConfigError(f"unknown controllers {sorted(bad)}; choose from {CONTROLLERS}")
    for c in ("robust", "nonrobust"):
        if c in sw.controllers and c not in cfg.models:
            raise ConfigError(f"sweep controller {c!r} needs a trained model of that name")
    if sw.n_grid < 1 or sw.max_steps < 1 or not sw.seeds:
        raise ConfigError("sweep needs n_grid >= 1, max_steps >= 1 and at least one seed")
    if any(d < 0 for d in sw.deltas) or not sw.deltas:
        raise ConfigError("sweep.deltas must be a non-empty list of non-negative radii")
    if any(m <= 0 for m in sw.masses):
        raise ConfigError("sweep.masses must be positive")
    if not cfg.output.directory:
        raise ConfigError("output.directory must be set")


def is_config(o) -> bool:
    return is_dataclass(o) and isinstance(o, ExperimentConfig)
