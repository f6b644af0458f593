"""Experiment configuration: one nested JSON document drives every command.

Unknown keys anywhere in the document are hard errors, so a typo in a supply
matrix cannot silently fall back to a default.  All defaults follow the
benchmark settings: mass-spring-damper sampled at dt 0.1 over [0, 10],
pendulum at dt 0.01 over [0, 1], rectangle inputs of amplitude 1, lambda1
0.001, gamma^2 2.0, and 100 Monte-Carlo states for the projection penalty.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from dissipnet.errors import ConfigError
from dissipnet.nets import init_mlp
from dissipnet.projection import ProjectedModel, ProjectionSpec, RawDynamics
from dissipnet.supply import SupplyRate, preset, quadratic_storage
from dissipnet.training import Dataset, LossConfig, OptimizerConfig

SYSTEM_DEFAULTS = {
    "msd": {"dt": 0.1, "horizon": 100, "outputs": 2, "inputs": 1},
    "pendulum": {"dt": 0.01, "horizon": 100, "outputs": 2, "inputs": 1},
    "external": {"dt": None, "horizon": None, "outputs": None, "inputs": None},
}


def _from_mapping(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class SignalConfig:
    kind: str = "rectangle"
    amplitude: float = 1.0
    variance: float = 0.005
    min_segment: int | None = None
    max_segment: int | None = None

    def __post_init__(self):
        if self.kind not in ("rectangle", "step", "random_walk"):
            raise ConfigError(f"signal.kind {self.kind!r} is not supported")


@dataclass
class SimSection:
    dt: float | None = None
    horizon: int | None = None


@dataclass
class DatasetSection:
    n_trajectories: int = 100
    seed: int = 0
    substeps: int = 100


@dataclass
class ModelSection:
    state_dim: int | None = None  # default: output dimension
    f_hidden: list[int] = field(default_factory=lambda: [32])
    g_hidden: list[int] = field(default_factory=lambda: [32])
    h_hidden: list[int] = field(default_factory=list)
    l_hidden: list[int] = field(default_factory=lambda: [32])
    eta_hidden: list[int] = field(default_factory=list)
    activation: str = "relu"
    f_output_scale: float = 0.1
    seed: int = 0


@dataclass
class ProjectionSection:
    kind: str = "dissipative"
    preset: str = "auto"
    gamma2: float = 2.0
    supply: dict | None = None  # explicit {"Q": [[..]], "S": [[..]], "R": [[..]]}


@dataclass
class LossSection:
    lambda1: float = 0.001
    lambda2: float = 1e-4
    n_proj_samples: int = 100


@dataclass
class OptimizerSection:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 100


@dataclass
class ExperimentConfig:
    system: str = "msd"
    system_params: dict = field(default_factory=dict)
    signal: SignalConfig = field(default_factory=SignalConfig)
    sim: SimSection = field(default_factory=SimSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    projection: ProjectionSection = field(default_factory=ProjectionSection)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    seed: int = 0

    def __post_init__(self):
        if self.system not in SYSTEM_DEFAULTS:
            raise ConfigError(f"system {self.system!r} is not supported")
        defaults = SYSTEM_DEFAULTS[self.system]
        if self.sim.dt is None:
            self.sim.dt = defaults["dt"]
        if self.sim.horizon is None:
            self.sim.horizon = defaults["horizon"]
        if self.system == "external" and (self.sim.dt is None
                                          or "path" not in self.system_params):
            raise ConfigError(
                "external system needs system_params.path (dt/horizon come "
                "from the files)")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        data = dict(data)
        sections = {
            "signal": SignalConfig,
            "sim": SimSection,
            "dataset": DatasetSection,
            "model": ModelSection,
            "projection": ProjectionSection,
            "loss": LossSection,
            "optimizer": OptimizerSection,
        }
        for key, cls in sections.items():
            if key in data:
                data[key] = _from_mapping(cls, data[key], key)
        return _from_mapping(ExperimentConfig, data, "config")

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(data)


def save_config(path, cfg: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


def system_damping(cfg: ExperimentConfig) -> float:
    if cfg.system == "msd":
        return float(cfg.system_params.get("damping", 1.0))
    if cfg.system == "pendulum":
        damps = cfg.system_params.get("dampings")
        return float(damps[0]) if damps else 1.0
    return 1.0


def build_supply(cfg: ExperimentConfig, l_dim: int, m_dim: int) -> SupplyRate:
    """Resolve the supply rate: explicit matrices beat presets; the ``auto``
    preset picks the system certificate (or the io preset for that kind)."""
    section = cfg.projection
    if section.supply is not None:
        for key in section.supply:
            if key not in ("Q", "S", "R"):
                raise ConfigError(f"projection.supply: unknown key {key!r}")
        zq = np.zeros((l_dim, l_dim))
        zs = np.zeros((l_dim, m_dim))
        zr = np.zeros((m_dim, m_dim))
        return SupplyRate(
            np.asarray(section.supply.get("Q", zq), dtype=float),
            np.asarray(section.supply.get("S", zs), dtype=float),
            np.asarray(section.supply.get("R", zr), dtype=float))
    name = section.preset
    if name == "auto":
        if section.kind in ("io_stable",):
            name = "io_stable"
        elif section.kind in ("stable", "naive"):
            name = "stable"
        elif section.kind in ("passive_beta", "passive_alpha"):
            name = "passive"
        elif cfg.system in ("msd", "pendulum"):
            name = cfg.system
        else:
            raise ConfigError(
                f"no automatic supply preset for system {cfg.system!r} with "
                f"kind {section.kind!r}; set projection.preset or "
                "projection.supply")
    return preset(name, l_dim, m_dim, gamma2=section.gamma2,
                  damping=system_damping(cfg))


def build_model(cfg: ExperimentConfig, m_dim: int, l_dim: int) -> ProjectedModel:
    """Fresh networks and projection spec for the configured experiment."""
    mc = cfg.model
    n = mc.state_dim if mc.state_dim is not None else l_dim
    rng = np.random.default_rng([cfg.seed & 0x7FFFFFFF, mc.seed, 0x0DE1])
    raw = RawDynamics(
        f=init_mlp(n, n, mc.f_hidden, mc.activation,
                   output_scale=mc.f_output_scale, rng=rng),
        g=init_mlp(n, n * m_dim, mc.g_hidden, mc.activation, rng=rng,
                   output_bias="uniform"),
        h=init_mlp(n, l_dim, mc.h_hidden, mc.activation, rng=rng),
    )
    supply = build_supply(cfg, l_dim, m_dim)
    kind = cfg.projection.kind
    l_net = None
    if kind in ("dissipative", "io_stable", "general"):
        l_net = init_mlp(n, m_dim, mc.l_hidden, mc.activation, rng=rng)
    spec = ProjectionSpec(
        kind=kind, supply=supply, V=quadratic_storage(n), l_net=l_net,
        gamma2=cfg.projection.gamma2 if kind == "io_stable" else None)
    eta = None
    if cfg.loss.lambda2 > 0:
        eta = init_mlp(l_dim, n, mc.eta_hidden, mc.activation, rng=rng)
    return ProjectedModel(raw, spec, eta=eta)


def loss_config(cfg: ExperimentConfig) -> LossConfig:
    return LossConfig(lambda1=cfg.loss.lambda1, lambda2=cfg.loss.lambda2,
                      n_proj_samples=cfg.loss.n_proj_samples,
                      rng_seed=cfg.seed)


def optimizer_config(cfg: ExperimentConfig) -> OptimizerConfig:
    o = cfg.optimizer
    return OptimizerConfig(algorithm=o.algorithm, learning_rate=o.learning_rate,
                           weight_decay=o.weight_decay, batch_size=o.batch_size,
                           epochs=o.epochs)
