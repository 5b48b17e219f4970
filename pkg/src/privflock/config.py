"""Workbench configuration: one JSON document, five sections.

Sections map 1:1 onto the module config types (sim, metrics, ga, nn, coopt).
Unknown keys are rejected, defaults are filled in, and the fully resolved
document is echoed into every run archive so a master seed plus the echo
reproduces a run byte for byte.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from privflock.flocking import (GENE_NAMES, N_GENES, TRAJECTORY_KINDS,
                                ReferenceTrajectory, SimConfig)
from privflock.ga import GaConfig, default_bounds
from privflock.metrics import MetricWeights


class ConfigError(ValueError):
    """Invalid configuration; `path` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class NnConfig:
    """Discriminator hyperparameters and the observation window shape."""

    window_seconds: float = 5.0
    sample_rate_hz: float = 2.0
    conv_channels: int = 16
    hidden: int = 512
    learning_rate: float = 0.025
    momentum: float = 0.9
    batch_size: int = 32
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    @property
    def channels(self) -> int:
        return int(round(self.window_seconds * self.sample_rate_hz))

    def validate(self) -> None:
        if self.channels < 1:
            raise ValueError("window_seconds * sample_rate_hz must be >= 1")
        if self.conv_channels < 1 or self.hidden < 1:
            raise ValueError("conv_channels and hidden must be >= 1")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.bn_eps > 0.0:
            raise ValueError("bn_eps must be > 0")
        if not 0.0 < self.bn_momentum <= 1.0:
            raise ValueError("bn_momentum must be in (0, 1]")


def _default_pretrain_chromosomes() -> list[list[float]]:
    # moderate hand-tuned controllers: cohesive flock, leader out in front
    return [
        [1.0, 1.0, 0.30, 2.0, 10.0, 10.0,
         1.0, 0.7, 0.20, 2.0, 10.0, 10.0, 1.2, 0.0, 0.0],
        [1.2, 0.9, 0.40, 2.5, 12.0, 12.0,
         1.2, 0.6, 0.25, 2.5, 12.0, 12.0, 0.9, 0.0, 0.0],
    ]


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 150
    samples: int = 2000
    kinds: tuple[str, ...] = TRAJECTORY_KINDS
    chromosomes: tuple[tuple[float, ...], ...] = ()

    def __post_init__(self):
        if not self.chromosomes:
            object.__setattr__(
                self, "chromosomes",
                tuple(tuple(c) for c in _default_pretrain_chromosomes()))

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if not self.kinds:
            raise ValueError("at least one trajectory kind is required")
        for k in self.kinds:
            if k not in TRAJECTORY_KINDS:
                raise ValueError(f"unknown trajectory kind {k!r}")
        if not self.chromosomes:
            raise ValueError("at least one hand-tuned chromosome is required")
        for c in self.chromosomes:
            if len(c) != N_GENES:
                raise ValueError(f"chromosomes need {N_GENES} genes")


@dataclass(frozen=True)
class CooptSettings:
    trajectory: ReferenceTrajectory = field(default_factory=ReferenceTrajectory)
    gamma: float = 0.01
    buffer_capacity: int = 100
    online_epochs: int = 1
    repeats_per_eval: int = 1
    master_seed: int = 0
    workers: int = 1
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def validate(self) -> None:
        try:
            self.trajectory.validate()
        except ValueError as exc:
            raise ValueError(f"trajectory: {exc}") from exc
        if not self.gamma > 0.0:
            raise ValueError("gamma must be > 0")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if self.online_epochs < 1:
            raise ValueError("online_epochs must be >= 1")
        if self.repeats_per_eval < 1:
            raise ValueError("repeats_per_eval must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        try:
            self.pretrain.validate()
        except ValueError as exc:
            raise ValueError(f"pretrain: {exc}") from exc


@dataclass(frozen=True)
class WorkbenchConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    metrics: MetricWeights = field(default_factory=MetricWeights)
    ga: GaConfig = field(default_factory=GaConfig)
    nn: NnConfig = field(default_factory=NnConfig)
    coopt: CooptSettings = field(default_factory=CooptSettings)

    def validate(self) -> None:
        for section in ("sim", "metrics", "ga", "nn", "coopt"):
            try:
                getattr(self, section).validate()
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(section, str(exc)) from exc
        if self.nn.sample_rate_hz > self.sim.control_rate:
            raise ConfigError("nn.sample_rate_hz",
                              "must not exceed sim.control_rate")
        if self.sim.duration < self.nn.window_seconds:
            raise ConfigError("sim.duration",
                              "must cover at least one observation window")


def default_config_dict() -> dict:
    return to_dict(WorkbenchConfig())


def to_dict(cfg: WorkbenchConfig) -> dict:
    """Resolved configuration as a plain JSON-serializable document."""
    sim = cfg.sim
    met = cfg.metrics
    ga = cfg.ga
    nn = cfg.nn
    co = cfg.coopt
    traj = co.trajectory
    bounds = np.asarray(ga.bounds, dtype=float)
    return {
        "sim": {
            "n_robots": sim.n_robots,
            "sensing_range": sim.sensing_range,
            "duration": sim.duration,
            "control_rate": sim.control_rate,
            "lookahead": sim.lookahead,
            "v_max": sim.v_max,
            "formation_spacing": sim.formation_spacing,
            "seed": sim.seed,
        },
        "metrics": {
            "b": [float(x) for x in np.asarray(met.b, dtype=float)],
            "r_lo": met.r_lo,
            "r_hi": met.r_hi,
            "v_min": met.v_min,
        },
        "ga": {
            "population_size": ga.population_size,
            "generations": ga.generations,
            "crossover_prob": ga.crossover_prob,
            "mutation_prob": ga.mutation_prob,
            "elitism_count": ga.elitism_count,
            "kappa": ga.kappa,
            "beta": ga.beta,
            "bounds": {name: [float(bounds[i, 0]), float(bounds[i, 1])]
                       for i, name in enumerate(GENE_NAMES)},
        },
        "nn": {
            "window_seconds": nn.window_seconds,
            "sample_rate_hz": nn.sample_rate_hz,
            "conv_channels": nn.conv_channels,
            "hidden": nn.hidden,
            "learning_rate": nn.learning_rate,
            "momentum": nn.momentum,
            "batch_size": nn.batch_size,
            "bn_eps": nn.bn_eps,
            "bn_momentum": nn.bn_momentum,
        },
        "coopt": {
            "trajectory": {
                "kind": traj.kind,
                "origin": [traj.origin[0], traj.origin[1]],
                "heading": [traj.heading[0], traj.heading[1]],
                "amplitude": traj.amplitude,
                "period_length": traj.period_length,
                "altitude": traj.altitude,
            },
            "gamma": co.gamma,
            "buffer_capacity": co.buffer_capacity,
            "online_epochs": co.online_epochs,
            "repeats_per_eval": co.repeats_per_eval,
            "master_seed": co.master_seed,
            "workers": co.workers,
            "pretrain": {
                "epochs": co.pretrain.epochs,
                "samples": co.pretrain.samples,
                "kinds": list(co.pretrain.kinds),
                "chromosomes": [list(c) for c in co.pretrain.chromosomes],
            },
        },
    }


def _reject_unknown(doc, defaults, path: str) -> None:
    if not isinstance(doc, dict):
        return
    for key, value in doc.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(here, "unknown key")
        # ga.bounds is keyed by gene name, not a fixed sub-schema
        if isinstance(defaults[key], dict) and here != "ga.bounds":
            _reject_unknown(value, defaults[key], here)
    if path == "ga" and isinstance(doc.get("bounds"), dict):
        for name in doc["bounds"]:
            if name not in GENE_NAMES:
                raise ConfigError(f"ga.bounds.{name}", "unknown gene")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    out = copy.deepcopy(doc)
    for item in overrides or ():
        keys, value = _parse_override(item)
        node = out
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                node[k] = {}
            node = node[k]
        node[keys[-1]] = value
    return out


def from_dict(doc: dict) -> WorkbenchConfig:
    """Build and validate a WorkbenchConfig from a merged document."""
    merged = _merge(default_config_dict(), doc)
    _reject_unknown(merged, default_config_dict(), "")

    def build(section, cls, path, **extra):
        try:
            return cls(**section, **extra)
        except TypeError as exc:
            raise ConfigError(path, str(exc)) from exc

    sim = build(merged["sim"], SimConfig, "sim")
    met_doc = dict(merged["metrics"])
    met_doc["b"] = np.asarray(met_doc["b"], dtype=float)
    metrics = build(met_doc, MetricWeights, "metrics")
    ga_doc = dict(merged["ga"])
    bounds_doc = ga_doc.pop("bounds")
    bounds = default_bounds()
    for i, name in enumerate(GENE_NAMES):
        if name in bounds_doc:
            lo, hi = bounds_doc[name]
            bounds[i] = (float(lo), float(hi))
    ga_cfg = build(ga_doc, GaConfig, "ga", bounds=bounds)
    nn_cfg = build(merged["nn"], NnConfig, "nn")
    co_doc = dict(merged["coopt"])
    traj_doc = dict(co_doc.pop("trajectory"))
    traj_doc["origin"] = tuple(float(v) for v in traj_doc["origin"])
    traj_doc["heading"] = tuple(float(v) for v in traj_doc["heading"])
    traj = build(traj_doc, ReferenceTrajectory, "coopt.trajectory")
    pre_doc = dict(co_doc.pop("pretrain"))
    pre_doc["kinds"] = tuple(pre_doc["kinds"])
    pre_doc["chromosomes"] = tuple(tuple(float(g) for g in c)
                                   for c in pre_doc["chromosomes"])
    pretrain = build(pre_doc, PretrainConfig, "coopt.pretrain")
    coopt = build(co_doc, CooptSettings, "coopt",
                  trajectory=traj, pretrain=pretrain)
    cfg = WorkbenchConfig(sim=sim, metrics=metrics, ga=ga_cfg,
                          nn=nn_cfg, coopt=coopt)
    cfg.validate()
    return cfg


def load_config(path=None, overrides=None, seed: int | None = None,
                workers: int | None = None) -> WorkbenchConfig:
    """Load the JSON config file, apply overrides, validate."""
    doc: dict = {}
    if path is not None:
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(str(path), "top level must be a JSON object")
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc = apply_overrides(doc, [f"coopt.master_seed={int(seed)}"])
    if workers is not None:
        doc = apply_overrides(doc, [f"coopt.workers={int(workers)}"])
    return from_dict(doc)


def config_json(cfg: WorkbenchConfig) -> str:
    """Canonical resolved-config text (stable across runs)."""
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"
