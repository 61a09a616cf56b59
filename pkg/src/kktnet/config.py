"""Experiment configuration files.

One JSON document per experiment holds everything the command line
needs: which benchmark, the network shape, oracle settings, the
training hyperparameters for either method, the seed list and the
output directory.  Parsing is strict (unknown keys are an error at any
nesting level) and ``to_dict``/``from_dict`` round-trip exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .loss import AlphaSchedule, PenaltyConfig
from .problems import get_problem, penalty_option
from .training import TrainConfig

__all__ = [
    "ConfigError",
    "NetworkSection",
    "OracleSection",
    "TrainSection",
    "ExperimentConfig",
    "default_config",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Raised for unknown keys, bad values or malformed documents."""


@dataclass
class NetworkSection:
    width: int = 32
    depth: int = 3


@dataclass
class OracleSection:
    tol: float = 1e-10
    verify_tol: float = 1e-6
    # rows of parameter values for the training set; null picks the
    # benchmark's standard lattice
    train_params: list | None = None


@dataclass
class TrainSection:
    """Hyperparameters for one training method.

    The plateau and early-stop patiences default to the long-run
    protocol values; desk-scale runs pass smaller ones explicitly.
    """

    epochs: int = 20000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    n_collocation: int = 64
    n_validation: int = 64
    alpha_lo: float = 0.1
    alpha_hi: float = 0.9
    d_init: int = 1000
    d_anneal: int = 4000
    alpha: float = 0.5
    penalty_option: int = 2
    gamma_g: float = 100.0
    gamma_h: float = 100.0
    balance_beta: float = 1e-8
    balance_every: int = 100
    plateau_factor: float = 0.8
    plateau_patience: int = 2000
    early_stop_patience: int = 20000
    min_improve: float = 1e-12
    restore_best: bool = True
    pm_enforce_primal: bool = False


@dataclass
class ExperimentConfig:
    problem: str = "lp"
    problem_args: dict = field(default_factory=dict)
    network: NetworkSection = field(default_factory=NetworkSection)
    oracle: OracleSection = field(default_factory=OracleSection)
    optinn: TrainSection | None = field(default_factory=TrainSection)
    pmnn: TrainSection | None = field(default_factory=TrainSection)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"
    grid_points: int = 256

    def validate(self) -> None:
        try:
            get_problem(self.problem, **self.problem_args)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if self.network.width < 1 or self.network.depth < 1:
            raise ConfigError("network width and depth must be positive")
        if self.grid_points < 2:
            raise ConfigError("grid_points must be at least 2")
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if any(int(s) != s for s in self.seeds):
            raise ConfigError("seeds must be integers")
        if self.optinn is None and self.pmnn is None:
            raise ConfigError("at least one of optinn/pmnn must be configured")
        for method in ("optinn", "pmnn"):
            if getattr(self, method) is not None:
                # TrainConfig performs the value checks
                self.train_config(method, seed=0)

    def train_config(self, method: str, seed: int) -> TrainConfig:
        """Materialize the TrainConfig for one method and seed."""
        sec = getattr(self, method, None)
        if method not in ("optinn", "pmnn") or sec is None:
            raise ConfigError(f"no {method!r} section in this config")
        try:
            return TrainConfig(
                width=self.network.width,
                depth=self.network.depth,
                epochs=sec.epochs,
                lr=sec.lr,
                weight_decay=sec.weight_decay,
                n_collocation=sec.n_collocation,
                n_validation=sec.n_validation,
                schedule=AlphaSchedule(sec.alpha_lo, sec.alpha_hi,
                                       sec.d_init, sec.d_anneal),
                alpha=sec.alpha,
                pset=penalty_option(sec.penalty_option),
                pconfig=PenaltyConfig(sec.gamma_g, sec.gamma_h),
                balance_beta=sec.balance_beta,
                balance_every=sec.balance_every,
                plateau_factor=sec.plateau_factor,
                plateau_patience=sec.plateau_patience,
                early_stop_patience=sec.early_stop_patience,
                min_improve=sec.min_improve,
                seed=int(seed),
                restore_best=sec.restore_best,
                pm_enforce_primal=sec.pm_enforce_primal,
            )
        except ValueError as exc:
            raise ConfigError(f"{method}: {exc}") from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, doc, path):
    """Construct dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    if doc is None:
        return None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    nested = {"network": NetworkSection, "oracle": OracleSection,
              "optinn": TrainSection, "pmnn": TrainSection}
    for key, value in doc.items():
        if cls is ExperimentConfig and key in nested:
            kwargs[key] = _build(nested[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def from_dict(doc: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "config")
    cfg.validate()
    return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return from_dict(doc)


def save_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
        fh.write("\n")


# training settings that work at each benchmark's scale
_PER_PROBLEM = {
    "lp": dict(epochs=20000, lr=1e-2, weight_decay=0.0,
               n_collocation=256, n_validation=256, penalty_option=3),
    "nonconvex": dict(epochs=20000, lr=3e-3, weight_decay=0.0,
                      n_collocation=256, n_validation=256, penalty_option=2),
    "rocket_car": dict(epochs=50000, lr=1e-3, weight_decay=0.0,
                       n_collocation=64, n_validation=64, penalty_option=2),
    "pendulum": dict(epochs=50000, lr=1e-3, weight_decay=0.0,
                     n_collocation=64, n_validation=64, penalty_option=2),
    "scalar": dict(epochs=2000, lr=1e-2, weight_decay=0.0,
                   n_collocation=32, n_validation=32, gamma_g=5.0, gamma_h=5.0),
}


def default_config(problem: str) -> ExperimentConfig:
    """A ready-to-run configuration for one of the benchmarks."""
    overrides = _PER_PROBLEM.get(problem, {})
    cfg = ExperimentConfig(
        problem=problem,
        optinn=TrainSection(**overrides),
        pmnn=TrainSection(**overrides),
    )
    cfg.validate()
    return cfg
