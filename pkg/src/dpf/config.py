"""Declarative experiment configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .components import DYNAMICS, MEASUREMENTS, PROPOSALS, UNNORMALISED_MEASUREMENTS
from .objectives import LOSSES
from .resampling import SCHEMES

MODELS = ("lgssm", "planar")
OPTIMIZERS = ("sgd", "adam")
LIKELIHOOD_LOSSES = ("elbo", "pseudo_lik", "combined")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    model: str = "lgssm"
    loss: str = "elbo"
    dynamic: str | None = None
    proposal: str = "bootstrap"
    measurement: str | None = None
    n_particles: int = 100
    T: int = 50
    count: int = 100
    test_fraction: float = 0.2
    dataset: str | None = None
    resampler: str = "multinomial"
    soft_lambda: float = 0.5
    ot_epsilon: float = 0.1
    ot_max_iter: int = 500
    ot_tol: float = 1e-8
    ess_min_frac: float = 0.5
    tbptt: str = "none"
    gmm_sigma: float = 1.0
    block_len: int | None = None
    block_count: int = 1
    lambda1: float = 1.0
    lambda2: float = 1.0
    heading_weight: float = 1.0
    ae_weight: float = 0.0
    supervised: bool = True
    optimizer: str = "adam"
    lr: float = 0.01
    epochs: int = 10
    minibatch: int = 8
    seed: int = 0
    out_dir: str = "runs/experiment"
    flow_depth: int = 4
    flow_hidden: int = 32
    feature_dim: int = 16
    hidden: int = 32
    theta_true: list[float] = field(default_factory=lambda: [0.9, 1.0])
    theta_init: list[float] = field(default_factory=lambda: [0.3, 0.5])
    learn_noise: bool = False
    map_size: list[int] = field(default_factory=lambda: [32, 32])
    patch: list[int] = field(default_factory=lambda: [8, 8])
    motion_noise: list[float] = field(default_factory=lambda: [0.2, 0.2, 0.05])
    init_noise: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.1])
    pixel_noise: float = 0.1
    workers: int = 1

    def __post_init__(self):
        if self.dynamic is None:
            self.dynamic = "robot_motion" if self.model == "planar" else "gaussian_const"
        if self.measurement is None:
            self.measurement = "nn_scalar" if self.model == "planar" else "analytic_gaussian"
        self.validate()

    def validate(self) -> None:
        def choice(key, valid):
            value = getattr(self, key)
            if value not in valid:
                raise ConfigError(f"{key}: unknown value {value!r}; valid: {', '.join(valid)}")

        def check(key, ok):
            if not ok:
                raise ConfigError(f"{key}: value {getattr(self, key)!r} out of range")

        choice("model", MODELS)
        choice("loss", LOSSES)
        choice("proposal", PROPOSALS)
        choice("resampler", SCHEMES)
        choice("optimizer", OPTIMIZERS)
        choice("tbptt", ("none", "every_step"))
        if self.model == "planar":
            choice("dynamic", ("robot_motion",))
            choice("proposal", ("bootstrap",))
            choice("measurement", ("nn_scalar",))
        else:
            choice("dynamic", DYNAMICS)
            choice("measurement", MEASUREMENTS)
        if self.measurement in UNNORMALISED_MEASUREMENTS and self.loss in LIKELIHOOD_LOSSES:
            raise ConfigError(
                f"measurement {self.measurement!r} is unnormalised and cannot be trained "
                f"with the likelihood-based loss {self.loss!r}"
            )
        if self.measurement == "feature_cosine" and self.proposal != "bootstrap":
            raise ConfigError("measurement 'feature_cosine' requires proposal 'bootstrap'")
        check("n_particles", isinstance(self.n_particles, int) and self.n_particles >= 1)
        check("T", isinstance(self.T, int) and self.T >= 1)
        check("count", isinstance(self.count, int) and self.count >= 1)
        check("test_fraction", 0 <= self.test_fraction < 1)
        check("soft_lambda", 0 < self.soft_lambda <= 1)
        check("ot_epsilon", self.ot_epsilon > 0)
        check("ot_max_iter", self.ot_max_iter >= 1)
        check("ot_tol", self.ot_tol > 0)
        check("ess_min_frac", 0 <= self.ess_min_frac <= 1)
        check("gmm_sigma", self.gmm_sigma > 0)
        check("block_len", self.block_len is None or self.block_len >= 1)
        check("block_count", self.block_count >= 1)
        check("lambda1", self.lambda1 >= 0)
        check("lambda2", self.lambda2 >= 0)
        check("heading_weight", self.heading_weight >= 0)
        check("ae_weight", self.ae_weight >= 0)
        check("lr", self.lr >= 0)
        check("epochs", isinstance(self.epochs, int) and self.epochs >= 0)
        check("minibatch", isinstance(self.minibatch, int) and self.minibatch >= 1)
        check("seed", isinstance(self.seed, int) and self.seed >= 0)
        check("flow_depth", self.flow_depth >= 1)
        check("flow_hidden", self.flow_hidden >= 1)
        check("feature_dim", self.feature_dim >= 1)
        check("hidden", self.hidden >= 1)
        check("theta_true", len(self.theta_true) == 2)
        check("theta_init", len(self.theta_init) == 2)
        check("map_size", len(self.map_size) == 2 and min(self.map_size) >= 1)
        check("patch", len(self.patch) == 2 and min(self.patch) >= 1)
        check("motion_noise", len(self.motion_noise) == 3 and min(self.motion_noise) >= 0)
        check("init_noise", len(self.init_noise) == 3 and min(self.init_noise) >= 0)
        check("pixel_noise", self.pixel_noise >= 0)
        check("workers", isinstance(self.workers, int) and self.workers >= 1)
        if self.loss in ("pseudo_lik", "combined"):
            L = self.block_len or self.T // self.block_count
            check("block_count", L >= 1 and L * self.block_count <= self.T)

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        """Canonical JSON: every key, sorted."""
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: malformed JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return ExperimentConfig.from_dict(data)
