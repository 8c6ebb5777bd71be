"""Run configuration: a flat ``key = value`` file, hashed for provenance."""
from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields

from ..drivesim import FRAME_SIZES, RewardCoefficients, _parse_kv

SEED_ENV = "LATENTDRIVE_SEED"

# keys that change what an artifact contains; the rest only affect how it is
# inspected afterwards
_NON_PROVENANCE = {"eval_pairs", "eval_seed", "log_every"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    frame_size: int = 64
    latent_dim: int = 32
    hidden: int = 64
    k1: float = 1000.0
    k2: float = 0.05
    k3: float = 2.0
    k4: float = 2.0
    # collection
    n_episodes: int = 50
    driver: str = "scripted"
    target_speed: float = 8.0
    weave_amplitude: float = 1.2
    # vae
    vae_epochs: int = 5
    vae_batch: int = 32
    vae_lr: float = 1e-3
    vae_beta: float = 1.0
    # rnn
    rnn_epochs: int = 20
    rnn_window: int = 32
    rnn_batch: int = 16
    rnn_lr: float = 1e-3
    # controller search
    es_popsize: int = 32
    es_sigma0: float = 0.1
    es_generations: int = 200
    es_elite_fraction: float = 0.2
    es_weights: str = "log"
    es_rollouts: int = 4
    es_horizon: int = 300
    es_patience: int = 3
    es_min_generations: int = 10
    action_squash: str = "tanh"
    # evaluation
    eval_pairs: int = 20
    eval_seed: int = 12345
    log_every: int = 0

    def __post_init__(self):
        problems = []
        if self.frame_size not in FRAME_SIZES or self.frame_size < 64:
            problems.append(f"frame_size must be 64 or 128, got {self.frame_size}")
        for name in ("latent_dim", "hidden", "n_episodes", "vae_epochs", "vae_batch", "rnn_epochs",
                     "rnn_window", "rnn_batch", "es_generations", "es_rollouts", "es_horizon", "eval_pairs"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        if self.es_popsize < 4:
            problems.append(f"es_popsize must be at least 4, got {self.es_popsize}")
        if not 0 < self.es_elite_fraction <= 0.5:
            problems.append(f"es_elite_fraction must lie in (0, 0.5], got {self.es_elite_fraction}")
        if self.driver not in ("scripted", "random"):
            problems.append(f"driver must be scripted or random, got {self.driver!r}")
        if self.es_weights not in ("log", "equal"):
            problems.append(f"es_weights must be log or equal, got {self.es_weights!r}")
        if self.action_squash not in ("tanh", "clip"):
            problems.append(f"action_squash must be tanh or clip, got {self.action_squash!r}")
        if min(self.k1, self.k2, self.k3, self.k4) < 0:
            problems.append("reward coefficients must be non-negative")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def reward(self) -> RewardCoefficients:
        return RewardCoefficients(self.k1, self.k2, self.k3, self.k4)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def hash(self) -> str:
        """SHA-256 over the provenance-relevant keys."""
        text = "".join(f"{f.name} = {getattr(self, f.name)!r}\n" for f in fields(self)
                       if f.name not in _NON_PROVENANCE)
        return hashlib.sha256(text.encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def from_mapping(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    try:
        return dataclasses.replace(base, **{k: _coerce(k, str(v)) for k, v in values.items()})
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    try:
        values = _parse_kv(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return from_mapping(values, base)


def load(path=None, overrides: dict[str, str] | None = None, env=os.environ) -> RunConfig:
    """File values, then the seed environment variable, then explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = from_text(fh.read(), cfg)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if env.get(SEED_ENV):
        cfg = from_mapping({"seed": env[SEED_ENV]}, cfg)
    if overrides:
        cfg = from_mapping(overrides, cfg)
    return cfg
