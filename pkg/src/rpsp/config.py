"""Experiment configuration: flat keys, loaded from YAML and overridable from
the command line."""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .baselines import AGENTS
from .envs import DEFAULT_LAMBDA, ENVIRONMENTS
from .errors import InvalidConfigurationError


@dataclass
class ExperimentConfig:
    env: str = "po_cartpole"
    agent: str = "rpsp-alt"
    seeds: list = field(default_factory=lambda: [0])
    iters: int = 50
    batch_size: int = 10000
    horizon: int = None  # None: the environment's own cap
    eta: float = 1e-2
    eta_psr: float = 1e-4
    gamma: float = 0.99
    d: int = 20
    d_future: int = 5
    d_immediate: int = None
    k: int = 2
    lam: float = None  # None: per-environment default
    cap_scale: float = 10.0  # state norm cap as a multiple of the largest exploration state norm; 0 keeps 1e6
    a2: float = 0.1
    beta: float = 0.1
    epsilon: float = 0.01
    noise: float = 0.0
    m_init: int = 100
    psr_init: str = "2sr"
    out: str = "runs/default"
    workers: int = 1
    checkpoint_every: int = 0
    record_wall_time: bool = False

    def validate(self):
        def need(ok, msg):
            if not ok:
                raise InvalidConfigurationError(msg)

        need(self.env in ENVIRONMENTS, f"unknown env {self.env!r}; choose from {sorted(ENVIRONMENTS)}")
        need(self.agent in AGENTS, f"unknown agent {self.agent!r}; choose from {', '.join(AGENTS)}")
        need(isinstance(self.seeds, list) and len(self.seeds) > 0, "seeds must be a non-empty list")
        need(all(isinstance(s, int) and s >= 0 for s in self.seeds), "seeds must be non-negative integers")
        need(self.iters >= 0, "iters must be >= 0")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.horizon is None or self.horizon >= 1, "horizon must be >= 1")
        need(self.eta >= 0 and self.eta_psr >= 0, "step sizes must be >= 0")
        need(0 <= self.gamma <= 1, "gamma must lie in [0, 1]")
        need(self.d >= 2 and self.d_future >= 2, "feature dims must be >= 2")
        need(self.d_immediate is None or self.d_immediate >= 2, "d_immediate must be >= 2")
        need(self.k >= 1, "k must be >= 1")
        need(self.lam is None or self.lam > 0, "lam must be positive")
        need(self.cap_scale >= 0, "cap_scale must be >= 0")
        need(self.a2 >= 0, "a2 must be >= 0")
        need(0 < self.beta <= 1, "beta must lie in (0, 1]")
        need(self.epsilon > 0, "epsilon must be positive")
        need(self.noise >= 0, "noise must be >= 0")
        need(self.m_init >= 1, "m_init must be >= 1")
        need(self.psr_init in ("2sr", "random"), "psr_init must be '2sr' or 'random'")
        need(self.workers >= 1, "workers must be >= 1")
        need(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")
        return self

    @property
    def kbr_lambda(self):
        return DEFAULT_LAMBDA[self.env] if self.lam is None else self.lam

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def from_dict(d):
    unknown = sorted(set(d) - set(FIELDS))
    if unknown:
        raise InvalidConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    d = dict(d)
    if "seeds" in d and isinstance(d["seeds"], int):
        d["seeds"] = [d["seeds"]]
    try:
        return ExperimentConfig(**d).validate()
    except TypeError as exc:  # e.g. a string where a number belongs
        raise InvalidConfigurationError(f"bad config value: {exc}") from exc


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise InvalidConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfigurationError("config file must hold a mapping of flat keys")
    return from_dict(data)


def dump_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
