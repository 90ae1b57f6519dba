"""Experiment configuration: nested dataclasses, YAML/JSON io, overrides.

Every field has a default so an empty config is runnable; a resolved copy
is serialized next to the results of each run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from pdepolicy.env import HORIZONTAL, SINUSOIDAL

DEFAULT_DS = {HORIZONTAL: 0.02, SINUSOIDAL: 0.03}


@dataclass
class EnvConfig:
    grid_n: int = 16
    num_steps: int = 25
    ds: float | None = None       # per-setup default when unset (0.02 / 0.03)
    kappa: float = 0.008
    c: float | None = None        # source magnitude; per-setup default
    sigma_s: float | None = None  # source width; per-setup default
    rho: float = 40.0
    stabilize: bool = True

    def resolved_ds(self, setup: str) -> float:
        return DEFAULT_DS[setup] if self.ds is None else float(self.ds)


@dataclass
class HjbRunConfig:
    width: int = 64
    depth: int = 4
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0
    lr0: float = 0.075
    decay: float = 0.975
    lr_floor: float = 0.0025
    batch_size: int = 20
    pool_size: int = 64
    max_iterations: int = 400
    max_solves: int = 15_000
    validate_every: int = 10
    checkpoint_every: int = 50
    workers: int = 1


@dataclass
class RlRunConfig:
    lr0: float = 1e-4
    lr_decay: float = 0.999
    env_parallelism: int = 8
    minibatch_size: int = 64
    update_epochs: int = 4
    clip_eps: float = 0.2
    gae_lambda: float = 0.95
    gamma: float = 1.0
    critic_weight: float = 0.5
    entropy_coef: float = 0.0
    kl_stop: float = 0.05
    max_grad_norm: float = 0.5
    ema_rate: float = 0.01
    target_noise: float = 0.2
    noise_clip: float = 0.5
    policy_delay: int = 2
    soft_update: float = 0.005
    explore_noise: float = 0.1
    buffer_size: int = 60_000
    warmup_transitions: int = 400
    td3_batch: int = 128
    updates_per_transition: float = 1.0
    channels: tuple = (8, 16, 16)
    hidden: int = 64
    init_log_std: float = -0.5
    dtype: str = "float32"
    workers: int = 1
    max_solves: int = 15_000
    validate_every: int = 1       # rounds between validation sweeps
    checkpoint_every: int = 25    # rounds between checkpoints


@dataclass
class BaselineRunConfig:
    restarts: int = 3
    seed: int = 0
    max_iter: int = 500
    tol: float = 1e-4


@dataclass
class ExperimentConfig:
    setup: str = HORIZONTAL
    method: str = "hjb"           # hjb | ppo | td3 | baseline
    seed: int = 1
    out_dir: str = "runs/run"
    validation_small: bool = False
    env: EnvConfig = field(default_factory=EnvConfig)
    hjb: HjbRunConfig = field(default_factory=HjbRunConfig)
    rl: RlRunConfig = field(default_factory=RlRunConfig)
    baseline: BaselineRunConfig = field(default_factory=BaselineRunConfig)

    def __post_init__(self):
        if self.setup not in (HORIZONTAL, SINUSOIDAL):
            raise ValueError(f"unknown setup {self.setup!r}")
        if self.method not in ("hjb", "ppo", "td3", "baseline"):
            raise ValueError(f"unknown method {self.method!r}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["rl"]["channels"] = list(out["rl"]["channels"])
        return out

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


_SECTIONS = {
    "env": EnvConfig,
    "hjb": HjbRunConfig,
    "rl": RlRunConfig,
    "baseline": BaselineRunConfig,
}


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        section = dict(data.pop(name, {}) or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(section) - known
        if unknown:
            raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
        if name == "rl" and "channels" in section:
            section["channels"] = tuple(section["channels"])
        kwargs[name] = cls(**section)
    known_top = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(data) - known_top
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    return ExperimentConfig(**data, **kwargs)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError("config root must be a mapping")
    return config_from_dict(data)


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` (or ``key=value``) strings on top."""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        value = yaml.safe_load(raw)
        target = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ValueError(f"unknown config section {part!r} in {item!r}")
            target = target[part]
        if parts[-1] not in target:
            raise ValueError(f"unknown config key {key!r}")
        target[parts[-1]] = value
    return config_from_dict(data)
