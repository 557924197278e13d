"""Experiment configuration: flat ``key = value`` files with sections.

Sections only group keys for readability; every key maps onto one field of
:class:`ExperimentConfig`, and a key may appear in any section.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
import os
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigError

RULES = ("bp", "fa", "ifa")
DATASETS = ("cifar10", "cifar100", "mnist")


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "cifar10"
    data_dir: str = "data/cifar-10-batches-bin"
    train_subset: int = 0  # 0 keeps the whole split
    test_subset: int = 0
    corruption_dir: str = ""
    # model
    hidden: list[int] = field(default_factory=lambda: [512, 512])
    # learning rule and initialisation
    rule: str = "bp"
    theta_init: float | None = None
    a: float = math.sqrt(2.0)
    b: float = math.sqrt(2.0)
    # optimiser
    optimizer: str = "adam"
    lr: float = 1e-4
    beta1: float = 0.99
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # schedule
    epochs: int = 30
    batch_size: int = 128
    log_every: int = 0  # extra in-epoch log rows every N iterations
    log_epochs: int = 0  # in-epoch rows only during the first N epochs (0 = all)
    checkpoint_every: int = 0  # extra checkpoints every N iterations
    save_checkpoints: bool = True
    eval_batch_size: int = 1000
    # runs
    trials: int = 1
    seed: int = 0
    out: str = "runs/experiment"
    # sweeps
    sweep_a: list[float] = field(default_factory=lambda: [1.0, math.sqrt(2.0)])
    sweep_b: list[float] = field(default_factory=lambda: [1.0, math.sqrt(2.0)])
    sweep_depths: list[int] = field(default_factory=lambda: list(range(2, 11)))
    sweep_sizes: list[int] = field(default_factory=lambda: [100, 1000, 10000, 50000])
    # spectral analysis
    spectral_batch: int = 1000
    power_tol: float = 1e-3
    power_iters: int = 100
    trace_probes: int = 100
    probe: str = "rademacher"
    slq_nv: int = 10
    slq_q: int = 80
    landscape_points: int = 25
    landscape_radius: float = 1.0
    pca_points: int = 21
    # attacks
    attack_iterations: int = 0  # 0 = method default
    attack_step: float = 0.0  # 0 = method default

    def effective_theta(self) -> float:
        if self.rule == "ifa":
            return 0.0 if self.theta_init is None else float(self.theta_init)
        return 90.0

    def validate(self, check_files: bool = True) -> "ExperimentConfig":
        if self.rule not in RULES:
            raise ConfigError(f"rule must be one of {RULES}, got {self.rule!r}")
        if self.theta_init is not None and self.rule != "ifa":
            raise ConfigError("theta_init is only valid for rule=ifa")
        if self.rule == "ifa" and not 0 <= self.effective_theta() <= 90:
            raise ConfigError("theta_init must be in [0, 90]")
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if min(self.log_every, self.log_epochs, self.checkpoint_every) < 0:
            raise ConfigError("log_every, log_epochs and checkpoint_every must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not (self.a > 0 and self.b > 0):
            raise ConfigError("a and b must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be adam or sgd")
        if check_files and not os.path.isdir(self.data_dir):
            raise ConfigError(f"data_dir does not exist: {self.data_dir}")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def coerce(name: str, text: str):
    """Convert a raw string into the type of config field ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    default = ExperimentConfig()
    current = getattr(default, name)
    text = text.strip()
    try:
        if name == "theta_init":
            return None if text.lower() in ("", "none") else float(text)
        if isinstance(current, bool):
            return _parse_bool(text)
        if isinstance(current, list):
            item = int if name in ("hidden", "sweep_depths", "sweep_sizes") else float
            return [int(t) if item is int else _number(t) for t in text.split(",") if t.strip()]
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(_number(text))
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def _number(text: str) -> float:
    """Float literal, also accepting ``sqrt2`` and ``2^k`` / ``10^k`` forms."""
    t = text.strip().lower()
    if t in ("sqrt2", "sqrt(2)"):
        return math.sqrt(2.0)
    if "^" in t:
        base, exp = t.split("^", 1)
        return float(base) ** float(exp)
    return float(t)


def load_config(path: str | None = None, preset: str | None = None,
                overrides: dict[str, str] | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    if preset:
        try:
            text = resources.files("softalign.presets").joinpath(f"{preset}.ini").read_text()
        except FileNotFoundError as exc:
            raise ConfigError(f"unknown preset {preset!r}") from exc
        parser.read_string(text)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser.read(path)
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            values[key] = coerce(key, raw)
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw)
    return ExperimentConfig(**values)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    for name in _FIELDS:
        val = getattr(cfg, name)
        if isinstance(val, list):
            val = ",".join(repr(v) for v in val)
        elif val is None:
            val = "none"
        lines.append(f"{name} = {val}")
    return "\n".join(lines) + "\n"
