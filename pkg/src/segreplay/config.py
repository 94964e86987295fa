"""Experiment configuration: presets, strict file loading, and hashing.

Config files are YAML with nested sections mirroring the dataclasses below.
Unknown keys are hard errors so typos cannot silently fall back to defaults.
The config hash covers every field that affects computed results; the output
directory is excluded so the same experiment hashes identically wherever its
results land.
"""

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adapter import AdapterConfig
from .denoiser import ArchConfig
from .errors import ConfigurationError
from .segmenter import SegArchConfig
from .taskgen import SuiteConfig, TaskSpec

CONFIG_VERSION = 1

METHODS = ("CGR", "CGR-BJD", "CGR-TOA", "FineTune", "JointTrain")


@dataclass
class DiffusionConfig:
    steps: int = 200  # forward steps K
    beta_min: float = 1e-4
    beta_max: float = 0.02


@dataclass
class ReplayConfig:
    alpha: float = 0.25
    beta: float = 0.25
    replay_count: int = 256
    ddim_steps: int = 50

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"alpha/beta must be >= 0, got ({self.alpha}, {self.beta})")
        if self.replay_count < 0:
            raise ConfigurationError(f"replay_count must be >= 0, got {self.replay_count}")


@dataclass
class BudgetConfig:
    seg_steps: int = 2000  # segmenter optimizer steps per round
    gen_steps: int = 8000  # generator optimizer steps per round
    seg_batch: int = 16
    gen_batch: int = 8
    seg_lr: float = 2e-4
    gen_lr: float = 1e-4


@dataclass
class ExperimentConfig:
    version: int = CONFIG_VERSION
    preset: str = "desk"
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    budgets: BudgetConfig = field(default_factory=BudgetConfig)
    denoiser: ArchConfig = field(default_factory=ArchConfig)
    segmenter: SegArchConfig = field(default_factory=SegArchConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    orders: list = field(default_factory=lambda: ["CFP"])
    methods: list = field(default_factory=lambda: ["CGR"])
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(
                f"config version {self.version} unsupported (expected {CONFIG_VERSION})"
            )
        if not self.seeds:
            raise ConfigurationError("seeds list must be non-empty")
        for method in self.methods:
            if method not in METHODS:
                raise ConfigurationError(
                    f"unknown method {method!r}; valid methods: {', '.join(METHODS)}"
                )
        if not self.orders:
            raise ConfigurationError("orders list must be non-empty")
        self.replay.validate()
        self.denoiser.validate()
        self.segmenter.validate()
        if self.denoiser.c_max != self.suite.channel_budget:
            raise ConfigurationError(
                f"denoiser c_max {self.denoiser.c_max} != suite channel_budget "
                f"{self.suite.channel_budget}"
            )
        if self.adapter.dim != self.denoiser.embed_dim:
            raise ConfigurationError(
                f"adapter dim {self.adapter.dim} != denoiser embed_dim {self.denoiser.embed_dim}"
            )
        if not 1 <= self.replay.ddim_steps <= self.diffusion.steps:
            raise ConfigurationError(
                f"ddim_steps {self.replay.ddim_steps} outside [1, {self.diffusion.steps}]"
            )


def preset_config(name: str) -> ExperimentConfig:
    """Named presets: `desk` runs on a small CPU budget, `paper` mirrors the
    full-scale schedule hyperparameters."""
    if name == "desk":
        return ExperimentConfig(
            preset="desk",
            suite=SuiteConfig(image_size=24, samples_per_task=160),
            diffusion=DiffusionConfig(steps=200),
            replay=ReplayConfig(alpha=0.25, beta=0.25, replay_count=128, ddim_steps=25),
            budgets=BudgetConfig(
                seg_steps=400, gen_steps=900, seg_batch=16, gen_batch=8,
                seg_lr=2e-4, gen_lr=2e-4,
            ),
        )
    if name == "paper":
        return ExperimentConfig(
            preset="paper",
            suite=SuiteConfig(image_size=32, samples_per_task=320),
            diffusion=DiffusionConfig(steps=1000),
            replay=ReplayConfig(alpha=0.25, beta=0.25, replay_count=3000, ddim_steps=50),
            budgets=BudgetConfig(
                seg_steps=40000, gen_steps=400000, seg_batch=16, gen_batch=8,
                seg_lr=2e-4, gen_lr=1e-4,
            ),
        )
    raise ConfigurationError(f"unknown preset {name!r}; valid presets: desk, paper")


_SECTION_TYPES = {
    "suite": SuiteConfig,
    "diffusion": DiffusionConfig,
    "replay": ReplayConfig,
    "budgets": BudgetConfig,
    "denoiser": ArchConfig,
    "segmenter": SegArchConfig,
    "adapter": AdapterConfig,
}

_TUPLE_FIELDS = {"widths", "fractions"}


def _apply_section(obj, data: dict, path: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigurationError(f"unknown config key {path}{key!r}")
        if key in _TUPLE_FIELDS and isinstance(value, list):
            value = tuple(value)
        updates[key] = value
    return dataclasses.replace(obj, **updates)


def config_from_dict(data: dict, base: "ExperimentConfig | None" = None) -> ExperimentConfig:
    """Strictly merge a nested dict over a base config (preset or defaults)."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"config root must be a mapping, got {type(data).__name__}")
    data = dict(data)
    preset = data.pop("preset", None)
    if base is None:
        base = preset_config(preset) if preset else ExperimentConfig()
    elif preset is not None:
        base = dataclasses.replace(base, preset=preset)

    cfg = base
    for key, value in data.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config section {key!r} must be a mapping")
            section = _apply_section(getattr(cfg, key), value, f"{key}.")
            cfg = dataclasses.replace(cfg, **{key: section})
        elif key in ("version", "orders", "methods", "seeds", "output_dir"):
            cfg = dataclasses.replace(cfg, **{key: value})
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config file {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of all result-affecting fields (everything except output_dir)."""
    payload = config_to_dict(cfg)
    payload.pop("output_dir", None)
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_canon_default)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def _canon_default(value):
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"unhashable config value {value!r}")


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))


def resolve_order(order: str, specs: "list[TaskSpec]") -> "list[int]":
    """Turn an order string of task codes (e.g. 'CFP') into task ids."""
    by_code = {spec.code: spec.task_id for spec in specs}
    if len(set(order)) != len(order):
        raise ConfigurationError(f"order {order!r} repeats a task code")
    if set(order) != set(by_code):
        raise ConfigurationError(
            f"order {order!r} must be a permutation of task codes {''.join(sorted(by_code))}"
        )
    return [by_code[ch] for ch in order]
