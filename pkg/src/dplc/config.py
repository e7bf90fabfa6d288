"""Experiment configuration: nested YAML with strict key checking and presets."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from dplc.models import ArchConfig
from dplc.training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


TRAINER_SECTIONS = ("wae-mmd", "wgan-gp", "wpp", "codec", "cae", "gc")


@dataclass
class DatasetConfig:
    kind: str = "rings"
    n: int = 20_000
    params: dict = field(default_factory=dict)
    path: str | None = None
    resolution: int = 64
    test_fraction: float = 0.1
    max_test: int = 10_000


@dataclass
class LambdaConfig:
    mmd_base: float = 100.0
    gc_base: float = 1.0
    reference_rate: float = 2.0


@dataclass
class SweepConfig:
    methods: list[str] = field(default_factory=lambda: ["dplc-wpp", "cae"])
    rates: list[float] = field(default_factory=lambda: [0, 1, 2, 4, 8])
    n_eval: int = 10_000
    pv_codes: int = 256
    pv_draws: int = 100
    embedder_features: int = 64


@dataclass
class ExperimentConfig:
    seed: int = 0
    output: str = "runs"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ArchConfig = field(default_factory=ArchConfig)
    trainer: dict[str, TrainConfig] = field(default_factory=dict)
    lambdas: LambdaConfig = field(default_factory=LambdaConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def train_config(self, section: str) -> TrainConfig:
        if section not in TRAINER_SECTIONS:
            raise ConfigError(f"trainer.{section}", "unknown trainer section")
        return replace_seed(self.trainer.get(section, TrainConfig()), self.seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        for section in d["trainer"].values():
            section["lr_milestones"] = list(section["lr_milestones"])
        return d


def replace_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    out = copy.copy(cfg)
    out.seed = seed
    return out


# --------------------------------------------------------------------------
# presets


def _toy_trainer() -> dict:
    gen = dict(iterations=2000, batch_size=128, lr_milestones=[1200, 1700])
    joint = dict(iterations=1500, batch_size=256, lr=1e-3, beta2=0.999, lr_milestones=[900, 1300])
    return {
        "wae-mmd": dict(gen, lr_encoder=1e-3, lr_generator=1e-3, beta2=0.999, lambda_mmd=100.0),
        "wgan-gp": dict(gen, lr_generator=1e-4, lr_critic=1e-4, beta2=0.9, batch_size=64,
                        n_critic=5, lr_milestones=[]),
        "wpp": dict(gen, lr_encoder=3e-4, lr_generator=3e-4, lr_critic=1e-4, gamma=1e-3,
                    n_critic=5),
        # the zero-rate mapper needs the longer schedule to match P_Z closely
        "codec": dict(joint, iterations=3000, lr_milestones=[1800, 2600]),
        "cae": dict(joint),
        # one critic step per joint step keeps the toy sweep within minutes
        "gc": dict(joint, n_critic=1, lr_critic=1e-4),
    }


def _image_trainer(lam: float, scale: int, gamma: float) -> dict:
    def ms(*its):
        return [i * scale for i in its]

    return {
        "wae-mmd": dict(lr_encoder=1e-3, lr_generator=1e-3, beta1=0.5, beta2=0.999,
                        lambda_mmd=lam, batch_size=256, iterations=41_000 * scale,
                        lr_milestones=ms(22_000, 38_000)),
        "wgan-gp": dict(lr_generator=1e-4, lr_critic=1e-4, beta1=0.5, beta2=0.9, lambda_gp=10.0,
                        batch_size=64, iterations=100_000 * scale, n_critic=5),
        "wpp": dict(lr_encoder=3e-4, lr_generator=3e-4, lr_critic=1e-4, beta1=0.5, beta2=0.999,
                    lambda_mmd=lam, lambda_gp=10.0, gamma=gamma, batch_size=256,
                    iterations=25_000 * scale, lr_milestones=ms(15_000, 21_000)),
        "codec": dict(lr=1e-3, beta1=0.5, beta2=0.999, batch_size=256,
                      iterations=41_000 * scale, lr_milestones=ms(22_000, 38_000)),
        "cae": dict(lr=1e-3, beta1=0.5, beta2=0.999, batch_size=256,
                    iterations=41_000 * scale, lr_milestones=ms(22_000, 38_000)),
        "gc": dict(lr=3e-4, lr_critic=1e-4, beta1=0.5, beta2=0.999, lambda_gp=10.0,
                   batch_size=256, n_critic=5, iterations=25_000 * scale,
                   lr_milestones=ms(15_000, 21_000)),
    }


PRESETS: dict[str, dict] = {
    "toy2d": {
        "seed": 0,
        "dataset": {"kind": "rings", "n": 100_000,
                    "params": {"n_modes": 8, "radius": 2.0, "std": 0.1}},
        "model": {"family": "mlp", "latent_dim": 2, "hidden": 128, "depth": 3, "res_blocks": 2},
        "trainer": _toy_trainer(),
        "lambdas": {"mmd_base": 100.0, "gc_base": 1e-2, "reference_rate": 8.0},
        "sweep": {"methods": ["dplc-wpp", "cae", "gc"], "rates": [0, 1, 2, 4, 8]},
    },
    "celeba-paper": {
        "dataset": {"kind": "image-folder", "path": "data/celeba", "resolution": 64},
        "model": {"family": "conv-dcgan", "latent_dim": 128, "res_blocks": 2},
        "trainer": _image_trainer(100.0, 1, 2.5e-5),
        "lambdas": {"mmd_base": 150.0, "gc_base": 2.5e-5, "reference_rate": 2048},
        "sweep": {"methods": ["dplc-wpp", "cae", "gc"], "rates": [0, 32, 128, 512, 2048]},
    },
    "lsun-paper": {
        "dataset": {"kind": "image-folder", "path": "data/lsun-bedrooms", "resolution": 64},
        "model": {"family": "conv-dcgan", "latent_dim": 512, "res_blocks": 4},
        "trainer": _image_trainer(300.0, 2, 1e-4),
        "lambdas": {"mmd_base": 800.0, "gc_base": 7.5e-5, "reference_rate": 4096},
        "sweep": {"methods": ["dplc-wpp", "cae", "gc"], "rates": [0, 32, 128, 512, 2048, 4096]},
    },
}


# --------------------------------------------------------------------------
# strict construction


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else str(key), "unknown key")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if cls is ExperimentConfig and key in ("dataset", "lambdas", "sweep", "model"):
            target = {"dataset": DatasetConfig, "lambdas": LambdaConfig, "sweep": SweepConfig,
                      "model": ArchConfig}[key]
            kwargs[key] = _build(target, value, sub)
        elif cls is ExperimentConfig and key == "trainer":
            if not isinstance(value, dict):
                raise ConfigError(sub, "expected a mapping")
            trainers = {}
            for name, section in value.items():
                if name not in TRAINER_SECTIONS:
                    raise ConfigError(f"{sub}.{name}", "unknown trainer section")
                trainers[name] = _build(TrainConfig, section, f"{sub}.{name}")
            kwargs[key] = trainers
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(data: dict) -> ExperimentConfig:
    """Build a config; a top-level ``preset`` key names the defaults to start from."""
    data = dict(data or {})
    preset = data.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError("preset", f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = _merge(PRESETS[preset], data)
    cfg = _build(ExperimentConfig, data, "")
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    from dplc.evaluation import METHOD_TAGS
    for m in cfg.sweep.methods:
        if m not in METHOD_TAGS:
            raise ConfigError("sweep.methods", f"unknown method {m!r}")
    rates = [float(r) for r in cfg.sweep.rates]
    if any(r < 0 for r in rates) or len(set(rates)) != len(rates):
        raise ConfigError("sweep.rates", "rates must be distinct and nonnegative")
    if cfg.dataset.kind == "image-folder" and not cfg.dataset.path:
        raise ConfigError("dataset.path", "image datasets need a folder path")


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("", f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("", f"cannot parse {p}: {exc}") from exc
    return config_from_dict(data or {})


def preset_config(name: str, **overrides) -> ExperimentConfig:
    return config_from_dict({"preset": name, **overrides})


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
