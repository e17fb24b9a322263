"""Experiment configuration: nested dataclasses with strict YAML (de)serialization.

Unknown keys and ill-typed values raise :class:`ConfigError` naming the
offending key path. ``dump(parse(text))`` re-parses to an equal config.
"""
from __future__ import annotations

import copy
import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .sparsify import SparsifyConfig


class ConfigError(ValueError):
    pass


@dataclass
class LRScheduleConfig:
    kind: str = "step"  # step | cosine | constant
    milestones: list = field(default_factory=lambda: [80, 120])  # epochs
    gamma: float = 0.1
    warmup_epochs: int = 0


@dataclass
class ScheduleConfig:
    kind: str = "cubic"  # cubic | constant
    s_final: float = 0.9
    start_epoch: int = 5
    end_epoch: int = 80


@dataclass
class TrainConfig:
    method: str = "st3"  # st3 | gmp | dense
    epochs: int = 160
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip_norm: float = 3.0
    lr_schedule: LRScheduleConfig = field(default_factory=LRScheduleConfig)
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    track_switches: bool = False
    switch_group_epochs: int = 40


@dataclass
class DataConfig:
    name: str = "synth_mixture"  # synth_gaussians | synth_mixture | mnist | cifar10
    seed: int = 0
    root: str = ""
    full: bool = False
    train_subset: int = 10000
    val_fraction: float = 0.1
    augment: bool = False
    classes: int = 10
    dim: int = 32
    n_per_class: int = 1000
    clusters: int = 16
    n_samples: int = 12500
    noise: float = 1.0


@dataclass
class ModelConfig:
    arch: str = "mlp"  # mlp | lenet | resnet
    hidden: list = field(default_factory=lambda: [128, 128])
    depth: int = 8
    width: int = 8


@dataclass
class LRRConfig:
    cycles: int = 2
    prune_fraction: float = 0.5
    inner_method: str = "st3"  # st3 | hard_prune
    dense_first_cycle: bool = True
    reset_momentum: bool = True
    reset_data_seed: bool = False


@dataclass
class AblateConfig:
    threshold_modes: list = field(default_factory=lambda: ["soft", "hard"])
    rescale: list = field(default_factory=lambda: [True, False])
    allocations: list = field(default_factory=lambda: ["global_l1", "lamp"])
    # arms whose mean accuracy falls below this fraction of the best arm (same sparsity) are flagged
    collapse_fraction: float = 0.9


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sparsities: list = field(default_factory=lambda: [0.5, 0.9, 0.99])
    out_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    lrr: LRRConfig = field(default_factory=LRRConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self) -> "ExperimentConfig":
        t = self.train
        checks = [
            (t.method in ("st3", "gmp", "dense"), "train.method", f"unknown method {t.method!r}"),
            (t.lr > 0, "train.lr", "must be positive"),
            (0 <= t.momentum < 1, "train.momentum", "must lie in [0, 1)"),
            (t.grad_clip_norm > 0, "train.grad_clip_norm", "must be positive"),
            (t.epochs >= 1, "train.epochs", "must be at least 1"),
            (t.batch_size >= 1, "train.batch_size", "must be at least 1"),
            (t.weight_decay >= 0, "train.weight_decay", "must be non-negative"),
            (t.lr_schedule.kind in ("step", "cosine", "constant"), "train.lr_schedule.kind",
             f"unknown lr schedule {t.lr_schedule.kind!r}"),
            (t.schedule.kind in ("cubic", "constant"), "train.schedule.kind",
             f"unknown sparsity schedule {t.schedule.kind!r}"),
            (0 <= t.schedule.s_final < 1, "train.schedule.s_final", "must lie in [0, 1)"),
            (t.schedule.kind != "cubic" or t.schedule.start_epoch < t.schedule.end_epoch,
             "train.schedule.start_epoch", "must precede end_epoch"),
            (self.data.name in ("synth_gaussians", "synth_mixture", "mnist", "cifar10"), "data.name",
             f"unknown dataset {self.data.name!r}"),
            (self.model.arch in ("mlp", "lenet", "resnet"), "model.arch", f"unknown arch {self.model.arch!r}"),
            (self.lrr.inner_method in ("st3", "hard_prune"), "lrr.inner_method",
             f"unknown inner method {self.lrr.inner_method!r}"),
            (self.lrr.cycles >= 1, "lrr.cycles", "must be at least 1"),
            (0 < self.lrr.prune_fraction < 1, "lrr.prune_fraction", "must lie in (0, 1)"),
            (all(0 <= s < 1 for s in self.sparsities), "sparsities", "each must lie in [0, 1)"),
        ]
        for ok, key, msg in checks:
            if not ok:
                raise ConfigError(f"{key}: {msg}")
        return self


def _check_scalar(value, typ, key):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if typ is list:
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported field type {typ}")


def from_dict(cls, data, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or '<root>'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key '{prefix}{unknown[0]}'")
    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        key = f"{prefix}{name}"
        if dataclasses.is_dataclass(typ):
            kwargs[name] = from_dict(typ, value, key + ".")
        else:
            kwargs[name] = _check_scalar(value, typ, key)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}: {e}") from e


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def parse(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML: {e}") from e
    return from_dict(ExperimentConfig, data or {}).validate()


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def canonical(cfg: ExperimentConfig) -> str:
    """Stable single-document text used inside checkpoints."""
    return yaml.safe_dump(to_dict(cfg), sort_keys=True)


def merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_overrides(cfg: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    data = to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key '{key}'")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key '{key}'")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(ExperimentConfig, data).validate()


# Reference hyperparameters (lr 0.1, momentum 0.9, clip 3.0, step decay) scaled to desk datasets.
_DESK_TRAIN = {
    "epochs": 20, "batch_size": 128, "lr": 0.1, "momentum": 0.9, "weight_decay": 1e-4,
    "grad_clip_norm": 3.0, "switch_group_epochs": 5,
    "lr_schedule": {"kind": "step", "milestones": [12, 16], "gamma": 0.1},
    "schedule": {"kind": "cubic", "s_final": 0.9, "start_epoch": 1, "end_epoch": 10},
}

PRESETS: dict[str, dict] = {
    "mlp-synth-dense": {
        "name": "mlp-synth-dense",
        "data": {"name": "synth_gaussians", "classes": 4, "dim": 16, "n_per_class": 500, "noise": 1.0},
        "model": {"arch": "mlp", "hidden": [64, 64]},
        "train": merge(_DESK_TRAIN, {"method": "dense", "epochs": 5, "lr_schedule": {"milestones": [3, 4]},
                                     "schedule": {"s_final": 0.0}}),
    },
    "mlp-synth-st3": {
        "name": "mlp-synth-st3",
        "model": {"arch": "mlp", "hidden": [128, 128]},
        "train": merge(_DESK_TRAIN, {"method": "st3"}),
    },
    "mlp-synth-gmp": {
        "name": "mlp-synth-gmp",
        "model": {"arch": "mlp", "hidden": [128, 128]},
        "train": merge(_DESK_TRAIN, {"method": "gmp"}),
    },
    "lenet-mnist-st3": {
        "name": "lenet-mnist-st3",
        "data": {"name": "mnist"},
        "model": {"arch": "lenet"},
        "train": merge(_DESK_TRAIN, {"method": "st3"}),
    },
    "resnet-cifar-st3": {
        "name": "resnet-cifar-st3",
        "data": {"name": "cifar10", "augment": True},
        "model": {"arch": "resnet", "depth": 20, "width": 16},
        "train": {"method": "st3", "epochs": 160, "batch_size": 128, "lr": 0.1, "momentum": 0.9,
                  "weight_decay": 1e-4, "grad_clip_norm": 3.0,
                  "lr_schedule": {"kind": "step", "milestones": [80, 120], "gamma": 0.1},
                  "schedule": {"kind": "cubic", "s_final": 0.9, "start_epoch": 5, "end_epoch": 80}},
    },
}


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
    return from_dict(ExperimentConfig, PRESETS[name]).validate()


def load(source: str) -> ExperimentConfig:
    """Load a config from a YAML file path or a preset name."""
    p = Path(source)
    if p.is_file():
        return parse(p.read_text())
    if source in PRESETS:
        return preset(source)
    raise ConfigError(f"config {source!r} is neither a file nor a preset")
