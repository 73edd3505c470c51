"""Experiment configuration: nested dataclasses with a strict, versioned JSON form.

``load_config`` rejects unknown keys at every level, and ``to_dict`` /
``from_dict`` round-trip losslessly. Two named presets exist: ``desk``
(small, runs in seconds to minutes) and ``paper`` (the larger published
settings).
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import AGGREGATOR_KINDS
from .attacks import ATTACK_KINDS
from .errors import ConfigurationError

SCHEMA_VERSION = 1
DATA_DIR_ENV = "FEDTRUST_DATA_DIR"


@dataclass
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | mnist
    classes: int = 10
    dim: int = 20
    samples: int = 8000
    separation: float = 6.0
    data_dir: str = ""  # mnist only; falls back to $FEDTRUST_DATA_DIR

    def resolved_data_dir(self) -> str:
        return self.data_dir or os.environ.get(DATA_DIR_ENV, "")


@dataclass
class ModelConfig:
    kind: str = "logreg"  # logreg | mlp_bn
    hidden: list = field(default_factory=list)  # empty for logreg


@dataclass
class PartitionConfig:
    kind: str = "iid"
    alpha: float = 0.5
    ratio: float = 0.9
    sigma: float = 0.5


@dataclass
class AttackConfig:
    kind: str = "none"
    fraction: float = 0.0
    allow_over_threshold: bool = False
    scale: float = 10.0
    partial_scale: float = 5.0
    mask_fraction: float = 0.5
    sigma: float = 10.0
    flip_prob: float = 0.5


@dataclass
class AggregatorConfig:
    kind: str = "fedavg"
    prox_mu: float = 0.01
    krum_f: int = 3
    weiszfeld_iters: int = 100
    weiszfeld_tol: float = 1e-6


@dataclass
class VaeSettings:
    enabled: bool = True
    train_interval: int = 20
    min_buffer: int = 64
    epochs: int = 50
    buffer_capacity: int = 512
    bootstrap_rounds: int = 20


@dataclass
class AttentionSettings:
    chunk_count: int = 64
    heads: int = 2
    model_dim: int = 32
    fused_dim: int = 16
    lr: float = 1e-3
    steps: int = 1
    optimizer: str = "sgd"  # sgd | adam


@dataclass
class DqnSettings:
    hidden: list = field(default_factory=lambda: [64, 32])
    dropout: float = 0.0
    lr: float = 3e-4
    gamma: float = 0.95
    batch_size: int = 64
    update_interval: int = 10
    min_replay: int = 64
    steps_per_update: int = 1
    target_interval: int = 100
    eps_start: float = 0.3
    eps_end: float = 0.05
    eps_decay_rounds: int = 100


@dataclass
class DefenseConfig:
    fingerprint: bool = False
    shapley: bool = False
    shapley_samples: int = 100
    shapley_adaptive: bool = True
    shapley_workers: int = 1
    shapley_value: str = "loss"  # loss | accuracy
    smoothing_beta: float = 0.3
    rl: bool = False
    reward_labels: str = "ground_truth"  # ground_truth | shapley_sign
    reward_coeffs: list = field(default_factory=lambda: [1.0, 2.0, 3.0, 0.5])
    vae: VaeSettings = field(default_factory=VaeSettings)
    attention: AttentionSettings = field(default_factory=AttentionSettings)
    dqn: DqnSettings = field(default_factory=DqnSettings)


@dataclass
class QuantizationConfig:
    enabled: bool = False
    bits: int = 8


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    clients: int = 10
    rounds: int = 15
    local_epochs: int = 3
    batch_size: int = 64
    lr: float = 0.01
    lr_schedule: str = "cosine"  # cosine | constant
    weight_decay: float = 5e-5
    participation: float = 1.0
    normalization: str = "per_client"  # per_client | none
    server_val_size: int = 1000
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    quantization: QuantizationConfig = field(default_factory=QuantizationConfig)
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        _check(self.schema_version == SCHEMA_VERSION, f"unsupported schema_version {self.schema_version}")
        _check(self.dataset.kind in ("synthetic", "mnist"), f"unknown dataset {self.dataset.kind!r}")
        _check(self.dataset.classes >= 2 and self.dataset.dim >= 1 and self.dataset.samples > 0,
               "dataset sizes must be positive (classes >= 2)")
        _check(self.model.kind in ("logreg", "mlp_bn"), f"unknown model {self.model.kind!r}")
        _check((self.model.kind == "logreg") == (len(self.model.hidden) == 0),
               "logreg takes no hidden layers; mlp_bn needs at least one")
        _check(all(int(h) > 0 for h in self.model.hidden), "hidden sizes must be positive")
        _check(self.clients >= 2, "need at least two clients")
        _check(self.rounds >= 1, "rounds must be >= 1")
        _check(1 <= self.local_epochs <= 64, "local_epochs must lie in [1, 64]")
        _check(self.batch_size >= 1, "batch_size must be >= 1")
        _check(self.lr > 0 and self.weight_decay >= 0, "lr must be > 0 and weight_decay >= 0")
        _check(self.lr_schedule in ("cosine", "constant"), f"unknown lr_schedule {self.lr_schedule!r}")
        _check(self.participation == 1.0, "only full participation is supported")
        _check(self.normalization in ("per_client", "none"), f"unknown normalization {self.normalization!r}")
        _check(self.server_val_size >= 1, "server_val_size must be >= 1")
        _check(self.partition.kind in ("iid", "dirichlet", "label_skew", "quantity_skew"),
               f"unknown partition {self.partition.kind!r}")
        _check(self.attack.kind in ATTACK_KINDS, f"unknown attack {self.attack.kind!r}")
        _check(0 <= self.attack.fraction <= 1, "attack fraction must lie in [0, 1]")
        _check(self.aggregator.kind in AGGREGATOR_KINDS, f"unknown aggregator {self.aggregator.kind!r}")
        d = self.defense
        _check(d.shapley_samples >= 1 and d.shapley_workers >= 1, "shapley samples/workers must be >= 1")
        _check(d.shapley_value in ("loss", "accuracy"), f"unknown shapley_value {d.shapley_value!r}")
        _check(0 < d.smoothing_beta <= 1, "smoothing_beta must lie in (0, 1]")
        _check(d.reward_labels in ("ground_truth", "shapley_sign"), f"unknown reward_labels {d.reward_labels!r}")
        _check(len(d.reward_coeffs) == 4, "reward_coeffs needs four entries")
        _check(d.attention.model_dim % d.attention.heads == 0, "attention model_dim must divide by heads")
        _check(d.attention.optimizer in ("sgd", "adam"), f"unknown attention optimizer {d.attention.optimizer!r}")
        _check(0 <= d.dqn.dropout < 1, "dqn dropout must lie in [0, 1)")
        _check(d.vae.train_interval >= 1 and d.dqn.update_interval >= 1 and d.dqn.target_interval >= 1,
               "intervals must be >= 1")
        _check(1 <= self.quantization.bits <= 16, "quantization bits must lie in [1, 16]")
        if (d.rl or d.shapley) and not d.fingerprint:
            raise ConfigurationError("rl and shapley need fingerprint enabled")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @property
    def defended(self) -> bool:
        return self.defense.fingerprint


def _check(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigurationError(message)


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path or 'config'} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigurationError(f"unknown key(s) at {path or 'top level'}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        sub = _NESTED.get((cls, key))
        if sub is not None:
            kwargs[key] = _build(sub, value, f"{path}.{key}" if path else key)
        else:
            kwargs[key] = _coerce(f.type, value, f"{path}.{key}" if path else key)
    return cls(**kwargs)


def _coerce(type_name: str, value, where: str):
    ok = {
        "bool": isinstance(value, bool),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "str": isinstance(value, str),
        "list": isinstance(value, list),
    }.get(type_name, True)
    if not ok:
        raise ConfigurationError(f"{where}: expected {type_name}, got {type(value).__name__}")
    if type_name == "float":
        return float(value)
    if type_name == "list":
        return list(value)
    return value


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "partition"): PartitionConfig,
    (ExperimentConfig, "attack"): AttackConfig,
    (ExperimentConfig, "aggregator"): AggregatorConfig,
    (ExperimentConfig, "defense"): DefenseConfig,
    (ExperimentConfig, "quantization"): QuantizationConfig,
    (DefenseConfig, "vae"): VaeSettings,
    (DefenseConfig, "attention"): AttentionSettings,
    (DefenseConfig, "dqn"): DqnSettings,
}


def from_dict(data: dict) -> ExperimentConfig:
    if "schema_version" not in data:
        raise ConfigurationError("config is missing schema_version")
    return _build(ExperimentConfig, data, "").validate()


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_json() + "\n")


def replace(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    """Deep copy with dotted-path overrides, e.g. ``replace(cfg, **{"attack.kind": "scaling"})``."""
    data = cfg.to_dict()
    for dotted, value in changes.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigurationError(f"unknown config path {dotted!r}")
        node[leaf] = value
    return from_dict(data)


def enable_defense(cfg: ExperimentConfig) -> ExperimentConfig:
    """The full trust pipeline: FedBNP aggregation with every defence stage on."""
    return replace(cfg, **{"aggregator.kind": "fedbnp", "defense.fingerprint": True,
                           "defense.shapley": True, "defense.rl": True, "defense.vae.enabled": True})


def desk_preset(**changes) -> ExperimentConfig:
    """Small synthetic setting used by tests and the acceptance suite."""
    cfg = ExperimentConfig(
        name="desk",
        defense=DefenseConfig(
            vae=VaeSettings(train_interval=5, min_buffer=32, epochs=30, bootstrap_rounds=5),
            attention=AttentionSettings(lr=3e-3, steps=20, optimizer="adam"),
            dqn=DqnSettings(update_interval=1, min_replay=32, steps_per_update=5),
        ),
    )
    return replace(cfg, **changes) if changes else cfg.validate()


def paper_preset(**changes) -> ExperimentConfig:
    """The larger published settings (MNIST MLP, 30 rounds, 5 local epochs)."""
    cfg = ExperimentConfig(
        name="paper",
        dataset=DatasetConfig(kind="mnist", classes=10, dim=784),
        model=ModelConfig(kind="mlp_bn", hidden=[256, 128]),
        rounds=30,
        local_epochs=5,
        lr=1e-4,
        defense=DefenseConfig(
            attention=AttentionSettings(heads=8, model_dim=256),
            dqn=DqnSettings(hidden=[512, 256, 128], dropout=0.3),
        ),
    )
    return replace(cfg, **changes) if changes else cfg.validate()


PRESETS = {"desk": desk_preset, "paper": paper_preset}
