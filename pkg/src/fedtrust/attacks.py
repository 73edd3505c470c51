"""Byzantine attack models and the malicious-client schedule.

Gradient attacks transform a finished honest update; label flipping corrupts
a client's training labels once, before any training happens.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .errors import ConfigurationError, ThreatModelError, UsageError
from .model import GradientUpdate
from .rng import stream

GRADIENT_ATTACKS = ("scaling", "partial_scaling", "sign_flip", "additive_noise")
ATTACK_KINDS = ("none",) + GRADIENT_ATTACKS + ("label_flip",)
MAX_MALICIOUS_FRACTION = 0.3


@dataclass
class AttackSpec:
    kind: str = "none"
    scale: float = 10.0           # scaling
    partial_scale: float = 5.0    # partial_scaling
    mask_fraction: float = 0.5
    sigma: float = 10.0           # additive_noise (5.0 for MNIST)
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.mask_fraction <= 1 or not 0 <= self.flip_prob <= 1:
            raise ConfigurationError("mask_fraction and flip_prob must lie in [0, 1]")
        if self.sigma < 0:
            raise ConfigurationError("noise sigma must be >= 0")

    @property
    def is_gradient_attack(self) -> bool:
        return self.kind in GRADIENT_ATTACKS

    @classmethod
    def for_dataset(cls, kind: str, dataset: str, seed: int = 0) -> "AttackSpec":
        return cls(kind=kind, sigma=5.0 if dataset == "mnist" else 10.0, seed=seed)


def apply_gradient_attack(spec: AttackSpec, g: GradientUpdate, round_index: int | None = None) -> GradientUpdate:
    """Return a new, attack-tagged update; ``g`` is left untouched."""
    if not spec.is_gradient_attack:
        raise UsageError(f"{spec.kind!r} is not a gradient attack")
    r = g.round if round_index is None else round_index
    v = np.asarray(g.vector)
    if spec.kind == "scaling":
        out = v * np.float32(spec.scale)
    elif spec.kind == "sign_flip":
        out = -v
    elif spec.kind == "partial_scaling":
        rng = stream(spec.seed, "attack-mask", g.client_id, r)
        k = int(round(spec.mask_fraction * v.size))
        mask = np.zeros(v.size, dtype=bool)
        mask[rng.choice(v.size, size=k, replace=False)] = True
        out = v.copy()
        out[mask] = v[mask] * np.float32(spec.partial_scale)
    else:
        rng = stream(spec.seed, "attack-noise", g.client_id, r)
        out = (v.astype(np.float64) + rng.normal(0.0, spec.sigma, size=v.size)).astype(np.float32)
    return g.with_vector(out, attack=spec.kind)


def apply_label_flip(ds: LabeledDataset, flip_prob: float, classes: int, seed: int) -> LabeledDataset:
    """Each label independently, with probability ``flip_prob``, becomes a
    uniformly chosen *different* class."""
    if classes < 2:
        raise ConfigurationError("label flipping needs at least two classes")
    rng = stream(seed, "label-flip")
    flip = rng.random(len(ds)) < flip_prob
    shift = rng.integers(1, classes, size=len(ds))
    labels = ds.labels.copy()
    labels[flip] = (labels[flip] + shift[flip]) % classes
    return LabeledDataset(ds.features, labels, ds.class_count)


@dataclass
class AttackSchedule:
    malicious_ids: frozenset = field(default_factory=frozenset)
    fraction: float = 0.0
    conformant: bool = True

    def is_malicious(self, client_id: int) -> bool:
        return client_id in self.malicious_ids


def make_schedule(clients: int, fraction: float, seed: int, allow_over_threshold: bool = False) -> AttackSchedule:
    """Pick ``floor(fraction * clients)`` distinct malicious clients uniformly.

    Fractions above 0.3 break the threat model and are refused unless
    ``allow_over_threshold`` is set, in which case the schedule is marked
    non-conformant.
    """
    if not 0 <= fraction <= 1:
        raise ConfigurationError("malicious fraction must lie in [0, 1]")
    conformant = fraction <= MAX_MALICIOUS_FRACTION + 1e-12
    if not conformant and not allow_over_threshold:
        raise ThreatModelError(f"malicious fraction {fraction} exceeds {MAX_MALICIOUS_FRACTION}")
    count = int(np.floor(fraction * clients + 1e-9))
    rng = stream(seed, "schedule")
    ids = rng.choice(clients, size=count, replace=False) if count else []
    return AttackSchedule(frozenset(int(i) for i in ids), count / clients if clients else 0.0, conformant)
