"""Shapley contribution scoring of client updates.

The coalition game: ``v(S) = L(base) - L(base + mean(S))`` where ``L`` is a
validation loss and ``mean(S)`` the unweighted mean of the coalition's update
vectors (``v(empty) = 0``). Monte-Carlo estimation walks random permutations
once each, keeping the prefix mean incrementally; exact enumeration over all
2^N coalitions serves as the oracle for small N.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ConfigurationError, SizeError
from .model import ParameterSet, _run_forward
from .rng import stream

EXACT_MAX_CLIENTS = 12


@dataclass
class ShapleyEstimate:
    phi: np.ndarray
    samples_used: int
    mode: str
    value_empty: float
    value_full: float
    stderr: np.ndarray | None = None


class UpdateGame:
    """Coalition game over update vectors with an arbitrary loss callable.

    ``loss(delta)`` evaluates the validation loss after shifting the base
    model by ``delta`` (a float64 vector over the shared coordinates).

    A coalition applies the mean of its members' updates. An all-zero update
    counts as a client that contributed nothing: it is left out of the mean,
    so it is a null player and gets exactly zero value.
    """

    def __init__(self, updates, loss):
        self.G = np.stack([np.asarray(getattr(u, "vector", u), dtype=np.float64) for u in updates])
        self.n = len(self.G)
        self.active = np.any(self.G != 0, axis=1)
        self._loss = loss
        self.base_loss = float(loss(np.zeros(self.G.shape[1])))

    def loss(self, delta) -> float:
        return float(self._loss(delta))

    def value(self, members) -> float:
        members = [m for m in members if self.active[m]]
        if not members:
            return 0.0
        return self.base_loss - self.loss(self.G[members].mean(axis=0))


VALUE_KINDS = ("loss", "accuracy")


def model_loss_fn(base: ParameterSet, val, bn_local: bool = True, kind: str = "loss"):
    """Eval-mode cross-entropy of ``base`` shifted on its shared coordinates.

    With ``kind="accuracy"`` the returned "loss" is the negated validation
    accuracy, so coalition values become accuracy improvements.
    """
    if kind not in VALUE_KINDS:
        raise ConfigurationError(f"unknown Shapley value kind {kind!r}")
    layout = base.layout
    mask = layout.shared_mask(bn_local)
    base_values = base.values.astype(np.float64)
    stats = base.bn_stats.astype(np.float64)
    x = np.asarray(val.features, dtype=np.float64)
    y = np.asarray(val.labels, dtype=np.int64)

    def loss(delta):
        values = base_values.copy()
        # stored parameters are float32; round the shifted model the same way
        values[mask] = (base.values[mask].astype(np.float64) + delta).astype(np.float32)
        ce, logits, _ = _run_forward(layout, values, stats, x, y, False)
        if kind == "accuracy":
            return -float((logits.argmax(axis=1) == y).mean())
        return ce

    return loss


def coalition_value(base: ParameterSet, members, val, bn_local: bool = True) -> float:
    """``L(base, val) - L(base + mean(members), val)``; 0 for an empty coalition.

    All-zero updates are left out of the mean (see UpdateGame).
    """
    members = list(members)
    if not members:
        return 0.0
    return UpdateGame(members, model_loss_fn(base, val, bn_local)).value(range(len(members)))


def _permutation_walk(game: UpdateGame, perm) -> np.ndarray:
    contrib = np.zeros(game.n)
    prefix = np.zeros(game.G.shape[1])
    prev = game.base_loss
    j = 0
    for k in perm:
        if not game.active[k]:
            continue
        j += 1
        prefix += (game.G[k] - prefix) / j
        cur = game.loss(prefix)
        contrib[k] = prev - cur
        prev = cur
    return contrib


def mc_shapley_game(game: UpdateGame, M: int, seed: int, *labels, workers: int = 1) -> ShapleyEstimate:
    if M < 1:
        raise ConfigurationError("need at least one permutation")

    def one(m):
        perm = stream(seed, "shapley-perm", *labels, m).permutation(game.n)
        return _permutation_walk(game, perm)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, range(M)))
    else:
        rows = [one(m) for m in range(M)]
    # rows are in permutation-index order regardless of worker scheduling
    table = np.stack(rows)
    phi = table.sum(axis=0) / M
    stderr = table.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.full(game.n, np.inf)
    return ShapleyEstimate(phi, M, "monte_carlo", 0.0, game.value(range(game.n)), stderr)


def exact_shapley_game(game: UpdateGame) -> ShapleyEstimate:
    n = game.n
    if n > EXACT_MAX_CLIENTS:
        raise SizeError(f"exact Shapley limited to {EXACT_MAX_CLIENTS} clients, got {n}")
    values = {}
    for r in range(n + 1):
        for S in combinations(range(n), r):
            values[S] = game.value(S)
    fact = [math.factorial(i) for i in range(n + 1)]
    phi = np.zeros(n)
    for k in range(n):
        others = [j for j in range(n) if j != k]
        for r in range(n):
            w = fact[r] * fact[n - r - 1] / fact[n]
            for S in combinations(others, r):
                with_k = tuple(sorted(S + (k,)))
                phi[k] += w * (values[with_k] - values[S])
    return ShapleyEstimate(phi, 2 ** n, "exact", 0.0, values[tuple(range(n))])


def mc_shapley(base: ParameterSet, updates, val, M: int, seed: int, *labels, workers: int = 1,
               bn_local: bool = True, value: str = "loss") -> ShapleyEstimate:
    """Permutation-sampling Shapley estimate with ``M`` seeded permutations."""
    game = UpdateGame(updates, model_loss_fn(base, val, bn_local, value))
    return mc_shapley_game(game, M, seed, *labels, workers=workers)


def exact_shapley(base: ParameterSet, updates, val, bn_local: bool = True, value: str = "loss") -> ShapleyEstimate:
    game = UpdateGame(updates, model_loss_fn(base, val, bn_local, value))
    return exact_shapley_game(game)


def suspicion(f4_values, f2_values) -> bool:
    """True when any update is 3x the median norm or points away from the reference."""
    f4 = np.asarray(f4_values, dtype=np.float64)
    f2 = np.asarray(f2_values, dtype=np.float64)
    return bool((f4 > 3.0 * np.median(f4)).any() or (f2 < 0).any())


def adaptive_samples(attack_suspected: bool, adaptive: bool = True) -> int:
    if not adaptive:
        return 100
    return 200 if attack_suspected else 50


@dataclass
class SmoothedContribution:
    beta: float = 0.3
    values: dict = field(default_factory=dict)

    def get(self, client_id: int) -> float:
        return self.values.get(client_id, 0.0)


def smooth_f6(state: SmoothedContribution, phi, client_ids=None) -> tuple:
    """``f6 <- beta * phi + (1 - beta) * f6`` per client; returns ``(state, f6 list)``."""
    phi = list(phi)
    ids = list(range(len(phi))) if client_ids is None else list(client_ids)
    out = []
    for cid, p in zip(ids, phi):
        new = state.beta * float(p) + (1 - state.beta) * state.get(cid)
        state.values[cid] = new
        out.append(new)
    return state, out
