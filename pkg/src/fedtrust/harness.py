"""End-to-end federated simulation: data setup, the round loop and grids.

One round, in order: local proximal training on every client, gradient
attacks on the malicious ones, optional QSGD round trip, the server
reference update, fingerprints, Shapley scoring with f6 smoothing, the
attention/RL trust assessment, aggregation, evaluation, reward and the
scheduled VAE/DQN/attention training.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import AggregatorSpec, aggregate, dequantize, quantize
from .attacks import AttackSpec, apply_gradient_attack, apply_label_flip, make_schedule
from .config import ExperimentConfig
from .data import (LabeledDataset, PartitionScheme, concat, intensity_normalize, load_idx, make_synthetic,
                   partition, stratified_sample, stratified_split)
from .errors import DataError, FedTrustError, RoundError
from .fingerprint import VaeConfig, VaeModel, admit_to_buffer, compute_fingerprints, compute_reference, vae_train
from .model import AdamState, ParameterSet, _run_forward, build_model, local_train_prox, personalize
from .rng import derive_seed
from .shapley import SmoothedContribution, adaptive_samples, mc_shapley, smooth_f6, suspicion
from .trust import (TRUST_BINS, AttentionConfig, DqnConfig, TrustEngine, combine_trust, compute_reward,
                    detection_counts, rates)


# --------------------------------------------------------------------------
# records


@dataclass
class ClientRecord:
    client_id: int
    malicious: bool
    attack: str
    num_samples: int
    f1: float
    f2: float
    f3: float
    f4: float
    f5: float
    f6: float
    phi: float
    bin: float
    anomaly: float
    weight: float


@dataclass
class RoundRecord:
    round: int
    lr: float
    test_accuracy: float
    test_loss: float
    val_accuracy: float
    val_loss: float
    delta_acc: float
    tp: int
    fp: int
    tn: int
    fn: int
    fpr: float
    fnr: float
    fnr_defined: bool
    reward: float
    shapley_samples: int
    vae_trained: bool
    weight_fallback: bool
    clients: list = field(default_factory=list)
    wall_time: float = 0.0


# --------------------------------------------------------------------------
# data


@dataclass
class Federation:
    client_data: list
    server_val: LabeledDataset
    test: LabeledDataset
    malicious: frozenset
    input_dim: int
    classes: int


MNIST_FILES = (
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
)


def find_mnist(data_dir) -> list | None:
    """Paths of the MNIST image/label pairs under ``data_dir`` (plain or .gz), or None."""
    if not data_dir:
        return None
    root = Path(data_dir)
    pairs = []
    for img, lab in MNIST_FILES:
        found = None
        for suffix in ("", ".gz"):
            a, b = root / (img + suffix), root / (lab + suffix)
            if a.exists() and b.exists():
                found = (a, b)
                break
        if found is None:
            return None
        pairs.append(found)
    return pairs


def load_pool(cfg: ExperimentConfig) -> LabeledDataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        return make_synthetic(d.classes, d.dim, d.samples, d.separation, derive_seed(cfg.seed, "dataset"))
    pairs = find_mnist(d.resolved_data_dir())
    if pairs is None:
        raise DataError("MNIST files not found; set dataset.data_dir or FEDTRUST_DATA_DIR")
    pool = concat(load_idx(a, b, d.classes) for a, b in pairs)
    if d.samples < len(pool):
        pool = stratified_sample(pool, d.samples, derive_seed(cfg.seed, "subsample"))
    return pool


def setup_federation(cfg: ExperimentConfig, pool: LabeledDataset | None = None) -> Federation:
    """Split, partition, corrupt (label flip) and normalise the data for one run.

    Each client normalises with statistics of its own training split. The
    server's validation and test sets use the validation set's statistics.
    """
    pool = load_pool(cfg) if pool is None else pool
    train, val, test = stratified_split(pool, (0.70, 0.15, 0.15), derive_seed(cfg.seed, "split"))
    server_val = stratified_sample(val, cfg.server_val_size, derive_seed(cfg.seed, "server-val"))
    p = cfg.partition
    plan = partition(train, PartitionScheme(p.kind, p.alpha, p.ratio, p.sigma), cfg.clients,
                     derive_seed(cfg.seed, "partition"))
    fraction = cfg.attack.fraction if cfg.attack.kind != "none" else 0.0
    schedule = make_schedule(cfg.clients, fraction, derive_seed(cfg.seed, "schedule"),
                             cfg.attack.allow_over_threshold)
    clients = []
    for k, idx in enumerate(plan.assignments):
        ds = train.subset(idx)
        if cfg.attack.kind == "label_flip" and schedule.is_malicious(k):
            ds = apply_label_flip(ds, cfg.attack.flip_prob, pool.class_count, derive_seed(cfg.seed, "label-flip", k))
        if cfg.normalization == "per_client":
            ds, _ = intensity_normalize(ds)
        clients.append(ds)
    if cfg.normalization == "per_client":
        server_val, stats = intensity_normalize(server_val)
        test, _ = intensity_normalize(test, stats)
    return Federation(clients, server_val, test, schedule.malicious_ids, pool.dim, pool.class_count)


# --------------------------------------------------------------------------
# helpers


def cosine_lr(base: float, round_index: int, rounds: int, schedule: str = "cosine") -> float:
    """Learning rate for 1-based ``round_index``: ``base`` in round 1, decaying towards 0."""
    if schedule == "constant" or rounds <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (round_index - 1) / rounds))


def evaluate(params: ParameterSet, ds: LabeledDataset) -> tuple:
    """``(loss, accuracy)`` in eval mode."""
    x = ds.features.astype(np.float64)
    loss, logits, _ = _run_forward(params.layout, params.values.astype(np.float64),
                                   params.bn_stats.astype(np.float64), x, ds.labels, False)
    return float(loss), float((logits.argmax(axis=1) == ds.labels).mean())


def _attack_spec(cfg: ExperimentConfig) -> AttackSpec:
    a = cfg.attack
    return AttackSpec(a.kind, a.scale, a.partial_scale, a.mask_fraction, a.sigma, a.flip_prob,
                      derive_seed(cfg.seed, "attack"))


def _vae_config(cfg: ExperimentConfig) -> VaeConfig:
    v = cfg.defense.vae
    return VaeConfig(buffer_capacity=v.buffer_capacity, train_interval=v.train_interval,
                     min_buffer=v.min_buffer, epochs=v.epochs)


def _trust_engine(cfg: ExperimentConfig) -> TrustEngine:
    a, q = cfg.defense.attention, cfg.defense.dqn
    att = AttentionConfig(a.chunk_count, a.heads, a.model_dim, a.fused_dim)
    dqn = DqnConfig(hidden=tuple(q.hidden), dropout=q.dropout, batch_size=q.batch_size, lr=q.lr, gamma=q.gamma,
                    update_interval=q.update_interval, min_replay=q.min_replay,
                    steps_per_update=q.steps_per_update, target_interval=q.target_interval,
                    eps_start=q.eps_start, eps_end=q.eps_end, eps_decay_rounds=q.eps_decay_rounds)
    return TrustEngine(att, dqn, cfg.rounds, derive_seed(cfg.seed, "trust"), attention_lr=a.lr,
                       attention_steps=a.steps, use_rl=cfg.defense.rl, attention_optimizer=a.optimizer)


# --------------------------------------------------------------------------
# the round loop


def run_experiment(cfg: ExperimentConfig, federation: Federation | None = None) -> list:
    """Run ``cfg.rounds`` rounds and return one RoundRecord per round."""
    cfg.validate()
    fed = setup_federation(cfg) if federation is None else federation
    seed = cfg.seed
    agg = AggregatorSpec(cfg.aggregator.kind, cfg.aggregator.prox_mu, cfg.aggregator.krum_f,
                         cfg.aggregator.weiszfeld_iters, cfg.aggregator.weiszfeld_tol)
    bn_local = agg.bn_local
    defense = cfg.defense
    attack = _attack_spec(cfg)

    global_params = build_model(cfg.model.kind, fed.input_dim, cfg.model.hidden, fed.classes,
                                derive_seed(seed, "model"))
    has_bn = global_params.layout.stats_size > 0
    shared_dim = global_params.layout.shared_size(bn_local)
    local_states: list = [None] * cfg.clients
    server_state = None
    vae = VaeModel(shared_dim, _vae_config(cfg), derive_seed(seed, "vae")) \
        if defense.fingerprint and defense.vae.enabled else None
    engine = _trust_engine(cfg) if defense.fingerprint else None
    smoothing = SmoothedContribution(defense.smoothing_beta)
    need_reference = defense.fingerprint or agg.kind == "fltrust_like" or has_bn

    _, prev_val_acc = evaluate(global_params, fed.server_val)
    delta_acc = 0.0
    records = []
    for t in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        try:
            lr_t = cosine_lr(cfg.lr, t, cfg.rounds, cfg.lr_schedule)

            updates = []
            for k in range(cfg.clients):
                adam = AdamState.fresh(global_params.layout.size, lr_t, cfg.weight_decay)
                state, upd = local_train_prox(global_params, local_states[k], fed.client_data[k], cfg.local_epochs,
                                              agg.client_mu, adam, derive_seed(seed, "client"),
                                              batch_size=cfg.batch_size, bn_local=bn_local,
                                              client_id=k, round_index=t)
                local_states[k] = state
                if k in fed.malicious:
                    if attack.is_gradient_attack:
                        upd = apply_gradient_attack(attack, upd, t)
                    else:
                        upd = upd.with_vector(upd.vector, attack=attack.kind)
                if cfg.quantization.enabled:
                    q = quantize(upd.vector, cfg.quantization.bits, derive_seed(seed, "qsgd"), k, t)
                    upd = upd.with_vector(dequantize(q).astype(np.float32))
                updates.append(upd)
            vectors = [u.vector for u in updates]

            ref = None
            if need_reference:
                ref, server_state = compute_reference(global_params, server_state, fed.server_val, lr_t,
                                                      derive_seed(seed, "server"), t,
                                                      weight_decay=cfg.weight_decay, batch_size=cfg.batch_size,
                                                      bn_local=bn_local)
            server_model = personalize(global_params, server_state, bn_local)

            n = cfg.clients
            fps = None
            phi = np.zeros(n)
            samples = 0
            if defense.fingerprint:
                fps = compute_fingerprints(vectors, ref.vector, vae)
                if defense.shapley:
                    suspected = suspicion([f.f4 for f in fps], [f.f2 for f in fps])
                    samples = adaptive_samples(suspected, True) if defense.shapley_adaptive \
                        else defense.shapley_samples
                    est = mc_shapley(server_model, vectors, fed.server_val, samples, derive_seed(seed, "shapley"),
                                     t, workers=defense.shapley_workers, bn_local=bn_local,
                                     value=defense.shapley_value)
                    phi = est.phi
                    _, f6 = smooth_f6(smoothing, phi, range(n))
                    for fp, v in zip(fps, f6):
                        fp.f6 = v

            if engine is not None:
                assessment = engine.assess(t, vectors, fps, delta_acc)
                trust = assessment.assignment
            else:
                trust = combine_trust(np.ones(n), np.zeros(n))

            if agg.kind == "fedbnp" and engine is not None:
                weights = trust
            else:
                weights = None
            global_params = aggregate(agg, global_params, updates, weights,
                                      reference=None if ref is None else ref.vector)

            eval_model = personalize(global_params, server_state, bn_local)
            test_loss, test_acc = evaluate(eval_model, fed.test)
            val_loss, val_acc = evaluate(eval_model, fed.server_val)
            delta_acc = val_acc - prev_val_acc
            prev_val_acc = val_acc

            truth = np.array([k in fed.malicious for k in range(n)])
            counts = detection_counts(trust.bins, truth)
            fpr, fnr, fnr_defined = rates(counts)
            reward = 0.0
            if engine is not None:
                if defense.reward_labels == "shapley_sign":
                    r_fpr, r_fnr, _ = rates(detection_counts(trust.bins, phi < 0))
                else:
                    r_fpr, r_fnr = fpr, fnr
                reward = compute_reward(delta_acc, r_fpr, r_fnr, trust.bins, tuple(defense.reward_coeffs))
                labels = (phi < 0).astype(float) if defense.shapley else None
                engine.learn(t, reward, labels)

            if vae is not None:
                norms = [np.linalg.norm(np.asarray(v, np.float64)) for v in vectors]
                for k in admit_to_buffer(norms, trust.weights, t, defense.vae.bootstrap_rounds):
                    vae.push(vectors[k])
                vae_train(vae, t)

            clients = []
            for k, u in enumerate(updates):
                fp = fps[k] if fps is not None else None
                clients.append(ClientRecord(
                    k, bool(truth[k]), u.attack, u.num_samples,
                    *(fp.as_array().tolist() if fp is not None else [0.0] * 6),
                    float(phi[k]), float(trust.bins[k]), float(trust.anomalies[k]),
                    float(trust.weights[k]) if weights is not None else _applied_weight(agg, updates, k)))
            records.append(RoundRecord(
                t, lr_t, test_acc, test_loss, val_acc, val_loss, delta_acc,
                counts["tp"], counts["fp"], counts["tn"], counts["fn"], fpr, fnr, fnr_defined, reward,
                samples, bool(vae is not None and vae.trained), bool(trust.fallback), clients,
                time.perf_counter() - started))
        except FedTrustError as exc:
            raise RoundError(t, exc) from exc
        except (FloatingPointError, ValueError, ArithmeticError) as exc:
            raise RoundError(t, exc) from exc
    return records


def _applied_weight(agg: AggregatorSpec, updates, k: int) -> float:
    """Weight of client ``k`` in the data-size-weighted mean (NaN for non-linear rules)."""
    if agg.kind in ("fedavg", "fedprox", "fedbn", "fedbnp"):
        total = sum(u.num_samples for u in updates)
        return updates[k].num_samples / total if total else 1.0 / len(updates)
    return float("nan")


# --------------------------------------------------------------------------
# grids


def method_label(cfg: ExperimentConfig) -> str:
    if cfg.defense.fingerprint and cfg.aggregator.kind == "fedbnp":
        return "fedbnp_trust"
    return cfg.aggregator.kind


def summarize(cfg: ExperimentConfig, records: list) -> dict:
    last = records[-1] if records else None
    return {
        "name": cfg.name,
        "method": method_label(cfg),
        "attack": cfg.attack.kind,
        "partition": PartitionScheme(cfg.partition.kind, cfg.partition.alpha, cfg.partition.ratio,
                                     cfg.partition.sigma).label(),
        "seed": cfg.seed,
        "rounds": len(records),
        "final_accuracy": last.test_accuracy if last else float("nan"),
        "best_accuracy": max((r.test_accuracy for r in records), default=float("nan")),
        "mean_fpr": float(np.mean([r.fpr for r in records])) if records else float("nan"),
        "mean_fnr": float(np.mean([r.fnr for r in records])) if records else float("nan"),
    }


def _run_one(cfg: ExperimentConfig) -> tuple:
    return cfg, run_experiment(cfg)


def run_grid(cfgs, parallelism: int = 1) -> tuple:
    """Run every config; returns ``(rows, records_per_config)``.

    Each run owns its whole state, so process-parallel and serial execution
    produce identical rows.
    """
    cfgs = list(cfgs)
    if parallelism > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(parallelism) as pool:
            results = list(pool.map(_run_one, cfgs))
    else:
        results = [_run_one(c) for c in cfgs]
    rows = [summarize(c, recs) for c, recs in results]
    return rows, [recs for _, recs in results]


def pivot(rows, value: str = "final_accuracy") -> tuple:
    """Methods x attacks matrix with an average column.

    Returns ``(header, table)`` where each table row is
    ``[method, v_attack1, ..., avg]``; cells with several entries (seeds,
    partitions) are averaged.
    """
    attacks = sorted({r["attack"] for r in rows})
    methods = []
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
    header = ["method", *attacks, "avg"]
    table = []
    for m in methods:
        cells = []
        for a in attacks:
            vals = [r[value] for r in rows if r["method"] == m and r["attack"] == a]
            cells.append(float(np.mean(vals)) if vals else float("nan"))
        present = [c for c in cells if not math.isnan(c)]
        table.append([m, *cells, float(np.mean(present)) if present else float("nan")])
    return header, table
