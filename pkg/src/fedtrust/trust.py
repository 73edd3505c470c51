"""Trust scoring: dual-stream attention, a DDQN trust policy and the weight combiner.

Gradient stream
    The update is cut into P contiguous chunks. Each chunk becomes a token
    from its summary statistics [mean, std, max|.|, L2], followed by one
    multi-head scaled dot-product self-attention layer over the P tokens and
    mean pooling.

Feature stream
    ``alpha = softmax(W_a f + b_a)`` over the six fingerprint features, then a
    linear embedding of ``f * alpha``.

Fusion
    ``h = ReLU(W_g g_emb + W_f f_emb + b)`` and an auxiliary anomaly head
    ``a = sigmoid(w . h + c)`` trained on Shapley-sign pseudo labels.

Policy
    One Q-network shared by all clients (factorised policy) picks a trust bin
    from {0, .2, .4, .6, .8, 1} per client from ``h_k`` plus history features.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError
from .nn import Adam, DenseStack
from .rng import stream

TRUST_BINS = np.array([0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
HISTORY_FEATURES = 4


@dataclass
class AttentionConfig:
    chunk_count: int = 64
    heads: int = 2
    model_dim: int = 32
    fused_dim: int = 16

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ConfigurationError("model_dim must be divisible by heads")
        if min(self.chunk_count, self.heads, self.model_dim, self.fused_dim) < 1:
            raise ConfigurationError("attention dimensions must be positive")


class TrustNetParams:
    """Named views into one flat parameter vector."""

    def __init__(self, cfg: AttentionConfig, theta: np.ndarray | None = None, seed: int = 0):
        D, F = cfg.model_dim, cfg.fused_dim
        self.cfg = cfg
        self.shapes = {
            "W_tok": (4, D), "b_tok": (D,),
            "W_q": (D, D), "W_k": (D, D), "W_v": (D, D), "W_o": (D, D),
            "W_a": (6, 6), "b_a": (6,),
            "W_fe": (6, D), "b_fe": (D,),
            "W_g": (D, F), "W_f": (D, F), "b_fuse": (F,),
            "w_anom": (F,), "b_anom": (1,),
        }
        self.offsets = {}
        off = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (off, off + size)
            off += size
        self.size = off
        if theta is None:
            theta = np.zeros(off)
            rng = stream(seed, "trust-init")
            for name, shape in self.shapes.items():
                # w_anom is the head's weight vector, so it is drawn like a (F, 1) matrix
                fan = shape if len(shape) == 2 else (shape[0], 1) if name == "w_anom" else None
                if fan is not None:
                    lo, hi = self.offsets[name]
                    bound = np.sqrt(6.0 / (fan[0] + fan[1]))
                    theta[lo:hi] = rng.uniform(-bound, bound, hi - lo)
        self.theta = theta

    def view(self, theta=None) -> dict:
        theta = self.theta if theta is None else theta
        return {n: theta[lo:hi].reshape(self.shapes[n]) for n, (lo, hi) in self.offsets.items()}

    def copy(self) -> "TrustNetParams":
        return TrustNetParams(self.cfg, self.theta.copy())


def _softmax_rows(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def chunk_stats(g, chunk_count: int) -> np.ndarray:
    """``(P, 4)`` per-chunk [mean, std, max|.|, L2].

    Per-coordinate statistics are multiplied by sqrt(d) and chunk norms by
    sqrt(P) so that a unit-norm update yields O(1) tokens, then passed through
    ``sign(x) log1p(|x|)`` so a wildly large update (noise, scaling) stays
    ordered but bounded.
    """
    g = np.asarray(g, dtype=np.float64)
    d = g.size
    if d < chunk_count:
        raise ShapeError(f"update of dim {d} cannot be split into {chunk_count} chunks")
    chunks = np.array_split(g, chunk_count)
    stats = np.array([[c.mean(), c.std(), np.abs(c).max(), np.linalg.norm(c)] for c in chunks])
    stats[:, :3] *= np.sqrt(d)
    stats[:, 3] *= np.sqrt(chunk_count)
    return np.sign(stats) * np.log1p(np.abs(stats))


def _gradient_forward(p: dict, cfg: AttentionConfig, stats: np.ndarray):
    H = cfg.heads
    dk = cfg.model_dim // H
    X = stats @ p["W_tok"] + p["b_tok"]
    Q, K, V = X @ p["W_q"], X @ p["W_k"], X @ p["W_v"]
    heads = []
    attn = []
    for h in range(H):
        sl = slice(h * dk, (h + 1) * dk)
        A = _softmax_rows(Q[:, sl] @ K[:, sl].T / np.sqrt(dk))
        attn.append(A)
        heads.append(A @ V[:, sl])
    O = np.concatenate(heads, axis=1)
    Y = O @ p["W_o"]
    emb = Y.mean(axis=0)
    return emb, (stats, X, Q, K, V, attn, O)


def _gradient_backward(p: dict, cfg: AttentionConfig, cache, d_emb, grads: dict):
    stats, X, Q, K, V, attn, O = cache
    H = cfg.heads
    dk = cfg.model_dim // H
    P = len(X)
    dY = np.broadcast_to(d_emb / P, (P, d_emb.size))
    grads["W_o"] += O.T @ dY
    dO = dY @ p["W_o"].T
    dQ = np.zeros_like(Q)
    dK = np.zeros_like(K)
    dV = np.zeros_like(V)
    for h in range(H):
        sl = slice(h * dk, (h + 1) * dk)
        A = attn[h]
        dOh = dO[:, sl]
        dA = dOh @ V[:, sl].T
        dV[:, sl] = A.T @ dOh
        dS = A * (dA - (dA * A).sum(axis=1, keepdims=True)) / np.sqrt(dk)
        dQ[:, sl] = dS @ K[:, sl]
        dK[:, sl] = dS.T @ Q[:, sl]
    grads["W_q"] += X.T @ dQ
    grads["W_k"] += X.T @ dK
    grads["W_v"] += X.T @ dV
    dX = dQ @ p["W_q"].T + dK @ p["W_k"].T + dV @ p["W_v"].T
    grads["W_tok"] += stats.T @ dX
    grads["b_tok"] += dX.sum(axis=0)


def gradient_attention(g, cfg: AttentionConfig, params: TrustNetParams, return_weights: bool = False):
    """Pooled embedding of one update (optionally with per-head attention maps)."""
    emb, cache = _gradient_forward(params.view(), cfg, chunk_stats(g, cfg.chunk_count))
    if return_weights:
        return emb, cache[5]
    return emb


def feature_attention(f, params: TrustNetParams) -> tuple:
    """``(alpha, attended)`` for a 6-vector (or ``(n, 6)`` batch) of features."""
    p = params.view()
    f = np.asarray(f, dtype=np.float64)
    alpha = _softmax_rows(f @ p["W_a"] + p["b_a"])
    attended = (f * alpha) @ p["W_fe"] + p["b_fe"]
    return alpha, attended


def fuse(g_emb, f_emb, params: TrustNetParams) -> tuple:
    """``(h, anomaly)`` from the two stream embeddings."""
    p = params.view()
    pre = np.asarray(g_emb) @ p["W_g"] + np.asarray(f_emb) @ p["W_f"] + p["b_fuse"]
    h = np.maximum(pre, 0.0)
    a = 1.0 / (1.0 + np.exp(-(h @ p["w_anom"] + p["b_anom"][0])))
    return h, a


def trust_forward(params: TrustNetParams, grad_stats, feats):
    """Batched forward. ``grad_stats`` is a list of ``(P, 4)`` arrays, ``feats`` ``(n, 6)``."""
    p = params.view()
    cfg = params.cfg
    g_cache = []
    g_embs = []
    for st in grad_stats:
        emb, c = _gradient_forward(p, cfg, st)
        g_embs.append(emb)
        g_cache.append(c)
    g_emb = np.stack(g_embs)
    feats = np.asarray(feats, dtype=np.float64)
    alpha = _softmax_rows(feats @ p["W_a"] + p["b_a"])
    u = feats * alpha
    f_emb = u @ p["W_fe"] + p["b_fe"]
    pre = g_emb @ p["W_g"] + f_emb @ p["W_f"] + p["b_fuse"]
    h = np.maximum(pre, 0.0)
    logit = h @ p["w_anom"] + p["b_anom"][0]
    a = 1.0 / (1.0 + np.exp(-logit))
    cache = (g_cache, g_emb, feats, alpha, u, f_emb, pre, h)
    return h, a, logit, cache


def anomaly_loss_and_grad(params: TrustNetParams, theta, grad_stats, feats, labels) -> tuple:
    """Mean logistic loss of the anomaly head and its gradient w.r.t. ``theta``."""
    work = TrustNetParams(params.cfg, theta)
    p = work.view()
    _, a, logit, cache = trust_forward(work, grad_stats, feats)
    g_cache, g_emb, feats, alpha, u, f_emb, pre, h = cache
    y = np.asarray(labels, dtype=np.float64)
    n = len(y)
    loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
    grads = {k: np.zeros(s) for k, s in work.shapes.items()}
    dlogit = (a - y) / n
    grads["w_anom"] += h.T @ dlogit
    grads["b_anom"] += dlogit.sum()
    dpre = np.outer(dlogit, p["w_anom"]) * (pre > 0)
    grads["W_g"] += g_emb.T @ dpre
    grads["W_f"] += f_emb.T @ dpre
    grads["b_fuse"] += dpre.sum(axis=0)
    dg = dpre @ p["W_g"].T
    df = dpre @ p["W_f"].T
    grads["W_fe"] += u.T @ df
    grads["b_fe"] += df.sum(axis=0)
    du = df @ p["W_fe"].T
    dalpha = du * feats
    dlog = alpha * (dalpha - (dalpha * alpha).sum(axis=1, keepdims=True))
    grads["W_a"] += feats.T @ dlog
    grads["b_a"] += dlog.sum(axis=0)
    for i in range(n):
        _gradient_backward(p, work.cfg, g_cache[i], dg[i], grads)
    flat = np.concatenate([grads[k].ravel() for k in work.shapes])
    return loss, flat


def train_attention(params: TrustNetParams, grad_stats, feats, labels, lr: float = 1e-3, steps: int = 1,
                    max_grad_norm: float = 1.0, optimizer: Adam | None = None) -> float:
    """Gradient steps on the anomaly head's logistic loss; updates ``params`` in place.

    Plain SGD with ``lr`` unless an Adam ``optimizer`` (which carries its own
    lr and moments across calls) is given. Each step's gradient is clipped
    to ``max_grad_norm``. Returns the loss before the first step.
    """
    first = None
    for _ in range(steps):
        loss, grad = anomaly_loss_and_grad(params, params.theta, grad_stats, feats, labels)
        if first is None:
            first = loss
        norm = np.linalg.norm(grad)
        if norm > max_grad_norm:
            grad = grad * (max_grad_norm / norm)
        if optimizer is None:
            params.theta -= lr * grad
        else:
            optimizer.step(params.theta, grad)
    return first


def normalize_fingerprints(fps) -> np.ndarray:
    """Scale-free ``(n, 6)`` view of raw fingerprints for the feature stream.

    f1 and f4 become log ratios to the round median, f6 is divided by the
    round's largest |f6|; cosines and sign consistency pass through.
    """
    raw = np.stack([fp.as_array() if hasattr(fp, "as_array") else np.asarray(fp, float) for fp in fps])
    out = raw.copy()
    tiny = 1e-30
    for col in (0, 3):
        med = np.median(raw[:, col])
        out[:, col] = np.clip(np.log((raw[:, col] + tiny) / (med + tiny)), -10.0, 10.0)
    top = np.abs(raw[:, 5]).max()
    out[:, 5] = raw[:, 5] / top if top > 0 else 0.0
    return out


# --------------------------------------------------------------------------
# DDQN policy


@dataclass
class ClientState:
    h: np.ndarray
    trust_mean: float
    f6_mean: float
    round_frac: float
    delta_acc: float

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.h, float),
                               [self.trust_mean, self.f6_mean, self.round_frac, self.delta_acc]])


@dataclass
class DqnConfig:
    hidden: tuple = (64, 32)
    dropout: float = 0.0
    replay_capacity: int = 1000
    batch_size: int = 64
    lr: float = 3e-4
    gamma: float = 0.95
    update_interval: int = 10
    min_replay: int = 64
    steps_per_update: int = 1
    target_interval: int = 100
    eps_start: float = 0.3
    eps_end: float = 0.05
    eps_decay_rounds: int = 100


class DqnAgent:
    def __init__(self, state_dim: int, cfg: DqnConfig | None = None, seed: int = 0):
        self.cfg = cfg or DqnConfig()
        self.state_dim = state_dim
        self.seed = seed
        self.net = DenseStack([state_dim, *self.cfg.hidden, len(TRUST_BINS)], dropout=self.cfg.dropout)
        self.q_theta = self.net.init(stream(seed, "dqn-init"))
        self.target_theta = self.q_theta.copy()
        self.replay = deque(maxlen=self.cfg.replay_capacity)
        self.opt = Adam(self.net.size, self.cfg.lr)
        self.updates = 0
        self.target_copies = 0

    def epsilon(self, round_index: int) -> float:
        c = self.cfg
        if round_index >= c.eps_decay_rounds:
            return c.eps_end
        return c.eps_start + (c.eps_end - c.eps_start) * max(round_index, 0) / c.eps_decay_rounds

    def q_values(self, states, theta=None) -> np.ndarray:
        out, _ = self.net.forward(self.q_theta if theta is None else theta, np.atleast_2d(states))
        return out

    def push(self, state, action: int, reward: float, next_state) -> None:
        self.replay.append((np.asarray(state, float), int(action), float(reward), np.asarray(next_state, float)))

    def loss_and_grad(self, theta, batch, rng=None) -> tuple:
        s = np.stack([b[0] for b in batch])
        a = np.array([b[1] for b in batch])
        r = np.array([b[2] for b in batch])
        s2 = np.stack([b[3] for b in batch])
        # Double DQN: online net picks the next action, target net scores it
        next_a = self.q_values(s2, theta).argmax(axis=1)
        target_q = self.q_values(s2, self.target_theta)[np.arange(len(batch)), next_a]
        y = r + self.cfg.gamma * target_q
        q, cache = self.net.forward(theta, s, rng)
        n = len(batch)
        diff = q[np.arange(n), a] - y
        loss = float((diff ** 2).mean())
        dq = np.zeros_like(q)
        dq[np.arange(n), a] = 2.0 * diff / n
        grad, _ = self.net.backward(theta, cache, dq)
        return loss, grad


def select_actions(agent: DqnAgent, states, round_index: int, rng) -> np.ndarray:
    """Epsilon-greedy action index per client state."""
    states = np.atleast_2d(np.asarray([getattr(s, "vector", lambda: s)() for s in states], dtype=float))
    eps = agent.epsilon(round_index)
    greedy = agent.q_values(states).argmax(axis=1)
    explore = rng.random(len(states)) < eps
    random_a = rng.integers(0, len(TRUST_BINS), size=len(states))
    return np.where(explore, random_a, greedy)


def dqn_update(agent: DqnAgent, round_index: int) -> DqnAgent:
    """Gated Double-DQN step(s) plus the periodic hard target copy."""
    c = agent.cfg
    if round_index % c.update_interval == 0 and len(agent.replay) >= c.min_replay:
        rng = stream(agent.seed, "dqn-batch", round_index)
        drop_rng = rng if c.dropout > 0 else None
        for _ in range(c.steps_per_update):
            idx = rng.choice(len(agent.replay), size=c.batch_size, replace=len(agent.replay) < c.batch_size)
            batch = [agent.replay[i] for i in idx]
            _, grad = agent.loss_and_grad(agent.q_theta, batch, drop_rng)
            agent.opt.step(agent.q_theta, grad)
            agent.updates += 1
    if round_index > 0 and round_index % c.target_interval == 0:
        agent.target_theta = agent.q_theta.copy()
        agent.target_copies += 1
    return agent


# --------------------------------------------------------------------------
# reward and combiner


def detection_counts(bins, malicious) -> dict:
    """Confusion counts with predicted-malicious := bin <= 0.2."""
    pred = np.asarray(bins, float) <= 0.2 + 1e-12
    truth = np.asarray(malicious, bool)
    return {
        "tp": int((pred & truth).sum()),
        "fp": int((pred & ~truth).sum()),
        "tn": int((~pred & ~truth).sum()),
        "fn": int((~pred & truth).sum()),
    }


def rates(counts: dict) -> tuple:
    """``(fpr, fnr, fnr_defined)``; an undefined rate is reported as 0."""
    neg = counts["fp"] + counts["tn"]
    pos = counts["tp"] + counts["fn"]
    fpr = counts["fp"] / neg if neg else 0.0
    fnr = counts["fn"] / pos if pos else 0.0
    return fpr, fnr, pos > 0


def efficiency(bins) -> float:
    return float(np.mean(2.0 * np.abs(np.asarray(bins, float) - 0.5)))


def compute_reward(delta_acc: float, fpr: float, fnr: float, bins,
                   coeffs=(1.0, 2.0, 3.0, 0.5)) -> float:
    a, b, g, d = coeffs
    return a * delta_acc - b * fpr - g * fnr + d * efficiency(bins)


@dataclass
class TrustAssignment:
    bins: np.ndarray
    anomalies: np.ndarray
    weights: np.ndarray
    fallback: bool = False


def combine_trust(bins, anomalies) -> TrustAssignment:
    """``w_k ∝ b_k (1 - a_k / 2)``, uniform when every raw weight is zero."""
    b = np.asarray(bins, dtype=np.float64)
    a = np.asarray(anomalies, dtype=np.float64)
    if not (np.isfinite(b).all() and np.isfinite(a).all()):
        raise ValueError("non-finite trust bins or anomaly scores")
    raw = b * (1.0 - 0.5 * a)
    total = raw.sum()
    if total <= 0:
        return TrustAssignment(b, a, np.full(len(b), 1.0 / len(b)), True)
    w = raw / total
    return TrustAssignment(b, a, w / w.sum())


# --------------------------------------------------------------------------
# per-round orchestration


@dataclass
class RoundAssessment:
    assignment: TrustAssignment
    actions: np.ndarray
    states: np.ndarray
    grad_stats: list
    feats: np.ndarray
    client_ids: list


class TrustEngine:
    """Owns the attention/fusion parameters, the DQN agent and per-client history.

    ``assess`` turns a round's update vectors and fingerprints into trust
    weights; ``learn`` stores transitions and runs the scheduled training.
    """

    def __init__(self, attention: AttentionConfig, dqn: DqnConfig, rounds: int, seed: int,
                 attention_lr: float = 1e-3, attention_steps: int = 1, use_rl: bool = True,
                 history_window: int = 5, attention_optimizer: str = "sgd"):
        self.cfg = attention
        self.rounds = max(rounds, 1)
        self.seed = seed
        self.params = TrustNetParams(attention, seed=seed)
        self.agent = DqnAgent(attention.fused_dim + HISTORY_FEATURES, dqn, seed)
        self.attention_lr = attention_lr
        self.attention_steps = attention_steps
        if attention_optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown attention optimizer {attention_optimizer!r}")
        self.attention_opt = Adam(self.params.size, attention_lr) if attention_optimizer == "adam" else None
        self.use_rl = use_rl
        self.window = history_window
        self.trust_hist: dict = {}
        self.f6_hist: dict = {}
        self.pending: dict = {}
        self.last: RoundAssessment | None = None

    def _history(self, cid):
        t = self.trust_hist.get(cid)
        f = self.f6_hist.get(cid)
        return (float(np.mean(t)) if t else 1.0), (float(np.mean(f)) if f else 0.0)

    def assess(self, round_index: int, vectors, fingerprints, delta_acc: float, client_ids=None) -> RoundAssessment:
        ids = list(range(len(vectors))) if client_ids is None else list(client_ids)
        norms = np.array([np.linalg.norm(np.asarray(v, float)) for v in vectors])
        scale = float(np.median(norms)) or 1.0
        grad_stats = [chunk_stats(np.asarray(v, float) / scale, self.cfg.chunk_count) for v in vectors]
        feats = normalize_fingerprints(fingerprints)
        h, a, _, _ = trust_forward(self.params, grad_stats, feats)
        states = []
        for k, cid in enumerate(ids):
            tm, fm = self._history(cid)
            states.append(ClientState(h[k], tm, fm, round_index / self.rounds, delta_acc).vector())
        states = np.stack(states)
        for k, cid in enumerate(ids):
            if cid in self.pending:
                s, act, r = self.pending.pop(cid)
                self.agent.push(s, act, r, states[k])
        if self.use_rl:
            rng = stream(self.seed, "epsilon-greedy", round_index)
            actions = select_actions(self.agent, states, round_index, rng)
        else:
            actions = np.full(len(ids), len(TRUST_BINS) - 1)
        assignment = combine_trust(TRUST_BINS[actions], a)
        self.last = RoundAssessment(assignment, actions, states, grad_stats, feats, ids)
        return self.last

    def learn(self, round_index: int, reward: float, pseudo_labels=None) -> None:
        last = self.last
        if last is None:
            return
        n = len(last.client_ids)
        for k, cid in enumerate(last.client_ids):
            self.pending[cid] = (last.states[k], int(last.actions[k]), reward)
            self.trust_hist.setdefault(cid, deque(maxlen=self.window)).append(last.assignment.weights[k] * n)
            self.f6_hist.setdefault(cid, deque(maxlen=self.window)).append(last.feats[k, 5])
        if pseudo_labels is not None:
            train_attention(self.params, last.grad_stats, last.feats, pseudo_labels,
                            self.attention_lr, self.attention_steps, optimizer=self.attention_opt)
        if self.use_rl:
            dqn_update(self.agent, round_index)
