"""Small classifiers with hand-derived gradients.

Two model kinds are supported:

* ``logreg`` -- a single dense layer followed by softmax cross-entropy.
* ``mlp_bn`` -- dense -> batch-norm -> ReLU -> [dense -> ReLU]* -> dense.

All trainable values live in one flat float32 vector. Flattening is
layer-major; inside a dense layer the weight matrix (shape ``in x out``,
row-major) comes first, then the bias. A batch-norm layer stores gamma then
beta. Running means/variances are kept in a separate ``bn_stats`` vector and
are never aggregated.

Arithmetic runs in float64; state is stored back as float32.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError, UsageError
from .rng import stream

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


@dataclass(frozen=True)
class ParamSlice:
    layer: int
    role: str  # weight | bias | gamma | beta
    start: int
    stop: int
    shape: tuple
    bn_local: bool

    @property
    def size(self) -> int:
        return self.stop - self.start


@dataclass(frozen=True)
class ParameterLayout:
    kind: str
    layers: tuple  # ((kind, in_dim, out_dim), ...)
    slices: tuple  # ParamSlice, in flat order
    bn_stat_slices: tuple  # ((mean_start, var_start, width), ...) per bn layer
    size: int
    stats_size: int

    @property
    def input_dim(self) -> int:
        return self.layers[0][1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1][2]

    def bn_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for s in self.slices:
            if s.bn_local:
                mask[s.start:s.stop] = True
        return mask

    def shared_mask(self, bn_local: bool) -> np.ndarray:
        """Coordinates that travel to the server.

        With ``bn_local`` the batch-norm affine parameters stay on the client.
        """
        if bn_local:
            return ~self.bn_mask()
        return np.ones(self.size, dtype=bool)

    def shared_size(self, bn_local: bool) -> int:
        return int(self.shared_mask(bn_local).sum())

    def layer_slices(self, layer: int) -> dict:
        return {s.role: s for s in self.slices if s.layer == layer}


def make_layout(kind: str, input_dim: int, hidden_dims, num_classes: int) -> ParameterLayout:
    hidden_dims = list(hidden_dims)
    if input_dim < 1 or num_classes < 1 or any(h < 1 for h in hidden_dims):
        raise ConfigurationError("all model dimensions must be >= 1")
    if kind == "logreg":
        if hidden_dims:
            raise ConfigurationError("logreg takes no hidden layers")
        layers = [("dense", input_dim, num_classes)]
    elif kind == "mlp_bn":
        if not hidden_dims:
            raise ConfigurationError("mlp_bn needs at least one hidden layer")
        layers = [("dense", input_dim, hidden_dims[0]), ("bn", hidden_dims[0], hidden_dims[0])]
        prev = hidden_dims[0]
        for h in hidden_dims[1:]:
            layers.append(("dense", prev, h))
            prev = h
        layers.append(("dense", prev, num_classes))
    else:
        raise ConfigurationError(f"unknown model kind {kind!r}")

    slices = []
    stat_slices = []
    offset = 0
    stat_offset = 0
    for i, (lk, din, dout) in enumerate(layers):
        if lk == "dense":
            slices.append(ParamSlice(i, "weight", offset, offset + din * dout, (din, dout), False))
            offset += din * dout
            slices.append(ParamSlice(i, "bias", offset, offset + dout, (dout,), False))
            offset += dout
        else:
            slices.append(ParamSlice(i, "gamma", offset, offset + dout, (dout,), True))
            offset += dout
            slices.append(ParamSlice(i, "beta", offset, offset + dout, (dout,), True))
            offset += dout
            stat_slices.append((stat_offset, stat_offset + dout, dout))
            stat_offset += 2 * dout
    return ParameterLayout(kind, tuple(layers), tuple(slices), tuple(stat_slices), offset, stat_offset)


@dataclass
class ParameterSet:
    layout: ParameterLayout
    values: np.ndarray
    bn_stats: np.ndarray

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.layout, self.values.copy(), self.bn_stats.copy())

    def view(self, layer: int, role: str) -> np.ndarray:
        s = self.layout.layer_slices(layer)[role]
        return self.values[s.start:s.stop].reshape(s.shape)

    def digest(self) -> int:
        return zlib.crc32(self.values.tobytes()) ^ (zlib.crc32(self.bn_stats.tobytes()) << 1)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def fresh(cls, size: int, lr: float, weight_decay: float = 0.0, **kw) -> "AdamState":
        if lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        return cls(np.zeros(size, np.float32), np.zeros(size, np.float32), 0, lr, weight_decay=weight_decay, **kw)


def build_model(kind: str, input_dim: int, hidden_dims, num_classes: int, seed: int) -> ParameterSet:
    """Initialise a model deterministically from ``seed``.

    Weights use He-scaled uniform draws U(-sqrt(6/fan_in), +sqrt(6/fan_in));
    biases start at zero, gamma at one, beta at zero, running mean at zero and
    running variance at one.
    """
    layout = make_layout(kind, input_dim, hidden_dims, num_classes)
    values = np.zeros(layout.size, dtype=np.float32)
    rng = stream(seed, "init", kind)
    for s in layout.slices:
        if s.role == "weight":
            bound = np.sqrt(6.0 / s.shape[0])
            values[s.start:s.stop] = rng.uniform(-bound, bound, size=s.size)
        elif s.role == "gamma":
            values[s.start:s.stop] = 1.0
    stats = np.zeros(layout.stats_size, dtype=np.float32)
    for _, var_start, width in layout.bn_stat_slices:
        stats[var_start:var_start + width] = 1.0
    return ParameterSet(layout, values, stats)


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    digest: int
    mode: str
    labels: np.ndarray
    probs: np.ndarray
    steps: list = field(default_factory=list)


def _relu_after(layers, i: int) -> bool:
    if i == len(layers) - 1:
        return False
    if layers[i][0] == "dense" and layers[i + 1][0] == "bn":
        return False
    return True


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _run_forward(layout, values, bn_stats, x, y, train: bool, new_stats=None):
    """Core forward pass on float64 copies; returns (loss, logits, steps)."""
    a = x
    steps = []
    bn_i = 0
    for i, (lk, din, dout) in enumerate(layout.layers):
        sl = layout.layer_slices(i)
        if lk == "dense":
            w = values[sl["weight"].start:sl["weight"].stop].reshape(din, dout)
            b = values[sl["bias"].start:sl["bias"].stop]
            z = a @ w + b
            steps.append(("dense", i, a))
        else:
            gamma = values[sl["gamma"].start:sl["gamma"].stop]
            beta = values[sl["beta"].start:sl["beta"].stop]
            mean_at, var_at, width = layout.bn_stat_slices[bn_i]
            bn_i += 1
            if train:
                mu = a.mean(axis=0)
                var = ((a - mu) ** 2).mean(axis=0)
                if new_stats is not None:
                    m_sl, v_sl = slice(mean_at, mean_at + width), slice(var_at, var_at + width)
                    new_stats[m_sl] = BN_MOMENTUM * new_stats[m_sl] + (1 - BN_MOMENTUM) * mu
                    new_stats[v_sl] = BN_MOMENTUM * new_stats[v_sl] + (1 - BN_MOMENTUM) * var
            else:
                mu = bn_stats[mean_at:mean_at + width]
                var = bn_stats[var_at:var_at + width]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mu) * inv_std
            z = gamma * xhat + beta
            steps.append(("bn", i, xhat, inv_std))
        if _relu_after(layout.layers, i):
            steps.append(("relu", i, z > 0))
            z = np.maximum(z, 0.0)
        a = z
    logits = a
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(len(y)), y].mean())
    return loss, logits, steps


def _check_batch(layout, features, labels):
    features = np.asarray(features)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[1] != layout.input_dim:
        raise ShapeError(f"expected features of shape (n, {layout.input_dim}), got {features.shape}")
    if len(features) == 0:
        raise DataError("empty batch")
    if labels.shape != (len(features),):
        raise ShapeError("labels must be a vector matching the feature rows")
    return features.astype(np.float64), labels.astype(np.int64)


def forward_loss(params: ParameterSet, batch, mode: str = "eval"):
    """Mean cross-entropy of ``params`` on ``batch``.

    ``batch`` is anything with ``features`` and ``labels`` attributes or a
    ``(features, labels)`` pair. In ``train`` mode batch-norm normalises with
    batch statistics and the running statistics in ``params.bn_stats`` are
    updated in place; ``eval`` mode reads running statistics and mutates
    nothing.

    Returns ``(loss, logits, cache)``.
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"mode must be 'train' or 'eval', got {mode!r}")
    x, y = _batch_arrays(batch)
    x, y = _check_batch(params.layout, x, y)
    train = mode == "train"
    values = params.values.astype(np.float64)
    stats = params.bn_stats.astype(np.float64)
    new_stats = stats.copy() if train else None
    loss, logits, steps = _run_forward(params.layout, values, stats, x, y, train, new_stats)
    if train and params.layout.stats_size:
        params.bn_stats[:] = new_stats.astype(np.float32)
    cache = ForwardCache(params.digest(), mode, y, _softmax(logits), steps)
    return loss, logits, cache


def _batch_arrays(batch):
    if hasattr(batch, "features"):
        return batch.features, batch.labels
    x, y = batch
    return x, y


def backward(cache: ForwardCache, params: ParameterSet) -> np.ndarray:
    """Exact gradient (float64) of the mean loss w.r.t. ``params.values``."""
    if cache.mode != "train":
        raise UsageError("backward needs a cache from a train-mode forward pass")
    if cache.digest != params.digest():
        raise UsageError("stale cache: parameters changed since the forward pass")
    return _run_backward(params.layout, params.values.astype(np.float64), cache.steps, cache.probs, cache.labels)


def _run_backward(layout, values, steps, probs, labels):
    n = len(labels)
    grad = np.zeros(layout.size, dtype=np.float64)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    for step in reversed(steps):
        kind = step[0]
        sl = layout.layer_slices(step[1])
        if kind == "relu":
            delta = delta * step[2]
        elif kind == "dense":
            a_prev = step[2]
            ws = sl["weight"]
            w = values[ws.start:ws.stop].reshape(ws.shape)
            grad[ws.start:ws.stop] = (a_prev.T @ delta).ravel()
            bs = sl["bias"]
            grad[bs.start:bs.stop] = delta.sum(axis=0)
            delta = delta @ w.T
        else:
            xhat, inv_std = step[2], step[3]
            gs, be = sl["gamma"], sl["beta"]
            gamma = values[gs.start:gs.stop]
            grad[gs.start:gs.stop] = (delta * xhat).sum(axis=0)
            grad[be.start:be.stop] = delta.sum(axis=0)
            dxhat = delta * gamma
            m = len(dxhat)
            delta = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return grad


def loss_and_grad(values64: np.ndarray, layout: ParameterLayout, x, y) -> tuple:
    """Train-mode loss and gradient for a raw float64 value vector.

    Running statistics are irrelevant in train mode, so none are needed.
    """
    stats = np.zeros(layout.stats_size)
    loss, logits, steps = _run_forward(layout, values64, stats, x, y, True)
    return loss, _run_backward(layout, values64, steps, _softmax(logits), y)


def predict(params: ParameterSet, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.layout.input_dim:
        raise ShapeError("feature dimension does not match the model")
    dummy = np.zeros(len(x), dtype=np.int64)
    _, logits, _ = _run_forward(params.layout, params.values.astype(np.float64),
                                params.bn_stats.astype(np.float64), x, dummy, False)
    return logits.argmax(axis=1)


def accuracy(params: ParameterSet, ds) -> float:
    return float((predict(params, ds.features) == ds.labels).mean())


# --------------------------------------------------------------------------
# optimisation


def adam_step(values: np.ndarray, grad: np.ndarray, state: AdamState) -> None:
    """One in-place Adam step (L2 weight decay folded into the gradient)."""
    theta = values.astype(np.float64)
    g = grad + state.weight_decay * theta if state.weight_decay else grad
    state.step += 1
    m = state.beta1 * state.m.astype(np.float64) + (1 - state.beta1) * g
    v = state.beta2 * state.v.astype(np.float64) + (1 - state.beta2) * g * g
    state.m[:] = m
    state.v[:] = v
    m_hat = m / (1 - state.beta1 ** state.step)
    v_hat = v / (1 - state.beta2 ** state.step)
    values[:] = (theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(np.float32)


def _train_epochs(params: ParameterSet, data, epochs: int, adam: AdamState, rng, batch_size: int,
                  grad_hook=None) -> None:
    x_all = np.asarray(data.features, dtype=np.float64)
    y_all = np.asarray(data.labels, dtype=np.int64)
    n = len(y_all)
    has_bn = params.layout.stats_size > 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            # batch-norm statistics are undefined for a single sample
            if has_bn and len(idx) < 2:
                continue
            _, _, cache = forward_loss(params, (x_all[idx], y_all[idx]), "train")
            grad = backward(cache, params)
            if grad_hook is not None:
                grad = grad_hook(grad, params.values)
            adam_step(params.values, grad, adam)


def local_train(start: ParameterSet, data, epochs: int, adam: AdamState, seed: int, batch_size: int = 64,
                stream_labels=()) -> ParameterSet:
    """Plain Adam training over shuffled mini-batches; returns a new ParameterSet."""
    if len(data.labels) == 0:
        raise DataError("client dataset is empty")
    params = start.copy()
    _train_epochs(params, data, epochs, adam, stream(seed, "shuffle", *stream_labels), batch_size)
    return params


@dataclass
class GradientUpdate:
    """One client's update ``theta_local - theta_global`` over shared coordinates.

    ``attack`` is simulator ground truth; defence code only ever reads
    ``vector``.
    """

    client_id: int
    round: int
    vector: np.ndarray
    bn_local: bool = True
    num_samples: int = 0
    attack: str = "none"

    def with_vector(self, vector: np.ndarray, attack: str | None = None) -> "GradientUpdate":
        return GradientUpdate(self.client_id, self.round, vector, self.bn_local, self.num_samples,
                              self.attack if attack is None else attack)


def personalize(global_params: ParameterSet, local_state: ParameterSet | None, bn_local: bool) -> ParameterSet:
    """Global values overlaid with a client's persisted batch-norm state.

    Running statistics always come from ``local_state``; gamma/beta only when
    ``bn_local``.
    """
    out = global_params.copy()
    if local_state is None:
        return out
    if bn_local:
        mask = global_params.layout.bn_mask()
        out.values[mask] = local_state.values[mask]
    out.bn_stats[:] = local_state.bn_stats
    return out


def extract_update(local: ParameterSet, global_params: ParameterSet, bn_local: bool) -> np.ndarray:
    mask = global_params.layout.shared_mask(bn_local)
    diff = local.values.astype(np.float64) - global_params.values.astype(np.float64)
    return diff[mask].astype(np.float32)


def apply_update(params: ParameterSet, vector: np.ndarray, bn_local: bool) -> ParameterSet:
    """``params`` shifted by ``vector`` on the shared coordinates."""
    mask = params.layout.shared_mask(bn_local)
    vector = np.asarray(vector)
    if vector.shape != (int(mask.sum()),):
        raise ShapeError(f"update has {vector.shape} entries, layout shares {int(mask.sum())}")
    out = params.copy()
    out.values[mask] = (params.values[mask].astype(np.float64) + vector.astype(np.float64)).astype(np.float32)
    return out


def local_train_prox(global_params: ParameterSet, local_state: ParameterSet | None, data, epochs: int,
                     mu: float, adam: AdamState, seed: int, *, batch_size: int = 64, bn_local: bool = True,
                     client_id: int = 0, round_index: int = 0) -> tuple:
    """Proximal local training (FedProx objective, FedBN parameter split).

    Starts from the global values with the client's own batch-norm state
    restored, minimises ``F_k(theta) + mu/2 ||theta - theta_global||^2`` over
    the shared coordinates with Adam, and returns ``(theta_local, update)``.
    """
    if not 1 <= epochs <= 64:
        raise ConfigurationError("local epochs must lie in [1, 64]")
    if mu < 0:
        raise ConfigurationError("proximal mu must be >= 0")
    if len(data.labels) == 0:
        raise DataError(f"client {client_id} has an empty dataset")
    params = personalize(global_params, local_state, bn_local)
    anchor = global_params.values.astype(np.float64)
    shared = global_params.layout.shared_mask(bn_local)

    def prox(grad, values):
        return grad + mu * (values.astype(np.float64) - anchor) * shared

    hook = prox if mu > 0 else None
    rng = stream(seed, "shuffle", client_id, round_index)
    _train_epochs(params, data, epochs, adam, rng, batch_size, hook)
    update = GradientUpdate(client_id, round_index, extract_update(params, global_params, bn_local),
                            bn_local, len(data.labels))
    return params, update
