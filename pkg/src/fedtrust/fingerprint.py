"""Per-update fingerprint features, the server reference update and the gradient VAE.

Features (all computed on the shared-coordinate update vector only):

f1  VAE reconstruction error of the projected update
f2  cosine to the server reference update
f3  mean cosine to the other clients' updates
f4  L2 norm
f5  fraction of coordinates whose sign matches the reference
f6  smoothed Shapley contribution (filled in by ``fedtrust.shapley``)
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .model import AdamState, ParameterSet, _train_epochs, extract_update, personalize
from .nn import Adam, DenseStack
from .rng import stream


@dataclass
class FingerprintVector:
    f1: float = 0.0
    f2: float = 0.0
    f3: float = 0.0
    f4: float = 0.0
    f5: float = 0.5
    f6: float = 0.0
    degenerate: bool = False
    vae_untrained: bool = True

    def as_array(self) -> np.ndarray:
        return np.array([self.f1, self.f2, self.f3, self.f4, self.f5, self.f6])

    def check_ranges(self) -> None:
        arr = self.as_array()
        assert np.isfinite(arr).all(), "non-finite fingerprint"
        assert self.f1 >= 0 and self.f4 >= 0
        assert -1 - 1e-9 <= self.f2 <= 1 + 1e-9 and -1 - 1e-9 <= self.f3 <= 1 + 1e-9
        assert 0 <= self.f5 <= 1


@dataclass
class ReferenceGradient:
    vector: np.ndarray
    round: int


def compute_reference(global_params: ParameterSet, server_state: ParameterSet | None, server_val, lr: float,
                      seed: int, round_index: int, *, weight_decay: float = 0.0, batch_size: int = 64,
                      bn_local: bool = True) -> tuple:
    """One plain Adam epoch on the server validation set, starting from global.

    Returns ``(ReferenceGradient, server_state)``; the server keeps its own
    batch-norm state exactly like a client.
    """
    params = personalize(global_params, server_state, bn_local)
    adam = AdamState.fresh(params.layout.size, lr, weight_decay)
    _train_epochs(params, server_val, 1, adam, stream(seed, "reference", round_index), batch_size)
    vec = extract_update(params, global_params, bn_local)
    return ReferenceGradient(vec, round_index), params


def _cos(a: np.ndarray, b: np.ndarray) -> tuple:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0, True
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0)), False


def f2_reference_cosine(g, ref) -> float:
    return _cos(np.asarray(g, np.float64), np.asarray(ref, np.float64))[0]


def f3_peer_cosine(g, peers) -> float:
    """Mean cosine of ``g`` against every vector in ``peers``."""
    g = np.asarray(g, np.float64)
    peers = list(peers)
    if not peers:
        raise ValueError("f3 needs at least one peer")
    return float(np.mean([_cos(g, np.asarray(p, np.float64))[0] for p in peers]))


def f4_l2(g) -> float:
    return float(np.linalg.norm(np.asarray(g, np.float64)))


def f5_sign_consistency(g, ref) -> float:
    """Share of coordinates with ``sign(g) == sign(ref)`` among those where
    ``ref != 0``; 0.5 when the reference is identically zero."""
    g = np.asarray(g)
    ref = np.asarray(ref)
    live = ref != 0
    if not live.any():
        return 0.5
    return float((np.sign(g[live]) == np.sign(ref[live])).mean())


def is_degenerate(g) -> bool:
    return not np.any(np.asarray(g))


# --------------------------------------------------------------------------
# gradient VAE


@dataclass
class VaeConfig:
    input_dim: int = 256
    hidden: tuple = (128, 64)
    latent_dim: int = 16
    buffer_capacity: int = 512
    train_interval: int = 20
    min_buffer: int = 64
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    kl_weight: float = 1e-3


class VaeModel:
    """Gradient VAE over a frozen random projection of the update vector.

    Inputs are divided by a scalar scale (the RMS of the buffer at the last
    training) before entering the network; ``reconstruction_error`` reports
    the error back in projected units.
    """

    def __init__(self, gradient_dim: int, cfg: VaeConfig | None = None, seed: int = 0):
        self.cfg = cfg or VaeConfig()
        c = self.cfg
        self.gradient_dim = gradient_dim
        self.seed = seed
        prng = stream(seed, "vae-projection")
        self.projection = (prng.standard_normal((gradient_dim, c.input_dim)) / np.sqrt(c.input_dim)).astype(np.float32)
        self.projection.setflags(write=False)
        self.encoder = DenseStack([c.input_dim, *c.hidden, 2 * c.latent_dim])
        self.decoder = DenseStack([c.latent_dim, *reversed(c.hidden), c.input_dim])
        irng = stream(seed, "vae-init")
        self.theta = np.concatenate([self.encoder.init(irng), self.decoder.init(irng)])
        self.buffer = deque(maxlen=c.buffer_capacity)
        self.scale = 1.0
        self.trained = False
        self.last_trained_round = -1
        self.train_calls = 0

    # parameters are one flat vector: encoder first, decoder second
    def _split(self, theta):
        return theta[: self.encoder.size], theta[self.encoder.size:]

    def project(self, g) -> np.ndarray:
        return np.asarray(g, np.float32).astype(np.float64) @ self.projection.astype(np.float64)

    def push(self, g) -> None:
        self.buffer.append(self.project(g))

    def reconstruct(self, p: np.ndarray) -> np.ndarray:
        """Decoder output at the posterior mean, in projected units."""
        enc, dec = self._split(self.theta)
        x = np.atleast_2d(p) / self.scale
        h, _ = self.encoder.forward(enc, x)
        mu = h[:, : self.cfg.latent_dim]
        out, _ = self.decoder.forward(dec, mu)
        return out * self.scale

    def reconstruction_error(self, g) -> float:
        p = self.project(g)
        if not self.trained:
            return float(p @ p)
        r = self.reconstruct(p)[0]
        return float(((p - r) ** 2).sum())

    def loss_and_grad(self, theta, x, noise) -> tuple:
        """Mean-squared reconstruction + weighted KL, for scaled inputs ``x``.

        ``noise`` is the standard-normal reparameterisation draw, passed in so
        the loss is a deterministic function of ``theta``.
        """
        c = self.cfg
        L = c.latent_dim
        enc, dec = self._split(theta)
        h, enc_cache = self.encoder.forward(enc, x)
        mu, logvar = h[:, :L], h[:, L:]
        std = np.exp(0.5 * logvar)
        z = mu + std * noise
        out, dec_cache = self.decoder.forward(dec, z)
        n, d = x.shape
        diff = out - x
        mse = (diff ** 2).mean()
        kl = -0.5 * (1 + logvar - mu ** 2 - np.exp(logvar)).sum(axis=1).mean()
        loss = mse + c.kl_weight * kl

        dout = 2.0 * diff / (n * d)
        g_dec, dz = self.decoder.backward(dec, dec_cache, dout)
        dmu = dz + c.kl_weight * mu / n
        dlogvar = dz * noise * 0.5 * std + c.kl_weight * 0.5 * (np.exp(logvar) - 1) / n
        g_enc, _ = self.encoder.backward(enc, enc_cache, np.concatenate([dmu, dlogvar], axis=1))
        return float(loss), np.concatenate([g_enc, g_dec])

    def should_train(self, round_index: int) -> bool:
        return round_index % self.cfg.train_interval == 0 and len(self.buffer) >= self.cfg.min_buffer

    def fit(self, round_index: int) -> None:
        """Unconditional training pass over the current buffer."""
        c = self.cfg
        data = np.stack(self.buffer)
        rms = float(np.sqrt((data ** 2).mean()))
        self.scale = rms if rms > 0 else 1.0
        x_all = data / self.scale
        rng = stream(self.seed, "vae-train", round_index)
        opt = Adam(self.theta.size, c.lr)
        for _ in range(c.epochs):
            order = rng.permutation(len(x_all))
            for start in range(0, len(order), c.batch_size):
                xb = x_all[order[start:start + c.batch_size]]
                noise = rng.standard_normal((len(xb), c.latent_dim))
                _, grad = self.loss_and_grad(self.theta, xb, noise)
                opt.step(self.theta, grad)
        self.trained = True
        self.last_trained_round = round_index
        self.train_calls += 1


def vae_train(vae: VaeModel, round_index: int) -> VaeModel:
    """Train when ``round_index`` hits the schedule and the buffer is big enough."""
    if vae.should_train(round_index):
        vae.fit(round_index)
    return vae


def f1_recon_error(vae: VaeModel, g) -> float:
    return vae.reconstruction_error(g)


def admit_to_buffer(norms, weights, round_index: int, bootstrap_rounds: int = 20) -> list:
    """Indices of updates considered benign enough for the VAE buffer.

    Early rounds admit norms within [0.5x, 2x] of the round median; later
    rounds admit clients whose trust weight is at least 0.6 of a uniform share.
    """
    norms = np.asarray(norms, np.float64)
    n = len(norms)
    if round_index <= bootstrap_rounds or weights is None:
        med = np.median(norms)
        if med <= 0:
            return []
        return [k for k in range(n) if 0.5 * med <= norms[k] <= 2.0 * med]
    w = np.asarray(weights, np.float64)
    return [k for k in range(n) if w[k] >= 0.6 / n]


def compute_fingerprints(vectors, ref, vae: VaeModel | None) -> list:
    """f1..f5 for every update in the round (f6 is left at 0)."""
    vecs = [np.asarray(v, np.float64) for v in vectors]
    ref = np.asarray(ref, np.float64)
    out = []
    for k, g in enumerate(vecs):
        peers = [p for j, p in enumerate(vecs) if j != k]
        fp = FingerprintVector(
            f1=f1_recon_error(vae, g) if vae is not None else 0.0,
            f2=f2_reference_cosine(g, ref),
            f3=f3_peer_cosine(g, peers) if peers else 0.0,
            f4=f4_l2(g),
            f5=f5_sign_consistency(g, ref),
            degenerate=is_degenerate(g) or is_degenerate(ref),
            vae_untrained=vae is None or not vae.trained,
        )
        out.append(fp)
    return out
