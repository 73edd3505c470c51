"""Central finite-difference checks of every hand-written gradient.

Coordinates whose perturbation flips a ReLU on/off pattern (a kink inside
the ``+-h`` stencil) are skipped: there the loss is not differentiable on
the stencil and central differences are meaningless. The report keeps the
skip count so a check cannot silently pass by skipping everything.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fingerprint import VaeConfig, VaeModel
from .model import _run_forward, build_model, loss_and_grad
from .rng import stream
from .trust import AttentionConfig, TrustNetParams, anomaly_loss_and_grad, chunk_stats, trust_forward

TOLERANCE = 1e-4
STEP = 1e-5
# gradients below this norm are round-off (e.g. a bias feeding batch-norm,
# whose true gradient is exactly zero)
NORM_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    seed: int
    block: str
    rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.rel_error < TOLERANCE


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``||a - n|| / max(||a||, ||n||, NORM_FLOOR)``."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), NORM_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def central_differences(eval_fn, theta: np.ndarray, coords, h: float = STEP):
    """Numeric partials at ``coords``; returns ``(values, kept_mask)``.

    ``eval_fn(theta)`` returns ``(loss, activation_pattern)``.
    """
    _, base_pattern = eval_fn(theta)
    out = np.zeros(len(coords))
    kept = np.ones(len(coords), dtype=bool)
    for j, i in enumerate(coords):
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        lp, pp = eval_fn(plus)
        lm, pm = eval_fn(minus)
        if not (np.array_equal(pp, base_pattern) and np.array_equal(pm, base_pattern)):
            kept[j] = False
            continue
        out[j] = (lp - lm) / (2 * h)
    return out, kept


def _check_blocks(name, seed, eval_fn, grad, theta, blocks, max_coords, rng):
    results = []
    for block, (lo, hi) in blocks.items():
        coords = np.arange(lo, hi)
        if len(coords) > max_coords:
            coords = np.sort(rng.choice(coords, size=max_coords, replace=False))
        numeric, kept = central_differences(eval_fn, theta, coords)
        err = rel_error(grad[coords][kept], numeric[kept])
        results.append(CheckResult(name, seed, block, err, int(kept.sum()), int((~kept).sum())))
    return results


def check_model(kind: str, seed: int, max_coords: int = 400) -> list:
    """Per-slice check of the classifier gradient on a seeded train-mode batch."""
    hidden = [] if kind == "logreg" else [7, 5]
    params = build_model(kind, 6, hidden, 4, seed)
    rng = stream(seed, "gradcheck", kind)
    x = rng.standard_normal((12, 6))
    y = rng.integers(0, 4, size=12)
    theta = params.values.astype(np.float64) + 0.1 * rng.standard_normal(params.layout.size)
    layout = params.layout
    stats = np.zeros(layout.stats_size)

    def eval_fn(t):
        loss, _, steps = _run_forward(layout, t, stats, x, y, True)
        masks = [s[2].ravel() for s in steps if s[0] == "relu"]
        return loss, (np.concatenate(masks) if masks else np.zeros(0, bool))

    _, grad = loss_and_grad(theta, layout, x, y)
    blocks = {f"layer{s.layer}.{s.role}": (s.start, s.stop) for s in layout.slices}
    return _check_blocks(f"model:{kind}", seed, eval_fn, grad, theta, blocks, max_coords, rng)


def check_vae(seed: int, max_coords: int = 300) -> list:
    cfg = VaeConfig(input_dim=12, hidden=(9, 7), latent_dim=3)
    vae = VaeModel(30, cfg, seed)
    rng = stream(seed, "gradcheck", "vae")
    x = rng.standard_normal((6, cfg.input_dim))
    noise = rng.standard_normal((6, cfg.latent_dim))
    theta = vae.theta.copy()

    def eval_fn(t):
        enc, dec = vae._split(t)
        h, (_, enc_masks) = vae.encoder.forward(enc, x)
        L = cfg.latent_dim
        z = h[:, :L] + np.exp(0.5 * h[:, L:]) * noise
        _, (_, dec_masks) = vae.decoder.forward(dec, z)
        return vae.loss_and_grad(t, x, noise)[0], np.concatenate([m.ravel() for m in enc_masks + dec_masks])

    _, grad = vae.loss_and_grad(theta, x, noise)
    blocks = {"encoder": (0, vae.encoder.size), "decoder": (vae.encoder.size, theta.size)}
    return _check_blocks("vae", seed, eval_fn, grad, theta, blocks, max_coords, rng)


def check_attention(seed: int, max_coords: int = 300) -> list:
    cfg = AttentionConfig(chunk_count=8, heads=2, model_dim=8, fused_dim=4)
    params = TrustNetParams(cfg, seed=seed)
    rng = stream(seed, "gradcheck", "attention")
    grads_in = [chunk_stats(rng.standard_normal(40) * 0.3, cfg.chunk_count) for _ in range(5)]
    feats = rng.standard_normal((5, 6))
    labels = np.array([0, 1, 0, 0, 1], dtype=float)
    theta = params.theta + 0.05 * rng.standard_normal(params.size)

    y = labels

    def eval_fn(t):
        _, _, logit, cache = trust_forward(TrustNetParams(cfg, t), grads_in, feats)
        loss = float(np.mean(np.logaddexp(0.0, logit) - y * logit))
        return loss, cache[6] > 0

    _, grad = anomaly_loss_and_grad(params, theta, grads_in, feats, labels)
    blocks = {n: params.offsets[n] for n in params.shapes}
    return _check_blocks("attention", seed, eval_fn, grad, theta, blocks, max_coords, rng)


def run_suite(seeds=range(10)) -> list:
    results = []
    for seed in seeds:
        results += check_model("logreg", seed)
        results += check_model("mlp_bn", seed)
        results += check_vae(seed)
        results += check_attention(seed)
    return results
