"""Server-side aggregation rules and QSGD compression.

``fedbnp`` is the trust-weighted rule ``theta + sum_k w_k g_k`` with batch-norm
affine parameters left on the clients. The remaining kinds are comparison
baselines: FedAvg/FedProx (data-size weighted mean), FedBN, Krum,
coordinate-wise median, geometric median (Weiszfeld) and an FLTrust-style
cosine-trust rule. The robust baselines are simplified ``*_like`` versions,
not full reproductions of their original papers.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .model import ParameterSet, apply_update
from .rng import stream

AGGREGATOR_KINDS = ("fedavg", "fedprox", "fedbn", "fedbnp", "krum", "coord_median", "geo_median", "fltrust_like")
BN_LOCAL_KINDS = ("fedbn", "fedbnp")


@dataclass
class AggregatorSpec:
    kind: str = "fedavg"
    prox_mu: float = 0.01
    krum_f: int = 3
    weiszfeld_iters: int = 100
    weiszfeld_tol: float = 1e-6
    weiszfeld_eps: float = 1e-10

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigurationError(f"unknown aggregator {self.kind!r}")
        if self.prox_mu < 0 or self.krum_f < 0 or self.weiszfeld_iters < 1:
            raise ConfigurationError("invalid aggregator options")

    @property
    def bn_local(self) -> bool:
        return self.kind in BN_LOCAL_KINDS

    @property
    def client_mu(self) -> float:
        """Proximal coefficient used during local training."""
        return self.prox_mu if self.kind in ("fedprox", "fedbnp") else 0.0


def _stack(updates) -> np.ndarray:
    vecs = [np.asarray(u.vector if hasattr(u, "vector") else u, dtype=np.float64) for u in updates]
    if not vecs:
        raise ConfigurationError("aggregation needs at least one update")
    if len({v.shape for v in vecs}) != 1:
        raise ShapeError("updates have different lengths")
    return np.stack(vecs)


def weighted_sum(G: np.ndarray, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(G),):
        raise ShapeError("one weight per update required")
    return w @ G


def krum_select(G: np.ndarray, f: int) -> int:
    """Index of the update with the smallest sum of squared distances to its
    ``n - f - 2`` nearest neighbours (ties go to the lowest index)."""
    n = len(G)
    if n < 2 * f + 3:
        raise ConfigurationError(f"krum with f={f} needs at least {2 * f + 3} updates, got {n}")
    sq = (G * G).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * G @ G.T, 0.0)
    m = n - f - 2
    scores = []
    for i in range(n):
        others = np.delete(d2[i], i)
        scores.append(np.sort(others)[:m].sum())
    return int(np.argmin(scores))


def coordinate_median(G: np.ndarray) -> np.ndarray:
    return np.median(G, axis=0)


def geometric_median(G: np.ndarray, iters: int = 100, tol: float = 1e-6, eps: float = 1e-10,
                     weights=None) -> np.ndarray:
    """Weiszfeld iteration started from the (weighted) mean.

    If an iterate lands on an input point (distance below ``eps``) that point
    is returned. Weiszfeld converges slowly when the minimiser sits on or near
    an input point, so the result is never worse than the best input point.
    """
    w = np.ones(len(G)) if weights is None else np.asarray(weights, dtype=np.float64)
    z = (w @ G) / w.sum()
    for _ in range(iters):
        dist = np.linalg.norm(G - z, axis=1)
        hit = dist < eps
        if hit.any():
            return G[int(np.argmax(hit))].copy()
        beta = w / dist
        z_new = (beta @ G) / beta.sum()
        moved = np.linalg.norm(z_new - z)
        z = z_new
        if moved <= tol * max(1.0, np.linalg.norm(z)):
            break
    # the iteration budget can stop short near an input point; never do worse than the best input
    cost = np.array([w @ np.linalg.norm(G - g, axis=1) for g in G])
    j = int(np.argmin(cost))
    if cost[j] < w @ np.linalg.norm(G - z, axis=1):
        return G[j].copy()
    return z


def fltrust_weights(G: np.ndarray, ref: np.ndarray) -> np.ndarray | None:
    """Normalised ``ReLU(cos(g_k, ref)) * |ref| / |g_k|``; ``None`` if all zero."""
    ref = np.asarray(ref, dtype=np.float64)
    ref_norm = np.linalg.norm(ref)
    norms = np.linalg.norm(G, axis=1)
    raw = np.zeros(len(G))
    ok = (norms > 0) & (ref_norm > 0)
    raw[ok] = np.maximum((G[ok] @ ref) / (norms[ok] * ref_norm), 0.0) * ref_norm / norms[ok]
    total = raw.sum()
    if total <= 0:
        return None
    return raw / total


def data_size_weights(updates) -> np.ndarray:
    sizes = np.array([max(int(getattr(u, "num_samples", 0)), 0) for u in updates], dtype=np.float64)
    if sizes.sum() <= 0:
        return np.full(len(updates), 1.0 / len(updates))
    return sizes / sizes.sum()


def combine_updates(spec: AggregatorSpec, updates, weights=None, reference=None) -> np.ndarray:
    """The aggregate update vector (before it is added to the global model)."""
    G = _stack(updates)
    kind = spec.kind
    if kind in ("fedavg", "fedprox", "fedbn"):
        w = data_size_weights(updates) if weights is None else weights
        return weighted_sum(G, w)
    if kind == "fedbnp":
        if weights is None:
            weights = data_size_weights(updates)
        w = getattr(weights, "weights", weights)
        return weighted_sum(G, w)
    if kind == "krum":
        return G[krum_select(G, spec.krum_f)].copy()
    if kind == "coord_median":
        return coordinate_median(G)
    if kind == "geo_median":
        return geometric_median(G, spec.weiszfeld_iters, spec.weiszfeld_tol, spec.weiszfeld_eps)
    # fltrust_like
    if reference is None:
        raise ConfigurationError("fltrust_like needs a reference update")
    w = fltrust_weights(G, reference)
    if w is None:
        return np.asarray(reference, dtype=np.float64).copy()
    return weighted_sum(G, w)


def aggregate(spec: AggregatorSpec, global_params: ParameterSet, updates, weights=None,
              reference=None) -> ParameterSet:
    """New global parameters.

    ``weights`` is a TrustAssignment (or plain weight vector) for ``fedbnp``
    and optional data-size overrides for the FedAvg family; other kinds
    ignore it. ``reference`` is the server reference update for
    ``fltrust_like``.
    """
    delta = combine_updates(spec, updates, weights, reference)
    return apply_update(global_params, delta.astype(np.float32), spec.bn_local)


# --------------------------------------------------------------------------
# QSGD


def level_count(bits: int) -> int:
    """Magnitude levels ``s = 2^bits - 1``; the sign travels separately."""
    return (1 << bits) - 1


def _pack(values: np.ndarray, width: int) -> bytes:
    planes = ((values.astype(np.uint32)[:, None] >> np.arange(width, dtype=np.uint32)) & 1).astype(np.uint8)
    return np.packbits(planes.ravel(), bitorder="little").tobytes()


def _unpack(blob: bytes, count: int, width: int) -> np.ndarray:
    flat = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")[: count * width]
    return (flat.reshape(count, width).astype(np.uint32) << np.arange(width, dtype=np.uint32)).sum(axis=1)


@dataclass
class QuantizedUpdate:
    norm: float
    levels: np.ndarray  # magnitude level per coordinate, 0..s
    signs: np.ndarray   # bool, True where the coordinate is negative
    bits: int

    @property
    def level_count(self) -> int:
        return level_count(self.bits)

    @property
    def dim(self) -> int:
        return len(self.levels)

    def to_bytes(self) -> bytes:
        """Header (dim u32, bits u8, norm f32) + zlib-compressed bit planes.

        Levels take ``bits`` bits and signs one bit per coordinate before
        compression. After normalisation by the norm most levels are small,
        so the entropy stage brings 8-bit codes under a quarter of float32.
        """
        payload = _pack(self.levels, self.bits) + _pack(self.signs & (self.levels > 0), 1)
        return struct.pack("<IBf", self.dim, self.bits, self.norm) + zlib.compress(payload, 9)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantizedUpdate":
        dim, bits, norm = struct.unpack("<IBf", blob[:9])
        payload = zlib.decompress(blob[9:])
        split = (dim * bits + 7) // 8
        levels = _unpack(payload[:split], dim, bits).astype(np.uint16)
        signs = _unpack(payload[split:], dim, 1).astype(bool)
        return cls(float(norm), levels, signs, bits)

    def serialized_size(self) -> int:
        return len(self.to_bytes())


def quantize(v, bits: int = 8, seed: int = 0, *labels) -> QuantizedUpdate:
    """Stochastic uniform quantisation of ``|v_i| / ||v||`` onto ``s`` levels.

    Rounding up happens with probability equal to the fractional position
    between the neighbouring levels, so ``dequantize`` is unbiased.
    """
    if not 1 <= bits <= 16:
        raise ConfigurationError("bits must lie in [1, 16]")
    v = np.asarray(v, dtype=np.float64)
    s = level_count(bits)
    norm = float(np.float32(np.linalg.norm(v)))
    if norm == 0.0:
        return QuantizedUpdate(0.0, np.zeros(v.size, np.uint16), np.zeros(v.size, bool), bits)
    scaled = np.abs(v) / norm * s
    lower = np.floor(scaled)
    rng = stream(seed, "qsgd", *labels)
    up = rng.random(v.size) < (scaled - lower)
    levels = np.minimum(lower + up, s).astype(np.uint16)
    return QuantizedUpdate(norm, levels, v < 0, bits)


def dequantize(q: QuantizedUpdate) -> np.ndarray:
    mag = q.norm * q.levels.astype(np.float64) / q.level_count
    return np.where(q.signs, -mag, mag)
