"""Datasets, IDX parsing, non-IID partitioners and stratified splits."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (BadMagicError, ConfigurationError, CountMismatchError, DataError,
                     StratificationError, TruncatedPayloadError)
from .rng import stream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError("features must be (N, d) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError("labels out of range [0, C)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[indices], self.labels[indices], self.class_count)

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def concat(parts) -> LabeledDataset:
    parts = list(parts)
    return LabeledDataset(np.concatenate([p.features for p in parts]),
                          np.concatenate([p.labels for p in parts]), parts[0].class_count)


# --------------------------------------------------------------------------
# sources


def class_directions(classes: int, dim: int) -> np.ndarray:
    """Fixed unit vectors, one per class.

    Basis vectors when there are at most ``dim`` classes, otherwise evenly
    spaced directions in the plane of the first two coordinates.
    """
    dirs = np.zeros((classes, dim))
    if classes <= dim:
        dirs[np.arange(classes), np.arange(classes)] = 1.0
    elif dim == 1:
        dirs[:, 0] = np.where(np.arange(classes) % 2 == 0, 1.0, -1.0)
    else:
        angles = 2 * np.pi * np.arange(classes) / classes
        dirs[:, 0] = np.cos(angles)
        dirs[:, 1] = np.sin(angles)
    return dirs


def make_synthetic(classes: int, dim: int, samples: int, separation: float, seed: int) -> LabeledDataset:
    """Balanced isotropic Gaussian mixture with unit-variance components."""
    if classes < 2 or dim < 1 or samples < classes:
        raise ConfigurationError("need classes >= 2, dim >= 1 and samples >= classes")
    counts = np.full(classes, samples // classes)
    counts[: samples % classes] += 1
    labels = np.repeat(np.arange(classes), counts)
    rng = stream(seed, "synthetic")
    order = rng.permutation(samples)
    labels = labels[order]
    centers = separation * class_directions(classes, dim)
    features = centers[labels] + rng.standard_normal((samples, dim))
    return LabeledDataset(features, labels, classes)


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic: int, ndim: int):
    with _open(path) as fh:
        raw = fh.read()
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise TruncatedPayloadError(f"{path}: header shorter than {header_len} bytes")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    expected = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    data = np.frombuffer(payload, dtype=np.uint8, count=expected)
    return dims, data


def load_idx(images_path, labels_path, class_count: int = 10) -> LabeledDataset:
    """Parse an IDX image/label file pair (optionally gzipped).

    Pixels are scaled to [0, 1] and images flattened row-major.
    """
    (n_img, rows, cols), pixels = _read_idx(images_path, IMAGES_MAGIC, 3)
    (n_lab,), labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if n_img != n_lab:
        raise CountMismatchError(f"{n_img} images but {n_lab} labels")
    features = pixels.reshape(n_img, rows * cols).astype(np.float32) / np.float32(255.0)
    return LabeledDataset(features, labels.astype(np.int64), class_count)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(n, rows, cols)`` and labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, len(labels)))
        fh.write(labels.tobytes())


# --------------------------------------------------------------------------
# partitioning


@dataclass
class PartitionScheme:
    kind: str = "iid"  # iid | dirichlet | label_skew | quantity_skew
    alpha: float = 0.5
    ratio: float = 0.9
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "label_skew", "quantity_skew"):
            raise ConfigurationError(f"unknown partition scheme {self.kind!r}")
        if self.kind == "dirichlet" and self.alpha <= 0:
            raise ConfigurationError("dirichlet alpha must be > 0")
        if self.kind == "label_skew" and not 0 <= self.ratio <= 1:
            raise ConfigurationError("label skew ratio must lie in [0, 1]")
        if self.kind == "quantity_skew" and self.sigma < 0:
            raise ConfigurationError("quantity skew sigma must be >= 0")

    def label(self) -> str:
        if self.kind == "dirichlet":
            return f"dirichlet({self.alpha:g})"
        if self.kind == "label_skew":
            return f"label_skew({self.ratio:g})"
        if self.kind == "quantity_skew":
            return f"quantity_skew({self.sigma:g})"
        return "iid"


@dataclass
class PartitionPlan:
    scheme: PartitionScheme
    client_count: int
    assignments: list = field(default_factory=list)
    seed: int = 0

    def sizes(self) -> list:
        return [len(a) for a in self.assignments]


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    shares = np.asarray(shares, dtype=np.float64)
    exact = total * shares / shares.sum()
    base = np.floor(exact).astype(np.int64)
    short = total - base.sum()
    if short > 0:
        # stable sort keeps ties in index order
        order = np.argsort(-(exact - base), kind="stable")
        base[order[:short]] += 1
    return base


def _repair_empty(assignments: list) -> list:
    assignments = [list(a) for a in assignments]
    for k, a in enumerate(assignments):
        if not a:
            donor = max(range(len(assignments)), key=lambda j: (len(assignments[j]), -j))
            if len(assignments[donor]) < 2:
                raise ConfigurationError("not enough samples to give every client one")
            a.append(assignments[donor].pop())
    return assignments


def partition(ds: LabeledDataset, scheme: PartitionScheme, clients: int, seed: int) -> PartitionPlan:
    """Split ``ds`` indices across ``clients`` according to ``scheme``."""
    n = len(ds)
    if clients < 2:
        raise ConfigurationError("need at least two clients")
    if clients > n:
        raise ConfigurationError(f"{clients} clients but only {n} samples")
    rng = stream(seed, "partition", scheme.kind)
    labels = ds.labels
    C = ds.class_count

    if scheme.kind == "iid":
        order = rng.permutation(n)
        assignments = [order[k::clients].tolist() for k in range(clients)]

    elif scheme.kind == "dirichlet":
        assignments = [[] for _ in range(clients)]
        for c in range(C):
            idx = np.flatnonzero(labels == c)
            idx = idx[rng.permutation(len(idx))]
            props = rng.dirichlet(np.full(clients, scheme.alpha))
            counts = _largest_remainder(len(idx), props) if len(idx) else np.zeros(clients, int)
            cuts = np.cumsum(counts)[:-1]
            for k, part in enumerate(np.split(idx, cuts)):
                assignments[k].extend(part.tolist())

    elif scheme.kind == "label_skew":
        pools = {c: list(np.flatnonzero(labels == c)[rng.permutation(int((labels == c).sum()))]) for c in range(C)}
        quotas = _largest_remainder(n, np.ones(clients))
        assignments = [[] for _ in range(clients)]
        dominant = [k % C for k in range(clients)]
        for k in range(clients):
            want = int(round(scheme.ratio * quotas[k]))
            pool = pools[dominant[k]]
            take, pools[dominant[k]] = pool[:want], pool[want:]
            assignments[k].extend(int(i) for i in take)
        for k in range(clients):
            need = quotas[k] - len(assignments[k])
            others = [c for c in range(C) if c != dominant[k]]
            rest = np.array([i for c in others for i in pools[c]], dtype=np.int64)
            if need <= 0 or len(rest) == 0:
                continue
            pick = rest[rng.choice(len(rest), size=min(need, len(rest)), replace=False)]
            chosen = set(pick.tolist())
            for c in others:
                pools[c] = [i for i in pools[c] if i not in chosen]
            assignments[k].extend(int(i) for i in pick)

    else:  # quantity_skew
        shares = rng.lognormal(0.0, scheme.sigma, size=clients)
        counts = _largest_remainder(n, shares)
        order = rng.permutation(n)
        cuts = np.cumsum(counts)[:-1]
        assignments = [part.tolist() for part in np.split(order, cuts)]

    assignments = _repair_empty(assignments)
    return PartitionPlan(scheme, clients, [sorted(int(i) for i in a) for a in assignments], seed)


def histogram_tv_distance(ds: LabeledDataset, plan: PartitionPlan) -> float:
    """Mean total-variation distance between client and global class histograms."""
    glob = ds.class_histogram() / len(ds)
    dists = []
    for a in plan.assignments:
        h = np.bincount(ds.labels[a], minlength=ds.class_count) / len(a)
        dists.append(0.5 * np.abs(h - glob).sum())
    return float(np.mean(dists))


# --------------------------------------------------------------------------
# stratified splitting


def _split_cells(class_sizes: np.ndarray, fractions: np.ndarray) -> np.ndarray:
    """Integer (class x split) allocation.

    Split totals follow largest-remainder rounding of ``N * fractions``; each
    cell is the floor of its exact share plus zero or one, so every cell is
    within one sample of exact proportionality. Extra units are placed with
    Ryser's greedy construction (largest remaining column demand first), which
    always succeeds when the margins are consistent.
    """
    exact = np.outer(class_sizes, fractions)
    cells = np.floor(exact).astype(np.int64)
    totals = _largest_remainder(int(class_sizes.sum()), fractions)
    row_extra = class_sizes - cells.sum(axis=1)
    col_need = totals - cells.sum(axis=0)
    for c in np.argsort(-row_extra, kind="stable"):
        k = int(row_extra[c])
        if k == 0:
            continue
        frac = exact[c] - cells[c]
        order = sorted(range(len(fractions)), key=lambda s: (-col_need[s], -frac[s], s))
        for s in order[:k]:
            cells[c, s] += 1
            col_need[s] -= 1
    return cells


def stratified_split(ds: LabeledDataset, fractions=(0.70, 0.15, 0.15), seed: int = 0) -> tuple:
    fractions = np.asarray(fractions, dtype=np.float64)
    if abs(fractions.sum() - 1.0) > 1e-9 or (fractions < 0).any():
        raise ConfigurationError("split fractions must be non-negative and sum to 1")
    sizes = ds.class_histogram()
    if (sizes < len(fractions)).any():
        bad = int(np.argmin(sizes))
        raise StratificationError(f"class {bad} has {sizes[bad]} samples; need >= {len(fractions)}")
    cells = _split_cells(sizes, fractions)
    rng = stream(seed, "stratify")
    parts = [[] for _ in fractions]
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        cuts = np.cumsum(cells[c])[:-1]
        for s, chunk in enumerate(np.split(idx, cuts)):
            parts[s].extend(chunk.tolist())
    return tuple(ds.subset(np.sort(np.array(p, dtype=np.int64))) for p in parts)


def stratified_sample(ds: LabeledDataset, count: int, seed: int) -> LabeledDataset:
    """A class-proportional subset of ``count`` samples (all of ``ds`` if smaller)."""
    if count >= len(ds):
        return ds
    frac = count / len(ds)
    picked, _ = stratified_split(ds, (frac, 1 - frac), seed)
    return picked


def intensity_normalize(ds: LabeledDataset, stats=None) -> tuple:
    """Scalar mean/std normalisation; returns ``(normalised, (mean, std))``.

    Stats are computed from ``ds`` itself unless given.
    """
    if stats is None:
        mean = float(ds.features.astype(np.float64).mean())
        std = float(ds.features.astype(np.float64).std())
        stats = (mean, std if std > 0 else 1.0)
    mean, std = stats
    feats = ((ds.features.astype(np.float64) - mean) / std).astype(np.float32)
    return LabeledDataset(feats, ds.labels, ds.class_count), stats
