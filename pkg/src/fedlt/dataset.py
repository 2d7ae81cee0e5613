"""Synthetic long-tailed data, Dirichlet client splits and vector augmentations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DATA_HEADER = "FEDLT-DATA v1"


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    means: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ParameterError("inputs and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")

    @property
    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    @property
    def in_dim(self):
        return self.inputs.shape[1]

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.labels[idx], self.num_classes, self.means)

    def __eq__(self, other):
        return (
            isinstance(other, LabeledDataset)
            and self.num_classes == other.num_classes
            and np.array_equal(self.inputs, other.inputs)
            and np.array_equal(self.labels, other.labels)
        )


@dataclass(frozen=True)
class ClientPartition:
    indices: tuple  # one int64 array per client
    counts: np.ndarray  # K x C, n_k^c

    @property
    def num_clients(self):
        return len(self.indices)

    def sizes(self):
        return self.counts.sum(axis=1)


@dataclass(frozen=True)
class AugmentConfig:
    weak_noise_sigma: float = 0.15
    strong_noise_sigma: float = 0.45
    strong_mask_prob: float = 0.3
    strong_scale_range: tuple = (0.8, 1.25)

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or self.strong_noise_sigma < 0:
            raise ParameterError("noise sigmas must be non-negative")
        if self.weak_noise_sigma > self.strong_noise_sigma:
            raise ParameterError("weak_noise_sigma must not exceed strong_noise_sigma")
        if not 0.0 <= self.strong_mask_prob <= 1.0:
            raise ParameterError("strong_mask_prob must lie in [0, 1]")
        lo, hi = self.strong_scale_range
        if not 0 < lo <= hi:
            raise ParameterError("strong_scale_range needs 0 < lo <= hi")

    @classmethod
    def for_separation(cls, class_sep):
        return cls(0.05 * class_sep, 0.15 * class_sep, 0.3, (0.8, 1.25))

    @classmethod
    def identity(cls):
        return cls(0.0, 0.0, 0.0, (1.0, 1.0))


def longtail_counts(num_classes, n_max, imbalance):
    """Exponentially decaying per-class counts from ``n_max`` down to ``n_max / imbalance``."""
    if imbalance < 1:
        raise ParameterError(f"imbalance factor must be >= 1, got {imbalance}")
    if num_classes < 2:
        raise ParameterError("need at least two classes")
    if n_max < num_classes:
        raise ParameterError("n_max must be at least the number of classes")
    c = np.arange(num_classes)
    raw = n_max * float(imbalance) ** (-c / (num_classes - 1))
    return np.maximum(np.floor(raw + 0.5), 1).astype(np.int64)


def class_means(num_classes, in_dim, class_sep, rng):
    if in_dim < 2:
        raise ParameterError("in_dim must be at least 2")
    g = rng.standard_normal((in_dim, num_classes))
    if in_dim >= num_classes:
        q, _ = np.linalg.qr(g)
        dirs = q.T
    else:
        dirs = g.T / np.linalg.norm(g.T, axis=1, keepdims=True)
    return class_sep * dirs


def generate_synthetic(num_classes, counts, in_dim, class_sep, seed, means=None):
    """Isotropic unit-variance Gaussian blobs, one per class, rows grouped by class."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.shape != (num_classes,):
        raise ParameterError("need one count per class")
    rng = np.random.default_rng(seed)
    if means is None:
        means = class_means(num_classes, in_dim, class_sep, rng)
    labels = np.repeat(np.arange(num_classes), counts)
    inputs = means[labels] + rng.standard_normal((labels.size, in_dim))
    return LabeledDataset(inputs, labels, num_classes, means)


def _largest_remainder(total, proportions):
    quotas = total * proportions
    base = np.floor(quotas).astype(np.int64)
    short = total - base.sum()
    if short > 0:
        # stable sort keeps lower client ids first on equal remainders
        order = np.argsort(-(quotas - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(ds, num_clients, alpha, seed):
    """Split every class across clients with Dirichlet(alpha) proportions."""
    if num_clients < 1:
        raise ParameterError("need at least one client")
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    rng = np.random.default_rng(seed)
    per_client = [[] for _ in range(num_clients)]
    counts = np.zeros((num_clients, ds.num_classes), dtype=np.int64)
    for c in range(ds.num_classes):
        members = rng.permutation(np.flatnonzero(ds.labels == c))
        props = rng.dirichlet(np.full(num_clients, float(alpha)))
        sizes = _largest_remainder(members.size, props)
        start = 0
        for k, n in enumerate(sizes):
            per_client[k].append(members[start:start + n])
            start += n
        counts[:, c] = sizes
    indices = tuple(np.sort(np.concatenate(parts)).astype(np.int64) for parts in per_client)
    return ClientPartition(indices, counts)


def weak_augment(x, cfg, rng):
    x = np.asarray(x, dtype=np.float64)
    if cfg.weak_noise_sigma == 0:
        return x.copy()
    return x + rng.normal(0.0, cfg.weak_noise_sigma, size=x.shape)


def strong_augment(x, cfg, rng):
    """Random coordinate dropout, per-sample rescaling, then additive noise."""
    x = np.asarray(x, dtype=np.float64)
    keep = rng.random(x.shape) >= cfg.strong_mask_prob
    lo, hi = cfg.strong_scale_range
    scale = rng.uniform(lo, hi, size=x.shape[:-1] + (1,))
    out = np.where(keep, x, 0.0) * scale
    if cfg.strong_noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.strong_noise_sigma, size=x.shape)
    return out


def write_dataset(path, ds):
    with open(path, "w") as fh:
        fh.write(DATA_HEADER + "\n")
        fh.write(f"{len(ds)} {ds.in_dim} {ds.num_classes}\n")
        for row, y in zip(ds.inputs, ds.labels):
            fh.write(",".join(repr(float(v)) for v in row) + f",{int(y)}\n")


def read_dataset(path):
    with open(path) as fh:
        if fh.readline().rstrip("\n") != DATA_HEADER:
            raise ParameterError(f"{path}: not a {DATA_HEADER} file")
        n, in_dim, num_classes = (int(v) for v in fh.readline().split())
        inputs = np.empty((n, in_dim))
        labels = np.empty(n, dtype=np.int64)
        for i in range(n):
            parts = fh.readline().rstrip("\n").split(",")
            if len(parts) != in_dim + 1:
                raise ParameterError(f"{path}: row {i} has {len(parts)} fields, expected {in_dim + 1}")
            inputs[i] = [float(v) for v in parts[:-1]]
            labels[i] = int(parts[-1])
    return LabeledDataset(inputs, labels, num_classes)


def write_partition(path, part):
    with open(path, "w") as fh:
        for idx in part.indices:
            fh.write(",".join(str(int(i)) for i in idx) + "\n")


def read_partition(path, labels, num_classes):
    with open(path) as fh:
        lines = fh.read().splitlines()
    labels = np.asarray(labels)
    indices = tuple(np.array([int(v) for v in line.split(",")] if line else [], dtype=np.int64) for line in lines)
    counts = np.array([np.bincount(labels[idx], minlength=num_classes) for idx in indices], dtype=np.int64)
    return ClientPartition(indices, counts)
