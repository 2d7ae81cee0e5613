"""Correlation-based effective class priors and their server/client combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .losses import PRIOR_FLOOR, normalize


class PriorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PriorEstimate:
    raw: np.ndarray

    @property
    def seen(self):
        return self.raw > 0

    @property
    def normalized(self):
        total = self.raw.sum()
        return self.raw / total if total > 0 else np.zeros_like(self.raw)


def pearson_matrix(features, prototype):
    """Cosine similarity of deviations from ``prototype`` between every pair of rows.

    A row whose deviation norm is below 1e-10 only correlates with itself.
    """
    h = np.atleast_2d(np.asarray(features, dtype=np.float64))
    mu = np.asarray(prototype, dtype=np.float64)
    if h.shape[0] < 1:
        raise PriorError("need at least one feature row")
    if mu.shape != (h.shape[1],):
        raise PriorError(f"prototype of shape {mu.shape} does not match features {h.shape}")
    dev = h - mu
    norms = np.sqrt((dev * dev).sum(axis=1))
    ok = norms >= _accel.DEGENERATE_NORM
    units = np.zeros_like(dev)
    units[ok] = dev[ok] / norms[ok, None]
    r = np.clip(units @ units.T, -1.0, 1.0)
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return r


def batch_effective_count(r):
    """Reciprocal of the mean correlation entry, floored so a batch counts at most its size."""
    r = np.asarray(r, dtype=np.float64)
    m = r.shape[0]
    quad = r.sum() / (m * m)
    return 1.0 / max(quad, 1.0 / m)


def effective_prior(batches, prototypes, num_classes):
    """Sum of per-batch effective counts for every class.

    ``batches`` is an iterable of ``(features, labels)`` and ``prototypes`` a
    ``num_classes x d`` array (or class -> vector map) of class centres.
    """
    protos = _prototype_array(prototypes, num_classes)
    raw = np.zeros(num_classes)
    for feats, labels in batches:
        counts, _ = _accel.batch_effective_counts(feats, labels, protos, num_classes)
        raw += counts
    return PriorEstimate(raw)


def _prototype_array(prototypes, num_classes):
    if isinstance(prototypes, dict):
        d = len(next(iter(prototypes.values())))
        arr = np.zeros((num_classes, d))
        for c, v in prototypes.items():
            arr[c] = v
        return arr
    return np.asarray(prototypes, dtype=np.float64)


class RunningPrior:
    """Accumulates effective counts batch by batch against a running prototype.

    Each class centre starts at ``initial_prototypes`` and, once the class has
    been seen in this pass, becomes the mean of all its features seen so far.
    The centre used for a batch never includes that batch.
    """

    def __init__(self, initial_prototypes, num_classes):
        self.num_classes = num_classes
        self.centres = np.array(_prototype_array(initial_prototypes, num_classes), dtype=np.float64)
        self._sums = np.zeros_like(self.centres)
        self._seen = np.zeros(num_classes, dtype=np.int64)
        self.raw = np.zeros(num_classes)

    def update(self, features, labels):
        labels = np.asarray(labels, dtype=np.int64)
        counts, _ = _accel.batch_effective_counts(features, labels, self.centres, self.num_classes)
        self.raw += counts
        np.add.at(self._sums, labels, features)
        self._seen += np.bincount(labels, minlength=self.num_classes)
        hit = self._seen > 0
        self.centres[hit] = self._sums[hit] / self._seen[hit, None]

    def estimate(self):
        return PriorEstimate(self.raw.copy())


def ema_update(old, new, momentum):
    old = np.asarray(old, dtype=np.float64)
    new = np.asarray(new, dtype=np.float64)
    if old.shape != new.shape:
        raise PriorError(f"cannot blend priors of shapes {old.shape} and {new.shape}")
    if not 0.0 <= momentum <= 1.0:
        raise PriorError(f"momentum must lie in [0, 1], got {momentum}")
    return normalize(momentum * old + (1.0 - momentum) * new)


def aggregate_global_prior(estimates, client_sizes):
    """Sample-size weighted mean of client distributions."""
    if len(estimates) == 0:
        raise PriorError("no client estimates to aggregate")
    sizes = np.asarray(client_sizes, dtype=np.float64)
    weights = sizes / sizes.sum()
    dists = [e.normalized if isinstance(e, PriorEstimate) else normalize(e) for e in estimates]
    return normalize(np.sum([w * d for w, d in zip(weights, dists)], axis=0))


def fuse(global_prior, local_prior, gamma):
    """``(1 - gamma) * global + gamma * local``, floored and renormalised."""
    if not 0.0 <= gamma <= 1.0:
        raise PriorError(f"gamma must lie in [0, 1], got {gamma}")
    g = np.asarray(global_prior, dtype=np.float64)
    k = np.asarray(local_prior, dtype=np.float64)
    return normalize((1.0 - gamma) * g + gamma * k, PRIOR_FLOOR)
