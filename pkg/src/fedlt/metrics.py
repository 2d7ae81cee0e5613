"""Diagnostics: grouped accuracy, prototype angles, prior distance, feature agreement."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

GROUPS = ("many", "medium", "few")


@dataclass
class RoundMetrics:
    round: int
    acc_all: float
    acc_many: float | None = None
    acc_medium: float | None = None
    acc_few: float | None = None
    nc_min_angle: float | None = None
    nc_max_angle: float | None = None
    nc_mean_angle: float | None = None
    prior_l2: float | None = None
    feat_cos_global_local: float | None = None
    losses: dict = field(default_factory=dict)

    def as_dict(self):
        return asdict(self)


def class_groups(class_counts, thresholds=None):
    """Map each class to many/medium/few.

    Without ``thresholds`` classes are ranked by count and cut into thirds;
    classes tied with a boundary class join the higher group, so a balanced
    set lands entirely in "many". ``thresholds=(hi, lo)`` uses absolute
    counts: more than ``hi`` is many, fewer than ``lo`` is few.
    """
    counts = np.asarray(class_counts)
    c = counts.size
    groups = np.empty(c, dtype=object)
    if thresholds is not None:
        hi, lo = thresholds
        groups[:] = "medium"
        groups[counts > hi] = "many"
        groups[counts < lo] = "few"
        return groups
    order = np.argsort(-counts, kind="stable")
    n_many = max(1, int(np.floor(c / 3 + 0.5)))
    n_few = max(1, int(np.floor(c / 3 + 0.5)))
    many_cut = counts[order[n_many - 1]]
    few_cut = counts[order[c - n_few]]
    groups[:] = "medium"
    groups[counts <= few_cut] = "few"
    groups[counts >= many_cut] = "many"
    return groups


def grouped_accuracy(preds, labels, class_counts, thresholds=None):
    """Top-1 accuracy overall and per frequency group; empty groups give None."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    correct = preds == labels
    groups = class_groups(class_counts, thresholds)
    sample_groups = groups[labels]
    out = {"all": float(correct.mean()) if correct.size else None}
    for g in GROUPS:
        sel = sample_groups == g
        out[g] = float(correct[sel].mean()) if sel.any() else None
    return out


class NCAngles(NamedTuple):
    min: float
    max: float
    mean: float
    etf_optimum: float
    excluded: int


def etf_angle(num_classes):
    return float(np.degrees(np.arccos(-1.0 / (num_classes - 1))))


def nc_angles(prototypes, center=True):
    """Pairwise angles (degrees) between class prototypes.

    Prototypes are centred on their mean first unless ``center`` is False.
    Zero-norm prototypes are dropped and counted in ``excluded``.
    """
    vecs = np.array([np.asarray(v, dtype=np.float64) for v in
                     (prototypes.values() if isinstance(prototypes, dict) else prototypes)])
    if len(vecs) < 2:
        raise ValueError("need at least two prototypes")
    nonzero = np.linalg.norm(vecs, axis=1) > 0
    excluded = int((~nonzero).sum())
    if excluded:
        warnings.warn(f"{excluded} zero-norm prototype(s) excluded from angle statistics")
    vecs = vecs[nonzero]
    if len(vecs) < 2:
        nan = float("nan")
        return NCAngles(nan, nan, nan, etf_angle(len(nonzero)), excluded)
    if center:
        vecs = vecs - vecs.mean(axis=0)
    norms = np.linalg.norm(vecs, axis=1)
    units = vecs / np.where(norms > 0, norms, 1.0)[:, None]
    cos = np.clip(units @ units.T, -1.0, 1.0)
    iu = np.triu_indices(len(vecs), k=1)
    angles = np.degrees(np.arccos(cos[iu]))
    return NCAngles(float(angles.min()), float(angles.max()), float(angles.mean()),
                    etf_angle(len(vecs)), excluded)


def prior_l2(estimate, oracle):
    a = np.asarray(estimate, dtype=np.float64)
    b = np.asarray(oracle, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"priors of shapes {a.shape} and {b.shape}")
    return float(np.linalg.norm(a - b))


def _features(model, x):
    return model.forward_features(x).values


def feature_similarity(global_model, client_models, probe):
    """Mean cosine between global and client features of the same probe samples."""
    probe = np.asarray(probe, dtype=np.float64)
    if probe.shape[0] == 0:
        raise ValueError("probe set is empty")
    if not client_models:
        return None
    g = _features(global_model, probe)
    g_norm = np.linalg.norm(g, axis=1)
    sims = []
    for m in client_models:
        f = _features(m, probe)
        denom = g_norm * np.linalg.norm(f, axis=1)
        cos = np.where(denom > 0, (g * f).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
        sims.append(cos)
    return float(np.mean(sims))
