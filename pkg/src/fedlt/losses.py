"""Prior-adjusted softmax and the local training objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

PRIOR_FLOOR = 1e-8
LOG_EPS = float(np.log(ad.EPS))


class NumericError(ValueError):
    pass


def normalize(weights, floor=0.0):
    """Project a nonnegative weight vector onto the simplex, optionally flooring entries first."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or not np.all(np.isfinite(w)) or np.any(w < 0):
        raise NumericError("prior weights must be a finite nonnegative vector")
    total = w.sum()
    w = w / total if total > 0 else np.full(w.size, 1.0 / w.size)
    if floor > 0:
        w = np.maximum(w, floor)
        w = w / w.sum()
    return w


@dataclass(frozen=True, eq=False)
class AdjustedSoftmaxParams:
    prior: np.ndarray
    temperature: float = 1.5

    def __post_init__(self):
        if not self.temperature > 0:
            raise NumericError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "prior", normalize(self.prior, PRIOR_FLOOR))

    @classmethod
    def uniform(cls, num_classes, temperature=1.0):
        return cls(np.ones(num_classes), temperature)

    @property
    def log_offset(self):
        # shift so the largest entry is exactly 0; a uniform prior adds nothing
        lp = np.log(self.prior)
        return lp - lp.max()


def adjusted_log_softmax(logits, params):
    """log of ``prior * exp(logits / T)`` normalised per row."""
    logits = logits if isinstance(logits, ad.Tensor) else ad.Tensor(logits)
    if not np.all(np.isfinite(logits.values)):
        raise NumericError("non-finite logits")
    if logits.shape[1] != params.prior.size:
        raise ad.DimensionError(f"logits have {logits.shape[1]} classes, prior has {params.prior.size}")
    z = ad.add_rowwise(ad.scale(logits, 1.0 / params.temperature), params.log_offset)
    return ad.log_softmax(z)


def adjusted_softmax(logits, params):
    return ad.exp(adjusted_log_softmax(logits, params))


def teacher_mask(weak_probs, labels):
    """Rows whose argmax (lowest index on ties) equals the label."""
    probs = weak_probs.values if isinstance(weak_probs, ad.Tensor) else np.asarray(weak_probs)
    return np.argmax(probs, axis=1) == np.asarray(labels)


def asd_loss(teacher_logits, student_logits, labels, params, normalizer="masked", filter_teachers=True):
    """Mean KL(teacher || student) over rows where the teacher is right.

    The teacher side is treated as a constant. ``normalizer="batch"`` divides
    by the full batch size instead of the number of kept rows. An empty mask
    yields an exact zero that still sits on the tape with zero gradient.
    """
    teacher_logp = adjusted_log_softmax(teacher_logits.detach() if isinstance(teacher_logits, ad.Tensor)
                                        else teacher_logits, params).values
    mask = teacher_mask(teacher_logp, labels) if filter_teachers else np.ones(len(teacher_logp), dtype=bool)
    student_logits = student_logits if isinstance(student_logits, ad.Tensor) else ad.Tensor(student_logits)
    if not mask.any():
        return ad.scale(ad.sum(student_logits), 0.0)
    rows = np.flatnonzero(mask)
    p_t = np.exp(teacher_logp[rows])
    entropy_term = (p_t * np.maximum(teacher_logp[rows], LOG_EPS)).sum()
    student_logp = ad.clamp_min(adjusted_log_softmax(ad.take_rows(student_logits, rows), params), LOG_EPS)
    cross = ad.sum(ad.mul(ad.Tensor(p_t), student_logp))
    divisor = rows.size if normalizer == "masked" else mask.size
    return ad.scale(ad.sub(ad.Tensor(entropy_term), cross), 1.0 / divisor)


def dla_loss(weak_logits, strong_logits, labels, params):
    """Adjusted-softmax cross-entropy averaged over both views."""
    labels = np.asarray(labels)
    n = labels.size
    w = ad.sum(ad.pick(ad.clamp_min(adjusted_log_softmax(weak_logits, params), LOG_EPS), labels))
    s = ad.sum(ad.pick(ad.clamp_min(adjusted_log_softmax(strong_logits, params), LOG_EPS), labels))
    return ad.scale(ad.add(w, s), -1.0 / (2 * n))


def total_loss(weak_logits, strong_logits, labels, params, lam, return_terms=False,
               teacher_logits=None, student_logits=None, **asd_options):
    """``dla + lam * asd``.

    The distillation pair defaults to (weak, strong); other pairings can be
    passed explicitly.
    """
    if lam < 0:
        raise NumericError(f"lambda must be nonnegative, got {lam}")
    dla = dla_loss(weak_logits, strong_logits, labels, params)
    asd = asd_loss(weak_logits if teacher_logits is None else teacher_logits,
                   strong_logits if student_logits is None else student_logits,
                   labels, params, **asd_options)
    total = ad.add(dla, ad.scale(asd, lam))
    if return_terms:
        return total, dla, asd
    return total


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    logp = ad.clamp_min(ad.log_softmax(logits), LOG_EPS)
    return ad.scale(ad.sum(ad.pick(logp, labels)), -1.0 / labels.size)
