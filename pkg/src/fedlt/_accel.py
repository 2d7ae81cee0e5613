"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``FEDLT_NUMBA`` is not set to
``0``. Both paths implement the same contracts; tests run them against each
other.
"""

import os

import numpy as np

DEGENERATE_NORM = 1e-10

_WANT_NUMBA = os.environ.get("FEDLT_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by FEDLT_NUMBA")
    import numba as nb
    HAS_NUMBA = True
except ImportError:
    nb = None
    HAS_NUMBA = False


def backend():
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy reference kernels
# ---------------------------------------------------------------------------

def _np_log_softmax_rows(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _np_log_softmax_rows_backward(logp, g):
    return g - np.exp(logp) * g.sum(axis=1, keepdims=True)


def _np_batch_effective_counts(features, labels, prototypes, num_classes):
    counts = np.zeros(num_classes)
    present = np.zeros(num_classes, dtype=np.bool_)
    for c in np.unique(labels):
        rows = features[labels == c]
        m = rows.shape[0]
        dev = rows - prototypes[c]
        norms = np.sqrt((dev * dev).sum(axis=1))
        ok = norms >= DEGENERATE_NORM
        units = dev[ok] / norms[ok, None]
        total = units.sum(axis=0)
        # degenerate rows only contribute their unit diagonal
        quad = (total @ total + (m - ok.sum())) / (m * m)
        quad = max(quad, 1.0 / m)
        counts[c] = 1.0 / quad
        present[c] = True
    return counts, present


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @nb.njit(cache=True, nogil=True)
    def _nb_log_softmax_rows(z):
        n, k = z.shape
        out = np.empty_like(z)
        for i in range(n):
            mx = z[i, 0]
            for j in range(1, k):
                if z[i, j] > mx:
                    mx = z[i, j]
            s = 0.0
            for j in range(k):
                s += np.exp(z[i, j] - mx)
            lse = np.log(s)
            for j in range(k):
                out[i, j] = z[i, j] - mx - lse
        return out

    @nb.njit(cache=True, nogil=True)
    def _nb_log_softmax_rows_backward(logp, g):
        n, k = logp.shape
        out = np.empty_like(g)
        for i in range(n):
            s = 0.0
            for j in range(k):
                s += g[i, j]
            for j in range(k):
                out[i, j] = g[i, j] - np.exp(logp[i, j]) * s
        return out

    @nb.njit(cache=True, nogil=True)
    def _nb_batch_effective_counts(features, labels, prototypes, num_classes):
        n, d = features.shape
        sums = np.zeros((num_classes, d))
        members = np.zeros(num_classes, dtype=np.int64)
        degenerate = np.zeros(num_classes, dtype=np.int64)
        for i in range(n):
            c = labels[i]
            members[c] += 1
            norm2 = 0.0
            for j in range(d):
                diff = features[i, j] - prototypes[c, j]
                norm2 += diff * diff
            norm = np.sqrt(norm2)
            if norm < DEGENERATE_NORM:
                degenerate[c] += 1
                continue
            for j in range(d):
                sums[c, j] += (features[i, j] - prototypes[c, j]) / norm
        counts = np.zeros(num_classes)
        present = np.zeros(num_classes, dtype=np.bool_)
        for c in range(num_classes):
            m = members[c]
            if m == 0:
                continue
            sq = 0.0
            for j in range(d):
                sq += sums[c, j] * sums[c, j]
            quad = (sq + degenerate[c]) / (m * m)
            if quad < 1.0 / m:
                quad = 1.0 / m
            counts[c] = 1.0 / quad
            present[c] = True
        return counts, present

    log_softmax_rows = _nb_log_softmax_rows
    log_softmax_rows_backward = _nb_log_softmax_rows_backward

    def batch_effective_counts(features, labels, prototypes, num_classes):
        return _nb_batch_effective_counts(
            np.ascontiguousarray(features, dtype=np.float64),
            np.ascontiguousarray(labels, dtype=np.int64),
            np.ascontiguousarray(prototypes, dtype=np.float64),
            int(num_classes),
        )

else:
    log_softmax_rows = _np_log_softmax_rows
    log_softmax_rows_backward = _np_log_softmax_rows_backward

    def batch_effective_counts(features, labels, prototypes, num_classes):
        return _np_batch_effective_counts(
            np.asarray(features, dtype=np.float64),
            np.asarray(labels, dtype=np.int64),
            np.asarray(prototypes, dtype=np.float64),
            int(num_classes),
        )

# the reference path stays importable for cross-checks and benchmarks
numpy_kernels = {
    "log_softmax_rows": _np_log_softmax_rows,
    "log_softmax_rows_backward": _np_log_softmax_rows_backward,
    "batch_effective_counts": _np_batch_effective_counts,
}
