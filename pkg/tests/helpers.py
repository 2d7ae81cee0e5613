import numpy as np


def central_difference(f, x, h=1e-5):
    """Numerical gradient of scalar ``f`` w.r.t. array ``x`` (modified in place, then restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def isotropic_prior_estimate(seed, counts, dim=16, batch_size=32):
    """Effective counts from a running-prior pass over isotropic Gaussian features."""
    from fedlt.prior import RunningPrior

    rng = np.random.default_rng(seed)
    counts = np.asarray(counts)
    c = counts.size
    means = rng.normal(size=(c, dim)) * 3.0
    labels = np.repeat(np.arange(c), counts)
    feats = means[labels] + rng.normal(size=(labels.size, dim))
    order = rng.permutation(labels.size)
    feats, labels = feats[order], labels[order]
    running = RunningPrior(means, c)
    for start in range(0, labels.size, batch_size):
        running.update(feats[start:start + batch_size], labels[start:start + batch_size])
    return running.estimate()
