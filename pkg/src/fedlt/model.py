"""MLP classifier, flat parameter vectors, prototypes and checkpoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

CKPT_HEADER = "FEDLT-CKPT v1"


class AggregationError(ValueError):
    """Parameter vectors or manifests that cannot be combined or loaded."""


@dataclass(frozen=True)
class ModelParams:
    vector: np.ndarray
    manifest: tuple  # ((name, shape), ...)

    def __post_init__(self):
        expected = int(np.sum([int(np.prod(s)) for _, s in self.manifest]))
        if self.vector.ndim != 1 or self.vector.size != expected:
            raise AggregationError(
                f"vector of length {self.vector.size} does not match manifest size {expected}"
            )

    def __eq__(self, other):
        return (
            isinstance(other, ModelParams)
            and self.manifest == other.manifest
            and np.array_equal(self.vector, other.vector)
        )


class MLPClassifier:
    """Relu MLP feature extractor followed by a linear head.

    The last extractor layer is linear, so its output is the feature vector
    ``h`` that prototypes and correlation statistics are computed on.
    """

    def __init__(self, in_dim, num_classes, hidden=(64, 64), feature_dim=32, rng=None):
        if rng is None or isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        self.in_dim = int(in_dim)
        self.num_classes = int(num_classes)
        self.feature_dim = int(feature_dim)
        self.hidden = tuple(int(h) for h in hidden)
        dims = (self.in_dim, *self.hidden, self.feature_dim)
        self.extractor = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            self.extractor.append(_init_layer(rng, fan_in, fan_out, f"extractor.{i}"))
        self.head = _init_layer(rng, self.feature_dim, self.num_classes, "head")

    def parameters(self):
        params = []
        for w, b in self.extractor:
            params += [w, b]
        return params + list(self.head)

    def manifest(self):
        return tuple((p.name, p.shape) for p in self.parameters())

    def num_parameters(self):
        return int(sum(p.values.size for p in self.parameters()))

    def forward_features(self, x):
        h = x if isinstance(x, ad.Tensor) else ad.Tensor(x)
        if h.values.ndim != 2 or h.shape[1] != self.in_dim:
            raise ad.DimensionError(f"expected inputs of shape (batch, {self.in_dim}), got {h.shape}")
        last = len(self.extractor) - 1
        for i, (w, b) in enumerate(self.extractor):
            h = ad.add_rowwise(ad.matmul(h, w), b)
            if i < last:
                h = ad.relu(h)
        return h

    def logits_from_features(self, features):
        w, b = self.head
        return ad.add_rowwise(ad.matmul(features, w), b)

    def forward_logits(self, x):
        return self.logits_from_features(self.forward_features(x))

    def predict(self, x):
        return np.argmax(self.forward_logits(x).values, axis=1)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def flatten(self):
        vec = np.concatenate([p.values.ravel() for p in self.parameters()])
        return ModelParams(vec, self.manifest())

    def load_params(self, params):
        if params.manifest != self.manifest():
            raise AggregationError("parameter manifest does not match this model")
        offset = 0
        for p in self.parameters():
            n = p.values.size
            p.values = params.vector[offset:offset + n].reshape(p.shape).copy()
            offset += n

    def clone(self):
        twin = MLPClassifier.__new__(MLPClassifier)
        twin.in_dim, twin.num_classes = self.in_dim, self.num_classes
        twin.feature_dim, twin.hidden = self.feature_dim, self.hidden
        twin.extractor = [(_copy(w), _copy(b)) for w, b in self.extractor]
        twin.head = (_copy(self.head[0]), _copy(self.head[1]))
        return twin

    @classmethod
    def from_params(cls, params):
        """Rebuild a model whose architecture is read off a manifest."""
        shapes = [s for _, s in params.manifest]
        if len(shapes) < 4 or len(shapes) % 2:
            raise AggregationError("manifest does not describe an MLP classifier")
        weights = shapes[0::2]
        model = cls(
            in_dim=weights[0][0],
            num_classes=weights[-1][1],
            hidden=[w[1] for w in weights[:-2]],
            feature_dim=weights[-1][0],
            rng=0,
        )
        model.load_params(params)
        return model


def _init_layer(rng, fan_in, fan_out, name):
    s = 1.0 / np.sqrt(fan_in)
    w = ad.Tensor(rng.uniform(-s, s, size=(fan_in, fan_out)), requires_grad=True, name=f"{name}.weight")
    b = ad.Tensor(rng.uniform(-s, s, size=fan_out), requires_grad=True, name=f"{name}.bias")
    return w, b


def _copy(p):
    return ad.Tensor(p.values, requires_grad=p.requires_grad, name=p.name)


def unflatten(params, like):
    """Return a copy of ``like`` carrying ``params``."""
    model = like.clone()
    model.load_params(params)
    return model


def class_prototypes(features, labels):
    """Per-class mean of feature rows; classes without rows are left out."""
    feats = features.values if isinstance(features, ad.Tensor) else np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    return {int(c): feats[labels == c].mean(axis=0) for c in np.unique(labels)}


def save_checkpoint(path, params):
    with open(path, "wb") as fh:
        fh.write((CKPT_HEADER + "\n").encode())
        for name, shape in params.manifest:
            fh.write((" ".join([name, *map(str, shape)]) + "\n").encode())
        fh.write(b"\n")
        fh.write(params.vector.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    header, _, rest = blob.partition(b"\n")
    if header.decode(errors="replace") != CKPT_HEADER:
        raise AggregationError(f"{path}: not a {CKPT_HEADER} file")
    manifest = []
    while True:
        line, _, rest = rest.partition(b"\n")
        if not line:
            break
        name, *dims = line.decode().split()
        manifest.append((name, tuple(int(d) for d in dims)))
    vector = np.frombuffer(rest, dtype="<f8").astype(np.float64)
    return ModelParams(vector, tuple(manifest))
