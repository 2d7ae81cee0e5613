import numpy as np
import pytest

from fedlt import autodiff as ad
from fedlt.model import (
    AggregationError,
    MLPClassifier,
    ModelParams,
    class_prototypes,
    load_checkpoint,
    save_checkpoint,
    unflatten,
)


@pytest.fixture
def model():
    return MLPClassifier(6, 4, hidden=(8, 8), feature_dim=5, rng=0)


def test_zero_weights_give_zero_features(model):
    model.load_params(ModelParams(np.zeros(model.num_parameters()), model.manifest()))
    x = np.random.default_rng(0).normal(size=(3, 6))
    assert not model.forward_features(x).values.any()
    assert not model.forward_logits(x).values.any()


def test_batch_independence(model):
    x = np.random.default_rng(1).normal(size=(8, 6))
    full = model.forward_logits(x).values
    for i in range(8):
        np.testing.assert_allclose(model.forward_logits(x[i:i + 1]).values[0], full[i], rtol=1e-13, atol=1e-14)


def test_single_identity_layer_passes_input_through():
    m = MLPClassifier(3, 2, hidden=(), feature_dim=3, rng=0)
    w, b = m.extractor[0]
    w.values = np.eye(3)
    b.values = np.zeros(3)
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(m.forward_features(x).values, x)


def test_logits_are_features_times_head(model):
    x = np.random.default_rng(2).normal(size=(4, 6))
    h = model.forward_features(x).values
    w, b = model.head
    np.testing.assert_allclose(model.forward_logits(x).values, h @ w.values + b.values, rtol=1e-14)


def test_head_bias_gradient_counts_batch(model):
    x = np.random.default_rng(3).normal(size=(7, 6))
    with ad.Tape():
        ad.sum(model.forward_logits(x)).backward()
    np.testing.assert_array_equal(model.head[1].grad, np.full(4, 7.0))


def test_wrong_input_width(model):
    with pytest.raises(ad.DimensionError):
        model.forward_features(np.ones((2, 5)))


def test_concatenated_batches(model):
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(5, 6))
    joint = model.forward_logits(np.vstack([a, b])).values
    np.testing.assert_allclose(joint, np.vstack([model.forward_logits(a).values, model.forward_logits(b).values]),
                               rtol=1e-13, atol=1e-14)


class TestPrototypes:
    def test_one_sample_per_class(self):
        f = np.array([[1.0, 2.0], [3.0, 4.0]])
        protos = class_prototypes(f, [0, 1])
        np.testing.assert_array_equal(protos[0], [1, 2])
        np.testing.assert_array_equal(protos[1], [3, 4])

    def test_mean_of_two(self):
        protos = class_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), [0, 0])
        np.testing.assert_array_equal(protos[0], [0.5, 0.5])

    def test_absent_class_missing(self):
        assert 2 not in class_prototypes(np.ones((2, 3)), [0, 1])

    def test_permutation_within_class(self):
        rng = np.random.default_rng(5)
        f = rng.normal(size=(10, 4))
        y = rng.integers(0, 3, size=10)
        perm = rng.permutation(10)
        a, b = class_prototypes(f, y), class_prototypes(f[perm], y[perm])
        for c in a:
            np.testing.assert_allclose(a[c], b[c], rtol=1e-13)


class TestFlatten:
    def test_roundtrip(self, model):
        params = model.flatten()
        rng = np.random.default_rng(6)
        noisy = ModelParams(params.vector + rng.normal(size=params.vector.size), params.manifest)
        twin = unflatten(noisy, model)
        assert twin.flatten() == noisy

    def test_same_config_same_manifest(self):
        a = MLPClassifier(6, 4, hidden=(8,), feature_dim=5, rng=1)
        b = MLPClassifier(6, 4, hidden=(8,), feature_dim=5, rng=2)
        assert a.manifest() == b.manifest()
        assert a.flatten() != b.flatten()

    def test_short_vector_rejected(self, model):
        params = model.flatten()
        with pytest.raises(AggregationError):
            ModelParams(params.vector[:-1], params.manifest)

    def test_manifest_mismatch_rejected(self, model):
        other = MLPClassifier(6, 4, hidden=(9,), feature_dim=5, rng=0)
        with pytest.raises(AggregationError):
            model.load_params(other.flatten())

    def test_parameter_count_constant(self, model):
        n = model.num_parameters()
        with ad.Tape():
            ad.sum(model.forward_logits(np.ones((2, 6)))).backward()
        ad.sgd_step(model.parameters(), 0.1)
        assert model.num_parameters() == n


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, model):
    params = model.flatten()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params)
    assert path.read_bytes().startswith(b"FEDLT-CKPT v1\nextractor.0.weight 6 8\n")
    loaded = load_checkpoint(path)
    assert loaded == params
    assert loaded.vector.tobytes() == params.vector.tobytes()
    rebuilt = MLPClassifier.from_params(loaded)
    assert rebuilt.flatten() == params


def test_checkpoint_bad_header(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"nope\n")
    with pytest.raises(AggregationError):
        load_checkpoint(p)
