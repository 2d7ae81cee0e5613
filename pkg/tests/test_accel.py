import os
import subprocess
import sys

import numpy as np
import pytest

from fedlt import _accel


@pytest.mark.parametrize("rows", [1, 7, 300])
def test_log_softmax_paths_agree(rows):
    rng = np.random.default_rng(rows)
    z = rng.normal(size=(rows, 6)) * 20
    g = rng.normal(size=(rows, 6))
    ref = _accel.numpy_kernels["log_softmax_rows"](z)
    np.testing.assert_allclose(_accel.log_softmax_rows(z), ref, rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(_accel.log_softmax_rows_backward(ref, g),
                               _accel.numpy_kernels["log_softmax_rows_backward"](ref, g), rtol=1e-13, atol=1e-13)


def test_extreme_logits_stay_finite():
    z = np.array([[1e300, 0.0, -1e300]])
    out = _accel.log_softmax_rows(z)
    assert out[0, 0] == 0.0 and out[0, 1] == -1e300
    np.testing.assert_array_equal(out, _accel.numpy_kernels["log_softmax_rows"](z))


def test_effective_counts_with_absent_and_degenerate_classes():
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    labels = np.array([0, 0, 2])
    protos = np.array([[0.0, 0.0], [5.0, 5.0], [2.0, 2.0]])
    for fn in (_accel.batch_effective_counts, _accel.numpy_kernels["batch_effective_counts"]):
        counts, present = fn(feats, labels, protos, 3)
        np.testing.assert_allclose(counts, [2.0, 0.0, 1.0])
        assert present.tolist() == [True, False, True]


def test_env_flag_selects_numpy():
    env = dict(os.environ, FEDLT_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", "from fedlt import backend; print(backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
