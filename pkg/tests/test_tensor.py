import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from tatrack import tensor as T
from tatrack.errors import DimensionError, NumericError, UsageError
from tatrack.gradcheck import OP_NAMES, check_function, check_ops
from tatrack.tensor import Param, Tensor


def t(x, grad=False):
    return Tensor(np.array(x, dtype=np.float64), requires_grad=grad, dtype=np.float64)


@pytest.mark.parametrize("seed", range(10))
def test_every_op_matches_finite_differences(seed):
    results = check_ops([seed], tol=1e-4)
    assert {r.name for r in results} == set(OP_NAMES)
    bad = [r.line() for r in results if not r.ok]
    assert not bad, bad


def test_matmul_identity_and_hand_case():
    a = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(T.matmul(t(np.eye(3)), t(a)).data, a)
    out = T.matmul(t([[1, 2], [3, 4]]), t([[0], [1]]))
    np.testing.assert_array_equal(out.data, [[2], [4]])


def test_matmul_4x5_by_5x3_gradient():
    rng = np.random.default_rng(0)
    with T.default_dtype(np.float64):
        r = check_function("matmul", T.matmul, [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))])
    assert r.max_rel < 1e-4


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(t(np.ones((2, 3))), t(np.ones((4, 5))))


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_lastdim(t([0.0, 0.0])).data, [0.5, 0.5])
    out = T.softmax_lastdim(t([1000.0, 0.0])).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
                  elements=st.floats(-50, 50)))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_are_distributions(x):
    out = T.softmax_lastdim(t(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    g, b = t(np.ones(4)), t(np.zeros(4))
    np.testing.assert_allclose(T.layer_norm(t([5.0, 5, 5, 5]), g, b).data, 0.0, atol=1e-12)
    out = T.layer_norm(t([1.0, -1.0]), t(np.ones(2)), t(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)
    x = np.random.default_rng(1).standard_normal((3, 8))
    y = T.layer_norm(t(x), t(np.ones(8)), t(np.zeros(8))).data
    assert np.abs(y.mean(-1)).max() < 1e-6
    assert np.abs(y.var(-1) - 1).max() < 1e-4


def test_layer_norm_affine_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(t(np.ones((2, 4))), t(np.ones(3)), t(np.zeros(3)))


def test_conv1x1_is_channel_matmul():
    rng = np.random.default_rng(2)
    x, w, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((6, 3)), rng.standard_normal(6)
    out = T.conv1x1(t(x), t(w), t(b)).data
    ref = np.einsum("oc,chw->ohw", w, x) + b[:, None, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)
    with pytest.raises(DimensionError):
        T.conv1x1(t(x), t(np.ones((6, 2))))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_results_are_errors():
    with pytest.raises(NumericError):
        T.log(t([0.0, 1.0]))
    with pytest.raises(NumericError):
        T.sqrt(t([-1.0]))


def test_backward_requires_scalar():
    x = t(np.ones(3), grad=True)
    with pytest.raises(UsageError):
        T.backward(x * 2.0)


def test_frozen_param_gets_no_gradient():
    p = Param(np.ones(3))
    q = Param(np.ones(3))
    q.set_trainable(False)
    T.backward(((p * q) * 3.0).sum())
    np.testing.assert_array_equal(p.grad, 3.0)
    np.testing.assert_array_equal(q.grad, 0.0)
    assert not q.requires_grad


def test_gradients_accumulate_across_uses():
    x = t([2.0], grad=True)
    T.backward((x * x + x * 3.0).sum())
    np.testing.assert_allclose(x.grad, [7.0])


def test_no_grad_records_nothing():
    x = t([1.0], grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_default_dtype_context():
    assert T.get_default_dtype() == np.float32
    with T.default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_batch_norm_eval_uses_running_stats_and_train_updates_them():
    x = np.random.default_rng(3).standard_normal((4, 2, 3, 3)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    g, b = t(np.ones(2)), t(np.zeros(2))
    out = T.batch_norm(t(x), g, b, rm, rv, training=False).data
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5))
    T.batch_norm(t(x), g, b, rm, rv, training=True)
    mu = x.mean(axis=(0, 2, 3))
    np.testing.assert_allclose(rm, 0.1 * mu)
