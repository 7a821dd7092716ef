import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from common import fit_xor, xor_loss, xor_params
from gdlqueue.nn import (
    OptState, ParamSet, ShapeMismatch, Tensor, activation, affine_forward, dropout, glorot_uniform,
    grad_check, l2_penalty, mse_loss, optimizer_step,
)
from gdlqueue.nn import tensor as T


def _tanh_series(x: float, terms: int = 40) -> float:
    # sinh / cosh from their power series, independent of math.tanh
    sinh = sum(x ** (2 * k + 1) / math.factorial(2 * k + 1) for k in range(terms))
    cosh = sum(x ** (2 * k) / math.factorial(2 * k) for k in range(terms))
    return sinh / cosh


# --------------------------------------------------------------------------
# forward ops


def test_affine_identity_and_bias_only():
    x = np.array([0.5, -2.0])
    np.testing.assert_array_equal(affine_forward(np.eye(2), x, np.zeros(2)).value, x)
    np.testing.assert_array_equal(affine_forward(np.zeros((2, 2)), x, [1.5, -1.0]).value, [1.5, -1.0])


def test_affine_arithmetic():
    out = affine_forward(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]), np.zeros(2))
    np.testing.assert_array_equal(out.value, [3.0, 7.0])


def test_affine_batched_rows():
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    X = np.array([[1.0, 1.0], [0.0, 1.0]])
    np.testing.assert_array_equal(affine_forward(W, X, [1.0, 0.0]).value, [[4.0, 7.0], [3.0, 4.0]])


def test_affine_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        affine_forward(np.zeros((2, 3)), np.zeros(2), np.zeros(2))


def test_activations():
    np.testing.assert_array_equal(activation("relu", np.array([-1.0, 0.0, 2.0])).value, [0, 0, 2])
    np.testing.assert_allclose(activation("softmax", np.zeros(2)).value, [0.5, 0.5])
    assert activation("tanh", np.array(0.5)).value == pytest.approx(_tanh_series(0.5), abs=1e-15)
    assert _tanh_series(0.5) == pytest.approx(0.462117, abs=5e-7)
    assert activation("sigmoid", np.array(0.0)).value == 0.5
    with pytest.raises(ValueError):
        activation("elu", np.zeros(1))


def test_sigmoid_extremes_stay_finite():
    v = activation("sigmoid", np.array([-800.0, 800.0])).value
    np.testing.assert_array_equal(v, [0.0, 1.0])


def test_mse_examples():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).value == 0.0
    assert mse_loss(np.array([1.0, 1.0]), np.zeros(2)).value == 1.0
    assert mse_loss(np.array([2.0]), np.zeros(1)).value == 4.0
    with pytest.raises(ShapeMismatch):
        mse_loss(np.zeros(2), np.zeros(3))


def test_l2_penalty_examples():
    assert l2_penalty([Tensor([3.0, 4.0])], 0.0).value == 0.0
    assert l2_penalty([Tensor([3.0, 4.0])], 1.0).value == 12.5
    with pytest.raises(ValueError):
        l2_penalty([], -1.0)


def test_l2_gradient_is_lambda_times_weight():
    ps = ParamSet()
    w = ps.add("W", [[0.3, -1.2], [2.0, 0.7]])
    l2_penalty(ps.weights(), 0.4).backward()
    np.testing.assert_allclose(w.grad, 0.4 * w.value)
    assert grad_check(lambda: l2_penalty(ps.weights(), 0.4), ps) < 1e-8


def test_dropout_identity_cases():
    x = np.arange(6.0)
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(dropout(x, 0.0, rng, True).value, x)
    np.testing.assert_array_equal(dropout(x, 0.5, rng, False).value, x)
    with pytest.raises(ValueError):
        dropout(x, 1.0, rng, True)


def test_dropout_preserves_expected_mean():
    n, rate = 10_000, 0.5
    out = dropout(np.ones(n), rate, np.random.default_rng(42), True).value
    # survivors are scaled to 2, so each element has mean 1 and std 1
    sigma = math.sqrt(rate / (1 - rate) / n)
    assert abs(out.mean() - 1.0) < 3 * sigma
    assert set(np.unique(out)) <= {0.0, 2.0}


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)))
def test_softmax_is_a_distribution(z):
    p = T.softmax(z).value
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e6, 1e6)))
def test_relu_is_idempotent(z):
    once = T.relu(z).value
    np.testing.assert_array_equal(T.relu(once).value, once)


def test_masked_softmax_zeroes_masked_entries():
    p = T.softmax(np.array([[1.0, 5.0, 2.0]]), mask=np.array([[True, False, True]])).value
    assert p[0, 1] == 0.0
    np.testing.assert_allclose(p[0, [0, 2]], np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum())
    with pytest.raises(ValueError):
        T.softmax(np.zeros(2), mask=np.zeros(2, dtype=bool))


# --------------------------------------------------------------------------
# backward


def test_linear_gradient():
    ps = ParamSet()
    w = ps.add("w", 1.7)
    (w * 3.0).backward()
    assert w.grad == 3.0


def test_constant_loss_has_zero_gradients():
    ps = ParamSet()
    ps.add("w", [1.0, 2.0])
    loss = T.tsum(ps["w"]) * 0.0 + 5.0
    loss.backward()
    np.testing.assert_array_equal(ps.grads()["w"], 0.0)


def test_backward_needs_scalar_or_seed():
    with pytest.raises(ShapeMismatch):
        Tensor([1.0, 2.0], requires_grad=True).backward()


def test_gradients_accumulate_over_reused_nodes():
    ps = ParamSet()
    w = ps.add("w", 2.0)
    y = w * w + w  # dy/dw = 2w + 1
    y.backward()
    assert w.grad == 5.0


def test_xor_network_gradients_match_finite_differences():
    ps = xor_params(3)
    # offsets keep the (0, 0) input off the ReLU kink, where differences are one-sided
    ps["b1"].value[...] = [0.1, -0.2]
    ps["b2"].value[...] = [0.05]
    assert grad_check(lambda: xor_loss(ps), ps) < 1e-4


def test_grad_check_linear_model_is_exact():
    rng = np.random.default_rng(0)
    ps = ParamSet()
    ps.add("W", rng.normal(size=(2, 3)))
    ps.add("b", rng.normal(size=2), weight=False)
    x, c = rng.normal(size=3), rng.normal(size=2)
    assert grad_check(lambda: T.tsum(affine_forward(ps["W"], x, ps["b"]) * c), ps) < 1e-8


def test_grad_check_tanh_chain():
    rng = np.random.default_rng(1)
    ps = ParamSet()
    ps.add("W1", rng.normal(size=(3, 2)))
    ps.add("W2", rng.normal(size=(1, 3)))
    x = rng.normal(size=(5, 2))
    loss = lambda: T.mean(T.tanh(T.matmul(T.tanh(T.matmul(x, T.transpose(ps["W1"]))), T.transpose(ps["W2"]))))  # noqa: E731
    assert grad_check(loss, ps) < 1e-4


@pytest.mark.parametrize("op", [
    lambda a: T.sigmoid(a), lambda a: T.leaky_relu(a, 0.2), lambda a: T.exp(a * 0.3),
    lambda a: T.softmax(a, axis=-1), lambda a: T.softmax(a, axis=0, mask=np.tri(3, 4, k=1) > 0),
    lambda a: T.reshape(a, (4, 3)), lambda a: T.transpose(a),
    lambda a: T.concat([a, a * 2.0], axis=0), lambda a: T.stack([a, a], axis=1),
    lambda a: a[1:, ::2], lambda a: a[[0, 0, 2]], lambda a: T.mean(a, axis=1),
    lambda a: T.matmul(a, T.transpose(a)), lambda a: T.square(a) - a,
])
def test_each_op_passes_grad_check(op):
    rng = np.random.default_rng(5)
    ps = ParamSet()
    ps.add("a", rng.normal(size=(3, 4)) + 0.05)  # keep leaky_relu away from its kink
    w = rng.normal(size=op(Tensor(ps["a"].value)).shape)
    assert grad_check(lambda: T.tsum(op(ps["a"]) * w), ps) < 1e-6


def test_batched_matmul_gradients():
    rng = np.random.default_rng(6)
    ps = ParamSet()
    ps.add("A", rng.normal(size=(2, 3, 4)))
    ps.add("B", rng.normal(size=(4, 5)))
    ps.add("v", rng.normal(size=4))
    w = rng.normal(size=(2, 3, 5))
    loss = lambda: T.tsum(T.matmul(ps["A"], ps["B"]) * w) + T.tsum(T.matmul(ps["A"], ps["v"]))  # noqa: E731
    assert grad_check(loss, ps) < 1e-6


# --------------------------------------------------------------------------
# optimizers and parameters


def test_sgd_step():
    ps = ParamSet()
    ps.add("p", [1.0])
    optimizer_step(ps, {"p": np.array([2.0])}, OptState("sgd", lr=0.1))
    assert ps["p"].value[0] == pytest.approx(0.8)


def test_zero_gradient_leaves_params():
    for kind in ("sgd", "adam"):
        ps = ParamSet()
        ps.add("p", [1.0, -3.0])
        optimizer_step(ps, {"p": np.zeros(2)}, OptState(kind))
        np.testing.assert_array_equal(ps["p"].value, [1.0, -3.0])


def test_adam_minimizes_square():
    ps = ParamSet()
    x = ps.add("x", 1.0)
    state = OptState("adam", lr=0.01)
    trace = []
    for _ in range(500):
        optimizer_step(ps, {"x": 2.0 * x.value}, state)
        trace.append(abs(float(x.value)))
        if trace[-1] < 1e-3:
            break
    assert trace[-1] < 1e-3
    # monotone while far from the optimum
    head = trace[: len(trace) // 2]
    assert all(b <= a for a, b in zip(head, head[1:]))


def test_optimizer_rejects_unknown_kind_and_bad_shapes():
    with pytest.raises(ValueError):
        OptState("rmsprop")
    ps = ParamSet()
    ps.add("p", [1.0])
    with pytest.raises(ValueError):
        optimizer_step(ps, {"p": np.zeros(2)}, OptState("sgd"))


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    w = glorot_uniform(rng, (30, 20))
    assert np.abs(w).max() <= math.sqrt(6 / 50)


def test_paramset_checkpoint_round_trip(tmp_path):
    ps = xor_params(1)
    ps.save(tmp_path / "p.json", {"k": 2})
    back, extra = ParamSet.load(tmp_path / "p.json")
    assert extra == {"k": 2}
    assert list(back) == list(ps)
    for n in ps:
        np.testing.assert_array_equal(back[n].value, ps[n].value)
        assert back.is_weight(n) == ps.is_weight(n)


def test_paramset_rejects_foreign_files_and_duplicates(tmp_path):
    with pytest.raises(ValueError):
        ParamSet.from_dict({"format": "other"})
    with pytest.raises(ValueError):
        ParamSet.from_dict({"format": "gdlqueue-params", "version": 99, "params": []})
    ps = ParamSet()
    ps.add("w", 1.0)
    with pytest.raises(KeyError):
        ps.add("w", 2.0)


def test_parameters_must_be_finite():
    with pytest.raises(ValueError):
        ParamSet().add("w", [np.nan])


def test_xor_fits():
    trace, _ = fit_xor()
    assert trace[-1] < 0.01 and len(trace) <= 5000
