import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from gdlqueue import model as M
from gdlqueue.nn import ShapeMismatch, Tensor, grad_check

MICRO = M.ModelConfig(in_features=2, out_features=2, gat_width=4, heads=2, dense_width=4, hidden=4)


def _gru(rng, n_in, n_h, scale=0.5) -> tuple[M.GruParams, dict]:
    vals = {}
    for g in ("", "_r", "_z"):
        vals["W" + g] = rng.normal(0, scale, (n_h, n_in))
        vals["U" + g] = rng.normal(0, scale, (n_h, n_h))
        vals["b" + g] = rng.normal(0, scale, n_h)
    return M.GruParams(**{k: Tensor(v) for k, v in vals.items()}), {k: v.tolist() for k, v in vals.items()}


def _decoder(rng, n_out, n_h, scale=0.5):
    gru, gvals = _gru(rng, n_out, n_h, scale)
    extra = {
        "W_a": rng.normal(0, scale, (n_h, n_h)), "U_a": rng.normal(0, scale, (n_h, n_h)),
        "v_a": rng.normal(0, scale, n_h), "C": rng.normal(0, scale, (n_h, n_h)),
        "C_r": rng.normal(0, scale, (n_h, n_h)), "C_z": rng.normal(0, scale, (n_h, n_h)),
        "W_s": rng.normal(0, scale, (n_h, n_h)), "W_o": rng.normal(0, scale, (n_out, n_out)),
        "U_o": rng.normal(0, scale, (n_out, n_h)), "C_o": rng.normal(0, scale, (n_out, n_h)),
        "b_o": rng.normal(0, scale, n_out),
    }
    p = M.AttnDecoderParams(gru=gru, **{k: Tensor(v) for k, v in extra.items()})
    return p, {**gvals, **{k: v.tolist() for k, v in extra.items()}}


# --------------------------------------------------------------------------
# graph attention


def test_gat_head_isolated_node_is_self_transform():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(3, 2))
    W, a = rng.normal(size=(4, 2)), rng.normal(size=8)
    out, alpha = M.gat_head(H, np.eye(3), Tensor(W), Tensor(a))
    np.testing.assert_allclose(alpha.value, np.eye(3))
    np.testing.assert_allclose(out.value, np.tanh(H @ W.T), atol=1e-14)


def test_gat_head_identical_nodes_share_attention():
    H = np.array([[0.3, -0.2], [0.3, -0.2]])
    rng = np.random.default_rng(1)
    _, alpha = M.gat_head(H, np.ones((2, 2)), Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=6)))
    np.testing.assert_allclose(alpha.value, 0.5)


def test_gat_head_line_graph_matches_oracle():
    rng = np.random.default_rng(2)
    H = rng.normal(size=(3, 2))
    A = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]])
    W, a = 0.3 * rng.normal(size=(2, 2)), 0.3 * rng.normal(size=4)
    out, alpha = M.gat_head(H, A, Tensor(W), Tensor(a))
    ref, ref_alpha = oracles.gat_head(H.tolist(), A.tolist(), W.tolist(), a.tolist())
    np.testing.assert_allclose(out.value, ref, atol=1e-12)
    np.testing.assert_allclose(alpha.value, ref_alpha, atol=1e-12)


def test_gat_head_shape_errors():
    W, a = Tensor(np.zeros((2, 3))), Tensor(np.zeros(4))
    with pytest.raises(ShapeMismatch):
        M.gat_head(np.zeros((3, 3)), np.eye(2), W, a)
    with pytest.raises(ShapeMismatch):
        M.gat_head(np.zeros((3, 2)), np.eye(3), W, a)


def test_multi_head_single_head_reduces_to_head():
    rng = np.random.default_rng(3)
    H, A = rng.normal(size=(3, 2)), np.ones((3, 3))
    W, a = Tensor(rng.normal(size=(4, 2))), Tensor(rng.normal(size=8))
    single, _ = M.gat_head(H, A, W, a)
    for mode in ("concat", "average"):
        multi = M.gat_multi_head(H, A, M.GatParams([W], [a], mode))
        np.testing.assert_allclose(multi.value, single.value, atol=1e-14)


def test_multi_head_concat_of_identical_heads_repeats_output():
    rng = np.random.default_rng(4)
    H, A = rng.normal(size=(3, 2)), np.ones((3, 3))
    W, a = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=4))
    single, _ = M.gat_head(H, A, W, a)
    out = M.gat_multi_head(H, A, M.GatParams([W, W], [a, a], "concat")).value
    np.testing.assert_allclose(out, np.concatenate([single.value] * 2, axis=1))


def test_multi_head_average_matches_oracle():
    rng = np.random.default_rng(5)
    H, A = rng.normal(size=(3, 2)), np.array([[1, 0, 1], [1, 1, 0], [0, 1, 1]])
    Ws = [0.4 * rng.normal(size=(3, 2)) for _ in range(3)]
    As = [0.4 * rng.normal(size=6) for _ in range(3)]
    out = M.gat_multi_head(H, A, M.GatParams([Tensor(w) for w in Ws], [Tensor(v) for v in As], "average"))
    ref = oracles.gat_average(H.tolist(), A.tolist(), [w.tolist() for w in Ws], [v.tolist() for v in As])
    np.testing.assert_allclose(out.value, ref, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_attention_rows_are_convex_over_neighbourhood(seed, n):
    rng = np.random.default_rng(seed)
    A = (rng.random((n, n)) < 0.4).astype(float)
    np.fill_diagonal(A, 1.0)
    _, alpha = M.gat_head(rng.normal(size=(n, 3)), A, Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=4)))
    assert np.all(alpha.value[A == 0] == 0)
    np.testing.assert_allclose(alpha.value.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(alpha.value >= 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gat_head_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    n = 5
    H = rng.normal(size=(n, 3))
    A = (rng.random((n, n)) < 0.5).astype(float)
    np.fill_diagonal(A, 1.0)
    W, a = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=4))
    perm = rng.permutation(n)
    out, _ = M.gat_head(H, A, W, a)
    out_p, _ = M.gat_head(H[perm], A[np.ix_(perm, perm)], W, a)
    np.testing.assert_allclose(out_p.value, out.value[perm], atol=1e-12)


# --------------------------------------------------------------------------
# recurrent pieces


def _zero_gru(n_in, n_h):
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    return M.GruParams(z(n_h, n_in), z(n_h, n_h), z(n_h), z(n_h, n_in), z(n_h, n_h), z(n_h),
                       z(n_h, n_in), z(n_h, n_h), z(n_h))


def test_gru_zero_params_fixed_point_and_halving():
    p = _zero_gru(2, 3)
    np.testing.assert_array_equal(M.gru_step(p, np.ones(2), np.zeros(3)).value, 0.0)
    v = np.array([0.4, -1.2, 2.0])
    # z = sigmoid(0) = 0.5 and the candidate is tanh(0) = 0
    np.testing.assert_allclose(M.gru_step(p, np.ones(2), v).value, 0.5 * v)


def test_gru_step_matches_oracle():
    rng = np.random.default_rng(6)
    p, vals = _gru(rng, 3, 3)
    x, h = rng.normal(size=3), rng.normal(size=3)
    np.testing.assert_allclose(M.gru_step(p, x, h).value, oracles.gru_step(vals, x.tolist(), h.tolist()), atol=1e-12)


def test_encode_unrolls_gru():
    rng = np.random.default_rng(7)
    p, vals = _gru(rng, 2, 3)
    X = rng.normal(size=(3, 2))
    H = M.encode(p, X).value
    np.testing.assert_allclose(H, oracles.encode(vals, X.tolist()), atol=1e-12)
    np.testing.assert_allclose(M.encode(p, X[:1]).value[0], M.gru_step(p, X[0], np.zeros(3)).value)
    np.testing.assert_array_equal(M.encode(_zero_gru(2, 3), np.zeros((4, 2))).value, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_gru_state_is_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p, _ = _gru(rng, 2, 4, scale)
    h_prev = rng.normal(0, 2, size=4)
    h = M.gru_step(p, rng.normal(size=2), h_prev).value
    assert np.all(np.abs(h) <= np.maximum(np.abs(h_prev), 1.0) + 1e-12)


def test_attention_single_step_and_symmetry():
    rng = np.random.default_rng(8)
    p, _ = _decoder(rng, 2, 3)
    h = rng.normal(size=(1, 3))
    c, alpha = M.attention_context(rng.normal(size=3), h, p)
    np.testing.assert_allclose(alpha.value, [1.0])
    np.testing.assert_allclose(c.value, h[0])
    two = np.vstack([h, h])
    c, alpha = M.attention_context(rng.normal(size=3), two, p)
    np.testing.assert_allclose(alpha.value, [0.5, 0.5])
    np.testing.assert_allclose(c.value, h[0])


def test_attention_context_matches_oracle():
    rng = np.random.default_rng(9)
    p, vals = _decoder(rng, 2, 3)
    s, Hs = rng.normal(size=3), rng.normal(size=(3, 3))
    c, alpha = M.attention_context(s, Hs, p)
    rc, ra = oracles.attention(s.tolist(), Hs.tolist(), vals["W_a"], vals["U_a"], vals["v_a"])
    np.testing.assert_allclose(c.value, rc, atol=1e-12)
    np.testing.assert_allclose(alpha.value, ra, atol=1e-12)


def test_decoder_step_zero_params():
    rng = np.random.default_rng(10)
    p, vals = _decoder(rng, 2, 3)
    for t in [p.gru.W, p.gru.U, p.gru.b, p.gru.W_r, p.gru.U_r, p.gru.b_r, p.gru.W_z, p.gru.U_z, p.gru.b_z,
              p.C, p.C_r, p.C_z, p.W_o, p.U_o, p.C_o, p.b_o]:
        t.value[...] = 0.0
    s_prev = rng.normal(size=3)
    y, s = M.decoder_step(p, rng.normal(size=2), s_prev, rng.normal(size=3))
    np.testing.assert_array_equal(y.value, 0.0)
    np.testing.assert_allclose(s.value, 0.5 * s_prev)


def test_decoder_step_without_context_is_plain_gru():
    rng = np.random.default_rng(11)
    p, _ = _decoder(rng, 2, 3)
    y_prev, s_prev = rng.normal(size=2), rng.normal(size=3)
    _, s = M.decoder_step(p, y_prev, s_prev, np.zeros(3))
    np.testing.assert_allclose(s.value, M.gru_step(p.gru, y_prev, s_prev).value, atol=1e-14)


def test_decoder_step_matches_oracle():
    rng = np.random.default_rng(12)
    p, vals = _decoder(rng, 2, 3)
    y_prev, s_prev, c = rng.normal(size=2), rng.normal(size=3), rng.normal(size=3)
    y, s = M.decoder_step(p, y_prev, s_prev, c)
    ry, rs = oracles.decoder_step(vals, y_prev.tolist(), s_prev.tolist(), c.tolist())
    np.testing.assert_allclose(y.value, ry, atol=1e-12)
    np.testing.assert_allclose(s.value, rs, atol=1e-12)


# --------------------------------------------------------------------------
# full model


def test_forward_shape_for_design_tensor():
    cfg = M.ModelConfig(in_features=8, gat_width=4, dense_width=4, hidden=4)
    m = M.init_model(cfg, 0)
    X = np.random.default_rng(0).normal(size=(2, 12, 120, 8))
    assert M.model_forward(m, X, np.eye(120)).shape == (2, 12, 120, 2)


def test_forward_rejects_wrong_feature_count():
    m = M.init_model(MICRO, 0)
    with pytest.raises(ShapeMismatch):
        M.model_forward(m, np.zeros((1, 3, 2, 5)), np.eye(2))


def test_zero_params_give_zero_predictions():
    m = M.init_model(MICRO, 0)
    for t in m.params.values():
        t.value[...] = 0.0
    out = M.model_forward(m, np.random.default_rng(0).normal(size=(1, 3, 2, 2)), np.ones((2, 2)))
    np.testing.assert_array_equal(out, 0.0)


def test_micro_model_matches_composed_oracle():
    m = M.init_model(MICRO, 3)
    rng = np.random.default_rng(13)
    for t in m.params.values():  # nonzero everywhere, including biases and output feedback
        t.value[...] = rng.normal(0, 0.5, t.shape)
    X = rng.normal(size=(1, 3, 2, 2))
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    ours = M.model_forward(m, X, A)[0]
    ref = oracles.model_forward(oracles.lists(m.params), X[0].tolist(), A.tolist())
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_micro_model_gradients_pass_grad_check():
    m = M.init_model(MICRO, 1)
    rng = np.random.default_rng(0)
    X, Y = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    err = grad_check(lambda: M.model_loss(m, X, Y, A, lam=1e-2, training=False), m.params)
    assert err < 1e-3


def test_loss_zero_when_predictions_match():
    m = M.init_model(MICRO, 2)
    X = np.random.default_rng(1).normal(size=(1, 3, 2, 2))
    A = np.eye(2)
    Y = M.model_forward(m, X, A)
    loss, grads = M.model_loss_and_grads(m, X, Y, A, lam=0.0)
    assert loss == pytest.approx(0.0, abs=1e-28)
    assert all(np.all(np.abs(g) < 1e-12) for g in grads.values())


def test_loss_with_zero_data_is_the_penalty():
    # zero biases and zero inputs keep every activation at zero
    m = M.init_model(MICRO, 2)
    lam = 0.3
    loss, _ = M.model_loss_and_grads(m, np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 2)), np.eye(2), lam=lam)
    expected = lam * 0.5 * sum(float(np.sum(t.value ** 2)) for t in m.params.weights())
    assert loss == pytest.approx(expected, rel=1e-12)


def test_biases_are_not_penalized():
    m = M.init_model(MICRO, 0)
    names = {t.name for t in m.params.weights()}
    assert "dense1.W" in names and "dense1.b" not in names and "dec.b_o" not in names


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 2))
def test_temporal_causality(seed, t0):
    m = M.init_model(MICRO, seed % 7)
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(1, 4, 2, 2))
    A = np.ones((2, 2))
    base = M.model_forward(m, X, A)
    X2 = X.copy()
    X2[:, t0 + 1:] += rng.normal(size=X2[:, t0 + 1:].shape)
    moved = M.model_forward(m, X2, A)
    np.testing.assert_array_equal(moved[:, : t0 + 1], base[:, : t0 + 1])


def test_checkpoint_round_trip(tmp_path):
    m = M.init_model(MICRO, 4)
    M.save_model(m, tmp_path / "m.ckpt", {"note": 1})
    back, extra = M.load_model(tmp_path / "m.ckpt")
    assert extra == {"note": 1}
    assert back.config == MICRO
    X = np.random.default_rng(0).normal(size=(1, 3, 2, 2))
    np.testing.assert_array_equal(M.model_forward(back, X, np.eye(2)), M.model_forward(m, X, np.eye(2)))


def test_config_rejects_unknown_combine_mode():
    with pytest.raises(ValueError):
        M.ModelConfig(gat1_combine="sum")
    with pytest.raises(ValueError):
        M.ModelConfig(gat_width=5, heads=2)
