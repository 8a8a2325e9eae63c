import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dynllm import diffmath as dm
from conftest import leaf


def attention_params(store, d_q, d_k, d_a, d_out):
    return (store.uniform("Wq", (d_q, d_a)), store.uniform("bq", (d_a,), fan_in=d_a),
            store.uniform("Wk", (d_k, d_a)), store.uniform("bk", (d_a,), fan_in=d_a),
            store.uniform("Wv", (d_k, d_a)), store.uniform("bv", (d_a,), fan_in=d_a),
            store.uniform("Wo", (d_a, d_out)), store.uniform("bo", (d_out,), fan_in=d_out))


def gru_params(store, k, h):
    W = [store.uniform(f"W{g}", (k, h)) for g in "zrn"]
    U = [store.uniform(f"U{g}", (h, h)) for g in "zrn"]
    b = [store.uniform(f"b{g}", (h,), fan_in=h) for g in "zrn"]
    return tuple(W + U + b)


# -- affine -------------------------------------------------------------------

def test_affine_identity():
    y = dm.affine(np.array([[1.0, 0.0]]), np.eye(2), np.zeros(2))
    assert np.array_equal(y.data, [[1.0, 0.0]])


def test_affine_hand_value():
    y = dm.affine(np.array([[1.0, 2.0]]), np.array([[1.0], [1.0]]), np.array([0.5]))
    assert y.data.tolist() == [[3.5]]


def test_affine_weight_gradient_is_outer_product(rng):
    x = rng.normal(size=(3, 4))
    W = dm.Parameter("W", rng.normal(size=(4, 2)))
    b = dm.Parameter("b", np.zeros(2))
    dm.sum(dm.affine(x, W, b)).backward()
    assert np.allclose(W.grad, np.outer(x.sum(axis=0), np.ones(2)))
    assert np.allclose(b.grad, [3.0, 3.0])


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(dm.DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        dm.affine(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


def test_affine_gradcheck(rng):
    x, W, b = leaf(rng, 3, 4), leaf(rng, 4, 5), leaf(rng, 5)
    assert dm.grad_check(lambda: dm.sum(dm.square(dm.affine(x, W, b))), [x, W, b]) < 1e-6


# -- primitives ---------------------------------------------------------------

@pytest.mark.parametrize("op", [
    lambda a, b: dm.add(a, b), lambda a, b: dm.sub(a, b), lambda a, b: dm.mul(a, b),
    lambda a, b: dm.matmul(a, dm.reshape(b, (3, 4))),
])
def test_binary_ops_gradcheck(rng, op):
    a, b = leaf(rng, 4, 3), leaf(rng, 4, 3)
    f = lambda: dm.sum(dm.square(op(a, b)))  # noqa: E731
    assert dm.grad_check(f, [a, b]) < 1e-6


def test_broadcast_gradients_unbroadcast(rng):
    a, b = leaf(rng, 4, 3), leaf(rng, 3)
    assert dm.grad_check(lambda: dm.sum(dm.square(dm.mul(a, b))), [a, b]) < 1e-6


@pytest.mark.parametrize("op", [dm.tanh, dm.sigmoid, dm.log_sigmoid,
                                lambda a: dm.softmax(a, axis=-1), lambda a: dm.mean(a, axis=0)])
def test_unary_ops_gradcheck(rng, op):
    a = leaf(rng, 3, 4)
    w = rng.normal(size=op(a).shape)
    assert dm.grad_check(lambda: dm.sum(dm.mul(op(a), w)), [a]) < 1e-6


def test_structural_ops_gradcheck(rng):
    a, b = leaf(rng, 3, 2), leaf(rng, 3, 4)
    idx = np.array([2, 0, 2, 1])

    def f():
        c = dm.concat([a, b], axis=1)
        s = dm.stack([a, dm.scale(a, 2.0)], axis=0)
        r = dm.take_rows(c, idx)
        sel = dm.select_along(b, np.array([[3, 1], [0, 2], [1, 0]]), axis=1)
        return dm.add(dm.add(dm.sum(dm.square(r)), dm.sum(dm.tanh(s))), dm.sum(dm.square(sel)))
    assert dm.grad_check(f, [a, b]) < 1e-6


def test_overlay_rows_gradcheck(rng):
    src = leaf(rng, 3, 4)
    base = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 4))
    f = lambda: dm.sum(dm.mul(dm.overlay_rows(base, [([0, 3], src, [2, 0]), ([4], src, [2])]), w))  # noqa: E731
    assert dm.grad_check(f, [src]) < 1e-6
    out = dm.overlay_rows(base, [([1], src, [1])])
    assert np.array_equal(out.data[1], src.data[1]) and np.array_equal(out.data[0], base[0])


def test_batched_affine_gradcheck(rng):
    x, W, b = leaf(rng, 5, 3, 4), leaf(rng, 3, 4, 2), leaf(rng, 3, 2)
    assert dm.grad_check(lambda: dm.sum(dm.square(dm.tanh(dm.batched_affine(x, W, b)))), [x, W, b]) < 1e-6


# -- softmax ------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(logits, c):
    p = dm.softmax(logits).data
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(dm.softmax(logits + c).data, p, atol=1e-12, rtol=0)


def test_softmax_mask_zeroes_excluded_entries():
    p = dm.softmax(np.zeros((1, 3)), mask=np.array([[True, False, True]])).data
    assert p.tolist() == [[0.5, 0.0, 0.5]]


# -- dropout ------------------------------------------------------------------

def test_dropout_eval_is_identity(rng):
    x = rng.normal(size=(4, 5))
    assert np.array_equal(dm.dropout(x, 0.3, rng, training=False).data, x)


def test_dropout_preserves_expectation():
    rng = np.random.default_rng(0)
    n, p = 100_000, 0.1
    y = dm.dropout(np.ones(n), p, rng, training=True).data
    se = math.sqrt(p / (1 - p) / n)   # std of 1/(1-p) * Bernoulli(1-p) is sqrt(p/(1-p))
    assert abs(y.mean() - 1.0) < 3 * se
    assert set(np.unique(y)) <= {0.0, 1.0 / (1 - p)}


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_rejects_bad_rate(rng, rate):
    with pytest.raises(ValueError):
        dm.dropout(np.ones(3), rate, rng, training=True)


# -- attention ----------------------------------------------------------------

def test_attention_single_token_has_weight_one(store, rng):
    p = attention_params(store, 4, 6, 4, 3)
    keys = rng.normal(size=(2, 1, 6))
    out, w = dm.multi_head_attention(rng.normal(size=(2, 4)), keys, keys, p, heads=2)
    assert np.array_equal(w, np.ones((2, 2, 1)))
    Wv, bv, Wo, bo = p[4].data, p[5].data, p[6].data, p[7].data
    assert np.allclose(out.data, (keys[:, 0] @ Wv + bv) @ Wo + bo, atol=1e-14)


def test_attention_identical_tokens_split_evenly(store, rng):
    p = attention_params(store, 4, 6, 4, 3)
    tok = np.repeat(rng.normal(size=(1, 1, 6)), 2, axis=1)
    _, w = dm.multi_head_attention(rng.normal(size=(1, 4)), tok, tok, p, heads=2)
    assert np.allclose(w, 0.5, atol=1e-15)


def test_attention_matches_stepwise_composition(store, rng):
    p = attention_params(store, 4, 6, 4, 5)
    q, k = rng.normal(size=(3, 4)), rng.normal(size=(3, 7, 6))
    out, _ = dm.multi_head_attention(q, k, k, p, heads=2)
    Wq, bq, Wk, bk, Wv, bv, Wo, bo = (x.data for x in p)
    Q, K, V = q @ Wq + bq, k @ Wk + bk, k @ Wv + bv
    heads = []
    for h in range(2):
        sl = slice(2 * h, 2 * h + 2)
        logits = np.einsum("bd,bnd->bn", Q[:, sl], K[:, :, sl]) / math.sqrt(2)
        a = np.exp(logits - logits.max(axis=1, keepdims=True))
        a /= a.sum(axis=1, keepdims=True)
        heads.append(np.einsum("bn,bnd->bd", a, V[:, :, sl]))
    assert np.allclose(out.data, np.concatenate(heads, axis=1) @ Wo + bo, atol=1e-13)


def test_attention_masked_rows_are_zero(store, rng):
    p = attention_params(store, 4, 6, 4, 3)
    k = rng.normal(size=(2, 3, 6))
    mask = np.array([[True, False, True], [False, False, False]])
    out, w = dm.multi_head_attention(rng.normal(size=(2, 4)), k, k, p, 2, mask)
    assert np.array_equal(out.data[1], np.zeros(3))
    assert np.allclose(w[0].sum(axis=-1), 1.0) and np.all(w[0][:, 1] == 0.0)


def test_attention_zero_tokens_is_contract_violation(store, rng):
    p = attention_params(store, 4, 6, 4, 3)
    with pytest.raises(dm.DimensionError):
        dm.multi_head_attention(rng.normal(size=(1, 4)), np.zeros((1, 0, 6)), np.zeros((1, 0, 6)), p, 2)


def test_attention_gradcheck(store, rng):
    p = attention_params(store, 4, 6, 4, 3)
    q, k, v = leaf(rng, 2, 4), leaf(rng, 2, 3, 6), leaf(rng, 2, 3, 6)
    mask = np.array([[True, True, False], [True, True, True]])
    f = lambda: dm.sum(dm.square(dm.multi_head_attention(q, k, v, p, 2, mask)[0]))  # noqa: E731
    assert dm.grad_check(f, [q, k, v, *p]) < 1e-6


# -- GRU ----------------------------------------------------------------------

def test_gru_zero_weights_halves_hidden(rng):
    params = tuple(np.zeros(s) for s in [(3, 4)] * 3 + [(4, 4)] * 3 + [(4,)] * 3)
    h = rng.normal(size=(2, 4))
    out = dm.gru_cell(h, rng.normal(size=(2, 3)), params)
    assert np.array_equal(out.data, 0.5 * h)


def test_gru_shape_and_errors(store, rng):
    p = gru_params(store, 3, 4)
    assert dm.gru_cell(rng.normal(size=(5, 4)), rng.normal(size=(5, 3)), p).shape == (5, 4)
    with pytest.raises(dm.DimensionError):
        dm.gru_cell(rng.normal(size=(5, 4)), rng.normal(size=(5, 2)), p)


def test_gru_matches_convention(store, rng):
    p = gru_params(store, 3, 4)
    Wz, Wr, Wn, Uz, Ur, Un, bz, br, bn = (x.data for x in p)
    h, x = rng.normal(size=(2, 4)), rng.normal(size=(2, 3))
    sig = lambda a: 1 / (1 + np.exp(-a))  # noqa: E731
    z, r = sig(x @ Wz + h @ Uz + bz), sig(x @ Wr + h @ Ur + br)
    n = np.tanh(x @ Wn + (r * h) @ Un + bn)
    assert np.allclose(dm.gru_cell(h, x, p).data, (1 - z) * n + z * h, atol=1e-14)


def test_gru_gradcheck(store, rng):
    p = gru_params(store, 3, 4)
    h, x = leaf(rng, 2, 4), leaf(rng, 2, 3)
    assert dm.grad_check(lambda: dm.sum(dm.square(dm.gru_cell(h, x, p))), [h, x, *p]) < 1e-6


# -- grad_check itself --------------------------------------------------------

def test_grad_check_square():
    x = dm.Tensor(np.array([3.0]), requires_grad=True)
    assert dm.grad_check(lambda: dm.sum(dm.square(x)), [x]) < 1e-8


def test_grad_check_tanh():
    x = dm.Tensor(np.array([0.5]), requires_grad=True)
    assert dm.grad_check(lambda: dm.sum(dm.tanh(x)), [x], eps=1e-5) < 1e-6


def test_grad_check_flags_doubled_gradient():
    x = dm.Tensor(np.array([0.5]), requires_grad=True)
    wrong = {id(x): 2.0 * (1 - np.tanh(0.5) ** 2) * np.ones(1)}
    err = dm.grad_check(lambda: dm.sum(dm.tanh(x)), [x], analytic=wrong)
    assert err == pytest.approx(0.5, abs=1e-6)   # |2g - g| / max(2g, g)


def test_grad_check_per_tensor_uses_norms():
    x = dm.Tensor(np.array([3.0, 4.0]), requires_grad=True)
    # one entry off by 0.5: element-wise it is 0.5 / 6.5, per tensor the norm of the whole gradient
    wrong = {id(x): np.array([6.0 + 0.5, 8.0])}
    f = lambda: dm.sum(dm.square(x))  # noqa: E731
    assert dm.grad_check(f, [x], analytic=wrong) == pytest.approx(0.5 / 6.5, abs=1e-6)
    assert dm.grad_check(f, [x], analytic=wrong, per_tensor=True) == pytest.approx(0.5 / np.hypot(6.5, 8.0), abs=1e-6)


def test_grad_check_rejects_eps_outside_range():
    x = dm.Tensor(np.ones(1), requires_grad=True)
    with pytest.raises(ValueError):
        dm.grad_check(lambda: dm.sum(x), [x], eps=1e-2)


def test_grad_check_reports_non_finite_parameter():
    p = dm.Parameter("layer.W", np.array([-1.0]))
    with pytest.raises(dm.GradCheckError, match="layer.W"):
        dm.grad_check(lambda: dm.sum(dm.log_sigmoid(dm.scale(p, np.inf))), [p])


# -- parameters, optimizer, checkpoint ----------------------------------------

def test_parameter_store_names_unique_and_init_bounds(store):
    W = store.uniform("W", (400, 3))
    assert np.abs(W.data).max() <= 1 / math.sqrt(400)
    assert W.grad.shape == W.data.shape
    with pytest.raises(KeyError):
        store.zeros("W", (1,))


def test_squared_norm_gradient(store):
    a = store.uniform("a", (3, 2))
    b = store.zeros("b", (2,))
    b.data[:] = [1.0, -2.0]
    n = store.squared_norm()
    assert float(n.data) == pytest.approx(np.sum(a.data ** 2) + 5.0)
    n.backward()
    assert np.allclose(a.grad, 2 * a.data) and np.allclose(b.grad, [2.0, -4.0])


def test_adam_first_step_moves_by_lr(store):
    p = store.zeros("p", (2,))
    p.grad[:] = [0.3, -5.0]
    dm.Adam(store, lr=0.01).step()
    assert np.allclose(p.data, [-0.01, 0.01], atol=1e-9)


def test_checkpoint_round_trip(tmp_path, rng):
    arrays = {"time.omega": rng.normal(size=4), "tgan.x": rng.normal(size=(2, 3, 1)), "s": np.array(2.5)}
    dm.save_arrays(tmp_path / "c.bin", arrays)
    back = dm.load_arrays(tmp_path / "c.bin")
    assert list(back) == list(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].shape == np.shape(arrays[k])
    assert (tmp_path / "c.bin").read_bytes()[:8] == b"DYNLLM01"


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    dm.save_arrays(tmp_path / "c.bin", {"a": np.ones(3)})
    raw = (tmp_path / "c.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + raw[8:])
    (tmp_path / "short.bin").write_bytes(raw[:-4])
    for name in ("bad.bin", "short.bin"):
        with pytest.raises(dm.CheckpointError):
            dm.load_arrays(tmp_path / name)


def test_no_grad_records_nothing(rng):
    a = leaf(rng, 2)
    with dm.no_grad():
        y = dm.tanh(a)
    assert not y.requires_grad
