import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynllm import diffmath as dm
from dynllm.distill_fuse import Distillers, FusionAttention, compose_item, distill, distill_many, top_indices


def test_worked_example():
    out = distill(np.array([0.5, -1.0, 2.0]), np.array([2.0, 1.0, -2.0]), 2)
    assert np.allclose(out.data, [0.16076, 0.32151], atol=1e-5)


def test_top_indices_ties_go_to_lower_index():
    assert top_indices(np.array([1.0, 3.0, 3.0, 3.0]), 2).tolist() == [1, 2]


def test_r_equal_m_keeps_everything():
    h, q = np.array([0.3, -0.2, 0.9]), np.array([1.0, 1.0, 1.0])
    out = distill(h, q, 3)
    assert np.allclose(out.data, h * np.tanh(h / np.sqrt(3)), rtol=0, atol=1e-15)


@pytest.mark.parametrize("r", [0, 4])
def test_r_out_of_range(r):
    with pytest.raises(ValueError):
        distill(np.ones(3), np.ones(3), r)


def test_zero_q_is_an_error():
    with pytest.raises(FloatingPointError):
        distill(np.ones(3), np.zeros(3), 1)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 16))
def test_output_bounded_and_sign_aligned(seed, r):
    rng = np.random.default_rng(seed)
    h, q = rng.normal(size=16), rng.normal(size=16)
    out = distill(h, q, r).data
    assert out.shape == (r,)
    assert np.all(np.abs(out) <= np.abs(h).max() + 1e-15)
    # kept scores are the r largest, so every kept value has the sign of its score
    idx = top_indices(h * q / np.linalg.norm(q), r)
    assert np.all(out * np.sign(h[idx] * q[idx]) * np.sign(h[idx]) >= 0)


def test_gradient_only_reaches_kept_coordinates():
    h = dm.Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True)
    dm.sum(distill(h, np.array([2.0, 1.0, -2.0]), 2)).backward()
    assert h.grad[2] == 0.0 and h.grad[0] != 0.0


def test_distill_many_matches_per_facet(rng):
    h, q = rng.normal(size=(5, 3, 8)), rng.normal(size=(3, 8))
    out, idx = distill_many(h, q, 4)
    for f in range(3):
        assert np.array_equal(out.data[:, f], distill(h[:, f], q[f], 4).data)
    assert idx.shape == (5, 3, 4)


def test_distill_gradcheck(rng):
    # well separated scores keep the top-r set fixed under the probe
    h = dm.Tensor(np.array([[0.9, -0.4, 0.1, 1.3, -0.8, 0.6]]), requires_grad=True)
    q = dm.Tensor(np.array([0.7, 0.5, -1.1, 0.9, -0.6, 0.2]), requires_grad=True)
    assert dm.grad_check(lambda: dm.sum(dm.square(distill(h, q, 3))), [h, q]) < 1e-6


def test_distillers_named_per_facet(store):
    d = Distillers(store, 8, 5, facets=("crd", "brd"))
    assert "distill.crd.q" in store and "distill.brd.q" in store and "distill.int.q" not in store
    out, _ = d(np.random.default_rng(0).normal(size=(2, 2, 8)))
    assert out.shape == (2, 2, 5)


def test_fusion_shapes_and_weights(store, rng):
    fuse = FusionAttention(store, node_dim=6, token_dim=5, layers=2, heads=2)
    h, w = fuse(rng.normal(size=(3, 6)), rng.normal(size=(3, 4, 5)), expected_tokens=4)
    assert h.shape == (3, 6) and len(w) == 2
    assert all(np.allclose(x.sum(axis=-1), 1.0) for x in w)
    with pytest.raises(ValueError):
        fuse(rng.normal(size=(3, 6)), rng.normal(size=(3, 3, 5)), expected_tokens=4)


def test_fusion_gradcheck(store, rng):
    fuse = FusionAttention(store, node_dim=4, token_dim=3, layers=2, heads=2)
    hg = dm.Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    tok = dm.Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    params = [p for layer in fuse.layers for p in layer]
    f = lambda: dm.sum(dm.square(fuse(hg, tok)[0]))  # noqa: E731
    assert dm.grad_check(f, [hg, tok, *params]) < 1e-6


def test_key_bias_gradient_vanishes(store, rng):
    fuse = FusionAttention(store, node_dim=4, token_dim=3, layers=2, heads=2)
    for p in store:
        p.data += rng.normal(scale=0.5, size=p.data.shape)
    dm.sum(dm.square(fuse(rng.normal(size=(2, 4)), rng.normal(size=(2, 4, 3)))[0])).backward()
    for name in ("fuse.l1.bk", "fuse.l2.bk"):
        assert np.abs(store[name].grad).max() < 1e-12


def test_compose_item_order():
    out = compose_item(np.array([[1.0, 2.0]]), np.array([[3.0]]))
    assert out.data.tolist() == [[1.0, 2.0, 3.0]]
