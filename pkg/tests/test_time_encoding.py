import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynllm import diffmath as dm
from dynllm.time_encoding import TimeEncoder, encode_with, geometric_frequencies


def test_frequencies_geometric():
    w = geometric_frequencies(4)
    assert np.allclose(w, [1.0, 0.1, 0.01, 0.001], rtol=1e-15)


def test_zero_is_closed_form(store):
    enc = TimeEncoder(store, d=8)
    expected = np.tile([math.sqrt(1 / 8), 0.0], 8)
    assert np.array_equal(enc.encode(0.0).data, expected)
    assert np.array_equal(enc.zero(3), np.tile(expected, (3, 1)))


def test_layout_interleaves_cos_sin(store):
    enc = TimeEncoder(store, d=2)
    out = enc.encode(np.array([3.0])).data[0]
    s = math.sqrt(0.5)
    assert np.allclose(out, [s * math.cos(3.0), s * math.sin(3.0), s * math.cos(0.03), s * math.sin(0.03)],
                       rtol=0, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 1e8), st.integers(1, 64))
def test_unit_norm(t, d):
    phi = encode_with(np.array([t]), geometric_frequencies(d)).data
    assert abs(np.linalg.norm(phi) - 1.0) < 1e-9


def test_batch_shape(store):
    enc = TimeEncoder(store, d=4)
    assert enc.encode(np.zeros((2, 3))).shape == (2, 3, 8)
    assert enc.dim == 8


def test_negative_elapsed_rejected(store):
    with pytest.raises(ValueError):
        TimeEncoder(store, d=4).encode(np.array([1.0, -1e-9]))


def test_omega_gradcheck(store):
    enc = TimeEncoder(store, d=6)
    dt = np.array([[0.0, 0.7], [2.5, 11.0]])
    w = np.random.default_rng(0).normal(size=(2, 2, 12))
    assert dm.grad_check(lambda: dm.sum(dm.mul(enc.encode(dt), w)), [enc.omega]) < 1e-7
