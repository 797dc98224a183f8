import numpy as np
import pytest
from hypothesis import given, strategies as st

from bitfusion.refmodel import Tensor, act_ref, conv_ref, gemm_ref, im2col, pool_ref, post_ref, requant_ref

import oracles

rng = np.random.default_rng(7)


def test_identity_weights():
    x = rng.integers(-128, 128, size=(3, 5))
    assert np.array_equal(gemm_ref(x, np.eye(5, dtype=np.int64)).values, x)


def test_scalar_example():
    assert gemm_ref([[11]], [[6]]).values[0, 0] == 66


@given(st.integers(1, 4), st.integers(1, 6), st.integers(1, 4), st.integers(0, 2**31))
def test_gemm_matches_triple_loop(m, k, n, seed):
    r = np.random.default_rng(seed)
    a = r.integers(-(2**15), 2**15, size=(m, k))
    b = r.integers(-(2**15), 2**15, size=(k, n))
    assert gemm_ref(a, b).values.tolist() == oracles.gemm(a.tolist(), b.tolist())


def test_gemm_wraps_at_32_bits():
    a = np.full((1, 4), 2**15 - 1)
    b = np.full((4, 1), 2**15 - 1)
    # 4 * (2^15 - 1)^2 exceeds int32
    assert gemm_ref(a, b).values[0, 0] == oracles.wrap(4 * (2**15 - 1) ** 2)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_matches_loops(stride):
    x = rng.integers(-8, 8, size=(7, 6, 3))
    w = rng.integers(-8, 8, size=(3, 2, 3, 4))
    assert conv_ref(x, w, stride).values.tolist() == oracles.conv(x.tolist(), w.tolist(), stride)


def test_conv_equals_im2col_gemm():
    x = rng.integers(0, 16, size=(6, 6, 2))
    w = rng.integers(-8, 8, size=(3, 3, 2, 5))
    cols = im2col(x, 3, 3)
    flat = gemm_ref(cols, w.reshape(-1, 5)).values
    assert np.array_equal(flat.reshape(4, 4, 5), conv_ref(x, w).values)


def test_conv_batched():
    x = rng.integers(0, 16, size=(2, 5, 5, 2))
    w = rng.integers(-8, 8, size=(3, 3, 2, 3))
    out = conv_ref(x, w).values
    for n in range(2):
        assert np.array_equal(out[n], conv_ref(x[n], w).values)


@pytest.mark.parametrize("window,stride", [(2, None), (3, 1), (2, 1)])
def test_pool_matches_loops(window, stride):
    x = rng.integers(-100, 100, size=(6, 6, 3))
    assert pool_ref(x, window, stride).values.tolist() == oracles.maxpool(x.tolist(), window, stride)


def test_pool_window_one_is_identity():
    x = rng.integers(-100, 100, size=(4, 4, 2))
    assert np.array_equal(pool_ref(x, 1).values, x)


def test_relu_idempotent():
    x = rng.integers(-100, 100, size=20)
    once = act_ref(x).values
    assert np.array_equal(act_ref(once).values, once)
    assert (once >= 0).all()


@given(st.integers(-(2**31), 2**31 - 1), st.integers(0, 12), st.sampled_from([2, 4, 8, 16]), st.booleans(),
       st.sampled_from(["relu", "none"]))
def test_post_matches_oracle(v, shift, bits, signed, act):
    got = post_ref(np.array([v]), act, shift, bits, signed).values[0]
    assert got == oracles.requant(v, act, shift, bits, signed)


def test_requant_passthrough_at_32_bits():
    assert requant_ref([-5, 7], 0, 32).values.tolist() == [-5, 7]


def test_errors():
    with pytest.raises(ValueError):
        gemm_ref(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        conv_ref(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))
    with pytest.raises(ValueError):
        act_ref([1], "sigmoid")
    with pytest.raises(ValueError):
        Tensor([300], 8, True)
