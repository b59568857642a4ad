import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convcs import tensor


@st.composite
def conv_case(draw):
    k = draw(st.integers(1, 5))
    stride = draw(st.integers(1, k))
    gh, gw = draw(st.integers(1, 5)), draw(st.integers(1, 5))
    N = draw(st.integers(1, 2))
    C = draw(st.sampled_from([1, 2, 16]))
    O = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**31))
    H, W = k + (gh - 1) * stride, k + (gw - 1) * stride
    rng = np.random.default_rng(seed)
    return rng.normal(size=(N, C, H, W)), rng.normal(size=(O, C, k, k)), stride


@settings(max_examples=60, deadline=None)
@given(conv_case())
def test_conv_matches_naive_loop(case):
    x, K, stride = case
    np.testing.assert_allclose(tensor.conv2d_valid(x, K, stride), tensor.conv2d_naive(x, K, stride),
                               rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(conv_case())
def test_transposed_is_adjoint(case):
    x, K, stride = case
    y = tensor.conv2d_valid(x, K, stride)
    g = np.random.default_rng(1).normal(size=y.shape)
    lhs = np.vdot(y, g)
    rhs = np.vdot(x, tensor.conv2d_transposed(g, K, stride, x.shape[-2:]))
    assert abs(lhs - rhs) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(g)


@settings(max_examples=40, deadline=None)
@given(conv_case())
def test_kernel_grad_matches_dot_product(case):
    x, K, stride = case
    g = np.random.default_rng(2).normal(size=tensor.conv2d_valid(x, K, stride).shape)
    dK = tensor.conv2d_kernel_grad(x, g, K.shape[2], stride)
    V = np.random.default_rng(3).normal(size=K.shape)
    # the map K -> <conv(x, K), g> is linear, so its gradient pairs exactly with V
    assert np.isclose(np.vdot(dK, V), np.vdot(tensor.conv2d_valid(x, V, stride), g), rtol=1e-10, atol=1e-10)


def test_shifted_gemm_path_matches_naive():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 32, 9, 7))
    K = rng.normal(size=(8, 32, 3, 3))
    assert tensor._use_shifted(32, 3, 1, 1)
    np.testing.assert_allclose(tensor.conv2d_valid(x, K), tensor.conv2d_naive(x, K), rtol=1e-12, atol=1e-11)


def test_depthwise_matches_per_channel_conv():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 10, 10))
    K = rng.normal(size=(3, 1, 4, 4))
    out = tensor.conv2d_valid(x, K, 2, groups=3)
    for c in range(3):
        np.testing.assert_allclose(out[:, c:c + 1], tensor.conv2d_naive(x[:, c:c + 1], K[c:c + 1], 2), atol=1e-12)
    g = rng.normal(size=out.shape)
    assert np.isclose(np.vdot(out, g), np.vdot(x, tensor.conv2d_transposed(g, K, 2, (10, 10), groups=3)))


def test_unbatched_input_keeps_rank():
    x = np.ones((1, 5, 5))
    assert tensor.conv2d_valid(x, np.ones((2, 1, 3, 3))).shape == (2, 3, 3)


def test_output_size_rejects_ragged_geometry():
    assert tensor.output_size(11, 3, 2) == 5
    with pytest.raises(tensor.DimensionError):
        tensor.output_size(10, 3, 2)
    with pytest.raises(tensor.DimensionError):
        tensor.output_size(2, 3, 1)


def test_channel_mismatch_raises():
    with pytest.raises(tensor.DimensionError):
        tensor.conv2d_valid(np.ones((2, 5, 5)), np.ones((1, 3, 3, 3)))


def test_reflect_pad_amounts_put_extra_pixel_after():
    assert tensor.reflect_pad_amounts(64, 66) == (1, 1)
    assert tensor.reflect_pad_amounts(64, 65) == (0, 1)
    assert tensor.same_pads(3) == (1, 1, 1, 1)
    assert tensor.same_pads(4) == (1, 2, 1, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 1), st.integers(0, 1), st.integers(0, 1),
       st.integers(0, 1), st.integers(0, 999))
def test_reflect_pad_adjoint(H, W, t, b, l, r, seed):
    rng = np.random.default_rng(seed)
    pads = (t, b, l, r)
    x = rng.normal(size=(1, 2, H, W))
    xp = tensor.pad_reflect(x, pads=pads)
    g = rng.normal(size=xp.shape)
    assert np.isclose(np.vdot(xp, g), np.vdot(x, tensor.reflect_pad_adjoint(g, pads)))
    np.testing.assert_array_equal(tensor.crop(xp, pads), x)


def test_reflect_pad_too_large_raises():
    with pytest.raises(tensor.DimensionError):
        tensor.pad_reflect(np.ones((1, 2, 2)), pads=(2, 0, 0, 0))
