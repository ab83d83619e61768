import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import avg_pool2_loops, conv2d_loops, depth_to_space_index, space_to_depth_index
from quicksrnet import tensor as T
from quicksrnet.errors import DimensionError, ParameterError
from quicksrnet.tensor import Kernel

unit_floats = st.floats(0, 1, width=32)


def kernel(w, b=None):
    w = np.asarray(w, np.float32)
    return Kernel(w, np.zeros(w.shape[0], np.float32) if b is None else np.asarray(b, np.float32))


# -- conv2d -------------------------------------------------------------------


def test_conv_center_one_is_identity():
    x = np.arange(1, 10, dtype=np.float32).reshape(1, 1, 3, 3)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1
    assert np.array_equal(T.conv2d(x, kernel(w)), x)


def test_conv_zero_padding_truncates_window():
    out = T.conv2d(np.ones((1, 1, 2, 2), np.float32), kernel(np.ones((1, 1, 3, 3))))
    assert np.array_equal(out, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("k", [1, 3])
def test_conv_matches_loop_oracle(rng, k):
    x = rng.standard_normal((1, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((8, 3, k, k)).astype(np.float32)
    b = rng.standard_normal(8).astype(np.float32)
    ref = conv2d_loops(x, w, b)
    out = T.conv2d(x, Kernel(w, b))
    assert out.shape == (1, 8, 8, 8)
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5)


def test_conv_rejects_bad_inputs():
    k = kernel(np.zeros((2, 3, 3, 3)))
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 4, 5, 5), np.float32), k)
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 3, 0, 5), np.float32), k)
    with pytest.raises(DimensionError):
        Kernel(np.zeros((2, 3, 5, 5)), np.zeros(2))
    with pytest.raises(DimensionError):
        Kernel(np.zeros((2, 3, 3, 3)), np.zeros(3))


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 2**31 - 1))
def test_conv_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 6, 5)).astype(np.float32)
    y = rng.standard_normal((1, 4, 6, 5)).astype(np.float32)
    k = kernel(rng.standard_normal((3, 4, 3, 3)))
    lhs = T.conv2d((alpha * x + beta * y).astype(np.float32), k)
    rhs = alpha * T.conv2d(x, k) + beta * T.conv2d(y, k)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5 * (1 + abs(alpha) + abs(beta)) * 40)


# -- relu1 -----------------------------------------------------------------------


def test_relu1_examples():
    x = np.array([-0.5, 0.3, 1.7], np.float32).reshape(1, 1, 1, 3)
    assert np.array_equal(T.relu1(x).ravel(), np.array([0, 0.3, 1], np.float32))
    z = np.zeros((1, 2, 3, 3), np.float32)
    assert np.array_equal(T.relu1(z), z)


@given(arrays(np.float32, (1, 2, 3, 3), elements=unit_floats))
def test_relu1_identity_on_unit_interval(x):
    assert np.array_equal(T.relu1(x), x)


@given(arrays(np.float32, (1, 1, 4, 4), elements=st.floats(-10, 10, width=32)), st.floats(0, 5, width=32))
def test_relu1_idempotent_and_monotone(x, d):
    once = T.relu1(x)
    assert np.array_equal(T.relu1(once), once)
    assert np.all(T.relu1(x + np.float32(d)) >= once)


# -- depth/space ------------------------------------------------------------------


def test_depth_to_space_single_channel_orders_coincide():
    x = np.array([1, 2, 3, 4], np.float32).reshape(1, 4, 1, 1)
    for order in ("CRD", "DCR"):
        assert np.array_equal(T.depth_to_space(x, 2, order), np.array([[[[1, 2], [3, 4]]]], np.float32))


def test_depth_to_space_orders_differ_and_match_oracle():
    x = np.arange(8, dtype=np.float32).reshape(1, 8, 1, 1)
    crd = T.depth_to_space(x, 2, "CRD")
    dcr = T.depth_to_space(x, 2, "DCR")
    assert not np.array_equal(crd, dcr)
    assert np.array_equal(crd, depth_to_space_index(x, 2, "CRD"))
    assert np.array_equal(dcr, depth_to_space_index(x, 2, "DCR"))
    # CRD groups channels per output plane; DCR interleaves them
    assert crd[0, 0].tolist() == [[0, 1], [2, 3]]
    assert dcr[0, 0].tolist() == [[0, 2], [4, 6]]


@pytest.mark.parametrize("b,order", [(2, "CRD"), (2, "DCR"), (3, "CRD"), (3, "DCR")])
def test_depth_to_space_random_matches_oracle(rng, b, order):
    x = rng.standard_normal((2, 2 * b * b, 3, 4)).astype(np.float32)
    assert np.array_equal(T.depth_to_space(x, b, order), depth_to_space_index(x, b, order))


def test_space_to_depth_examples(rng):
    x = np.array([[[[1, 2], [3, 4]]]], np.float32)
    assert T.space_to_depth(x, 2).ravel().tolist() == [1, 2, 3, 4]
    y = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    assert np.array_equal(T.space_to_depth(y, 2), space_to_depth_index(y, 2))


def test_space_depth_errors():
    with pytest.raises(DimensionError):
        T.depth_to_space(np.zeros((1, 6, 2, 2), np.float32), 2)
    with pytest.raises(DimensionError):
        T.space_to_depth(np.zeros((1, 3, 3, 4), np.float32), 2)
    with pytest.raises(ParameterError):
        T.depth_to_space(np.zeros((1, 4, 2, 2), np.float32), 2, "XYZ")


@given(
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 3),
    st.sampled_from(["CRD", "DCR"]),
    st.integers(0, 2**31 - 1),
)
def test_space_depth_are_inverse_permutations(b, c, h, w, order, seed):
    x = np.random.default_rng(seed).standard_normal((1, c, h * b, w * b)).astype(np.float32)
    packed = T.space_to_depth(x, b, order)
    assert np.array_equal(T.depth_to_space(packed, b, order), x)
    assert np.array_equal(np.sort(packed.ravel()), np.sort(x.ravel()))
    unpacked = T.depth_to_space(packed, b, order)
    assert np.array_equal(np.sort(unpacked.ravel()), np.sort(packed.ravel()))


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_dcr_equals_crd_iff_single_output_channel(b, co, seed):
    x = np.random.default_rng(seed).permutation(co * b * b * 4).astype(np.float32).reshape(1, co * b * b, 2, 2)
    same = np.array_equal(T.depth_to_space(x, b, "CRD"), T.depth_to_space(x, b, "DCR"))
    assert same == (co == 1 or b == 1)


# -- nearest / avgpool -------------------------------------------------------------


def test_nearest_upscale_examples(rng):
    x = rng.random((1, 3, 4, 5), dtype=np.float32)
    assert np.array_equal(T.nearest_upscale(x, 1), x)
    v = np.full((1, 1, 1, 1), 0.25, np.float32)
    assert np.array_equal(T.nearest_upscale(v, 3), np.full((1, 1, 3, 3), 0.25, np.float32))
    with pytest.raises(ParameterError):
        T.nearest_upscale(x, 0)


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_nearest_upscale_is_repeat_interleave_then_crd(s, seed):
    x = np.random.default_rng(seed).random((2, 3, 3, 4), dtype=np.float32)
    via_d2s = T.depth_to_space(T.repeat_interleave_channels(x, s * s), s, "CRD")
    assert np.array_equal(T.nearest_upscale(x, s), via_d2s)


def test_nearest_resize_integer_factor_is_replication(rng):
    x = rng.random((1, 3, 5, 4), dtype=np.float32)
    assert np.array_equal(T.nearest_resize(x, 15, 12), T.nearest_upscale(x, 3))


def test_avg_pool2(rng):
    c = np.full((1, 2, 4, 6), 0.7, np.float32)
    assert np.array_equal(T.avg_pool2(c), np.full((1, 2, 2, 3), 0.7, np.float32))
    x = np.array([[[[0, 1], [2, 3]]]], np.float32)
    assert T.avg_pool2(x).item() == 1.5
    r = rng.standard_normal((2, 3, 6, 8)).astype(np.float32)
    np.testing.assert_allclose(T.avg_pool2(r), avg_pool2_loops(r), atol=1e-6)
    with pytest.raises(DimensionError):
        T.avg_pool2(np.zeros((1, 1, 3, 4), np.float32))


# -- bicubic ------------------------------------------------------------------------


def test_bicubic_scale_one_is_identity(rng):
    x = rng.random((1, 3, 7, 9), dtype=np.float32)
    np.testing.assert_allclose(T.bicubic_resize(x, 1), x, atol=1e-6)


@pytest.mark.parametrize("scale", [2, 3, "3/2", 0.5, "1/3", "2/3"])
def test_bicubic_preserves_constants(scale):
    x = np.full((1, 3, 12, 12), 0.37, np.float32)
    out = T.bicubic_resize(x, scale)
    np.testing.assert_allclose(out, 0.37, atol=1e-6)


def test_bicubic_2x_preserves_linear_ramp_interior():
    w = 16
    ramp = np.tile(np.arange(w, dtype=np.float32) / w, (1, 1, 4, 1))
    out = T.bicubic_resize(ramp, 2)[0, 0, 0]
    # output pixel d sits at input coordinate (d + 0.5) / 2 - 0.5
    coords = (np.arange(2 * w) + 0.5) / 2 - 0.5
    expected = coords / w
    interior = slice(4, 2 * w - 4)
    np.testing.assert_allclose(out[interior], expected[interior], atol=1e-5)


def test_bicubic_output_sizes():
    x = np.zeros((1, 3, 10, 6), np.float32)
    assert T.bicubic_resize(x, "3/2").shape == (1, 3, 15, 9)
    assert T.bicubic_resize(x, 0.5).shape == (1, 3, 5, 3)
    with pytest.raises(ParameterError):
        T.bicubic_resize(x, 0)
