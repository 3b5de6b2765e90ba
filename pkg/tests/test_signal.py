import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from depth_tta import tensor as T
from depth_tta.errors import BehindCameraError, DimensionError, ParameterError
from depth_tta.signal import (
    CameraIntrinsics,
    MedianConfig,
    edge_map,
    edge_weights,
    gray_mean,
    mask_depth,
    median_filter,
    project,
)
from depth_tta.tensor import Tensor

from oracles import central_difference, edge_map_loops, median_loops


@pytest.fixture
def rng():
    return np.random.default_rng(99)


# ---------------------------------------------------------------- mask_depth


def test_mask_depth_definition():
    D = np.array([[1.0, 2.0], [3.0, 4.0]])
    (out,) = mask_depth(D, [np.array([[1, 0], [0, 1]])])
    np.testing.assert_array_equal(out.data, [[1, 0], [0, 4]])


def test_mask_depth_all_ones_and_zeros(rng):
    D = rng.uniform(1, 5, size=(4, 5)).astype(np.float32)
    ones, zeros = mask_depth(D, [np.ones((4, 5)), np.zeros((4, 5))])
    np.testing.assert_array_equal(ones.data, D)
    assert not zeros.data.any()


def test_mask_depth_gradient_only_on_support():
    D = Tensor(np.arange(1.0, 7.0).reshape(2, 3), requires_grad=True)
    m = np.array([[1, 0, 1], [0, 0, 1]])
    (out,) = mask_depth(D, [m])
    T.sum_(out).backward()
    np.testing.assert_array_equal(D.grad, m)


def test_mask_depth_sum_equals_restricted_sum(rng):
    D = rng.uniform(0.1, 50, size=(6, 6))
    m = rng.integers(0, 2, size=(6, 6))
    with T.precision(np.float64):
        (out,) = mask_depth(D, [m])
    assert out.data.sum() == pytest.approx(D[m == 1].sum(), rel=1e-12)


def test_mask_depth_shape_mismatch():
    with pytest.raises(DimensionError):
        mask_depth(np.ones((2, 2)), [np.ones((3, 2))])


# ----------------------------------------------------------------- gray_mean


def test_gray_mean_single_channel_identity(rng):
    img = rng.uniform(size=(3, 4, 1))
    np.testing.assert_array_equal(gray_mean(img), img[..., 0])


def test_gray_mean_pixel():
    img = np.array([[[0.2, 0.4, 0.6]]])
    assert gray_mean(img)[0, 0] == pytest.approx(0.4)


def test_gray_mean_matches_loop(rng):
    img = rng.uniform(size=(5, 6, 3))
    out = gray_mean(img)
    for x in range(5):
        for y in range(6):
            assert out[x, y] == pytest.approx(sum(img[x, y, z] for z in range(3)) / 3, rel=1e-12)


# ------------------------------------------------------------------ edge_map


def test_edge_map_constant_is_zero():
    assert not edge_map(np.full((5, 4), 3.0)).values.data.any()


def test_edge_map_center_spike():
    f = np.zeros((3, 3))
    f[1, 1] = 1.0
    expected = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=float)
    np.testing.assert_allclose(edge_map(f).values.data, expected)


def test_edge_map_corner_clamping():
    # at (0,0): f(1,0) + f(0,0) + f(0,1) + f(0,0) - 4 f(0,0) = 0 + 1 + 0 + 1 - 4
    out = edge_map(np.array([[1.0, 0.0], [0.0, 0.0]])).values.data
    assert out[0, 0] == pytest.approx(2.0)


def test_edge_map_matches_loop_oracle(rng):
    with T.precision(np.float64):
        for _ in range(20):
            h, w = rng.integers(1, 9, size=2)
            f = rng.normal(size=(h, w))
            wts = rng.uniform(0, 2, size=(h, w))
            np.testing.assert_allclose(edge_map(f, wts).values.data, edge_map_loops(f, wts), rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 6), elements=st.floats(-10, 10)), st.floats(0, 20))
def test_edge_map_absolute_homogeneity(f, c):
    with T.precision(np.float64):
        lhs = edge_map(c * f).values.data
        rhs = c * edge_map(f).values.data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_edge_map_rejects_negative_weights_and_bad_shape():
    with pytest.raises(ParameterError):
        edge_map(np.ones((2, 2)), -np.ones((2, 2)))
    with pytest.raises(DimensionError):
        edge_map(np.ones((2, 2)), np.ones((2, 3)))


def test_edge_map_gradient(rng):
    with T.precision(np.float64):
        f = rng.normal(size=(5, 4))
        wts = rng.uniform(0.5, 1.5, size=(5, 4))
        leaf = Tensor(f, requires_grad=True)
        T.sum_(T.square(edge_map(leaf, wts).values)).backward()

        def value():
            return float(np.sum(edge_map(f, wts).values.data ** 2))

        for idx in np.ndindex(f.shape):
            assert leaf.grad[idx] == pytest.approx(central_difference(value, f, idx, 1e-6), rel=1e-5, abs=1e-7)


def test_edge_weights_modes(rng):
    f = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(edge_weights(f), np.ones((3, 3)))
    np.testing.assert_allclose(edge_weights(f, "inverse-mean"), 1 / np.abs(f).mean())
    with pytest.raises(ParameterError):
        edge_weights(f, "sobel")


# -------------------------------------------------------------- median_filter


def test_median_window_one_is_identity(rng):
    d = rng.normal(size=(4, 5))
    np.testing.assert_array_equal(median_filter(d, MedianConfig(1)), d)


def test_median_constant_unchanged():
    np.testing.assert_array_equal(median_filter(np.full((5, 5), 2.5), MedianConfig(3)), 2.5)


def test_median_removes_spike():
    d = np.zeros((3, 3))
    d[1, 1] = 9.0
    assert median_filter(d, MedianConfig(3))[1, 1] == 0.0


def test_median_lower_median_at_even_borders():
    # corner window of s=3 covers 4 pixels: sorted [1, 2, 3, 4] -> index 1
    d = np.array([[1.0, 2.0, 9.0], [3.0, 4.0, 9.0], [9.0, 9.0, 9.0]])
    assert median_filter(d, MedianConfig(3))[0, 0] == 2.0


@pytest.mark.parametrize("s", [1, 3, 5, 7])
def test_median_matches_loop_oracle(rng, s):
    for _ in range(10):
        h, w = rng.integers(1, 9, size=2)
        d = rng.normal(size=(h, w)) * rng.integers(0, 2, size=(h, w))
        np.testing.assert_array_equal(median_filter(d, MedianConfig(s)), median_loops(d, s))


def test_median_support_only_variant(rng):
    d = rng.uniform(1, 5, size=(6, 6))
    support = rng.integers(0, 2, size=(6, 6)).astype(bool)
    masked = np.where(support, d, 0.0)
    out = median_filter(masked, MedianConfig(3, support_only=True), support)
    np.testing.assert_array_equal(out, median_loops(masked, 3, support))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-100, 100)), st.sampled_from([1, 3, 5]))
def test_median_within_window_range(d, s):
    out = median_filter(d, MedianConfig(s))
    r = s // 2
    for x in range(6):
        for y in range(5):
            win = d[max(x - r, 0):x + r + 1, max(y - r, 0):y + r + 1]
            assert win.min() <= out[x, y] <= win.max()


def test_median_config_requires_odd_window():
    with pytest.raises(ParameterError):
        MedianConfig(4)
    assert MedianConfig(7).radius == 3


# ------------------------------------------------------------------- project


def test_identity_pose_is_exact(rng):
    K = CameraIntrinsics(50.0, 60.0, 31.7, 22.1)
    (x, y), z = project((13.0, 41.0), 7.25, K)
    assert (x, y, z) == (13.0, 41.0, 7.25)


def test_forward_translation_moves_towards_principal_point():
    K = CameraIntrinsics(100.0, 100.0, 50.0, 40.0)
    x, y, depth, delta = 80.0, 10.0, 10.0, 5.0
    (xp, yp), z = project((x, y), depth, K, np.eye(3), [0.0, 0.0, delta])
    # x' = cx + (x - cx) * D / (D + delta)
    assert z == pytest.approx(depth + delta)
    assert xp == pytest.approx(50.0 + 30.0 * 10 / 15)
    assert yp == pytest.approx(40.0 - 30.0 * 10 / 15)


def test_project_matches_explicit_linear_algebra(rng):
    for _ in range(50):
        K = np.array([[rng.uniform(20, 200), 0, rng.uniform(0, 64)], [0, rng.uniform(20, 200), rng.uniform(0, 64)], [0, 0, 1]])
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        # keep rotations small so points stay in front
        R = np.eye(3) + 0.05 * (q - q.T)
        t = rng.normal(scale=0.3, size=3)
        px, py, depth = rng.uniform(0, 64), rng.uniform(0, 64), rng.uniform(1, 50)
        Kinv = np.linalg.inv(K)
        v = K @ (R @ Kinv @ np.array([px, py, 1.0]) * depth + t)
        (xp, yp), z = project((px, py), depth, K, R, t)
        assert z == pytest.approx(v[2], rel=1e-9)
        assert (xp, yp) == pytest.approx((v[0] / v[2], v[1] / v[2]), rel=1e-9)


def test_general_path_agrees_with_identity_shortcut(rng):
    K = CameraIntrinsics(57.6, 57.6, 32.0, 25.6)
    # a negligible but nonzero translation forces the general K^-1 path
    (x, y), z = project((5.5, 9.0), 3.0, K, np.eye(3), [0, 0, 1e-300])
    assert (x, y) == pytest.approx((5.5, 9.0), rel=1e-12)
    assert z == pytest.approx(3.0, rel=1e-12)


def test_project_errors():
    K = CameraIntrinsics(10, 10, 5, 5)
    with pytest.raises(BehindCameraError):
        project((5, 5), 1.0, K, np.eye(3), [0, 0, -2.0])
    with pytest.raises(ParameterError):
        project((5, 5), 0.0, K)
    with pytest.raises(ParameterError):
        CameraIntrinsics(0, 10, 5, 5)
