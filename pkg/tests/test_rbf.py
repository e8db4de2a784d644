import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from se3gconv import grids, rbf
from se3gconv import rotations as rot

PI = np.pi


@pytest.fixture(scope="module")
def g8():
    return grids.generate_uniform_grid(8, np.random.default_rng(0), seed=0)


def test_default_sigma_examples(g8):
    assert abs(rbf.default_sigma(grids.finite_subgroup("V4")) - PI) < 1e-12
    assert abs(rbf.default_sigma(grids.finite_subgroup("O24")) - PI / 2) < 1e-12
    assert rbf.default_sigma(grids.RotationGrid(rot.IDENTITY[None])) == PI
    again = grids.generate_uniform_grid(8, np.random.default_rng(0), seed=0)
    assert rbf.default_sigma(again) == rbf.default_sigma(g8)


def test_sigma_must_be_positive():
    with pytest.raises(ValueError):
        rbf.RbfConfig(0.0)


def test_weights_peak_at_matching_source():
    src = grids.finite_subgroup("V4")  # neighbours are pi apart, so sigma = 1 puts them beyond 2 sigma
    w = rbf.interp_weights(src.elements[2:3], src, rbf.RbfConfig(1.0))
    assert np.argmax(w[0]) == 2 and w[0, 2] > w[0, [0, 1, 3]].max()


def test_two_equidistant_sources_share_weight():
    src = grids.RotationGrid(np.array([rot.IDENTITY, rot.rot_z(PI / 2)]))
    w = rbf.interp_weights(rot.rot_z(PI / 4)[None], src, rbf.RbfConfig(0.7))
    assert np.allclose(w, 0.5, atol=1e-12)


def test_flat_limit_gives_uniform_weights(g8):
    w = rbf.interp_weights(rot.haar_sample(np.random.default_rng(1), 50), g8, rbf.RbfConfig(1e6))
    assert np.abs(w - 1 / 8).max() < 1e-9


def test_partition_of_unity_on_many_targets(g8):
    w = rbf.interp_weights(rot.haar_sample(np.random.default_rng(2), 10_000), g8, rbf.RbfConfig(rbf.default_sigma(g8)))
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-12
    assert w.min() >= 0 and w.max() <= 1


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_left_invariance_and_sign_invariance(seed):
    rng = np.random.default_rng(seed)
    src = rot.haar_sample(rng, 6)
    tgt = rot.haar_sample(rng, 5)
    g = rot.haar_sample(rng)
    cfg = rbf.RbfConfig(0.8)
    w = rbf.interp_weights(tgt, grids.RotationGrid(src), cfg)
    moved = rbf.interp_weights(rot.quat_mul(g, tgt), grids.RotationGrid(rot.quat_mul(g, src)), cfg)
    assert np.abs(w - moved).max() < 1e-12
    assert np.abs(w - rbf.interp_weights(-tgt, src, cfg)).max() < 1e-12


def test_weights_are_lipschitz_in_the_target(g8):
    sigma = rbf.default_sigma(g8)
    cfg = rbf.RbfConfig(sigma)
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = rot.haar_sample(rng)
        eps = rng.uniform(1e-4, 0.01)
        axis = rng.standard_normal(3)
        t2 = rot.quat_mul(t, rot.axis_angle(axis, eps))
        d = rot.geodesic_distance(t, t2)
        diff = np.abs(rbf.interp_weights(t[None], g8, cfg) - rbf.interp_weights(t2[None], g8, cfg)).max()
        assert diff <= 2 * (2 / sigma) * d


def kernel(grid, rng, c_out=2, c_in=3):
    return rbf.GroupMixingKernel.init(grid, c_out, c_in, rng)


def test_constant_params_give_constant_kernel(g8):
    k = rbf.GroupMixingKernel(g8, np.full((2, 3, 8), 0.7))
    out = rbf.expand_kernel(k, rot.haar_sample(np.random.default_rng(4), 9))
    assert np.abs(out - 0.7).max() < 1e-12


def test_narrow_gaussian_interpolates_anchors(g8):
    rng = np.random.default_rng(5)
    k = rbf.GroupMixingKernel(g8, rng.standard_normal((2, 2, 8)), rbf.RbfConfig(1e-4))
    w = k.weights(g8.elements)
    assert np.abs(w - np.eye(8)).max() < 1e-8
    assert np.abs(rbf.expand_kernel(k, g8.elements) - k.params).max() < 1e-8


def test_midpoint_of_two_anchors():
    src = grids.RotationGrid(np.array([rot.IDENTITY, rot.rot_x(PI / 3)]))
    k = rbf.GroupMixingKernel(src, np.array([[[0.0, 1.0]]]))
    assert abs(rbf.expand_kernel(k, rot.rot_x(PI / 6)[None])[0, 0, 0] - 0.5) < 1e-12


def test_param_shape_and_init_bound(g8):
    with pytest.raises(ValueError):
        rbf.GroupMixingKernel(g8, np.zeros((2, 3, 7)))
    with pytest.raises(ValueError):
        rbf.GroupMixingKernel(g8, np.full((1, 1, 8), np.nan))
    k = kernel(g8, np.random.default_rng(0), 4, 5)
    assert np.abs(k.params).max() <= np.sqrt(1 / (5 * 8))


def test_expand_is_linear(g8):
    rng = np.random.default_rng(6)
    tgt = rot.haar_sample(rng, 7)
    p, q = rng.standard_normal((2, 2, 3, 8))
    ex = lambda params: rbf.expand_kernel(rbf.GroupMixingKernel(g8, params), tgt)  # noqa: E731
    assert np.abs(ex(2 * p - 3 * q) - (2 * ex(p) - 3 * ex(q))).max() < 1e-12


def test_backward_zero_and_shape_errors(g8):
    k = kernel(g8, np.random.default_rng(7))
    tgt = rot.haar_sample(np.random.default_rng(8), 4)
    assert not rbf.expand_kernel_backward(k, tgt, np.zeros((2, 3, 4))).any()
    with pytest.raises(ValueError):
        rbf.expand_kernel_backward(k, tgt, np.zeros((2, 3, 5)))


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_backward_is_the_adjoint(seed):
    rng = np.random.default_rng(seed)
    grid = grids.RotationGrid(rot.haar_sample(rng, 5))
    k = kernel(grid, rng)
    tgt = rot.haar_sample(rng, 6)
    u = rng.standard_normal((2, 3, 6))
    lhs = np.sum(rbf.expand_kernel(k, tgt) * u)
    rhs = np.sum(k.params * rbf.expand_kernel_backward(k, tgt, u))
    assert abs(lhs - rhs) < 1e-10 * max(1, abs(lhs))


def test_backward_matches_finite_differences(g8):
    rng = np.random.default_rng(9)
    k = kernel(g8, rng)
    tgt = rot.haar_sample(rng, 6)
    u = rng.standard_normal((2, 3, 6))

    def loss():
        return np.sum(np.sin(rbf.expand_kernel(k, tgt)) * u)

    grad = rbf.expand_kernel_backward(k, tgt, np.cos(rbf.expand_kernel(k, tgt)) * u)
    d = rng.standard_normal(k.params.shape)
    h = 1e-5
    k.params += h * d
    up = loss()
    k.params -= 2 * h * d
    down = loss()
    k.params += h * d
    fd = (up - down) / (2 * h)
    assert abs(fd - np.sum(grad * d)) / abs(fd) < 1e-6
