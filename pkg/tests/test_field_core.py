import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brokengeo.field_core import (
    ContractError,
    DisplacementTransform,
    GridMismatchError,
    ScalarImage,
    VectorField,
    compose,
    downsample_array,
    gaussian_kernel,
    gaussian_smooth,
    gradient,
    grid_coordinates,
    interpolate,
    jacobian_determinant,
    sample,
    warp,
)


def _random_field(dims, rng, scale=1.0, sigma=3.0):
    v = rng.standard_normal(tuple(dims) + (len(dims),))
    v = gaussian_smooth(VectorField(v), sigma).data
    return VectorField(scale * v / np.abs(v).max())


# -- types --------------------------------------------------------------------

def test_scalar_image_rejects_bad_input():
    with pytest.raises(ContractError):
        ScalarImage(np.zeros(5))
    with pytest.raises(ContractError):
        ScalarImage(np.array([[1.0, np.nan]]))
    with pytest.raises(ContractError):
        ScalarImage(np.zeros((3, 3)), spacing=(1.0, 0.0))


def test_vector_field_shape_contract():
    with pytest.raises(ContractError):
        VectorField(np.zeros((4, 4, 3)))
    v = VectorField.zeros((4, 5))
    assert v.data.shape == (4, 5, 2)
    assert v.maxnorm() == 0.0


def test_grid_mismatch_is_reported():
    t = DisplacementTransform.identity((4, 4))
    with pytest.raises(GridMismatchError):
        warp(ScalarImage(np.zeros((4, 5))), t)
    with pytest.raises(GridMismatchError):
        warp(ScalarImage(np.zeros((4, 4)), spacing=(1.0, 2.0)), t)


# -- interpolation ------------------------------------------------------------

def test_linear_interpolation_hand_values():
    img = ScalarImage(np.array([[0.0, 1.0, 2.0, 3.0],
                                [4.0, 5.0, 6.0, 7.0],
                                [8.0, 9.0, 10.0, 11.0]]))
    # 0.75 * row 0 + 0.25 * row 1, halfway between columns 1 and 2
    assert interpolate(img, (0.25, 1.5)) == pytest.approx(2.5)
    # clamped to the last row / column
    assert interpolate(img, (5.0, 9.0)) == pytest.approx(11.0)
    assert interpolate(img, (-1.0, -3.0)) == pytest.approx(0.0)


def test_catmull_rom_reproduces_quadratics_in_interior():
    i, j = np.meshgrid(np.arange(8.0), np.arange(9.0), indexing="ij")
    img = ScalarImage(i**2 - 3.0 * i * j + 0.5 * j**2)
    for p in [(3.5, 4.25), (2.2, 5.9), (4.0, 3.0)]:
        exact = p[0] ** 2 - 3.0 * p[0] * p[1] + 0.5 * p[1] ** 2
        assert interpolate(img, p, "cubic") == pytest.approx(exact, abs=1e-12)


def test_catmull_rom_midpoint_on_cubic_sequence():
    # taps (-1, 9, 9, -1) / 16 on 0, 1, 8, 27 give 54 / 16
    img = ScalarImage(np.tile(np.arange(6.0) ** 3, (3, 1)))
    assert interpolate(img, (1.0, 1.5), "cubic") == pytest.approx(3.375)


@pytest.mark.parametrize("scheme", ["linear", "cubic"])
def test_sample_reproduces_grid_values(scheme):
    rng = np.random.default_rng(0)
    data = rng.standard_normal((7, 6, 5))
    out = sample(data, grid_coordinates(data.shape), scheme)
    np.testing.assert_array_equal(out, data)


@pytest.mark.parametrize("scheme", ["linear", "cubic"])
def test_sample_matches_scalar_reference(scheme):
    rng = np.random.default_rng(1)
    img = ScalarImage(rng.standard_normal((6, 7)))
    pts = rng.uniform(-1.0, 8.0, size=(40, 2))
    fast = sample(img.data, pts, scheme)
    slow = [interpolate(img, p, scheme) for p in pts]
    np.testing.assert_allclose(fast, slow, atol=1e-12)


def test_sample_vector_channels():
    rng = np.random.default_rng(2)
    v = rng.standard_normal((5, 5, 2))
    pts = rng.uniform(0, 4, size=(10, 2))
    out = sample(v, pts)
    for c in range(2):
        np.testing.assert_allclose(out[:, c], sample(v[..., c], pts), atol=1e-14)


# -- warp / compose -----------------------------------------------------------

def test_identity_warp_is_bit_exact():
    rng = np.random.default_rng(3)
    img = ScalarImage(rng.standard_normal((9, 8)))
    t = DisplacementTransform.identity(img.dims)
    np.testing.assert_array_equal(warp(img, t).data, img.data)
    np.testing.assert_array_equal(warp(img, t, "cubic").data, img.data)


def test_integer_translation_shifts_image():
    data = np.arange(30.0).reshape(5, 6)
    d = np.zeros((5, 6, 2))
    d[..., 1] = 1.0
    out = warp(ScalarImage(data), DisplacementTransform(VectorField(d))).data
    np.testing.assert_array_equal(out[:, :-1], data[:, 1:])
    np.testing.assert_array_equal(out[:, -1], data[:, -1])  # clamp to edge


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_identity_is_neutral_for_compose(seed):
    rng = np.random.default_rng(seed)
    t = DisplacementTransform(_random_field((12, 10), rng, 2.0))
    ident = DisplacementTransform.identity((12, 10))
    np.testing.assert_array_equal(compose(t, ident).disp.data, t.disp.data)
    np.testing.assert_array_equal(compose(ident, t).disp.data, t.disp.data)


def test_compose_translations_adds():
    a = np.zeros((6, 6, 2))
    b = np.zeros((6, 6, 2))
    a[..., 0] = 0.5
    b[..., 1] = -0.25
    c = compose(DisplacementTransform(VectorField(a)), DisplacementTransform(VectorField(b)))
    np.testing.assert_allclose(c.disp.data[..., 0], 0.5)
    np.testing.assert_allclose(c.disp.data[..., 1], -0.25)


def test_compose_matches_sequential_warp_on_linear_image():
    # a linear image is reproduced exactly by linear sampling away from the border
    rng = np.random.default_rng(4)
    dims = (24, 24)
    i, j = np.meshgrid(*map(np.arange, dims), indexing="ij")
    img = ScalarImage(2.0 * i - j)
    t1 = DisplacementTransform(_random_field(dims, rng, 1.5))
    t2 = DisplacementTransform(_random_field(dims, rng, 1.5))
    two_step = warp(warp(img, t2), t1).data
    one_step = warp(img, compose(t2, t1)).data
    inner = (slice(4, -4),) * 2
    np.testing.assert_allclose(one_step[inner], two_step[inner], atol=1e-10)


# -- derivatives --------------------------------------------------------------

def test_gradient_of_linear_image_respects_spacing():
    i, j = np.meshgrid(np.arange(5.0), np.arange(6.0), indexing="ij")
    g = gradient(ScalarImage(3.0 * i + 2.0 * j, spacing=(2.0, 0.5))).data
    np.testing.assert_allclose(g[..., 0], 1.5)
    np.testing.assert_allclose(g[..., 1], 4.0)


@pytest.mark.parametrize("dims", [(7, 8), (5, 6, 7)])
def test_jacobian_determinant_of_affine_field(dims):
    rng = np.random.default_rng(5)
    a = 0.3 * rng.standard_normal((len(dims), len(dims)))
    x = grid_coordinates(dims)
    d = x @ a.T
    det = jacobian_determinant(DisplacementTransform(VectorField(d))).data
    np.testing.assert_allclose(det, np.linalg.det(np.eye(len(dims)) + a), atol=1e-12)


def test_jacobian_determinant_detects_fold():
    x = grid_coordinates((10, 10))
    d = np.zeros((10, 10, 2))
    d[..., 0] = -2.0 * x[..., 0]  # phi_0 = -x_0
    det = jacobian_determinant(DisplacementTransform(VectorField(d))).data
    assert (det < 0).all()


# -- smoothing ----------------------------------------------------------------

def test_gaussian_kernel_values():
    k = gaussian_kernel(1.0)
    assert k.size == 7
    assert k[3] == pytest.approx(0.3990502796524549, rel=1e-14)
    assert k[2] == pytest.approx(0.2420362293761143, rel=1e-14)
    assert math.fsum(k) == pytest.approx(1.0)


def test_smoothing_preserves_constants_everywhere():
    img = ScalarImage(np.full((9, 11), 2.5))
    np.testing.assert_allclose(gaussian_smooth(img, 2.0).data, 2.5, rtol=1e-14)
    v = VectorField(np.full((6, 7, 5, 3), -1.25))
    np.testing.assert_allclose(gaussian_smooth(v, (1.0, 0.5, 2.0)).data, -1.25, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 3.0))
def test_smoothing_preserves_mean_of_interior_support(seed, sigma):
    # total mass is kept when the kernel never reaches the border
    rng = np.random.default_rng(seed)
    data = np.zeros((60, 60))
    data[24:36, 24:36] = rng.standard_normal((12, 12))
    out = gaussian_smooth(ScalarImage(data), sigma).data
    assert out.mean() == pytest.approx(data.mean(), abs=1e-12)


def test_smoothing_border_renormalization_value():
    # a unit impulse at the corner: the renormalized weight is k0 / (k0+k1+k2+k3)
    data = np.zeros(20)
    data[0] = 1.0
    out = gaussian_smooth(ScalarImage(np.tile(data, (3, 1))), (0.0, 1.0)).data
    assert out[1, 0] == pytest.approx(0.3990502796524549 / 0.6995251398262273, rel=1e-12)


def test_zero_sigma_is_identity_and_negative_rejected():
    img = ScalarImage(np.arange(12.0).reshape(3, 4))
    assert gaussian_smooth(img, 0.0) is img
    with pytest.raises(ContractError):
        gaussian_smooth(img, -1.0)


def test_downsample_block_average_with_odd_size():
    data = np.arange(15.0).reshape(3, 5)
    out = downsample_array(data, 2)
    assert out.shape == (2, 3)
    assert out[0, 0] == pytest.approx((0 + 1 + 5 + 6) / 4)
    # last column and row are edge-padded
    assert out[1, 2] == pytest.approx(14.0)
