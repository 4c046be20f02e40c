import json
import math

import numpy as np
import pytest

from brokengeo.broken_geodesic import (
    BrokenGeodesic,
    DriverConfig,
    forward_backward,
    path_metric,
    replay,
    run_broken_geodesic,
)
from brokengeo.demons import LegConfig, v_norm
from brokengeo.field_core import (
    ContractError,
    DisplacementTransform,
    GridMismatchError,
    ScalarImage,
    VectorField,
    warp,
)
from brokengeo.svf_exp import exp_svf
from brokengeo.synth import phantom

from _fields import smooth_svf

FAST = DriverConfig(max_legs=4, leg_cfg=LegConfig(iterations_per_level=15))


def _geodesic_from_legs(legs):
    dims = legs[0].dims if legs else (4, 4)
    zero = ScalarImage(np.zeros(dims))
    return replay(zero, zero, legs)


@pytest.fixture(scope="module")
def pair():
    img, _ = phantom((64, 64))
    v = smooth_svf(img.dims, 5.0, 2.5, seed=11)
    return img, warp(img, exp_svf(v))


@pytest.fixture(scope="module")
def geodesic(pair):
    return run_broken_geodesic(*pair, FAST)


# -- metric -------------------------------------------------------------------

def test_metric_of_empty_path_is_zero():
    assert path_metric(_geodesic_from_legs([])) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_metric_is_additive_over_legs(seed):
    rng = np.random.default_rng(seed)
    legs = [smooth_svf((16, 16), 2.0, rng.uniform(0.1, 2.0), seed * 10 + i) for i in range(5)]
    split = int(rng.integers(0, 6))
    whole = path_metric(_geodesic_from_legs(legs))
    parts = path_metric(_geodesic_from_legs(legs[:split])) + path_metric(_geodesic_from_legs(legs[split:]))
    assert whole == pytest.approx(parts, rel=1e-14)
    assert whole == pytest.approx(math.fsum(v_norm(v) for v in legs), rel=1e-14)


def test_metric_zero_only_for_zero_legs():
    nonzero = smooth_svf((16, 16), 2.0, 1e-3, 0)
    assert path_metric(_geodesic_from_legs([nonzero])) > 0
    assert path_metric(_geodesic_from_legs([VectorField.zeros((16, 16))])) == 0.0


# -- driver -------------------------------------------------------------------

def test_identical_images_give_empty_path():
    img, _ = phantom((32, 32))
    g = run_broken_geodesic(img, img, FAST)
    assert g.n_legs == 0
    assert path_metric(g) == 0.0
    assert not g.composed.disp.data.any()
    assert g.attempts == 0


def test_driver_lowers_energy_monotonically(pair, geodesic):
    g = geodesic
    assert g.n_legs >= 1
    assert g.energy_history[0] < g.initial_energy
    assert all(a < b * (1 - 1e-3) for b, a in zip(g.energy_history, g.energy_history[1:]))
    assert g.final_energy < 0.1 * g.initial_energy
    assert g.total_length == pytest.approx(path_metric(g))


def test_final_image_is_moving_through_composed(pair, geodesic):
    moving, fixed = pair
    np.testing.assert_array_equal(warp(moving, geodesic.composed).data, geodesic.final_image.data)
    assert geodesic.final_energy == np.mean((geodesic.final_image.data - fixed.data) ** 2)


def test_every_leg_and_the_composition_are_diffeomorphic(geodesic):
    from brokengeo.field_core import jacobian_determinant

    for t in geodesic.leg_transforms + (geodesic.composed,):
        assert jacobian_determinant(t).data.min() > 0


def test_replay_reproduces_the_run(pair, geodesic):
    again = replay(*pair, list(geodesic.legs), FAST)
    np.testing.assert_array_equal(again.composed.disp.data, geodesic.composed.disp.data)
    assert again.energy_history == geodesic.energy_history
    assert path_metric(again) == path_metric(geodesic)


def test_driver_is_deterministic(pair, geodesic):
    again = run_broken_geodesic(*pair, FAST)
    assert again.leg_lengths == geodesic.leg_lengths
    np.testing.assert_array_equal(again.composed.disp.data, geodesic.composed.disp.data)


def test_patience_stops_after_rejections():
    # no leg can remove all of the error, so every leg is rejected; a retry on
    # the unchanged image would repeat the first one and is not run
    img, _ = phantom((32, 32))
    fixed = ScalarImage(np.roll(img.data, 1, axis=1))
    cfg = DriverConfig(max_legs=10, min_energy_decrease=1.0, patience=2)
    g = run_broken_geodesic(img, fixed, cfg)
    assert g.n_legs == 0
    assert g.attempts == 1


def test_max_legs_is_respected(pair):
    cfg = DriverConfig(max_legs=2, min_energy_decrease=0.0,
                       leg_cfg=LegConfig(iterations_per_level=3))
    assert run_broken_geodesic(*pair, cfg).n_legs <= 2


def test_driver_rejects_mismatched_grids():
    with pytest.raises(GridMismatchError):
        run_broken_geodesic(ScalarImage(np.zeros((8, 8))), ScalarImage(np.zeros((8, 9))))


def test_forward_backward_roundtrip(pair):
    fb = forward_backward(*pair, FAST)
    fwd, bwd = fb
    assert fwd.n_legs >= 1 and bwd.n_legs >= 1
    assert fb.roundtrip_mse_moving < 0.1 * fb.unregistered_mse
    assert fb.roundtrip_mse_fixed < 0.1 * fb.unregistered_mse


# -- config -------------------------------------------------------------------

def test_driver_config_accepts_nested_and_flat():
    nested = DriverConfig.from_dict({"max_legs": 3, "leg": {"sigma_fluid": 1.5}})
    flat = DriverConfig.from_dict({"max_legs": 3, "sigma_fluid": 1.5})
    assert nested == flat
    assert DriverConfig.from_dict(json.loads(json.dumps(nested.to_dict()))) == nested


@pytest.mark.parametrize("bad", [{"max_legs": 0}, {"patience": 0}, {"min_energy_decrease": -1}, {"bogus": 1}])
def test_driver_config_rejects_bad_values(bad):
    with pytest.raises(ContractError):
        DriverConfig.from_dict(bad)
