import json

import numpy as np
import pytest

from brokengeo.broken_geodesic import DriverConfig, run_broken_geodesic
from brokengeo.demons import LegConfig
from brokengeo.evaluation import (
    LabelImage,
    dice,
    dominant_label,
    evaluate_pair,
    jacobian_stats,
    mse,
    transfer_labels,
)
from brokengeo.field_core import ContractError, DisplacementTransform, ScalarImage, VectorField
from brokengeo.synth import SynthSpec, make_pair, phantom


def test_label_image_contract():
    assert LabelImage(np.array([[0.0, 2.0], [1.0, 1.0]])).data.dtype == np.int64
    with pytest.raises(ContractError):
        LabelImage(np.array([[0.5, 1.0]]))
    with pytest.raises(ContractError):
        LabelImage(np.array([[-1, 1]]))


def test_dice_values():
    a = LabelImage(np.array([[1, 1, 0, 0]]))
    b = LabelImage(np.array([[1, 0, 0, 0]]))
    assert dice(a, b, 1) == pytest.approx(2 / 3)
    assert dice(a, a, 1) == 1.0
    assert dice(a, LabelImage(np.array([[0, 0, 1, 1]])), 1) == 0.0
    assert dice(a, b, 7) == 1.0


def test_dominant_label_ignores_background():
    labels = LabelImage(np.array([[0, 0, 0, 0, 2, 2, 1]]))
    assert dominant_label(labels) == 2


def test_transfer_labels_integer_shift_and_identity():
    labels = LabelImage(np.arange(12).reshape(3, 4))
    assert np.array_equal(transfer_labels(labels, DisplacementTransform.identity((3, 4))).data, labels.data)
    d = np.zeros((3, 4, 2))
    d[..., 1] = 1.4  # rounds to a one-voxel shift
    out = transfer_labels(labels, DisplacementTransform(VectorField(d))).data
    np.testing.assert_array_equal(out[:, :3], labels.data[:, 1:])
    assert set(np.unique(out)) <= set(np.unique(labels.data))


def test_mse_and_jacobian_stats_of_identity():
    a = ScalarImage(np.zeros((4, 4)))
    b = ScalarImage(np.full((4, 4), 2.0))
    assert mse(a, b) == 4.0
    assert jacobian_stats(DisplacementTransform.identity((4, 4))) == (1.0, 1.0, 0.0)


def test_evaluate_pair_report():
    img, lab = phantom((64, 64))
    labels = LabelImage(lab)
    moving, fixed, truth = make_pair(img, SynthSpec(degree=2, seed=0, n_control_points=6))
    cfg = DriverConfig(max_legs=3, leg_cfg=LegConfig(iterations_per_level=15))
    g = run_broken_geodesic(moving, fixed, cfg)
    rep = evaluate_pair(moving, fixed, g, labels, transfer_labels(labels, truth), cfg=cfg)
    assert rep.mse_after < rep.mse_before
    assert rep.mse_after == g.final_energy
    assert set(rep.dice_per_label) == {0, 1, 2, 3, 4}
    assert rep.dice_per_label[3] > 0.9
    assert rep.jac_min > 0 and rep.jac_negative_fraction == 0.0
    assert rep.roundtrip_max_disp < 1.0
    assert rep.metric == pytest.approx(g.total_length)
    d = json.loads(rep.to_json())
    assert set(d) == {"mse_before", "mse_after", "dice_per_label", "jac_min", "jac_mean",
                      "jac_negative_fraction", "roundtrip_max_disp", "metric"}


def test_evaluate_pair_needs_both_label_maps():
    img, lab = phantom((16, 16))
    g = run_broken_geodesic(img, img)
    with pytest.raises(ContractError):
        evaluate_pair(img, img, g, LabelImage(lab), None, backward=g)
