"""Registration quality measures: MSE, Dice after label transfer, Jacobians."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .broken_geodesic import BrokenGeodesic, DriverConfig, path_metric, run_broken_geodesic
from .field_core import (
    ContractError,
    DisplacementTransform,
    ScalarImage,
    _as_spacing,
    _check_same_grid,
    compose_arrays,
    grid_coordinates,
    jacobian_determinant,
)


@dataclass(frozen=True, eq=False)
class LabelImage:
    """Integer label map on a regular grid."""

    data: np.ndarray
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3):
            raise ContractError(f"label maps must be 2D or 3D, got shape {data.shape}")
        if data.dtype.kind == "f":
            if not np.isfinite(data).all() or (data != np.round(data)).any():
                raise ContractError("label map contains non-integer values")
            data = data.astype(np.int64)
        elif data.dtype.kind not in "iub":
            raise ContractError(f"label map has unsupported dtype {data.dtype}")
        if (data < 0).any():
            raise ContractError("labels must be non-negative")
        object.__setattr__(self, "data", data.astype(np.int64, copy=False))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim))

    @property
    def dims(self):
        return self.data.shape

    @classmethod
    def from_image(cls, img: ScalarImage) -> "LabelImage":
        return cls(img.data, img.spacing)

    def to_image(self) -> ScalarImage:
        return ScalarImage(self.data.astype(np.float64), self.spacing)


@dataclass
class EvalReport:
    mse_before: float
    mse_after: float
    dice_per_label: dict[int, float] = field(default_factory=dict)
    jac_min: float = 1.0
    jac_mean: float = 1.0
    jac_negative_fraction: float = 0.0
    roundtrip_max_disp: float = 0.0
    metric: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dice_per_label"] = {str(k): v for k, v in self.dice_per_label.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def mse(a: ScalarImage, b: ScalarImage) -> float:
    _check_same_grid(a, b, "images")
    return float(np.mean((a.data - b.data) ** 2))


def transfer_labels(labels: LabelImage, t: DisplacementTransform) -> LabelImage:
    """Pull labels back through ``t`` with nearest-neighbour lookup."""
    _check_same_grid(labels, t, "labels and transform")
    pos = np.rint(grid_coordinates(labels.dims) + t.disp.data).astype(np.intp)
    idx = tuple(np.clip(pos[..., a], 0, n - 1) for a, n in enumerate(labels.dims))
    return LabelImage(labels.data[idx], labels.spacing)


def dice(a: LabelImage, b: LabelImage, label: int) -> float:
    """Overlap ``2|A & B| / (|A| + |B|)``; 1.0 when both sets are empty."""
    if tuple(a.dims) != tuple(b.dims):
        raise ContractError(f"label maps have mismatched dims {a.dims} vs {b.dims}")
    ma = a.data == label
    mb = b.data == label
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def dominant_label(labels: LabelImage) -> int:
    """Most frequent non-zero label (ties go to the smaller value)."""
    counts = np.bincount(labels.data.ravel())
    if counts.size < 2 or counts[1:].sum() == 0:
        return 0
    return int(np.argmax(counts[1:]) + 1)


def jacobian_stats(t: DisplacementTransform) -> tuple[float, float, float]:
    det = jacobian_determinant(t).data
    return float(det.min()), float(det.mean()), float(np.mean(det <= 0))


def evaluate_pair(
    moving: ScalarImage,
    fixed: ScalarImage,
    g: BrokenGeodesic,
    labels_moving: LabelImage | None = None,
    labels_fixed_truth: LabelImage | None = None,
    backward: BrokenGeodesic | None = None,
    cfg: DriverConfig | None = None,
) -> EvalReport:
    """Fill an :class:`EvalReport` for a forward registration ``g``.

    ``roundtrip_max_disp`` is the largest displacement left after composing
    the forward and backward transforms; when ``backward`` is not supplied it
    is computed by registering ``fixed`` to ``moving`` with ``cfg``.
    Dice is reported for every label present in either label map.
    """
    _check_same_grid(moving, fixed, "moving and fixed images")
    _check_same_grid(moving, g.composed, "images and transform")
    # the driver's leg-by-leg warped image, i.e. what its acceptance gate measured
    report = EvalReport(mse_before=mse(moving, fixed), mse_after=mse(g.final_image, fixed))

    if (labels_moving is None) != (labels_fixed_truth is None):
        raise ContractError("label inputs must be given together")
    if labels_moving is not None:
        _check_same_grid(moving, labels_moving, "image and labels")
        _check_same_grid(moving, labels_fixed_truth, "image and labels")
        moved = transfer_labels(labels_moving, g.composed)
        present = np.union1d(np.unique(moved.data), np.unique(labels_fixed_truth.data))
        report.dice_per_label = {
            int(lab): dice(moved, labels_fixed_truth, int(lab)) for lab in present
        }

    report.jac_min, report.jac_mean, report.jac_negative_fraction = jacobian_stats(g.composed)

    if backward is None:
        backward = run_broken_geodesic(fixed, moving, cfg)
    residual = compose_arrays(g.composed.disp.data, backward.composed.disp.data)
    report.roundtrip_max_disp = float(np.sqrt(np.sum(residual**2, axis=-1)).max())
    report.metric = path_metric(g)
    return report
