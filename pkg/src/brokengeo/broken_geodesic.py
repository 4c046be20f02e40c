"""Sequential registration legs composed into a broken geodesic.

Each leg registers the current image to the fixed one; a leg is kept only if
it lowers the mean squared error by more than a relative threshold, and the
path length is the sum of the kept legs' field norms.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .demons import LegConfig, NumericalError, energy, register_leg, v_norm
from .field_core import (
    ContractError,
    DisplacementTransform,
    ScalarImage,
    VectorField,
    _check_same_grid,
    compose_arrays,
    warp_array,
)
from .svf_exp import exp_array

log = logging.getLogger(__name__)

__all__ = [
    "BrokenGeodesic",
    "DriverConfig",
    "forward_backward",
    "path_metric",
    "replay",
    "run_broken_geodesic",
    "v_norm",
]


@dataclass(frozen=True)
class DriverConfig:
    max_legs: int = 10
    min_energy_decrease: float = 1e-3
    patience: int = 2
    leg_cfg: LegConfig = field(default_factory=LegConfig)

    def __post_init__(self):
        if self.max_legs < 1:
            raise ContractError("max_legs must be >= 1")
        if self.min_energy_decrease < 0:
            raise ContractError("min_energy_decrease must be >= 0")
        if self.patience < 1:
            raise ContractError("patience must be >= 1")

    def to_dict(self) -> dict:
        return {
            "max_legs": self.max_legs,
            "min_energy_decrease": self.min_energy_decrease,
            "patience": self.patience,
            "leg": self.leg_cfg.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DriverConfig":
        """Accepts leg settings either nested under ``"leg"`` or inline."""
        d = dict(d)
        leg = dict(d.pop("leg", {}))
        kw = {}
        for k in ("max_legs", "min_energy_decrease", "patience"):
            if k in d:
                kw[k] = d.pop(k)
        leg.update(d)
        for k in ("max_legs", "patience"):
            if k in kw and int(kw[k]) != kw[k]:
                raise ContractError(f"{k} must be an integer")
        return cls(leg_cfg=LegConfig.from_dict(leg), **kw)

    @classmethod
    def from_json(cls, text: str) -> "DriverConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class BrokenGeodesic:
    """Accepted legs ``v_1..v_N`` and the transform they compose to.

    ``final_image`` is ``warp(moving, composed)``: every intermediate image is
    resampled once from the original so interpolation blur does not build up
    over legs.
    """

    legs: tuple[VectorField, ...]
    leg_lengths: tuple[float, ...]
    total_length: float
    composed: DisplacementTransform
    energy_history: tuple[float, ...]
    initial_energy: float
    final_image: ScalarImage
    leg_transforms: tuple[DisplacementTransform, ...] = ()
    leg_wall_times: tuple[float, ...] = ()
    attempts: int = 0

    @property
    def n_legs(self) -> int:
        return len(self.legs)

    @property
    def final_energy(self) -> float:
        return self.energy_history[-1] if self.energy_history else self.initial_energy


def path_metric(g: BrokenGeodesic) -> float:
    """Length of the broken geodesic: sum of per-leg field norms."""
    return float(math.fsum(v_norm(v) for v in g.legs))


def run_broken_geodesic(moving: ScalarImage, fixed: ScalarImage, cfg: DriverConfig | None = None) -> BrokenGeodesic:
    cfg = cfg or DriverConfig()
    _check_same_grid(moving, fixed, "moving and fixed images")
    leg_cfg = cfg.leg_cfg
    gate_cfg = LegConfig(**{**leg_cfg.__dict__, "reg_weight": 0.0})
    zero = VectorField.zeros(fixed.dims, fixed.spacing)

    current = moving
    e_min = energy(current, fixed, zero, gate_cfg)
    if not math.isfinite(e_min):
        raise NumericalError("initial energy is not finite")
    e_start = e_min

    legs, lengths, history, transforms, walls = [], [], [], [], []
    composed = np.zeros(fixed.dims + (fixed.ndim,))
    rejected = 0
    attempts = 0
    stale = False  # current image unchanged since the last rejected leg
    while len(legs) < cfg.max_legs and rejected < cfg.patience and e_min > 0.0:
        if stale:
            # legs are deterministic: retrying on the same image repeats the rejection
            rejected += 1
            continue
        attempts += 1
        t0 = time.perf_counter()
        leg = register_leg(current, fixed, leg_cfg)
        u = leg.svf
        disp = exp_array(u.data, leg_cfg.exp_cfg)
        candidate = compose_arrays(composed, disp)
        temp = warp_array(moving.data, candidate)
        e = float(np.mean((fixed.data - temp) ** 2))
        wall = time.perf_counter() - t0
        if not math.isfinite(e):
            raise NumericalError(f"leg {attempts} produced a non-finite energy")
        if e < e_min * (1.0 - cfg.min_energy_decrease):
            log.debug("leg %d accepted: %.6g -> %.6g", attempts, e_min, e)
            legs.append(u)
            lengths.append(v_norm(u))
            transforms.append(DisplacementTransform(u.with_data(disp), "exp"))
            walls.append(wall)
            history.append(e)
            e_min = e
            current = current.with_data(temp)
            composed = candidate
            rejected = 0
        else:
            log.debug("leg %d rejected: %.6g >= %.6g", attempts, e, e_min)
            rejected += 1
            stale = True
            continue
        stale = False

    return BrokenGeodesic(
        legs=tuple(legs),
        leg_lengths=tuple(lengths),
        total_length=float(math.fsum(lengths)),
        composed=DisplacementTransform(VectorField(composed, fixed.spacing),
                                       "composed" if legs else "identity"),
        energy_history=tuple(history),
        initial_energy=e_start,
        final_image=current,
        leg_transforms=tuple(transforms),
        leg_wall_times=tuple(walls),
        attempts=attempts,
    )


@dataclass(frozen=True, eq=False)
class ForwardBackward:
    forward: BrokenGeodesic
    backward: BrokenGeodesic
    roundtrip_mse_moving: float
    roundtrip_mse_fixed: float
    unregistered_mse: float

    def __iter__(self):
        return iter((self.forward, self.backward))


def forward_backward(moving: ScalarImage, fixed: ScalarImage, cfg: DriverConfig | None = None) -> ForwardBackward:
    """Register in both directions and measure the roundtrip residuals.

    ``roundtrip_mse_moving`` compares ``moving`` with ``moving`` pulled back
    through the forward and then the backward composed transform; likewise for
    ``fixed``.  The two path lengths are generally different.
    """
    fwd = run_broken_geodesic(moving, fixed, cfg)
    bwd = run_broken_geodesic(fixed, moving, cfg)
    f_disp, b_disp = fwd.composed.disp.data, bwd.composed.disp.data
    rt_moving = warp_array(warp_array(moving.data, f_disp), b_disp)
    rt_fixed = warp_array(warp_array(fixed.data, b_disp), f_disp)
    return ForwardBackward(
        forward=fwd,
        backward=bwd,
        roundtrip_mse_moving=float(np.mean((rt_moving - moving.data) ** 2)),
        roundtrip_mse_fixed=float(np.mean((rt_fixed - fixed.data) ** 2)),
        unregistered_mse=float(np.mean((moving.data - fixed.data) ** 2)),
    )


def replay(moving: ScalarImage, fixed: ScalarImage, legs, cfg: DriverConfig | None = None) -> BrokenGeodesic:
    """Rebuild a :class:`BrokenGeodesic` from saved leg fields.

    Composes the legs and resamples ``moving`` exactly as the driver did, so
    the composed transform, final image and energy history match the run.
    """
    cfg = cfg or DriverConfig()
    _check_same_grid(moving, fixed, "moving and fixed images")
    exp_cfg = cfg.leg_cfg.exp_cfg
    current = moving.data
    composed = np.zeros(fixed.dims + (fixed.ndim,))
    history, transforms = [], []
    for u in legs:
        _check_same_grid(u, fixed, "leg field and images")
        disp = exp_array(u.data, exp_cfg)
        composed = compose_arrays(composed, disp)
        current = warp_array(moving.data, composed)
        history.append(float(np.mean((fixed.data - current) ** 2)))
        transforms.append(DisplacementTransform(u.with_data(disp), "exp"))
    lengths = [v_norm(u) for u in legs]
    return BrokenGeodesic(
        legs=tuple(legs),
        leg_lengths=tuple(lengths),
        total_length=float(math.fsum(lengths)),
        composed=DisplacementTransform(VectorField(composed, fixed.spacing),
                                       "composed" if legs else "identity"),
        energy_history=tuple(history),
        initial_energy=float(np.mean((fixed.data - moving.data) ** 2)),
        final_image=moving.with_data(current),
        leg_transforms=tuple(transforms),
    )
