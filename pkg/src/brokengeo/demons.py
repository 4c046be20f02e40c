"""Single registration leg: log-demons estimate of one stationary velocity field."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .field_core import (
    ContractError,
    ScalarImage,
    VectorField,
    _check_same_grid,
    _grad_array,
    displacement_jacobian,
    downsample_array,
    grid_coordinates,
    sample,
    smooth_array,
    warp_array,
)
from .svf_exp import ExpConfig, exp_array


class NumericalError(RuntimeError):
    """A registration produced non-finite values."""


_LEG_KEYS = (
    "iterations_per_level",
    "pyramid_levels",
    "sigma_fluid",
    "sigma_diffusion",
    "force_cap",
    "reg_weight",
    "min_scalings",
    "max_step_norm",
    "exp_interpolation",
)


@dataclass(frozen=True)
class LegConfig:
    iterations_per_level: int = 50
    pyramid_levels: int = 3
    sigma_fluid: float = 1.0
    sigma_diffusion: float = 0.5
    force_cap: float = 2.0
    reg_weight: float = 0.0
    exp_cfg: ExpConfig = field(default_factory=ExpConfig)

    def __post_init__(self):
        if self.iterations_per_level < 1:
            raise ContractError("iterations_per_level must be >= 1")
        if self.pyramid_levels < 1:
            raise ContractError("pyramid_levels must be >= 1")
        if self.sigma_fluid < 0 or self.sigma_diffusion < 0:
            raise ContractError("smoothing sigmas must be >= 0")
        if not self.force_cap > 0:
            raise ContractError("force_cap must be > 0")
        if self.reg_weight < 0:
            raise ContractError("reg_weight must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        exp_cfg = d.pop("exp_cfg")
        d["min_scalings"] = exp_cfg["min_scalings"]
        d["max_step_norm"] = exp_cfg["max_step_norm"]
        d["exp_interpolation"] = exp_cfg["interpolation"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LegConfig":
        unknown = set(d) - set(_LEG_KEYS)
        if unknown:
            raise ContractError(f"unknown leg config keys: {sorted(unknown)}")
        exp_kw = {k: d[k] for k in ("min_scalings", "max_step_norm") if k in d}
        if "exp_interpolation" in d:
            exp_kw["interpolation"] = d["exp_interpolation"]
        kw = {k: d[k] for k in _LEG_KEYS[:6] if k in d}
        for k in ("iterations_per_level", "pyramid_levels"):
            if k in kw and int(kw[k]) != kw[k]:
                raise ContractError(f"{k} must be an integer")
        if "min_scalings" in exp_kw and int(exp_kw["min_scalings"]) != exp_kw["min_scalings"]:
            raise ContractError("min_scalings must be an integer")
        return cls(exp_cfg=ExpConfig(**exp_kw), **kw)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LegConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class LegResult:
    svf: VectorField
    energy_trace: tuple[float, ...]
    final_energy: float
    leg_length: float


def v_norm(v) -> float:
    """Root-mean-square voxel displacement of a velocity field.

    Stands in for the field norm of the deformation space; in voxel units and
    independent of grid size.
    """
    data = v.data if isinstance(v, VectorField) else np.asarray(v)
    return float(np.sqrt(np.mean(np.sum(data * data, axis=-1))))


# -- array-level kernels ------------------------------------------------------

def _energy_terms(warped: np.ndarray, fixed: np.ndarray, disp: np.ndarray, with_reg: bool = True) -> tuple[float, float]:
    sim = float(np.mean((fixed - warped) ** 2))
    if not with_reg:
        return sim, 0.0
    jac = displacement_jacobian(disp)
    reg = float(np.mean(np.sum(jac * jac, axis=(-2, -1))))
    return sim, reg


def _voxel_gradient(img: np.ndarray) -> np.ndarray:
    return np.stack(_grad_array(img, (1.0,) * img.ndim), axis=-1)


def _force(warped: np.ndarray, fixed: np.ndarray, force_cap: float, fixed_grad=None) -> np.ndarray:
    if fixed_grad is None:
        fixed_grad = _voxel_gradient(fixed)
    g = 0.5 * (fixed_grad + _voxel_gradient(warped))
    r = fixed - warped
    denom = np.sum(g * g, axis=-1) + r * r
    ok = denom >= 1e-9
    scale = np.zeros_like(r)
    np.divide(r, denom, out=scale, where=ok)
    f = g * scale[..., None]
    mag = np.sqrt(np.sum(f * f, axis=-1))
    over = mag > force_cap
    if over.any():
        f[over] *= (force_cap / mag[over])[:, None]
    return f


def _upsample_field(v: np.ndarray, fine_dims) -> np.ndarray:
    # coarse voxel i covers fine voxels 2i and 2i+1, so its centre sits at 2i + 0.5
    coords = (grid_coordinates(fine_dims) - 0.5) / 2.0
    return 2.0 * sample(v, coords, "linear")


# -- public operations --------------------------------------------------------

def energy(moving: ScalarImage, fixed: ScalarImage, v: VectorField, cfg: LegConfig | None = None) -> float:
    """Mean squared residual after warping plus weighted gradient penalty.

    ``mean((fixed - moving o exp(v))**2) + reg_weight * mean(|grad d|_F**2)``
    where ``d`` is the displacement of ``exp(v)``.
    """
    cfg = cfg or LegConfig()
    _check_same_grid(moving, fixed, "moving and fixed images")
    _check_same_grid(moving, v, "image and velocity field")
    disp = exp_array(v.data, cfg.exp_cfg)
    sim, reg = _energy_terms(warp_array(moving.data, disp), fixed.data, disp)
    return sim + cfg.reg_weight * reg


def demons_update(moving_warped: ScalarImage, fixed: ScalarImage, cfg: LegConfig | None = None) -> VectorField:
    """Symmetric normalized demons force, capped per voxel then fluid-smoothed.

    The force is ``r g / (|g|^2 + r^2)`` with residual ``r = fixed - warped``
    and ``g`` the mean of both image gradients (voxel units).  Voxels whose
    denominator is below 1e-9 get no force.
    """
    cfg = cfg or LegConfig()
    _check_same_grid(moving_warped, fixed, "images")
    f = _force(moving_warped.data, fixed.data, cfg.force_cap)
    f = smooth_array(f, (cfg.sigma_fluid,) * fixed.ndim)
    return VectorField(f, fixed.spacing)


def build_pyramid(data: np.ndarray, levels: int) -> list[np.ndarray]:
    """Finest first."""
    pyr = [data]
    for _ in range(levels - 1):
        if min(pyr[-1].shape) < 2:
            break
        pyr.append(downsample_array(pyr[-1], data.ndim))
    return pyr


def register_leg(moving: ScalarImage, fixed: ScalarImage, cfg: LegConfig | None = None) -> LegResult:
    """Estimate one velocity field ``u`` with ``moving o exp(u) ~ fixed``.

    Coarse-to-fine; at every level the field is updated ``iterations_per_level``
    times.  The returned field is the lowest-energy one seen at the finest
    level, and ``energy_trace`` holds every evaluated energy in order.
    """
    cfg = cfg or LegConfig()
    _check_same_grid(moving, fixed, "moving and fixed images")
    ndim = fixed.ndim
    mov_pyr = build_pyramid(moving.data, cfg.pyramid_levels)
    fix_pyr = build_pyramid(fixed.data, cfg.pyramid_levels)
    fluid = (cfg.sigma_fluid,) * ndim
    diffusion = (cfg.sigma_diffusion,) * ndim

    trace: list[float] = []
    v = np.zeros(fix_pyr[-1].shape + (ndim,))
    best_v, best_e = None, math.inf
    for level in range(len(fix_pyr) - 1, -1, -1):
        mov, fix = mov_pyr[level], fix_pyr[level]
        if v.shape[:-1] != fix.shape:
            v = _upsample_field(v, fix.shape)
        finest = level == 0
        fix_grad = _voxel_gradient(fix)
        for it in range(cfg.iterations_per_level + 1):
            disp = exp_array(v, cfg.exp_cfg)
            warped = warp_array(mov, disp)
            sim, reg = _energy_terms(warped, fix, disp, cfg.reg_weight > 0)
            e = sim + cfg.reg_weight * reg
            if not math.isfinite(e):
                raise NumericalError(
                    f"non-finite energy at pyramid level {level}, iteration {it}"
                )
            trace.append(e)
            if finest and e < best_e:
                best_e, best_v = e, v
            if it == cfg.iterations_per_level:
                break
            update = smooth_array(_force(warped, fix, cfg.force_cap, fix_grad), fluid)
            v = smooth_array(v + update, diffusion)
            if not np.isfinite(v).all():
                raise NumericalError(f"non-finite velocity at pyramid level {level}")

    svf = VectorField(best_v, fixed.spacing)
    return LegResult(svf, tuple(trace), best_e, v_norm(svf))
