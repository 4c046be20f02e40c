"""Group exponential of stationary velocity fields."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field_core import (
    ContractError,
    DisplacementTransform,
    VectorField,
    compose_arrays,
    grid_coordinates,
    sample,
)


@dataclass(frozen=True)
class ExpConfig:
    """Scaling-and-squaring controls.

    The number of squarings ``K`` is the smallest integer no lower than
    ``min_scalings`` such that ``maxnorm(v) / 2**K <= max_step_norm``.
    ``interpolation`` is the scheme used to resample the field during the
    self-compositions.  Catmull-Rom follows the flow of a smooth field more
    closely than linear but costs several times more per squaring.
    """

    min_scalings: int = 2
    max_step_norm: float = 0.5
    interpolation: str = "linear"

    def __post_init__(self):
        if self.interpolation not in ("linear", "cubic"):
            raise ContractError(f"unknown interpolation scheme {self.interpolation!r}")
        if self.min_scalings < 0:
            raise ContractError("min_scalings must be >= 0")
        if not self.max_step_norm > 0:
            raise ContractError("max_step_norm must be > 0")


def num_squarings(maxnorm: float, cfg: ExpConfig) -> int:
    if maxnorm <= 0:
        return cfg.min_scalings
    k = math.ceil(math.log2(maxnorm / cfg.max_step_norm))
    k = max(cfg.min_scalings, k, 0)
    # guard against log2 rounding right at a power of two
    while maxnorm / 2.0**k > cfg.max_step_norm:
        k += 1
    return k


def exp_array(v: np.ndarray, cfg: ExpConfig) -> np.ndarray:
    """Scaling and squaring on a raw ``dims + (ndim,)`` array."""
    maxnorm = float(np.sqrt(np.max(np.sum(v * v, axis=-1))))
    if maxnorm == 0.0:
        return np.zeros_like(v)
    k = num_squarings(maxnorm, cfg)
    d = v / 2.0**k
    for _ in range(k):
        d = compose_arrays(d, d, cfg.interpolation)
    return d


def exp_svf(v: VectorField, cfg: ExpConfig | None = None) -> DisplacementTransform:
    """Deformation ``exp(v)`` obtained by scaling and squaring."""
    cfg = cfg or ExpConfig()
    if not np.isfinite(v.data).all():
        raise ContractError("velocity field is not finite")
    return DisplacementTransform(v.with_data(exp_array(v.data, cfg)), "exp")


def exp_oracle(v: VectorField, steps: int, scheme: str = "linear") -> DisplacementTransform:
    """Forward-Euler flow of ``dx/dt = v(x)`` over unit time.

    ``v`` is evaluated between voxels with ``scheme``.  Slow and only meant
    as an independent check of :func:`exp_svf`.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x0 = grid_coordinates(v.dims)
    x = x0.copy()
    h = 1.0 / steps
    for _ in range(steps):
        x += h * sample(v.data, x, scheme)
    return DisplacementTransform(v.with_data(x - x0), "euler")


def inverse_transform(v: VectorField, cfg: ExpConfig | None = None) -> DisplacementTransform:
    """Inverse of ``exp(v)``, computed as ``exp(-v)``."""
    t = exp_svf(-v, cfg)
    return DisplacementTransform(t.disp, "exp-inverse")


def interior_mask(dims, margin: float) -> np.ndarray:
    """Voxels farther than ``margin`` from every border."""
    coords = grid_coordinates(dims)
    mask = np.ones(tuple(dims), dtype=bool)
    for a, n in enumerate(dims):
        c = coords[..., a]
        mask &= (c > margin) & (c < n - 1 - margin)
    return mask
