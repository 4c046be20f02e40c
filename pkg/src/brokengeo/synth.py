"""Controlled synthetic deformations from random local bumps.

Each control point carries a truncated Gaussian bump of displacement.  The
degree ``k`` sets the area (volume in 3D) of every bump's support to
``k * 0.05%`` of the image, and the amplitude to ``amplitude_scale * k``.
The summed field is treated as a velocity field and exponentiated, so the
applied deformation is diffeomorphic.

Random draws use numpy's PCG64 generator seeded with ``seed``.  Positions and
directions depend on the seed only, so for a fixed seed the deformation
grows with ``k``.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .broken_geodesic import DriverConfig, path_metric, run_broken_geodesic
from .field_core import (
    ContractError,
    DisplacementTransform,
    ScalarImage,
    VectorField,
    grid_coordinates,
    jacobian_determinant,
    smooth_array,
    warp,
)
from .svf_exp import ExpConfig, exp_svf

AREA_PER_DEGREE = 0.0005
# keep every bump's steepest slope below this, so id + v never folds
_SLOPE_LIMIT = 0.5


@dataclass(frozen=True)
class SynthSpec:
    n_control_points: int = 25
    degree: int = 1
    seed: int = 0
    amplitude_scale: float = 0.5
    guarantee_diffeo: bool = True

    def __post_init__(self):
        if self.n_control_points < 0:
            raise ContractError("n_control_points must be >= 0")
        if self.degree < 1:
            raise ContractError("degree must be >= 1")
        if self.amplitude_scale < 0:
            raise ContractError("amplitude_scale must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def support_radius(dims, degree: int) -> float:
    """Radius of a disk (ball in 3D) covering ``degree * 0.05%`` of the grid."""
    ndim = len(dims)
    target = degree * AREA_PER_DEGREE * float(np.prod(dims))
    if ndim == 2:
        return math.sqrt(target / math.pi)
    return (3.0 * target / (4.0 * math.pi)) ** (1.0 / 3.0)


def _directions(rng: np.random.Generator, n: int, ndim: int) -> np.ndarray:
    if ndim == 2:
        theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
        return np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=-1, keepdims=True)


def generate_deformation(dims, spec: SynthSpec) -> VectorField:
    """Velocity field made of ``spec.n_control_points`` local bumps."""
    dims = tuple(int(n) for n in dims)
    ndim = len(dims)
    if ndim not in (2, 3):
        raise ContractError("dims must be 2D or 3D")
    radius = support_radius(dims, spec.degree)
    rho = radius / 3.0
    margin = 2.0 * radius
    span = np.array([n - 1 - 2.0 * margin for n in dims])
    if spec.n_control_points and (span < 0).any():
        raise ContractError(
            f"cannot place control points {margin:.2f} voxels (2x support radius) "
            f"from the borders of a {dims} grid"
        )

    rng = np.random.Generator(np.random.PCG64(spec.seed))
    unit_pos = rng.uniform(0.0, 1.0, size=(spec.n_control_points, ndim))
    dirs = _directions(rng, spec.n_control_points, ndim)
    centers = margin + unit_pos * span

    amplitude = spec.amplitude_scale * spec.degree
    if spec.guarantee_diffeo:
        # steepest slope of a exp(-r^2 / 2 rho^2) is a / (rho sqrt(e))
        amplitude = min(amplitude, _SLOPE_LIMIT * rho * math.sqrt(math.e))

    coords = grid_coordinates(dims)
    v = np.zeros(dims + (ndim,))
    if amplitude == 0.0:
        return VectorField(v)
    reach = int(math.ceil(radius)) + 1
    for c, d in zip(centers, dirs):
        lo = [max(int(math.floor(ci)) - reach, 0) for ci in c]
        hi = [min(int(math.floor(ci)) + reach + 1, n) for ci, n in zip(c, dims)]
        window = tuple(slice(a, b) for a, b in zip(lo, hi))
        r2 = np.sum((coords[window] - c) ** 2, axis=-1)
        bump = amplitude * np.exp(-r2 / (2.0 * rho * rho))
        bump[r2 > radius * radius] = 0.0
        v[window] += bump[..., None] * d

    if spec.guarantee_diffeo:
        # overlapping bumps can add slopes; shrink until the warp is safe
        for _ in range(30):
            if jacobian_determinant(exp_svf(VectorField(v))).data.min() > 0:
                break
            v *= 0.8
    return VectorField(v)


def make_pair(img: ScalarImage, spec: SynthSpec, exp_cfg: ExpConfig | None = None):
    """``(moving, fixed, truth)`` with ``fixed = img o exp(v)`` and ``moving = img``."""
    v = VectorField(generate_deformation(img.dims, spec).data, img.spacing)
    truth = exp_svf(v, exp_cfg)
    return img, warp(img, truth), truth


# -- phantom ------------------------------------------------------------------

# label -> intensity
PHANTOM_LABELS = {0: 0.0, 1: 0.3, 2: 0.55, 3: 0.9, 4: 0.15}


def phantom(dims=(128, 128), smoothing: float = 1.0):
    """Brain-like test image and its label map.

    Labels: 0 background, 1 outer rim, 2 cortex-like band with a wavy inner
    boundary, 3 core (the largest structure), 4 two small inner cavities.
    Returns ``(ScalarImage, labels)`` with integer labels.
    """
    dims = tuple(int(n) for n in dims)
    ndim = len(dims)
    coords = grid_coordinates(dims)
    center = (np.array(dims) - 1) / 2.0
    rel = (coords - center) / (np.array(dims) / 2.0)
    r = np.sqrt(np.sum((rel / np.array([0.85, 0.95, 0.8][:ndim])) ** 2, axis=-1))
    theta = np.arctan2(rel[..., 1], rel[..., 0])
    labels = np.zeros(dims, dtype=np.int64)
    # shells hold more of a ball's volume, so the 3D band is thinner
    band, core = (0.9, 0.68) if ndim == 2 else (0.93, 0.77)
    labels[r < 1.0] = 1
    labels[r < band] = 2
    wavy = core + 0.07 * np.sin(9.0 * theta)
    if ndim == 3:
        wavy = wavy + 0.04 * np.sin(5.0 * math.pi * rel[..., 2])
    labels[r < wavy] = 3
    for sx in (-0.18, 0.18):
        off = np.zeros(ndim)
        off[0] = sx
        e = (rel - off) / np.array([0.1, 0.28, 0.2][:ndim])
        labels[np.sum(e**2, axis=-1) < 1.0] = 4
    intensity = np.zeros(dims)
    for lab, val in PHANTOM_LABELS.items():
        intensity[labels == lab] = val
    if smoothing > 0:
        intensity = smooth_array(intensity, (smoothing,) * ndim)
    return ScalarImage(intensity), labels


# -- degree sweep -------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    seed: int
    k: int
    metric: float
    final_mse: float
    n_legs: int
    initial_mse: float
    leg_lengths: tuple[float, ...]
    leg_jac_min: tuple[float, ...]
    composed_jac_min: float
    truth_jac_min: float


CSV_HEADER = ("seed", "k", "metric", "final_mse", "n_legs")


def _sweep_cell(args) -> SweepRow:
    data, spacing, spec, cfg = args
    img = ScalarImage(data, spacing)
    moving, fixed, truth = make_pair(img, spec, cfg.leg_cfg.exp_cfg)
    g = run_broken_geodesic(moving, fixed, cfg)
    return SweepRow(
        seed=spec.seed,
        k=spec.degree,
        metric=path_metric(g),
        final_mse=g.final_energy,
        n_legs=g.n_legs,
        initial_mse=g.initial_energy,
        leg_lengths=g.leg_lengths,
        leg_jac_min=tuple(float(jacobian_determinant(t).data.min()) for t in g.leg_transforms),
        composed_jac_min=float(jacobian_determinant(g.composed).data.min()),
        truth_jac_min=float(jacobian_determinant(truth).data.min()),
    )


def metric_vs_degree(
    img: ScalarImage,
    degrees=range(1, 11),
    n_seeds: int = 10,
    base_spec: SynthSpec | None = None,
    cfg: DriverConfig | None = None,
    threads: int = 1,
    seeds=None,
) -> list[SweepRow]:
    """Run the driver on a synthetic pair for every ``(seed, k)``.

    Rows come back sorted by seed then degree whatever ``threads`` is; cells
    are independent so the values do not depend on it either.
    """
    base_spec = base_spec or SynthSpec()
    cfg = cfg or DriverConfig()
    seeds = list(range(n_seeds)) if seeds is None else list(seeds)
    jobs = [
        (img.data, img.spacing, SynthSpec(**{**asdict(base_spec), "seed": s, "degree": k}), cfg)
        for s in seeds
        for k in degrees
    ]
    if threads <= 1:
        return [_sweep_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_sweep_cell, jobs))


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([r.seed, r.k, repr(r.metric), repr(r.final_mse), r.n_legs])
    return buf.getvalue()
