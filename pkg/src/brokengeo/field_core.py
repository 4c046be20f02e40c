"""Regular-grid scalar and vector fields.

Arrays are indexed ``[x, y]`` or ``[x, y, z]``: axis 0 is x.  Vector fields
carry a trailing component axis whose length equals the number of spatial
axes, with components expressed in voxel units.  Spacing is metadata that
only enters :func:`gradient` and :func:`jacobian_determinant`.

All resampling uses a clamp-to-edge boundary: coordinates are clamped into
``[0, n - 1]`` along every axis before interpolation.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import ndimage


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


class GridMismatchError(ContractError):
    """Two operands live on different grids."""


def _as_spacing(spacing, ndim: int) -> tuple[float, ...]:
    if spacing is None:
        return (1.0,) * ndim
    if np.isscalar(spacing):
        spacing = (float(spacing),) * ndim
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise ContractError(f"spacing has {len(spacing)} entries, expected {ndim}")
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise ContractError(f"spacing must be strictly positive, got {spacing}")
    return spacing


@dataclass(frozen=True, eq=False)
class ScalarImage:
    """Scalar field on a 2D or 3D grid."""

    data: np.ndarray
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (2, 3):
            raise ContractError(f"images must be 2D or 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ContractError(f"empty grid {data.shape}")
        if not np.isfinite(data).all():
            raise ContractError("image contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def with_data(self, data) -> "ScalarImage":
        return ScalarImage(data, self.spacing)


@dataclass(frozen=True, eq=False)
class VectorField:
    """Dense per-voxel vector field; ``data.shape == dims + (ndim,)``."""

    data: np.ndarray
    spacing: tuple[float, ...] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim not in (3, 4) or data.shape[-1] != data.ndim - 1:
            raise ContractError(
                f"vector field shape {data.shape} must be dims + (len(dims),)"
            )
        if not np.isfinite(data).all():
            raise ContractError("vector field contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing, data.ndim - 1))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape[:-1]

    @property
    def ndim(self) -> int:
        return self.data.ndim - 1

    @classmethod
    def zeros(cls, dims: Sequence[int], spacing=None) -> "VectorField":
        dims = tuple(int(n) for n in dims)
        return cls(np.zeros(dims + (len(dims),)), spacing)

    def with_data(self, data) -> "VectorField":
        return VectorField(data, self.spacing)

    def norm(self) -> np.ndarray:
        """Per-voxel Euclidean magnitude."""
        return np.sqrt(np.sum(self.data**2, axis=-1))

    def maxnorm(self) -> float:
        return float(self.norm().max())

    def __neg__(self) -> "VectorField":
        return VectorField(-self.data, self.spacing)


@dataclass(frozen=True, eq=False)
class DisplacementTransform:
    """Deformation ``phi(x) = x + disp(x)`` used as a pullback on images."""

    disp: VectorField
    provenance: str = "explicit"

    @property
    def dims(self) -> tuple[int, ...]:
        return self.disp.dims

    @property
    def spacing(self) -> tuple[float, ...]:
        return self.disp.spacing

    @classmethod
    def identity(cls, dims: Sequence[int], spacing=None) -> "DisplacementTransform":
        return cls(VectorField.zeros(dims, spacing), "identity")


Field = Union[ScalarImage, VectorField]


def _check_same_grid(a, b, what: str = "inputs") -> None:
    if tuple(a.dims) != tuple(b.dims):
        raise GridMismatchError(f"{what} have mismatched dims {tuple(a.dims)} vs {tuple(b.dims)}")
    if not np.allclose(a.spacing, b.spacing):
        raise GridMismatchError(f"{what} have mismatched spacing {a.spacing} vs {b.spacing}")


# ---------------------------------------------------------------------------
# Interpolation
# ---------------------------------------------------------------------------

def _catmull_rom_weights(t):
    t2 = t * t
    t3 = t2 * t
    return (
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    )


def interpolate(img: ScalarImage, p: Sequence[float], scheme: str = "linear") -> float:
    """Value of ``img`` at the continuous voxel coordinate ``p``.

    Scalar reference implementation; :func:`sample` is the vectorized
    counterpart used by everything else.
    """
    p = tuple(float(c) for c in p)
    if len(p) != img.ndim:
        raise ContractError(f"point has {len(p)} coordinates, image has {img.ndim} axes")
    if scheme not in ("linear", "cubic"):
        raise ContractError(f"unknown interpolation scheme {scheme!r}")

    taps_per_axis = []
    for c, n in zip(p, img.dims):
        c = min(max(c, 0.0), n - 1.0)
        i0 = int(math.floor(c))
        t = c - i0
        if scheme == "linear":
            taps = [(i0, 1.0 - t), (i0 + 1, t)]
        else:
            w = _catmull_rom_weights(t)
            taps = [(i0 - 1 + j, w[j]) for j in range(4)]
        taps_per_axis.append([(min(max(i, 0), n - 1), wt) for i, wt in taps])

    value = 0.0
    for combo in np.ndindex(*(len(t) for t in taps_per_axis)):
        idx = []
        weight = 1.0
        for axis, j in enumerate(combo):
            i, wt = taps_per_axis[axis][j]
            idx.append(i)
            weight *= wt
        value += weight * img.data[tuple(idx)]
    return float(value)


def sample(data: np.ndarray, coords: np.ndarray, scheme: str = "linear") -> np.ndarray:
    """Sample a grid array at many points.

    Parameters
    ----------
    data : array, shape ``dims`` or ``dims + (C,)``
        Values on the grid.  A trailing channel axis is allowed when its
        length differs from the coordinate count's spatial rank (vector
        fields), and is carried through.
    coords : array, shape ``(..., ndim)``
        Voxel coordinates, last axis ordered like the grid axes.
    scheme : {'linear', 'cubic'}

    Returns
    -------
    array, shape ``coords.shape[:-1]`` (plus the channel axis if any)
    """
    ndim = coords.shape[-1]
    dims = data.shape[:ndim]
    channels = data.shape[ndim:]
    out_shape = coords.shape[:-1]
    pts = coords.reshape(-1, ndim)
    if scheme == "linear":
        # order-1 splines with edge replication are exactly clamped multilinear
        pts_t = np.ascontiguousarray(pts.T)
        if not channels:
            vals = ndimage.map_coordinates(data, pts_t, order=1, mode="nearest")
            return vals.reshape(out_shape)
        vals = np.stack(
            [
                ndimage.map_coordinates(data[..., c], pts_t, order=1, mode="nearest")
                for c in range(channels[0])
            ],
            axis=-1,
        )
        return vals.reshape(out_shape + channels)
    if scheme != "cubic":
        raise ContractError(f"unknown interpolation scheme {scheme!r}")

    # Catmull-Rom: 4 clamped taps per axis
    flat = data.reshape((-1,) + channels)

    strides = np.cumprod((1,) + tuple(dims[::-1]))[:-1][::-1]
    axis_taps = []
    for a in range(ndim):
        n = dims[a]
        c = np.clip(pts[:, a], 0.0, n - 1.0)
        i0 = np.floor(c)
        t = c - i0
        i0 = i0.astype(np.intp)
        taps = [
            (np.clip(i0 + o, 0, n - 1) * strides[a], w)
            for o, w in zip((-1, 0, 1, 2), _catmull_rom_weights(t))
        ]
        axis_taps.append(taps)

    result = np.zeros((pts.shape[0],) + channels)
    for combo in np.ndindex(*(len(t) for t in axis_taps)):
        index = 0
        weight = 1.0
        for a, j in enumerate(combo):
            i, w = axis_taps[a][j]
            index = index + i
            weight = weight * w
        vals = flat[index]
        if channels:
            weight = weight[:, None]
        result += weight * vals
    return result.reshape(out_shape + channels)


def grid_coordinates(dims: Sequence[int]) -> np.ndarray:
    """Voxel-centre coordinates, shape ``dims + (len(dims),)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def warp_array(data: np.ndarray, disp: np.ndarray, scheme: str = "linear") -> np.ndarray:
    """Pullback ``data(x + disp(x))`` on raw arrays."""
    dims = disp.shape[:-1]
    return sample(data, grid_coordinates(dims) + disp, scheme)


def compose_arrays(d2: np.ndarray, d1: np.ndarray, scheme: str = "linear") -> np.ndarray:
    """Displacement of ``compose(t2, t1)``: ``d1(x) + d2(x + d1(x))``."""
    return d1 + warp_array(d2, d1, scheme)


def warp(img: ScalarImage, t: DisplacementTransform, scheme: str = "linear") -> ScalarImage:
    """Resample ``img`` at ``x + d(x)`` for every voxel ``x``."""
    _check_same_grid(img, t, "image and transform")
    return img.with_data(warp_array(img.data, t.disp.data, scheme))


def compose(t2: DisplacementTransform, t1: DisplacementTransform) -> DisplacementTransform:
    """Transform equivalent to warping by ``t2`` and then by ``t1``.

    ``warp(img, compose(t2, t1))`` matches ``warp(warp(img, t2), t1)`` up to
    interpolation error.  ``d2`` is resampled linearly.
    """
    _check_same_grid(t2, t1, "transforms")
    disp = compose_arrays(t2.disp.data, t1.disp.data)
    return DisplacementTransform(t1.disp.with_data(disp), "composed")


# ---------------------------------------------------------------------------
# Differential operators
# ---------------------------------------------------------------------------

def _grad_array(data: np.ndarray, spacing: Sequence[float]) -> list[np.ndarray]:
    ndim = len(spacing)
    out = []
    for a in range(ndim):
        if data.shape[a] < 2:
            out.append(np.zeros_like(data))
        else:
            out.append(np.gradient(data, spacing[a], axis=a, edge_order=1))
    return out


def gradient(img: ScalarImage) -> VectorField:
    """Spatial gradient in physical units.

    Central differences inside, one-sided differences on the border.
    """
    return VectorField(np.stack(_grad_array(img.data, img.spacing), axis=-1), img.spacing)


def displacement_jacobian(disp: np.ndarray, spacing: Sequence[float] | None = None) -> np.ndarray:
    """``J[..., i, j] = d disp_i / d x_j`` in voxel units (unit spacing)."""
    ndim = disp.shape[-1]
    spacing = (1.0,) * ndim if spacing is None else spacing
    rows = [np.stack(_grad_array(disp[..., i], spacing), axis=-1) for i in range(ndim)]
    return np.stack(rows, axis=-2)


def jacobian_determinant(t: DisplacementTransform) -> ScalarImage:
    """Per-voxel ``det(d phi / d x)`` for ``phi = id + d``.

    Displacements are in voxels, so the physical Jacobian is
    ``diag(h) (I + dd/di) diag(h)^-1`` and the spacing cancels in the
    determinant; we differentiate with respect to physical coordinates
    anyway and convert the displacement accordingly.
    """
    h = np.asarray(t.spacing)
    phys = t.disp.data * h
    grads = displacement_jacobian(phys, t.spacing)
    m = grads + np.eye(t.disp.ndim)
    if t.disp.ndim == 2:
        det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    else:
        det = (
            m[..., 0, 0] * (m[..., 1, 1] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 1])
            - m[..., 0, 1] * (m[..., 1, 0] * m[..., 2, 2] - m[..., 1, 2] * m[..., 2, 0])
            + m[..., 0, 2] * (m[..., 1, 0] * m[..., 2, 1] - m[..., 1, 1] * m[..., 2, 0])
        )
    return ScalarImage(det, t.spacing)


# ---------------------------------------------------------------------------
# Smoothing
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps truncated at radius ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(data: np.ndarray, sigma: Sequence[float]) -> np.ndarray:
    """Separable Gaussian smoothing over the leading ``len(sigma)`` axes.

    At the border the truncated kernel is renormalized over the taps that
    fall inside the grid, so constants are preserved everywhere.
    """
    out = data
    for axis, s in enumerate(sigma):
        if s == 0:
            continue
        num = ndimage.correlate1d(out, gaussian_kernel(s), axis=axis, mode="constant", cval=0.0)
        shape = [1] * data.ndim
        shape[axis] = -1
        out = num / _border_weights(data.shape[axis], s).reshape(shape)
    return out


@functools.lru_cache(maxsize=64)
def _border_weights(n: int, sigma: float) -> np.ndarray:
    # kernel mass that lands inside the grid, per output sample
    return ndimage.correlate1d(np.ones(n), gaussian_kernel(sigma), mode="constant", cval=0.0)


def gaussian_smooth(f: Field, sigma) -> Field:
    """Smooth a scalar image or each component of a vector field.

    ``sigma`` is a standard deviation in voxels, either one value or one per
    axis; zero leaves that axis untouched.
    """
    sig = (float(sigma),) * f.ndim if np.isscalar(sigma) else tuple(float(s) for s in sigma)
    if len(sig) != f.ndim:
        raise ContractError(f"sigma has {len(sig)} entries, field has {f.ndim} axes")
    if any(s < 0 or not math.isfinite(s) for s in sig):
        raise ContractError(f"sigma must be non-negative, got {sig}")
    if all(s == 0 for s in sig):
        return f
    return f.with_data(smooth_array(f.data, sig))


def downsample_array(data: np.ndarray, ndim: int) -> np.ndarray:
    """2x block average over the first ``ndim`` axes, edge-padding odd sizes."""
    pad = [(0, n % 2) for n in data.shape[:ndim]] + [(0, 0)] * (data.ndim - ndim)
    if any(p[1] for p in pad):
        data = np.pad(data, pad, mode="edge")
    shape = []
    for n in data.shape[:ndim]:
        shape += [n // 2, 2]
    shape += list(data.shape[ndim:])
    blocks = data.reshape(shape)
    return blocks.mean(axis=tuple(range(1, 2 * ndim, 2)))
