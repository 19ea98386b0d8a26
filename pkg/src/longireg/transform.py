"""Dense displacement fields: warping, composition, lifting and Jacobians.

A field stores ``u`` with shape ``(3, nx, ny, nz)`` in voxel units of its own
grid and represents the map ``phi(x) = x + u(x)`` on voxel coordinates.
Sampling outside the grid is clamped to the boundary face.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .volume import Grid3, LabelMask, Volume3, require_same_grid


@dataclass(frozen=True)
class DisplacementField:
    grid: Grid3
    u: np.ndarray
    units_tag: str = "voxel"

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        if u.shape != (3,) + self.grid.dims:
            raise ValueError(f"field shape {u.shape} does not match (3,) + {self.grid.dims}")
        if not np.all(np.isfinite(u)):
            raise ValueError("displacement field contains non-finite values")
        if self.units_tag != "voxel":
            raise ValueError("displacement fields are stored in voxel units")
        u.flags.writeable = False
        object.__setattr__(self, "u", u)

    def to_mm(self) -> np.ndarray:
        return self.u * np.asarray(self.grid.spacing).reshape(3, 1, 1, 1)

    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.sum(self.u**2, axis=0))


@dataclass(frozen=True)
class JacobianMap:
    grid: Grid3
    detJ: np.ndarray
    folding_count: int

    def as_volume(self) -> Volume3:
        return Volume3(self.grid, self.detJ, "dimensionless")


class TrilinearSampler:
    """Trilinear lookup at fixed continuous voxel positions with clamp-to-edge.

    The same positions serve several arrays, the spatial derivative of the
    interpolant, and the adjoint (scatter) operation needed by gradients.
    """

    def __init__(self, dims, px, py, pz):
        self.dims = tuple(int(d) for d in dims)
        shape = np.broadcast(px, py, pz).shape
        self.out_shape = shape
        self.p = [np.ascontiguousarray(np.broadcast_to(np.asarray(p, dtype=np.float64), shape))
                  for p in (px, py, pz)]

    def sample(self, arr: np.ndarray) -> np.ndarray:
        """Sample a (nx, ny, nz) array, or every channel of a (C, nx, ny, nz) array."""
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        multi = arr.ndim == 4
        out = _kernels.sample(arr if multi else arr[None], *self.p)
        out = out.reshape((-1,) + self.out_shape)
        return out if multi else out[0]

    def sample_grad(self, arr: np.ndarray):
        """Interpolated values and their derivative w.r.t. each sample coordinate.

        The derivative is zero along an axis where the coordinate was clamped.
        For a single array the derivative has shape (3, ...); for C channels
        it has shape (C, 3, ...).
        """
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        multi = arr.ndim == 4
        val, grad = _kernels.sample_grad(arr if multi else arr[None], *self.p)
        val = val.reshape((-1,) + self.out_shape)
        grad = grad.reshape((-1, 3) + self.out_shape)
        return (val, grad) if multi else (val[0], grad[0])

    def gradient(self, arr: np.ndarray) -> np.ndarray:
        return self.sample_grad(arr)[1]

    def vjp(self, arr: np.ndarray, g: np.ndarray) -> np.ndarray:
        """``sum_c g[c] * grad(arr_c)`` at the sample points, for (C, nx, ny, nz) ``arr``."""
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        n = int(np.prod(self.out_shape))
        g = np.ascontiguousarray(np.asarray(g, dtype=np.float64).reshape(arr.shape[0], n))
        return _kernels.sample_vjp(arr, *self.p, g).reshape((3,) + self.out_shape)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample`: accumulate ``values`` onto the source grid."""
        values = np.asarray(values, dtype=np.float64)
        multi = values.ndim == len(self.out_shape) + 1
        v = values.reshape((-1, int(np.prod(self.out_shape))))
        out = _kernels.scatter(np.ascontiguousarray(v), *self.p, *self.dims)
        return out if multi else out[0]


def sampler_for(field: DisplacementField, source_dims=None) -> TrilinearSampler:
    gx, gy, gz = field.grid.axes()
    u = field.u
    return TrilinearSampler(source_dims or field.grid.dims, gx + u[0], gy + u[1], gz + u[2])


def identity_field(grid: Grid3) -> DisplacementField:
    return DisplacementField(grid, np.zeros((3,) + grid.dims))


def _nearest_lookup(labels: np.ndarray, field: DisplacementField) -> np.ndarray:
    idx = []
    for axis, ax in enumerate(field.grid.axes()):
        n = labels.shape[axis]
        p = np.clip(ax + field.u[axis], 0, n - 1)
        idx.append(np.floor(p + 0.5).astype(np.int64))
    return labels[idx[0], idx[1], idx[2]]


def warp(image, field: DisplacementField, interp: str = "trilinear"):
    """Resample ``image`` at ``x + u(x)`` for every voxel ``x`` of the field grid."""
    if interp not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if isinstance(image, LabelMask):
        if interp != "nearest":
            raise ValueError("label masks must be warped with interp='nearest'")
        return LabelMask(field.grid, _nearest_lookup(image.labels, field))
    if interp == "nearest":
        return Volume3(field.grid, _nearest_lookup(image.data, field), image.intensity_units)
    s = sampler_for(field, image.grid.dims)
    return Volume3(field.grid, s.sample(image.data), image.intensity_units)


def compose(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Field of ``x -> phi_outer(phi_inner(x))``."""
    require_same_grid(outer, inner)
    s = sampler_for(inner)
    u = inner.u + s.sample(outer.u)
    return DisplacementField(outer.grid, u)


def field_gradient(u: np.ndarray) -> np.ndarray:
    """``grad[k, l] = d u_k / d x_l``: central differences inside, one-sided on faces."""
    return np.stack([np.stack(np.gradient(u[k], edge_order=1)) for k in range(3)])


def det3(J: np.ndarray) -> np.ndarray:
    return (J[0, 0] * (J[1, 1] * J[2, 2] - J[1, 2] * J[2, 1])
            - J[0, 1] * (J[1, 0] * J[2, 2] - J[1, 2] * J[2, 0])
            + J[0, 2] * (J[1, 0] * J[2, 1] - J[1, 1] * J[2, 0]))


def jacobian_determinant(field: DisplacementField) -> JacobianMap:
    if min(field.grid.dims) < 3:
        raise ValueError("jacobian_determinant needs at least 3 voxels per axis")
    J = field_gradient(field.u)
    for k in range(3):
        J[k, k] += 1.0
    detJ = det3(J)
    return JacobianMap(field.grid, detJ, int(np.count_nonzero(detJ <= 0)))


def upsample_field(field: DisplacementField, factor: int, target: Grid3) -> DisplacementField:
    """Lift a coarse field onto ``target`` and rescale it to target voxel units.

    Target voxel centres are located in the coarse grid through world
    coordinates, so a grid produced by :func:`volume.downsample` lines up
    with the fine grid it came from.
    """
    factor = int(factor)
    if factor < 2:
        raise ValueError("upsample factor must be >= 2")
    for n_src, n_tgt in zip(field.grid.dims, target.dims):
        if abs(n_tgt - factor * n_src) > factor:
            raise ValueError(
                f"target dims {target.dims} inconsistent with factor {factor} x {field.grid.dims}")
    pos = []
    for axis, ax in enumerate(target.axes()):
        world = target.origin[axis] + ax * target.spacing[axis]
        pos.append((world - field.grid.origin[axis]) / field.grid.spacing[axis])
    s = TrilinearSampler(field.grid.dims, *pos)
    u = factor * s.sample(field.u)
    return DisplacementField(target, u)
