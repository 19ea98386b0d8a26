"""Regular 3D grids, scalar volumes and label masks.

Arrays are held as ``(nx, ny, nz)`` numpy arrays indexed ``[x, y, z]``.
Whenever voxels are serialized to a flat sequence the order is x-fastest
(``order="F"``), matching NIfTI.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

HU_MIN = -1024.0
HU_MAX = 3071.0
UNITS = ("HU", "dimensionless")


@dataclass(frozen=True)
class Grid3:
    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("Grid3 needs three dims, spacings and origin coordinates")
        if min(dims) < 2:
            raise ValueError(f"all grid dims must be >= 2, got {dims}")
        if not all(np.isfinite(spacing)) or min(spacing) <= 0:
            raise ValueError(f"spacings must be finite and > 0, got {spacing}")
        if not all(np.isfinite(origin)):
            raise ValueError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def index_to_world(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=float)
        return np.asarray(self.origin) + idx * np.asarray(self.spacing)

    def world_to_index(self, xyz) -> np.ndarray:
        xyz = np.asarray(xyz, dtype=float)
        return (xyz - np.asarray(self.origin)) / np.asarray(self.spacing)

    def axes(self):
        """Voxel index coordinate arrays, broadcastable to the grid shape."""
        nx, ny, nz = self.dims
        return (
            np.arange(nx, dtype=float)[:, None, None],
            np.arange(ny, dtype=float)[None, :, None],
            np.arange(nz, dtype=float)[None, None, :],
        )

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid3":
        return cls(tuple(d["dims"]), tuple(d.get("spacing", (1, 1, 1))), tuple(d.get("origin", (0, 0, 0))))


def _check_shape(grid: Grid3, arr: np.ndarray, what: str) -> None:
    if arr.shape != grid.dims:
        raise ValueError(f"{what} shape {arr.shape} does not match grid dims {grid.dims}")


@dataclass(frozen=True)
class Volume3:
    grid: Grid3
    data: np.ndarray
    intensity_units: str = "HU"

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data.reshape(self.grid.dims, order="F")
        _check_shape(self.grid, data, "volume data")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume data contains non-finite values")
        if self.intensity_units not in UNITS:
            raise ValueError(f"intensity_units must be one of {UNITS}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    def flat(self) -> np.ndarray:
        return self.data.ravel(order="F")

    def with_data(self, data, intensity_units=None) -> "Volume3":
        return Volume3(self.grid, data, intensity_units or self.intensity_units)


@dataclass(frozen=True)
class LabelMask:
    grid: Grid3
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.dtype == bool:
            labels = labels.astype(np.int32)
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("label values must be integers")
        if labels.size and (labels.min() < 0 or labels.max() >= 2**31):
            raise ValueError("label values must lie in [0, 2^31)")
        labels = np.array(labels, dtype=np.int32)
        if labels.ndim == 1:
            labels = labels.reshape(self.grid.dims, order="F")
        _check_shape(self.grid, labels, "label array")
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    def flat(self) -> np.ndarray:
        return self.labels.ravel(order="F")

    def binary(self, label=None) -> np.ndarray:
        if label is None:
            return self.labels != 0
        return self.labels == label

    def ids(self) -> np.ndarray:
        u = np.unique(self.labels)
        return u[u != 0]


def require_same_grid(*objs) -> Grid3:
    grid = objs[0].grid
    for o in objs[1:]:
        if o.grid != grid:
            raise GridMismatchError(f"grid mismatch: {grid} vs {o.grid}")
    return grid


class GridMismatchError(ValueError):
    pass


def clamp_hu(data: np.ndarray) -> np.ndarray:
    return np.clip(data, HU_MIN, HU_MAX)


def downsample(vol: Volume3, factor: int) -> Volume3:
    """Block-mean downsampling by an integer factor.

    Output dims are ``ceil(dim / factor)``; trailing partial blocks average
    the voxels they contain. The new origin sits at the centre of the first
    block so world coordinates stay consistent with the fine grid.
    """
    factor = int(factor)
    if factor < 2:
        raise ValueError(f"downsample factor must be >= 2, got {factor}")
    dims = np.array(vol.grid.dims)
    if np.any(dims < 2 * factor):
        raise ValueError(f"volume dims {tuple(dims)} too small for factor {factor}")
    out_dims = -(-dims // factor)
    out = vol.data
    for axis in range(3):
        n = out.shape[axis]
        starts = np.arange(0, n, factor)
        sums = np.add.reduceat(out, starts, axis=axis)
        counts = np.minimum(starts + factor, n) - starts
        shape = [1, 1, 1]
        shape[axis] = len(counts)
        out = sums / counts.reshape(shape)
    spacing = tuple(s * factor for s in vol.grid.spacing)
    origin = tuple(o + 0.5 * (factor - 1) * s for o, s in zip(vol.grid.origin, vol.grid.spacing))
    grid = Grid3(tuple(int(d) for d in out_dims), spacing, origin)
    return Volume3(grid, out, vol.intensity_units)


def resample_nearest(mask: LabelMask, target: Grid3) -> LabelMask:
    """Nearest-neighbour label lookup of ``mask`` at the voxel centres of ``target``.

    Target voxels whose nearest source index falls outside the source grid get 0.
    """
    if not isinstance(target, Grid3):
        raise ValueError("target must be a Grid3")
    src = mask.grid
    idx = []
    valid = np.ones(target.dims, dtype=bool)
    for axis, ax in enumerate(target.axes()):
        world = target.origin[axis] + ax * target.spacing[axis]
        cont = (world - src.origin[axis]) / src.spacing[axis]
        i = np.floor(cont + 0.5).astype(np.int64)
        valid &= (i >= 0) & (i < src.dims[axis])
        idx.append(np.clip(i, 0, src.dims[axis] - 1))
    labels = mask.labels[idx[0], idx[1], idx[2]]
    return LabelMask(target, np.where(valid, labels, 0))
