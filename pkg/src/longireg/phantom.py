"""Synthetic longitudinal phantoms with closed-form deformations.

A phantom is a background of many small Gaussian blobs with spherical
lesions built from concentric tissue layers (hypo-dense core, intermediate
shell, scattered hyper-dense flecks). A longitudinal pair is made by deforming a noise-free
phantom with an :class:`AnalyticDeformation` and adding independent noise
to each timepoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .transform import DisplacementField, jacobian_determinant, warp
from .volume import Grid3, LabelMask, Volume3

DEFAULT_INTENSITIES = (-100.0, 40.0, 300.0)


@dataclass(frozen=True)
class LesionSpec:
    center_mm: Tuple[float, float, float]
    radius_mm: float
    site: str = "pelvis_ovaries"
    composition: Tuple[float, float, float] = (0.2, 0.7, 0.1)
    intensities: Tuple[float, float, float] = DEFAULT_INTENSITIES

    def __post_init__(self):
        if abs(sum(self.composition) - 1.0) > 1e-9 or min(self.composition) < 0:
            raise ValueError(f"composition fractions must be >= 0 and sum to 1, got {self.composition}")


@dataclass(frozen=True)
class PhantomSpec:
    grid: Grid3 = Grid3((64, 64, 64))
    lesions: Tuple[LesionSpec, ...] = ()
    background_hu: float = 0.0
    n_blobs: int = 300
    blob_amplitude_hu: float = 80.0
    blob_width: Tuple[float, float] = (0.03, 0.07)
    noise_sigma: float = 5.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lesions", tuple(self.lesions))
        object.__setattr__(self, "blob_width", tuple(float(w) for w in self.blob_width))
        lo, hi = self.blob_width
        if not 0 < lo <= hi:
            raise ValueError("blob_width must be (lo, hi) with 0 < lo <= hi")
        for les in self.lesions:
            if les.radius_mm <= 2 * max(self.grid.spacing):
                raise ValueError(f"lesion radius {les.radius_mm} mm must exceed 2 voxels")

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        d = dict(d)
        if "grid" in d:
            d["grid"] = Grid3.from_dict(d["grid"])
        d["lesions"] = tuple(
            LesionSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in les.items()})
            for les in d.get("lesions", ()))
        return cls(**d)


def _world(grid: Grid3):
    return [grid.origin[a] + ax * grid.spacing[a] for a, ax in enumerate(grid.axes())]


def _background(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    grid = spec.grid
    xs = _world(grid)
    extent = np.array(grid.dims) * np.array(grid.spacing)
    lo = np.array(grid.origin)
    out = np.full(grid.dims, float(spec.background_hu))
    for _ in range(spec.n_blobs):
        c = lo + rng.uniform(0.0, 1.0, 3) * extent
        width = rng.uniform(*spec.blob_width) * extent.mean()
        amp = rng.uniform(0.4, 1.0) * spec.blob_amplitude_hu * rng.choice([-1.0, 1.0])
        r2 = sum((x - ci) ** 2 for x, ci in zip(xs, c))
        out += amp * np.exp(-0.5 * r2 / width**2)
    return out


def make_phantom(spec: PhantomSpec):
    """Return ``(image, tumour mask, sub-region truth)``.

    Tumour labels are lesion indices 1..K in spec order; sub-region labels
    are 1 hypo-dense, 2 intermediate, 3 hyper-dense.
    """
    grid = spec.grid
    rng = np.random.default_rng(spec.seed)
    image = _background(spec, rng)
    tumour = np.zeros(grid.dims, dtype=np.int32)
    sub = np.zeros(grid.dims, dtype=np.int32)
    xs = _world(grid)
    lo = np.array(grid.origin)
    hi = lo + (np.array(grid.dims) - 1) * np.array(grid.spacing)
    for n, les in enumerate(spec.lesions, start=1):
        c = np.asarray(les.center_mm, dtype=float)
        if np.any(c - les.radius_mm < lo) or np.any(c + les.radius_mm > hi):
            raise ValueError(f"lesion {n} extends outside the grid")
        dist = np.sqrt(sum((x - ci) ** 2 for x, ci in zip(xs, c)))
        inside = dist <= les.radius_mm
        f_hypo, _, f_hyper = les.composition
        core = inside & (dist <= les.radius_mm * f_hypo ** (1.0 / 3.0))
        cls = np.where(core, 1, 2)
        shell_idx = np.flatnonzero(inside & ~core)
        n_hyper = min(len(shell_idx), int(round(f_hyper * np.count_nonzero(inside))))
        flecks = rng.permutation(shell_idx)[:n_hyper]
        cls.flat[flecks] = 3
        levels = np.asarray(les.intensities, dtype=float)
        image[inside] = levels[cls[inside] - 1]
        tumour[inside] = n
        sub[inside] = cls[inside]
    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, grid.dims)
    return Volume3(grid, image, "HU"), LabelMask(grid, tumour), LabelMask(grid, sub)


@dataclass(frozen=True)
class AnalyticDeformation:
    """Closed-form deformation in voxel coordinates of the grid it is sampled on.

    kinds: ``translation`` (``translation``), ``linear`` (``u = A (x - center)``),
    ``radial_contraction`` (``u = -alpha s(r) (x - center)`` with ``s = 1`` on the
    core radius and a cubic falloff to 0 across ``rim_width``).
    """
    kind: str
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    matrix: Optional[Tuple[Tuple[float, ...], ...]] = None
    center: Optional[Tuple[float, float, float]] = None
    core_radius: float = 10.0
    rim_width: float = 8.0
    alpha: float = 0.2

    def __post_init__(self):
        if self.kind not in ("translation", "linear", "radial_contraction"):
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        if self.kind == "linear":
            A = np.asarray(self.matrix, dtype=float)
            if A.shape != (3, 3) or np.linalg.norm(A, 2) >= 0.5:
                raise ValueError("linear deformation needs a 3x3 matrix with spectral norm < 0.5")
        if self.kind == "radial_contraction":
            if not 0.0 <= self.alpha < 1.0 or self.core_radius <= 0 or self.rim_width <= 0:
                raise ValueError("radial contraction needs 0 <= alpha < 1 and positive radii")

    def _center(self, grid: Grid3) -> np.ndarray:
        if self.center is None:
            return (np.array(grid.dims) - 1) / 2.0
        return np.asarray(self.center, dtype=float)

    def field(self, grid: Grid3) -> DisplacementField:
        ax = grid.axes()
        u = np.zeros((3,) + grid.dims)
        if self.kind == "translation":
            for k in range(3):
                u[k] = self.translation[k]
        elif self.kind == "linear":
            A = np.asarray(self.matrix, dtype=float)
            c = self._center(grid)
            for k in range(3):
                u[k] = sum(A[k, l] * (ax[l] - c[l]) for l in range(3))
        else:
            c = self._center(grid)
            rel = [ax[k] - c[k] for k in range(3)]
            r = np.sqrt(sum(x**2 for x in rel))
            t = np.clip((r - self.core_radius) / self.rim_width, 0.0, 1.0)
            s = 1.0 - 3.0 * t**2 + 2.0 * t**3
            for k in range(3):
                u[k] = -self.alpha * s * rel[k]
        return DisplacementField(grid, u)

    def core_detj(self) -> float:
        """Closed-form determinant on the core (radial) or everywhere (others)."""
        if self.kind == "translation":
            return 1.0
        if self.kind == "linear":
            return float(np.linalg.det(np.eye(3) + np.asarray(self.matrix, dtype=float)))
        return (1.0 - self.alpha) ** 3

    def core_mask(self, grid: Grid3, margin: float = 1.0) -> np.ndarray:
        """Voxels where :meth:`core_detj` holds exactly for the sampled field.

        ``margin`` keeps the finite-difference stencil away from the rim.
        """
        if self.kind != "radial_contraction":
            m = np.zeros(grid.dims, dtype=bool)
            m[1:-1, 1:-1, 1:-1] = True
            return m
        ax = grid.axes()
        c = self._center(grid)
        r = np.sqrt(sum((ax[k] - c[k]) ** 2 for k in range(3)))
        return r <= self.core_radius - margin

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "translation":
            d["translation"] = list(self.translation)
        elif self.kind == "linear":
            d["matrix"] = [list(row) for row in self.matrix]
            d["center"] = None if self.center is None else list(self.center)
        else:
            d.update(center=None if self.center is None else list(self.center),
                     core_radius=self.core_radius, rim_width=self.rim_width, alpha=self.alpha)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticDeformation":
        d = dict(d)
        for key in ("translation", "center"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        if d.get("matrix") is not None:
            d["matrix"] = tuple(tuple(row) for row in d["matrix"])
        return cls(**d)


def apply_deformation(vol: Volume3, d: AnalyticDeformation):
    """Return ``(vol o phi, phi)`` with ``phi`` sampled from the closed form."""
    truth = d.field(vol.grid)
    jac = jacobian_determinant(truth)
    if jac.folding_count or np.any(jac.detJ <= 0):
        raise ValueError("deformation is not invertible on this grid (detJ <= 0 found)")
    return warp(vol, truth), truth


@dataclass
class PhantomPair:
    """Baseline/follow-up phantom pair with ground truth.

    The baseline is the deformed phantom, so ``truth`` is the field on the
    baseline grid that pulls follow-up data into baseline space
    (``followup o truth == baseline`` before noise): the ground truth for
    ``phi_ba``. Its Jacobian is the local follow-up/baseline volume ratio.
    """
    baseline: Volume3
    followup: Volume3
    baseline_tumour: LabelMask
    followup_tumour: LabelMask
    baseline_subregions: LabelMask
    followup_subregions: LabelMask
    truth: DisplacementField
    deformation: AnalyticDeformation
    sites: dict = field(default_factory=dict)


def make_pair(spec: PhantomSpec, deformation: AnalyticDeformation) -> PhantomPair:
    clean_spec = replace(spec, noise_sigma=0.0)
    image, tumour, sub = make_phantom(clean_spec)
    baseline, truth = apply_deformation(image, deformation)
    rng = np.random.default_rng([spec.seed, 1])
    noise_b = rng.normal(0.0, spec.noise_sigma, spec.grid.dims) if spec.noise_sigma > 0 else 0.0
    noise_f = rng.normal(0.0, spec.noise_sigma, spec.grid.dims) if spec.noise_sigma > 0 else 0.0
    return PhantomPair(
        baseline=baseline.with_data(baseline.data + noise_b),
        followup=image.with_data(image.data + noise_f),
        baseline_tumour=warp(tumour, truth, "nearest"),
        followup_tumour=tumour,
        baseline_subregions=warp(sub, truth, "nearest"),
        followup_subregions=sub,
        truth=truth,
        deformation=deformation,
        sites={n: les.site for n, les in enumerate(spec.lesions, start=1)},
    )


def sphere_spec(radius_vox: float = 5.0, dims: Sequence[int] = (64, 64, 64), noise_sigma: float = 5.0,
                seed: int = 0, composition=(0.2, 0.7, 0.1)) -> PhantomSpec:
    """One lesion at the grid centre on a 1 mm isotropic grid."""
    grid = Grid3(tuple(dims))
    c = tuple((n - 1) / 2.0 for n in grid.dims)
    return PhantomSpec(grid, (LesionSpec(c, float(radius_vox), composition=tuple(composition)),),
                       noise_sigma=noise_sigma, seed=seed)
