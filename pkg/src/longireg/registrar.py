"""Multiresolution two-step registration by direct optimisation of both fields.

Stage 1 runs three units coarse to fine (grid factors 4, 2, 1 by default),
each solving for a residual on top of the fields found so far; stage 2 runs
one more full-resolution residual unit. A unit minimises the composite loss
jointly over ``phi_ab`` and ``phi_ba`` by alternating, Gaussian-smoothed
gradient steps with a reject-and-halve rule, so accepted losses never rise.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels

from .loss import (LossBreakdown, LossConfig, NumericalError, Objective, check_finite,
                   gaussian_kernel)
from .transform import DisplacementField, compose, identity_field, upsample_field, warp
from .volume import Volume3, downsample, require_same_grid

log = logging.getLogger(__name__)

MAX_HALVINGS = 10


@dataclass(frozen=True)
class RegistrationUnit:
    level_factor: int = 1
    smoothing_sigma: float = 1.5
    iterations: int = 100
    step_size: float = 0.1

    def __post_init__(self):
        if self.level_factor not in (1, 2, 4):
            raise ValueError("level_factor must be 1, 2 or 4")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")
        if self.smoothing_sigma < 0:
            raise ValueError("smoothing_sigma must be >= 0")


def _default_stage1():
    return (RegistrationUnit(4), RegistrationUnit(2), RegistrationUnit(1))


@dataclass(frozen=True)
class RegistrationConfig:
    stage1_units: Tuple[RegistrationUnit, ...] = field(default_factory=_default_stage1)
    stage2_unit: RegistrationUnit = RegistrationUnit(1)
    loss: LossConfig = LossConfig()
    seed: int = 0
    convergence_tol: float = 1e-5
    presmooth_sigma: float = 1.0

    def __post_init__(self):
        units = tuple(self.stage1_units)
        if len(units) != 3:
            raise ValueError("stage1_units must hold exactly 3 units")
        factors = [u.level_factor for u in units]
        if any(a < b for a, b in zip(factors, factors[1:])):
            raise ValueError("stage1 factors must be non-increasing")
        if self.stage2_unit.level_factor != 1:
            raise ValueError("stage2_unit must run at full resolution")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be >= 0")
        if self.presmooth_sigma < 0:
            raise ValueError("presmooth_sigma must be >= 0")
        object.__setattr__(self, "stage1_units", units)

    def to_dict(self) -> dict:
        return {
            "stage1_units": [asdict(u) for u in self.stage1_units],
            "stage2_unit": asdict(self.stage2_unit),
            "loss": self.loss.to_dict(),
            "seed": self.seed,
            "convergence_tol": self.convergence_tol,
            "presmooth_sigma": self.presmooth_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegistrationConfig":
        kw = {}
        if "stage1_units" in d:
            kw["stage1_units"] = tuple(RegistrationUnit(**u) for u in d["stage1_units"])
        if "stage2_unit" in d:
            kw["stage2_unit"] = RegistrationUnit(**d["stage2_unit"])
        if "loss" in d:
            kw["loss"] = LossConfig.from_dict(d["loss"])
        for key in ("seed", "convergence_tol", "presmooth_sigma"):
            if key in d:
                kw[key] = d[key]
        unknown = set(d) - {"stage1_units", "stage2_unit", "loss", "seed", "convergence_tol",
                              "presmooth_sigma"}
        if unknown:
            raise ValueError(f"unknown registration config keys: {sorted(unknown)}")
        return cls(**kw)


@dataclass
class RegistrationResult:
    field_ab: DisplacementField
    field_ba: DisplacementField
    loss_trace: List[dict]
    runtime_seconds: float
    config_echo: RegistrationConfig


def _smooth(g: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian smoothing of each component (truncated at 4 sigma, edge values extended)."""
    if sigma <= 0:
        return g
    g32 = np.ascontiguousarray(g, dtype=np.float32)
    kernel = gaussian_kernel(sigma).astype(np.float32)
    return _kernels.blur_channels(g32, kernel, True).astype(np.float64)


def _solve(objective: Objective, u_ab: np.ndarray, u_ba: np.ndarray, unit: RegistrationUnit,
           tol: float):
    """Alternating descent on the two fields; returns (u_ab, u_ba, accepted breakdowns)."""
    lam = objective.cfg.lam
    fields = {"ab": u_ab.copy(), "ba": u_ba.copy()}
    sides = {d: objective.side(d, fields[d]) for d in fields}
    reg_state = objective.reg_state(sides["ab"], sides["ba"], lam != 0)

    def breakdown():
        sa, sb, reg = sides["ab"].loss, sides["ba"].loss, reg_state.value
        return LossBreakdown(sa, sb, reg, sa + sb + lam * reg)

    current = breakdown()
    if not np.isfinite(current.total):
        raise NumericalError(f"non-finite loss at initialisation: {current}")
    trace = [current]
    step = unit.step_size
    halvings = 0
    stop = False
    for _ in range(unit.iterations):
        start_total = current.total
        rejected = False
        for d in ("ab", "ba"):
            g = objective.grad(d, sides[d], reg_state)
            check_finite(g, f"gradient w.r.t. field_{d}")
            g = _smooth(g, unit.smoothing_sigma)
            scale = np.max(np.abs(g))
            if scale == 0:
                continue
            trial = fields[d] - (step / scale) * g
            side = objective.side(d, trial)
            pair = (side, sides["ba"]) if d == "ab" else (sides["ab"], side)
            trial_reg = objective.reg_state(*pair, lam != 0)
            total = pair[0].loss + pair[1].loss + lam * trial_reg.value
            if np.isfinite(total) and total < current.total:
                fields[d], sides[d], reg_state = trial, side, trial_reg
                current = breakdown()
                trace.append(current)
            else:
                rejected = True
                if halvings >= MAX_HALVINGS:
                    stop = True
                    break
                step *= 0.5
                halvings += 1
        if stop:
            break
        if not rejected and start_total - current.total < tol * abs(start_total):
            break
    return fields["ab"], fields["ba"], trace


def optimize_unit(i_a: Volume3, i_b: Volume3, init_ab: DisplacementField,
                  init_ba: DisplacementField, unit: RegistrationUnit,
                  cfg: RegistrationConfig = RegistrationConfig(),
                  moving_a: Volume3 | None = None, moving_b: Volume3 | None = None,
                  coarse: Tuple[DisplacementField, DisplacementField] | None = None):
    """Optimise both fields on the working grid of the given images.

    ``moving_a``/``moving_b`` replace ``i_a``/``i_b`` as the images being
    warped (the targets stay ``i_b``/``i_a``); this is how residual solves
    on pre-warped images are expressed. ``coarse`` is the field pair those
    images were warped with; when given, the inverse-consistency term is
    applied to ``coarse o residual`` rather than to the residuals alone.
    """
    require_same_grid(i_a, i_b, init_ab, init_ba)
    pair = None
    if coarse is not None:
        require_same_grid(i_a, *coarse)
        pair = (coarse[0].u, coarse[1].u)
    objective = Objective(moving_a or i_a, i_b, moving_b or i_b, i_a, cfg.loss, coarse=pair,
                          lncc_dtype=np.float32)
    u_ab, u_ba, trace = _solve(objective, init_ab.u, init_ba.u, unit, cfg.convergence_tol)
    return DisplacementField(i_a.grid, u_ab), DisplacementField(i_a.grid, u_ba), trace


def _unit_solver(unit: RegistrationUnit, cfg: RegistrationConfig, traces: list, label: str):
    """Residual solver for one unit: full grid if factor 1, else via the downsample operator."""

    def solve(moving_a, fixed_b, moving_b, fixed_a, coarse=None):
        grid = fixed_a.grid
        if unit.level_factor == 1:
            ident = identity_field(grid)
            f_ab, f_ba, trace = optimize_unit(fixed_a, fixed_b, ident, ident, unit, cfg,
                                              moving_a=moving_a, moving_b=moving_b, coarse=coarse)
        else:
            f_ab, f_ba, trace = _downsample_solve(moving_a, fixed_b, moving_b, fixed_a, unit, cfg,
                                                  coarse)
        traces.append({"level": label, "level_factor": unit.level_factor,
                       "trace": [t.to_dict() for t in trace]})
        return f_ab, f_ba

    return solve


def downsample_field(f: DisplacementField, factor: int) -> DisplacementField:
    """Block-mean a field onto the grid of ``downsample(., factor)``, in coarse voxel units."""
    comps = [downsample(Volume3(f.grid, f.u[k], "dimensionless"), factor) for k in range(3)]
    return DisplacementField(comps[0].grid, np.stack([c.data for c in comps]) / factor)


def _downsample_solve(moving_a, fixed_b, moving_b, fixed_a, unit, cfg, coarse=None):
    k = unit.level_factor
    small = [downsample(v, k) for v in (moving_a, fixed_b, moving_b, fixed_a)]
    ident = identity_field(small[3].grid)
    if coarse is not None:
        coarse = tuple(downsample_field(c, k) for c in coarse)
    f_ab, f_ba, trace = optimize_unit(small[3], small[1], ident, ident, unit, cfg,
                                      moving_a=small[0], moving_b=small[2], coarse=coarse)
    grid = fixed_a.grid
    return upsample_field(f_ab, k, grid), upsample_field(f_ba, k, grid), trace


def downsample_op(i_a: Volume3, i_b: Volume3, unit: RegistrationUnit,
                  cfg: RegistrationConfig = RegistrationConfig()):
    """Solve at ``1/level_factor`` resolution and lift both fields to the input grid."""
    if unit.level_factor < 2:
        raise ValueError("downsample_op needs level_factor >= 2")
    require_same_grid(i_a, i_b)
    f_ab, f_ba, _ = _downsample_solve(i_a, i_b, i_b, i_a, unit, cfg)
    return f_ab, f_ba


def two_step(i_a: Volume3, i_b: Volume3, coarse: Tuple[DisplacementField, DisplacementField],
             residual_solver):
    """Refine ``coarse`` by a residual solved between the coarsely warped images and the targets.

    ``residual_solver(moving_a, fixed_b, moving_b, fixed_a, coarse)`` returns
    the residual pair; the result is ``(coarse_ab o resid_ab, coarse_ba o resid_ba)``.
    """
    c_ab, c_ba = coarse
    require_same_grid(i_a, i_b, c_ab, c_ba)
    r_ab, r_ba = residual_solver(warp(i_a, c_ab), i_b, warp(i_b, c_ba), i_a, (c_ab, c_ba))
    return compose(c_ab, r_ab), compose(c_ba, r_ba)


def register(i_a: Volume3, i_b: Volume3,
             cfg: RegistrationConfig = RegistrationConfig()) -> RegistrationResult:
    """Estimate ``phi_ab`` (``i_a o phi_ab ~ i_b``) and ``phi_ba`` on the common grid."""
    require_same_grid(i_a, i_b)
    if min(i_a.grid.dims) < 3:
        raise ValueError("registration needs at least 3 voxels per axis")
    t0 = time.perf_counter()
    if cfg.presmooth_sigma > 0:
        # decorrelates voxel noise so interpolation cannot lower its variance
        i_a, i_b = (v.with_data(gaussian_filter(v.data, cfg.presmooth_sigma, mode="nearest"))
                    for v in (i_a, i_b))
    traces: list = []
    fields = (identity_field(i_a.grid), identity_field(i_a.grid))
    for n, unit in enumerate(cfg.stage1_units):
        label = f"stage1/level{n + 1}"
        log.info("%s: factor %d, %d iterations", label, unit.level_factor, unit.iterations)
        fields = two_step(i_a, i_b, fields, _unit_solver(unit, cfg, traces, label))
    log.info("stage2: full-resolution refinement")
    fields = two_step(i_a, i_b, fields, _unit_solver(cfg.stage2_unit, cfg, traces, "stage2"))
    runtime = time.perf_counter() - t0
    return RegistrationResult(fields[0], fields[1], traces, runtime, cfg)
