"""Bidirectional LNCC + gradient inverse-consistency objective and its gradient.

    total = lncc(A o phi_ab, B) + lncc(B o phi_ba, A)
            + lam * mean || grad(phi_ab o phi_ba) - I ||_F^2

Local statistics use a separable Gaussian window (zero padded, normalised by
the filtered ones image), which keeps the filter operator symmetric so its
adjoint is itself.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import _kernels
from .transform import DisplacementField, TrilinearSampler
from .volume import Volume3, require_same_grid


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    lncc_sigma: float = 2.5
    eps: float = 1e-5
    lam: float = 1.5
    reg_subsample: int = 1

    def __post_init__(self):
        if not self.lncc_sigma > 0:
            raise ValueError("lncc_sigma must be > 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if int(self.reg_subsample) != self.reg_subsample or self.reg_subsample < 1:
            raise ValueError("reg_subsample must be an integer >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    sim_ab: float
    sim_ba: float
    reg: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(4.0 * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded separable correlation of a 3D array."""
    return _kernels.blur_channels(np.asarray(arr, dtype=np.float64)[None], kernel, False)[0]


class _LocalStats:
    """Window statistics of a fixed (target) image, reused across evaluations."""

    def __init__(self, target: np.ndarray, kernel: np.ndarray, dtype=np.float64):
        # computed in float64, then stored at the working precision
        norm = blur(np.ones_like(target), kernel)
        b = target - target.mean()
        mb = blur(b, kernel) / norm
        sbb = blur(b * b, kernel) / norm - mb**2
        self.dtype = np.dtype(dtype)
        self.kernel, self.norm, self.b, self.mb, self.sbb = (
            np.ascontiguousarray(x, dtype=self.dtype) for x in (kernel, norm, b, mb, sbb))


class _LnccState:
    """Forward intermediates of one LNCC evaluation, kept for the backward pass."""

    def __init__(self, a: np.ndarray, st: _LocalStats, eps: float):
        self.st = st
        # the loss is invariant to a global offset, so centre for accuracy
        self.a = np.ascontiguousarray(a - a.mean(), dtype=st.dtype)
        self.ma, self.sab, self.denom, mean_ncc2 = _kernels.lncc_forward(
            self.a, st.b, st.mb, st.sbb, st.norm, st.kernel, float(eps))
        self.loss = float(1.0 - mean_ncc2)

    def grad(self) -> np.ndarray:
        """Gradient of the loss w.r.t. the (uncentred) warped image."""
        st = self.st
        g = _kernels.lncc_backward(self.a, st.b, self.ma, st.mb, self.sab, st.sbb,
                                   self.denom, st.norm, st.kernel)
        return g.astype(np.float64, copy=False)


def lncc_loss(warped: Volume3, target: Volume3, cfg: LossConfig = LossConfig()) -> float:
    """``1 - mean(local squared NCC)`` between two volumes on the same grid."""
    require_same_grid(warped, target)
    st = _LocalStats(target.data, gaussian_kernel(cfg.lncc_sigma))
    return _LnccState(warped.data, st, cfg.eps).loss


def _positions(u, axes) -> TrilinearSampler:
    return TrilinearSampler(u.shape[1:], axes[0] + u[0], axes[1] + u[1], axes[2] + u[2])


class _RegState:
    """Forward pass of the inverse-consistency term; gradients are computed on demand."""

    def __init__(self, u_ab, u_ba, axes, stride, keep_grad=True):
        if min(u_ab.shape[1:]) < 3:
            raise ValueError("the inverse-consistency term needs at least 3 voxels per axis")
        self.u_ab = u_ab
        self.sampler = _positions(u_ba, axes)
        uc = u_ba + self.sampler.sample(u_ab)
        self.value, self.gc = _kernels.central_diff_energy(uc, int(stride), keep_grad)

    def grad(self, which: str) -> np.ndarray:
        if which == "ab":
            return self.sampler.scatter(self.gc)
        return self.gc + self.sampler.vjp(self.u_ab, self.gc)


def _reg(u_ab, u_ba, axes, stride, want_ab, want_ba):
    st = _RegState(u_ab, u_ba, axes, stride, want_ab or want_ba)
    return (st.value, st.grad("ab") if want_ab else None, st.grad("ba") if want_ba else None)


def gradicon_reg(field_ab: DisplacementField, field_ba: DisplacementField,
                 cfg: LossConfig = LossConfig()) -> float:
    """Mean squared Frobenius distance of grad(phi_ab o phi_ba) from the identity."""
    require_same_grid(field_ab, field_ba)
    return _reg(field_ab.u, field_ba.u, field_ab.grid.axes(), cfg.reg_subsample, False, False)[0]


class _Side:
    """One direction evaluated at a field array ``u``.

    Holds the similarity forward pass and the full map: ``u`` itself, or
    ``coarse o u`` when the objective carries a coarse field. Image and
    coarse field are sampled together since they share positions.
    """

    def __init__(self, stack, stats, u, axes, eps, composed):
        self.stack = stack
        self.sampler = _positions(u, axes)
        vals = self.sampler.sample(stack)
        self.lncc = _LnccState(vals[0], stats, eps)
        self.loss = self.lncc.loss
        self.full = u + vals[1:] if composed else u
        self._dl_da = None

    def dl_da(self):
        if self._dl_da is None:
            self._dl_da = self.lncc.grad()
        return self._dl_da

    def grad(self, lam: float = 0.0, g_full=None) -> np.ndarray:
        """Gradient w.r.t. ``u`` of ``loss + lam * R``, given ``g_full = dR/dfull``."""
        dl = self.dl_da()[None]
        if g_full is None or lam == 0:
            return self.sampler.vjp(self.stack[:1], dl)
        if self.stack.shape[0] == 1:
            return self.sampler.vjp(self.stack, dl) + lam * g_full
        weights = np.concatenate([dl, lam * g_full])
        return self.sampler.vjp(self.stack, weights) + lam * g_full


class Objective:
    """The composite loss for a fixed set of images, evaluated on raw field arrays.

    ``src_a o phi_ab`` is compared with ``tgt_b`` and ``src_b o phi_ba`` with
    ``tgt_a``. For the plain objective the sources equal the targets; the
    two-step residual solve passes pre-warped sources instead, together with
    the ``coarse`` field pair they were warped with, so that the
    inverse-consistency term sees ``coarse o residual``.

    ``lncc_dtype`` sets the precision of the windowed statistics; sampling,
    composition and the regulariser always run in float64.
    """

    def __init__(self, src_a: Volume3, tgt_b: Volume3, src_b: Volume3, tgt_a: Volume3,
                 cfg: LossConfig, coarse=None, lncc_dtype=np.float64):
        self.grid = require_same_grid(src_a, tgt_b, src_b, tgt_a)
        self.cfg = cfg
        kernel = gaussian_kernel(cfg.lncc_sigma)
        self.stats = {"ab": _LocalStats(tgt_b.data, kernel, lncc_dtype),
                      "ba": _LocalStats(tgt_a.data, kernel, lncc_dtype)}
        self.composed = coarse is not None
        self.stacks = {}
        for n, (d, src) in enumerate((("ab", src_a), ("ba", src_b))):
            parts = [src.data[None]]
            if coarse is not None:
                parts.append(np.asarray(coarse[n], dtype=np.float64))
            self.stacks[d] = np.ascontiguousarray(np.concatenate(parts))
        self.axes = self.grid.axes()

    def side(self, which: str, u: np.ndarray) -> _Side:
        return _Side(self.stacks[which], self.stats[which], u, self.axes, self.cfg.eps,
                     self.composed)

    def reg_state(self, side_ab: _Side, side_ba: _Side, keep_grad=True) -> _RegState:
        return _RegState(side_ab.full, side_ba.full, self.axes, self.cfg.reg_subsample, keep_grad)

    def grad(self, which: str, side: _Side, reg_state: _RegState | None) -> np.ndarray:
        lam = self.cfg.lam
        g_full = reg_state.grad(which) if (lam != 0 and reg_state is not None) else None
        return side.grad(lam, g_full)

    def evaluate(self, u_ab: np.ndarray, u_ba: np.ndarray, want=()):
        """Return ``(LossBreakdown, {name: gradient})`` for names in ``want``."""
        lam = self.cfg.lam
        sides = {"ab": self.side("ab", u_ab), "ba": self.side("ba", u_ba)}
        st = self.reg_state(sides["ab"], sides["ba"], lam != 0 and bool(want))
        reg = float(st.value)
        br = LossBreakdown(sides["ab"].loss, sides["ba"].loss, reg,
                           sides["ab"].loss + sides["ba"].loss + lam * reg)
        grads = {}
        for name in ("ab", "ba"):
            if name in want:
                grads[name] = self.grad(name, sides[name], st)
                check_finite(grads[name], f"gradient w.r.t. field_{name}")
        return br, grads


def check_finite(g: np.ndarray, what: str) -> None:
    bad = ~np.isfinite(g)
    if bad.any():
        # first offending voxel in x-fastest order
        per_voxel = bad.any(axis=0)
        flat = np.flatnonzero(per_voxel.ravel(order="F"))[0]
        voxel = np.unravel_index(flat, per_voxel.shape, order="F")
        raise NumericalError(f"non-finite {what} at voxel {tuple(int(v) for v in voxel)}")


def total_loss(i_a: Volume3, i_b: Volume3, f_ab: DisplacementField, f_ba: DisplacementField,
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    require_same_grid(i_a, i_b, f_ab, f_ba)
    return Objective(i_a, i_b, i_b, i_a, cfg).evaluate(f_ab.u, f_ba.u)[0]


def loss_gradient(i_a: Volume3, i_b: Volume3, f_ab: DisplacementField, f_ba: DisplacementField,
                  cfg: LossConfig = LossConfig(), wrt: str = "f_ab") -> np.ndarray:
    """Analytic gradient of :func:`total_loss` w.r.t. ``f_ab`` or ``f_ba``, shape (3, nx, ny, nz)."""
    key = {"f_ab": "ab", "f_ba": "ba"}.get(wrt)
    if key is None:
        raise ValueError("wrt must be 'f_ab' or 'f_ba'")
    require_same_grid(i_a, i_b, f_ab, f_ba)
    return Objective(i_a, i_b, i_b, i_a, cfg).evaluate(f_ab.u, f_ba.u, want=(key,))[1][key]
