"""Response quantification on top of registration output.

Jacobian statistics per region, intensity-based fuzzy c-means
sub-segmentation, connected-component lesion sets and their longitudinal
matching, and the quality metrics DSC and SDlogJ.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix, csgraph

from .transform import DisplacementField, JacobianMap, warp
from .volume import LabelMask, Volume3, require_same_grid

SUBREGION_NAMES = {1: "hypo", 2: "intermediate", 3: "hyper"}


# -- lesion sets ------------------------------------------------------------

@dataclass(frozen=True)
class LesionSet:
    mask: LabelMask
    site_of: Dict[int, str] = field(default_factory=dict)
    volumes_mm3: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        ids = [int(i) for i in self.mask.ids()]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"lesion ids must be contiguous 1..K, got {ids}")
        if not self.volumes_mm3:
            counts = np.bincount(self.mask.labels.ravel(), minlength=len(ids) + 1)
            vv = self.mask.grid.voxel_volume
            object.__setattr__(self, "volumes_mm3", {i: float(counts[i] * vv) for i in ids})

    @property
    def ids(self) -> List[int]:
        return [int(i) for i in self.mask.ids()]

    def site(self, lesion_id: int) -> str:
        return self.site_of.get(lesion_id, "unknown")


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ValueError("connectivity must be 6 or 26")


def connected_components(mask: LabelMask, connectivity: int = 26,
                         sites: Optional[Mapping[int, str]] = None) -> LesionSet:
    """Label foreground components 1..K by decreasing size.

    Ties keep scan order. ``sites`` maps input labels to site tags; a
    component takes the site of its most frequent input label.
    """
    raw, k = ndimage.label(mask.labels > 0, structure=_structure(connectivity))
    counts = np.bincount(raw.ravel(), minlength=k + 1)[1:]
    order = np.argsort(-counts, kind="stable")
    lut = np.zeros(k + 1, dtype=np.int32)
    lut[order + 1] = np.arange(1, k + 1, dtype=np.int32)
    labels = lut[raw]
    site_of = {}
    for new in range(1, k + 1):
        if sites:
            inside = mask.labels[labels == new]
            label, _ = Counter(inside.tolist()).most_common(1)[0]
            site_of[new] = sites.get(int(label), "unknown")
        else:
            site_of[new] = "unknown"
    return LesionSet(LabelMask(mask.grid, labels), site_of)


# -- overlap and quality metrics ---------------------------------------------

def dice(a: LabelMask, b: LabelMask, label: Optional[int] = None) -> float:
    """2|A & B| / (|A| + |B|) for one label (any nonzero label if None)."""
    require_same_grid(a, b)
    x, y = a.binary(label), b.binary(label)
    na, nb = int(x.sum()), int(y.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(x & y)) / (na + nb)


def _roi_values(jac: JacobianMap, roi: Optional[LabelMask], label: Optional[int]) -> np.ndarray:
    if roi is None:
        return jac.detJ.ravel()
    require_same_grid(jac, roi)
    return jac.detJ[roi.binary(label)]


def sdlogj(jac: JacobianMap, roi: Optional[LabelMask] = None,
           label: Optional[int] = None) -> Tuple[float, int]:
    """Population std of ln(detJ) over the ROI (whole grid by default).

    Folded voxels (detJ <= 0) are left out; their count is returned as the
    second element.
    """
    values = _roi_values(jac, roi, label)
    ok = values > 0
    n_excluded = int(values.size - np.count_nonzero(ok))
    if not ok.any():
        raise ValueError("sdlogj: every voxel in the region is folded (detJ <= 0)")
    logs = np.log(values[ok])
    # shifting by a sample keeps constant maps at exactly zero
    return float(np.std(logs - logs[0])), n_excluded


@dataclass(frozen=True)
class RoiJacobianStats:
    roi_id: int
    voxel_count: int
    median_detj: Optional[float]
    mean_detj: Optional[float]
    std_detj: Optional[float]
    frac_shrinking: Optional[float]
    frac_expanding: Optional[float]
    folding_fraction: Optional[float]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def lower_median(values: np.ndarray) -> float:
    """Exact median by selection; the lower middle element for even counts."""
    values = np.asarray(values).ravel()
    if values.size == 0:
        raise ValueError("median of an empty set")
    k = (values.size - 1) // 2
    return float(np.partition(values, k)[k])


def _stats_row(roi_id: int, values: np.ndarray) -> RoiJacobianStats:
    n = int(values.size)
    if n == 0:
        return RoiJacobianStats(roi_id, 0, None, None, None, None, None, None)
    ok = values[values > 0]
    folding = 1.0 - ok.size / n
    if ok.size == 0:
        return RoiJacobianStats(roi_id, n, None, None, None, None, None, folding)
    return RoiJacobianStats(
        roi_id, n,
        median_detj=lower_median(ok),
        mean_detj=float(ok.mean()),
        std_detj=float(ok.std()),
        frac_shrinking=float(np.count_nonzero(ok < 1.0) / ok.size),
        frac_expanding=float(np.count_nonzero(ok > 1.0) / ok.size),
        folding_fraction=folding,
    )


def roi_jacobian_stats(jac: JacobianMap, rois: Union["LesionSet", "SubSegmentation", LabelMask],
                       ids: Optional[Sequence[int]] = None) -> List[RoiJacobianStats]:
    """One row per ROI id (lesions, sub-regions or the labels of a mask).

    Statistics other than ``folding_fraction`` use only voxels with detJ > 0.
    """
    if isinstance(rois, LesionSet):
        mask, default_ids = rois.mask, rois.ids
    elif isinstance(rois, SubSegmentation):
        mask, default_ids = rois.class_map, [1, 2, 3]
    else:
        mask, default_ids = rois, [int(i) for i in rois.ids()]
    require_same_grid(jac, mask)
    return [_stats_row(int(i), jac.detJ[mask.labels == i]) for i in (ids or default_ids)]


def percent_volume_change(detj_stat: float) -> float:
    """(detJ - 1) x 100 in decimal arithmetic, so 0.46 gives -54.0 exactly."""
    x = float(detj_stat)
    if not np.isfinite(x) or x <= 0:
        raise ValueError(f"percent_volume_change needs a positive statistic, got {detj_stat}")
    return float((Decimal(repr(x)) - 1) * 100)


def describe_change(detj_stat: float, statistic: str = "median") -> str:
    """Plain-language reading of a Jacobian statistic, e.g. "20% median volume shrinkage"."""
    pct = percent_volume_change(detj_stat)
    if pct == 0:
        return f"no {statistic} volume change"
    word = "shrinkage" if pct < 0 else "expansion"
    return f"{abs(pct):g}% {statistic} volume {word}"


# -- fuzzy c-means -----------------------------------------------------------

@dataclass(frozen=True)
class SubSegmentation:
    class_map: LabelMask
    memberships: np.ndarray
    centers: Tuple[float, ...]
    objective_trace: Tuple[float, ...] = ()
    iterations: int = 0


def _memberships(x: np.ndarray, centers: np.ndarray, m: float) -> np.ndarray:
    d2 = (x[:, None] - centers[None, :]) ** 2
    exact = d2 == 0
    with np.errstate(divide="ignore"):
        w = np.where(exact, 0.0, 1.0 / np.where(exact, 1.0, d2)) ** (1.0 / (m - 1.0))
    u = w / w.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if hit.any():
        # a voxel sitting on a center belongs to it entirely
        first = exact[hit].argmax(axis=1)
        u[hit] = 0.0
        u[np.flatnonzero(hit), first] = 1.0
    return u


def _objective(x, centers, u, m) -> float:
    return float(np.sum(u**m * (x[:, None] - centers[None, :]) ** 2))


def fcm_subsegment(image: Volume3, tumour: LabelMask, c: int = 3, m: float = 2.0,
                   tol: float = 1e-5, max_iter: int = 300) -> SubSegmentation:
    """Intensity-only fuzzy c-means inside the tumour mask.

    Centers start at evenly spaced percentiles (10/50/90 for c = 3) and are
    returned in ascending order, so class 1 is the least dense.
    """
    require_same_grid(image, tumour)
    if m <= 1:
        raise ValueError("fuzziness m must be > 1")
    inside = tumour.binary()
    if not inside.any():
        raise ValueError("fcm_subsegment: tumour mask is empty")
    x = image.data[inside].astype(np.float64)
    if np.unique(x).size < c:
        raise ValueError(f"fcm_subsegment: fewer than {c} distinct intensities in the tumour")
    centers = np.percentile(x, np.linspace(10, 90, c)) if c > 1 else np.array([np.median(x)])
    if np.unique(centers).size < c:
        uniq = np.unique(x)
        centers = uniq[np.linspace(0, uniq.size - 1, c).round().astype(int)].astype(float)
    u = _memberships(x, centers, m)
    trace = [_objective(x, centers, u, m)]
    it = 0
    for it in range(1, max_iter + 1):
        um = u**m
        new = (um * x[:, None]).sum(axis=0) / um.sum(axis=0)
        shift = float(np.max(np.abs(new - centers)))
        centers = new
        u = _memberships(x, centers, m)
        trace.append(_objective(x, centers, u, m))
        if shift < tol:
            break
    order = np.argsort(centers, kind="stable")
    centers, u = centers[order], u[:, order]
    full = np.zeros(image.grid.dims + (c,))
    full[inside] = u
    classes = np.zeros(image.grid.dims, dtype=np.int32)
    classes[inside] = u.argmax(axis=1) + 1
    return SubSegmentation(LabelMask(image.grid, classes), full, tuple(float(v) for v in centers),
                           tuple(trace), it)


# -- longitudinal matching ---------------------------------------------------

KINDS = ("matched", "disappeared", "new", "split", "merge")


@dataclass(frozen=True)
class LesionMatch:
    baseline_ids: Tuple[int, ...]
    followup_ids: Tuple[int, ...]
    kind: str
    overlap_dice: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "baseline_ids": list(self.baseline_ids),
            "followup_ids": list(self.followup_ids),
            "kind": self.kind,
            "overlap_dice": [{"baseline_id": b, "followup_id": f, "dice": d}
                             for (b, f), d in sorted(self.overlap_dice.items())],
        }


def _kind(nb: int, nf: int) -> str:
    if nf == 0:
        return "disappeared"
    if nb == 0:
        return "new"
    if nb == 1 and nf == 1:
        return "matched"
    if nb == 1:
        return "split"
    if nf == 1:
        return "merge"
    # many-to-many: name it after the side that lost components
    return "merge" if nb >= nf else "split"


def pairwise_dice(a: np.ndarray, b: np.ndarray) -> Dict[Tuple[int, int], float]:
    """Dice of every overlapping (label in a, label in b) pair."""
    na = np.bincount(a.ravel())
    nb = np.bincount(b.ravel())
    both = (a > 0) & (b > 0)
    pairs = Counter(zip(a[both].tolist(), b[both].tolist()))
    return {(int(i), int(j)): float(2.0 * n / (na[i] + nb[j])) for (i, j), n in pairs.items()}


def match_lesions(base: LesionSet, follow: LesionSet, field_ba: DisplacementField,
                  min_dice: float = 0.1) -> List[LesionMatch]:
    """Match lesions through the overlap graph in baseline space.

    ``field_ba`` lives on the baseline grid and pulls follow-up data into
    baseline space; follow-up labels are warped with it (nearest neighbour).
    Pairs with Dice >= ``min_dice`` are edges; each connected group of the
    graph becomes one match whose kind follows from its id counts.
    """
    require_same_grid(base.mask, field_ba)
    warped = warp(follow.mask, field_ba, "nearest").labels
    scores = pairwise_dice(base.mask.labels, warped)
    edges = {p: d for p, d in scores.items() if d >= min_dice}
    nb, nf = len(base.ids), len(follow.ids)
    # bipartite overlap graph: baseline ids on nodes 0..nb-1, follow-up after
    rows = [i - 1 for i, _ in edges]
    cols = [nb + j - 1 for _, j in edges]
    graph = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(nb + nf, nb + nf))
    _, comp = csgraph.connected_components(graph, directed=False)
    groups: Dict[int, list] = {}
    for node, g in enumerate(comp):
        groups.setdefault(int(g), []).append(node)
    out = []
    for members in groups.values():
        b_ids = tuple(n + 1 for n in members if n < nb)
        f_ids = tuple(n - nb + 1 for n in members if n >= nb)
        ov = {(i, j): d for (i, j), d in edges.items() if i in b_ids and j in f_ids}
        out.append(LesionMatch(b_ids, f_ids, _kind(len(b_ids), len(f_ids)), ov))
    out.sort(key=lambda mt: (mt.baseline_ids[0] if mt.baseline_ids else 10**9,
                             mt.followup_ids[0] if mt.followup_ids else 10**9))
    return out
