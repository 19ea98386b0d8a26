"""Response report assembly and its CSV / JSON serialisation.

Rows share one fixed schema (:data:`CSV_COLUMNS`). Per-lesion rows carry
``subregion == "all"``; each lesion is followed by its hypo/intermediate/
hyper rows; global rows use ``lesion_id == "global"`` and name the mask
they describe in ``site``. Numbers are rounded to 6 significant digits
before either format is written, so both files hold the same values.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .analysis import (SUBREGION_NAMES, LesionMatch, LesionSet, SubSegmentation, dice,
                       percent_volume_change, roi_jacobian_stats, sdlogj)
from .transform import DisplacementField, JacobianMap, warp
from .volume import LabelMask

CSV_COLUMNS = ("lesion_id", "site", "baseline_mm3", "match_kind", "median_detj", "mean_detj",
               "pct_change", "subregion", "dsc_pre", "dsc_post", "sdlogj", "folding_frac",
               "runtime_s")


def r6(x) -> Optional[float]:
    """Round to 6 significant digits (None passes through)."""
    if x is None:
        return None
    return float(f"{float(x):.6g}")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class ResponseReport:
    rows: List[dict]
    config: dict = field(default_factory=dict)

    def lesion_rows(self) -> List[dict]:
        return [r for r in self.rows if r["subregion"] == "all"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.rows:
            w.writerow([_cell(r[c]) for c in CSV_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"columns": list(CSV_COLUMNS), "rows": self.rows, "config": self.config},
                          indent=2, sort_keys=True)


def read_csv(text: str) -> List[dict]:
    """Parse a report CSV back into rows (numbers as float, blanks as None)."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        row = {}
        for k, v in rec.items():
            if v == "":
                row[k] = None
            elif k in ("lesion_id", "site", "match_kind", "subregion"):
                row[k] = v
            else:
                row[k] = float(v)
        rows.append(row)
    return rows


def _row(**kw) -> dict:
    row = {c: None for c in CSV_COLUMNS}
    row.update(kw)
    return row


def _kind_of(matches: List[LesionMatch]) -> Dict[int, LesionMatch]:
    return {b: m for m in matches for b in m.baseline_ids}


def build_report(jac: JacobianMap, field_ba: DisplacementField, base: LesionSet,
                 follow: LesionSet, matches: List[LesionMatch], subseg: SubSegmentation,
                 organs: Mapping[str, tuple] = (), runtime_s: Optional[float] = None,
                 sdlogj_region: str = "grid", config: Optional[dict] = None) -> ResponseReport:
    """Tabulate lesion, sub-region and global rows on the baseline grid.

    ``organs`` maps a name to a ``(baseline mask, follow-up mask)`` pair.
    """
    by_base = _kind_of(matches)
    warped_follow = warp(follow.mask, field_ba, "nearest")
    rows = []
    for stat in roi_jacobian_stats(jac, base):
        i = stat.roi_id
        m = by_base[i]
        own = base.mask.labels == i
        partners = np.isin(follow.mask.labels, m.followup_ids)
        partners_w = np.isin(warped_follow.labels, m.followup_ids)
        grid = base.mask.grid
        pre = dice(LabelMask(grid, own), LabelMask(grid, partners))
        post = dice(LabelMask(grid, own), LabelMask(grid, partners_w))
        sd = None
        if stat.median_detj is not None:
            sd = sdlogj(jac, base.mask, i)[0]
        med = r6(stat.median_detj)
        rows.append(_row(
            lesion_id=str(i), site=base.site(i), baseline_mm3=r6(base.volumes_mm3[i]),
            match_kind=m.kind, median_detj=med, mean_detj=r6(stat.mean_detj),
            pct_change=None if med is None else r6(percent_volume_change(med)),
            subregion="all", dsc_pre=r6(pre), dsc_post=r6(post), sdlogj=r6(sd),
            folding_frac=r6(stat.folding_fraction)))
        inside = np.where(own, subseg.class_map.labels, 0)
        for k, name in SUBREGION_NAMES.items():
            (s,) = roi_jacobian_stats(jac, LabelMask(grid, inside), ids=[k])
            smed = r6(s.median_detj)
            rows.append(_row(
                lesion_id=str(i), site=base.site(i),
                baseline_mm3=r6(s.voxel_count * grid.voxel_volume), match_kind=m.kind,
                median_detj=smed, mean_detj=r6(s.mean_detj),
                pct_change=None if smed is None else r6(percent_volume_change(smed)),
                subregion=name, folding_frac=r6(s.folding_fraction)))

    if sdlogj_region == "tumour" and base.mask.binary().any():
        global_sd = sdlogj(jac, base.mask)[0]
    else:
        global_sd = sdlogj(jac)[0]
    pairs = {"tumour": (LabelMask(base.mask.grid, base.mask.binary()),
                        LabelMask(follow.mask.grid, follow.mask.binary()))}
    pairs.update(dict(organs))
    for name, (mb, mf) in pairs.items():
        rows.append(_row(
            lesion_id="global", site=name,
            dsc_pre=r6(dice(mb, mf)), dsc_post=r6(dice(mb, warp(mf, field_ba, "nearest"))),
            sdlogj=r6(global_sd), folding_frac=r6(jac.folding_count / jac.grid.size),
            runtime_s=r6(runtime_s)))
    return ResponseReport(rows, dict(config or {}))
