"""Command-line driver: ``longireg {register,analyze,phantom,eval}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Inputs are validated before anything is written.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .analysis import (connected_components, dice, fcm_subsegment, match_lesions, sdlogj)
from .loss import NumericalError
from .nifti import NiftiError, load_field, load_nifti, save_nifti
from .phantom import AnalyticDeformation, PhantomSpec, make_pair
from .registrar import RegistrationConfig, register
from .report import build_report
from .transform import DisplacementField, jacobian_determinant, warp
from .volume import GridMismatchError, LabelMask, require_same_grid

log = logging.getLogger("longireg")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class FcmParams:
    c: int = 3
    m: float = 2.0
    tol: float = 1e-5
    max_iter: int = 300


@dataclass(frozen=True)
class AnalysisConfig:
    fcm: FcmParams = FcmParams()
    min_dice: float = 0.1
    sdlogj_region: str = "grid"
    connectivity: int = 26

    def __post_init__(self):
        if self.sdlogj_region not in ("grid", "tumour"):
            raise ValueError("sdlogj_region must be 'grid' or 'tumour'")
        if not 0 <= self.min_dice <= 1:
            raise ValueError("min_dice must lie in [0, 1]")
        if self.connectivity not in (6, 26):
            raise ValueError("connectivity must be 6 or 26")


IO_PATHS = ("baseline", "followup", "baseline_tumour", "followup_tumour")


@dataclass(frozen=True)
class IoConfig:
    baseline: str = ""
    followup: str = ""
    baseline_tumour: str = ""
    followup_tumour: str = ""
    organ_masks: Dict[str, Dict[str, str]] = field(default_factory=dict)
    sites: Dict[str, str] = field(default_factory=dict)
    output_dir: str = "out"

    def inputs(self) -> List[str]:
        paths = [getattr(self, k) for k in IO_PATHS]
        for pair in self.organ_masks.values():
            paths += [pair["baseline"], pair["followup"]]
        return paths


@dataclass(frozen=True)
class PipelineConfig:
    registration: RegistrationConfig = RegistrationConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    io: IoConfig = IoConfig()
    report_formats: tuple = ("csv", "json")

    def to_dict(self) -> dict:
        a = self.analysis
        return {
            "registration": self.registration.to_dict(),
            "analysis": {"fcm": dict(a.fcm.__dict__), "min_dice": a.min_dice,
                         "sdlogj_region": a.sdlogj_region, "connectivity": a.connectivity},
            "io": dict(self.io.__dict__),
            "report_formats": list(self.report_formats),
        }


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return cls(**d)


def parse_config(raw: dict, base_dir: Path) -> PipelineConfig:
    """Build a :class:`PipelineConfig`; relative paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - {"registration", "analysis", "io", "report_formats"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        reg = RegistrationConfig.from_dict(raw.get("registration", {}))
        an = dict(raw.get("analysis", {}))
        an["fcm"] = _strict(FcmParams, an.get("fcm", {}), "analysis.fcm")
        analysis = _strict(AnalysisConfig, an, "analysis")
        io_raw = dict(raw.get("io", {}))
        io_cfg = _strict(IoConfig, io_raw, "io")
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc

    def resolve(p):
        return str((base_dir / p).resolve()) if p else p

    organs = {}
    for name, pair in io_cfg.organ_masks.items():
        if not isinstance(pair, dict) or set(pair) != {"baseline", "followup"}:
            raise ConfigError(f"organ mask {name!r} needs exactly 'baseline' and 'followup'")
        organs[name] = {k: resolve(v) for k, v in pair.items()}
    io_cfg = replace(io_cfg, organ_masks=organs, output_dir=resolve(io_cfg.output_dir),
                     **{k: resolve(getattr(io_cfg, k)) for k in IO_PATHS})
    formats = tuple(raw.get("report_formats", ("csv", "json")))
    if not formats or not set(formats) <= {"csv", "json"}:
        raise ConfigError("report_formats must be a non-empty subset of ['csv', 'json']")
    return PipelineConfig(reg, analysis, io_cfg, formats)


def load_config(path: str, out: Optional[str], seed: Optional[int]) -> PipelineConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = parse_config(raw, p.parent)
    if out is not None:
        cfg = replace(cfg, io=replace(cfg.io, output_dir=str(Path(out).resolve())))
    if seed is not None:
        cfg = replace(cfg, registration=replace(cfg.registration, seed=seed))
    return cfg


def _require_inputs(cfg: PipelineConfig) -> None:
    for p in cfg.io.inputs():
        if not p:
            raise ConfigError("io paths for baseline, followup and both tumour masks are required")
        if not os.path.isfile(p):
            raise ConfigError(f"input file not found: {p}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_inputs(cfg: PipelineConfig):
    io_cfg = cfg.io
    a = load_nifti(io_cfg.baseline, kind="image")
    b = load_nifti(io_cfg.followup, kind="image")
    ta = load_nifti(io_cfg.baseline_tumour, kind="mask")
    tb = load_nifti(io_cfg.followup_tumour, kind="mask")
    organs = {name: (load_nifti(p["baseline"], kind="mask"), load_nifti(p["followup"], kind="mask"))
              for name, p in io_cfg.organ_masks.items()}
    require_same_grid(a, b, ta, tb, *[m for pair in organs.values() for m in pair])
    return a, b, ta, tb, organs


# -- commands ----------------------------------------------------------------

def cmd_register(cfg: PipelineConfig) -> int:
    _require_inputs(cfg)
    a, b, _, _, _ = _load_inputs(cfg)
    res = register(a, b, cfg.registration)
    out = Path(cfg.io.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_nifti(res.field_ab, out / "field_ab.nii.gz")
    save_nifti(res.field_ba, out / "field_ba.nii.gz")
    save_nifti(jacobian_determinant(res.field_ba).as_volume(), out / "jacobian.nii.gz")
    _write_json(out / "loss_trace.json", {"runtime_s": res.runtime_seconds, "trace": res.loss_trace})
    _write_json(out / "config_echo.json", cfg.to_dict())
    return EXIT_OK


def cmd_analyze(cfg: PipelineConfig) -> int:
    _require_inputs(cfg)
    out = Path(cfg.io.output_dir)
    needed = [out / "field_ab.nii.gz", out / "field_ba.nii.gz"]
    missing = [str(p) for p in needed if not p.is_file()]
    if missing:
        raise DataError(f"registration outputs missing: {missing}")
    a, b, ta, tb, organs = _load_inputs(cfg)
    field_ba = load_field(out / "field_ba.nii.gz")
    require_same_grid(a, field_ba)
    runtime = None
    trace_path = out / "loss_trace.json"
    if trace_path.is_file():
        runtime = json.loads(trace_path.read_text()).get("runtime_s")

    sites = {int(k): v for k, v in cfg.io.sites.items()}
    an = cfg.analysis
    base = connected_components(ta, an.connectivity, sites)
    follow = connected_components(tb, an.connectivity, sites)
    matches = match_lesions(base, follow, field_ba, an.min_dice)
    fcm = dict(an.fcm.__dict__)
    sub_a = fcm_subsegment(a, ta, **fcm)
    sub_b = fcm_subsegment(b, tb, **fcm)
    jac = jacobian_determinant(field_ba)
    report = build_report(jac, field_ba, base, follow, matches, sub_a, organs, runtime,
                          an.sdlogj_region, cfg.to_dict())

    if "csv" in cfg.report_formats:
        (out / "report.csv").write_text(report.to_csv())
    if "json" in cfg.report_formats:
        (out / "report.json").write_text(report.to_json() + "\n")
    save_nifti(sub_a.class_map, out / "subseg_baseline.nii.gz")
    save_nifti(sub_b.class_map, out / "subseg_followup.nii.gz")
    _write_json(out / "lesion_matches.json", [m.to_dict() for m in matches])
    _write_json(out / "config_echo.json", cfg.to_dict())
    return EXIT_OK


def cmd_phantom(spec_path: str, out_dir: Optional[str], seed: Optional[int]) -> int:
    """Spec file: ``{"phantom": {...PhantomSpec}, "deformation": {...}}``."""
    p = Path(spec_path)
    try:
        raw = json.loads(p.read_text())
        if set(raw) - {"phantom", "deformation"}:
            raise ConfigError(f"unknown keys in phantom spec: {sorted(set(raw) - {'phantom', 'deformation'})}")
        spec = PhantomSpec.from_dict(raw.get("phantom", {}))
        deformation = AnalyticDeformation.from_dict(raw.get("deformation", {"kind": "translation"}))
    except OSError as exc:
        raise ConfigError(f"cannot read phantom spec {spec_path}: {exc}") from exc
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"invalid phantom spec: {exc}") from exc
    if seed is not None:
        spec = replace(spec, seed=seed)
    try:
        pair = make_pair(spec, deformation)
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    out = Path(out_dir or "phantom").resolve()
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "baseline": pair.baseline, "followup": pair.followup,
        "baseline_tumour": pair.baseline_tumour, "followup_tumour": pair.followup_tumour,
        "baseline_subregions": pair.baseline_subregions,
        "followup_subregions": pair.followup_subregions,
        "truth_field_ba": pair.truth,
    }
    for name, obj in files.items():
        save_nifti(obj, out / f"{name}.nii.gz")
    manifest = {
        "grid": spec.grid.to_dict(),
        "seed": spec.seed,
        "noise_sigma": spec.noise_sigma,
        "lesions": [{"id": n, "center_mm": list(les.center_mm), "radius_mm": les.radius_mm,
                     "site": les.site, "composition": list(les.composition),
                     "intensities": list(les.intensities)}
                    for n, les in enumerate(spec.lesions, start=1)],
        "deformation": deformation.to_dict(),
        "core_detj": deformation.core_detj(),
        "files": {k: f"{k}.nii.gz" for k in files},
    }
    _write_json(out / "manifest.json", manifest)
    pipeline = {"io": {k: f"{k}.nii.gz" for k in IO_PATHS}}
    pipeline["io"]["sites"] = {str(k): v for k, v in pair.sites.items()}
    pipeline["io"]["output_dir"] = "results"
    _write_json(out / "pipeline.json", pipeline)
    return EXIT_OK


def evaluate_fields(truth: DisplacementField, est: DisplacementField,
                    mask: Optional[LabelMask] = None,
                    reference: Optional[LabelMask] = None) -> dict:
    """Error metrics of an estimated field against the true one.

    ``mask`` lives in the moving (follow-up) space; it is pulled through both
    fields and the truth-warped copy serves as reference unless one is given.
    """
    require_same_grid(truth, est)
    err = np.sqrt(((est.u - truth.u) ** 2).sum(axis=0))
    jac = jacobian_determinant(est)
    out = {
        "mean_displacement_error_vox": float(err.mean()),
        "median_displacement_error_vox": float(np.median(err)),
        "max_displacement_error_vox": float(err.max()),
        "folding_frac": jac.folding_count / jac.grid.size,
        "runtime_s": None,
    }
    try:
        out["sdlogj"] = sdlogj(jac)[0]
    except ValueError:
        out["sdlogj"] = None
    if mask is not None:
        ref = reference if reference is not None else warp(mask, truth, "nearest")
        require_same_grid(ref, est)
        if mask.grid != ref.grid:
            raise GridMismatchError("mask and reference grids differ")
        moved = warp(mask, est, "nearest")
        out["dsc_pre"] = dice(LabelMask(ref.grid, ref.binary()), LabelMask(mask.grid, mask.binary()))
        out["dsc_post"] = dice(LabelMask(ref.grid, ref.binary()), LabelMask(moved.grid, moved.binary()))
        inside = ref.binary()
        out["mean_displacement_error_in_mask_vox"] = float(err[inside].mean()) if inside.any() else None
    return out


def cmd_eval(args) -> int:
    for p in filter(None, (args.truth, args.estimate, args.mask, args.reference)):
        if not os.path.isfile(p):
            raise ConfigError(f"input file not found: {p}")
    truth = load_field(args.truth)
    est = load_field(args.estimate)
    mask = load_nifti(args.mask, kind="mask") if args.mask else None
    ref = load_nifti(args.reference, kind="mask") if args.reference else None
    result = evaluate_fields(truth, est, mask, ref)
    sys.stdout.write(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="longireg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required)
        p.add_argument("--out", default=None, help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--seed", type=int, default=None)
        return p

    common(sub.add_parser("register", help="estimate both displacement fields"))
    common(sub.add_parser("analyze", help="Jacobian, sub-region and lesion report"))
    common(sub.add_parser("phantom", help="write a synthetic pair with ground truth"))
    ev = common(sub.add_parser("eval", help="compare an estimated field to the truth"), False)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--estimate", required=True)
    ev.add_argument("--mask", default=None, help="follow-up space mask")
    ev.add_argument("--reference", default=None, help="baseline space reference mask")
    return parser


def _dispatch(args) -> int:
    if args.command == "phantom":
        return cmd_phantom(args.config, args.out, args.seed)
    if args.command == "eval":
        return cmd_eval(args)
    cfg = load_config(args.config, args.out, args.seed)
    return {"register": cmd_register, "analyze": cmd_analyze}[args.command](cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=args.threads):
            return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NiftiError, GridMismatchError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
