"""Acceptance gate: ten end-to-end criteria at their stated tolerances.

Each test records a one-line verdict that pytest prints in its summary.
"""
import json
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from conftest import record_criterion
from oracles import affine_field, fd_check, random_instance, smooth_probes
from longireg.analysis import (connected_components, fcm_subsegment, match_lesions,
                               percent_volume_change, sdlogj)
from longireg.cli import main
from longireg.loss import LossConfig
from longireg.nifti import load_field
from longireg.phantom import AnalyticDeformation, make_pair, sphere_spec
from longireg.registrar import RegistrationConfig, register
from longireg.report import read_csv
from longireg.transform import (DisplacementField, JacobianMap, compose, identity_field,
                                jacobian_determinant, warp)
from longireg.volume import Grid3, LabelMask, Volume3
from longireg import analysis

pytestmark = pytest.mark.slow


def test_c01_jacobian_exactness():
    rng = np.random.default_rng(101)
    g = Grid3((16, 16, 16))
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        A = rng.normal(size=(3, 3))
        A *= rng.uniform(0.0, 0.5) / np.linalg.norm(A, 2)
        det = jacobian_determinant(affine_field(g, A)).detJ[1:-1, 1:-1, 1:-1]
        worst = max(worst, float(np.abs(det - np.linalg.det(np.eye(3) + A)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-9 and elapsed < 5.0
    record_criterion(1, "Jacobian exactness", ok,
                     f"max interior error {worst:.2e} (< 1e-9), {elapsed:.2f} s (< 5 s)")
    assert ok


def test_c02_gradient_correctness():
    rng = np.random.default_rng(202)
    cfg = LossConfig()
    t0 = time.perf_counter()
    checked, worst = 0, 0.0
    for _ in range(100):
        i_a, i_b, f_ab, f_ba = random_instance(rng)
        for wrt, field in (("f_ab", f_ab), ("f_ba", f_ba)):
            probes = smooth_probes(field.u, rng, 3)
            for analytic, numeric in fd_check(i_a, i_b, f_ab, f_ba, cfg, wrt, probes):
                if abs(numeric) >= 1e-8:
                    checked += 1
                    worst = max(worst, abs(analytic - numeric) / abs(numeric))
    elapsed = time.perf_counter() - t0
    ok = checked > 0 and worst <= 1e-4 and elapsed < 120
    record_criterion(2, "gradient correctness", ok,
                     f"{checked} directional derivatives, worst relative error {worst:.2e} "
                     f"(<= 1e-4), {elapsed:.1f} s (< 120 s)")
    assert ok


@pytest.fixture(scope="module")
def translation_runs():
    pair = make_pair(sphere_spec(radius_vox=5, dims=(64, 64, 64), noise_sigma=5.0, seed=0),
                     AnalyticDeformation("translation", translation=(3.0, 0.0, 0.0)))
    with threadpool_limits(limits=1):
        default = register(pair.baseline, pair.followup)
        no_reg = register(pair.baseline, pair.followup,
                          RegistrationConfig(loss=LossConfig(lam=0.0)))
    return pair, default, no_reg


def _dsc(a, b):
    return analysis.dice(LabelMask(a.grid, a.binary()), LabelMask(b.grid, b.binary()))


def test_c03_translation_recovery(translation_runs):
    pair, res, _ = translation_runs
    lesion = pair.baseline_tumour.binary()
    err = np.sqrt(((res.field_ba.u - pair.truth.u) ** 2).sum(axis=0))[lesion].mean()
    pre = _dsc(pair.baseline_tumour, pair.followup_tumour)
    post = _dsc(pair.baseline_tumour, warp(pair.followup_tumour, res.field_ba, "nearest"))
    ok = err <= 0.5 and post >= 0.90 and pre <= 0.6 and res.runtime_seconds <= 60
    record_criterion(3, "translation recovery", ok,
                     f"in-lesion error {err:.3f} vox (<= 0.5), DSC {pre:.3f} -> {post:.3f} "
                     f"(pre <= 0.6, post >= 0.90), {res.runtime_seconds:.1f} s (<= 60 s)")
    assert ok


def test_c04_volumetric_response(tmp_path):
    spec = {"phantom": {"grid": {"dims": [64, 64, 64]}, "noise_sigma": 5.0, "seed": 0,
                        "lesions": [{"center_mm": [31.5, 31.5, 31.5], "radius_mm": 8.0}]},
            "deformation": {"kind": "radial_contraction", "core_radius": 10.0,
                            "rim_width": 8.0, "alpha": 0.2}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["phantom", "--config", str(tmp_path / "spec.json"), "--out", str(tmp_path)]) == 0
    cfg = str(tmp_path / "pipeline.json")
    assert main(["register", "--config", cfg, "--threads", "1"]) == 0
    assert main(["analyze", "--config", cfg]) == 0
    rows = read_csv((tmp_path / "results" / "report.csv").read_text())
    (row,) = [r for r in rows if r["subregion"] == "all"]
    med, pct = row["median_detj"], row["pct_change"]
    ok = abs(med - 0.512) <= 0.05 and abs(pct - (-48.8)) <= 5.0
    record_criterion(4, "volumetric response recovery", ok,
                     f"lesion median detJ {med:.4f} (0.512 +- 0.05), reported change "
                     f"{pct:+.2f}% (-48.8 +- 5)")
    assert ok


def _ic_error(res):
    return float(compose(res.field_ab, res.field_ba).magnitude().mean())


def test_c05_inverse_consistency(translation_runs):
    _, default, no_reg = translation_runs
    with_reg, without = _ic_error(default), _ic_error(no_reg)
    ok = with_reg <= 0.5 * without
    record_criterion(5, "inverse-consistency efficacy", ok,
                     f"mean |phi_ab o phi_ba - id| {with_reg:.4f} vs {without:.4f} at lambda 0 "
                     f"(ratio {with_reg / without:.3f} <= 0.5)")
    assert ok


def _scaling(g, s):
    return DisplacementField(g, np.stack([np.broadcast_to(s * a, g.dims) for a in g.axes()]))


def test_c06_sdlogj_properties():
    g = Grid3((10, 10, 10))
    ident = sdlogj(jacobian_determinant(identity_field(g)))[0]
    # a dyadic factor keeps the sampled field, and hence detJ, exactly uniform
    uniform = sdlogj(jacobian_determinant(_scaling(g, 0.25)))[0]
    rounded = sdlogj(jacobian_determinant(_scaling(g, 0.2)))[0]
    vals = np.ones(g.dims)
    vals[:5] = math.e
    two = sdlogj(JacobianMap(g, vals, 0))[0]
    ok = ident == 0.0 and uniform == 0.0 and two == 0.5 and rounded <= 1e-15
    record_criterion(6, "SDlogJ properties", ok,
                     f"identity {ident!r}, uniform scaling x1.25 {uniform!r}, two-valued {two!r} "
                     f"(0, 0, 0.5 exactly); x1.2 gives {rounded:.1e} from float rounding of 0.2")
    assert ok


def test_c07_fcm():
    rng = np.random.default_rng(707)
    dims = (24, 24, 24)
    g = Grid3(dims)
    ax = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    tumour = sum((a - 11.5) ** 2 for a in ax) <= 10**2
    truth = np.zeros(dims, int)
    truth[tumour] = rng.integers(1, 4, dims)[tumour]
    img = np.array([0.0, -100.0, 40.0, 300.0])[truth] + rng.normal(0, 5.0, dims)
    sub = fcm_subsegment(Volume3(g, img), LabelMask(g, tumour))
    acc = float(np.mean(sub.class_map.labels[tumour] == truth[tumour]))
    dev = float(np.abs(sub.memberships[tumour].sum(axis=1) - 1).max())
    steps = np.diff(sub.objective_trace)
    monotone = bool(np.all(steps <= 0))
    ok = acc >= 0.99 and dev <= 1e-6 and monotone
    record_criterion(7, "FCM sub-segmentation", ok,
                     f"accuracy {acc:.4f} (>= 0.99), membership sum deviation {dev:.1e} "
                     f"(<= 1e-6), objective non-increasing over {len(steps)} steps: {monotone}")
    assert ok


def _ball(dims, c, r):
    ax = np.meshgrid(*[np.arange(n) for n in dims], indexing="ij")
    return sum((a - ci) ** 2 for a, ci in zip(ax, c)) <= r**2


def test_c08_lesion_matching():
    dims = (64, 32, 32)
    g = Grid3(dims)
    base = np.zeros(dims, bool)
    follow = np.zeros(dims, bool)
    # split: one sphere becomes two halves
    base |= _ball(dims, (10, 16, 16), 6)
    halves = _ball(dims, (10, 16, 16), 6)
    halves[9:12] = False
    follow |= halves
    # merge: two nearby blobs become one sphere
    pair = _ball(dims, (30, 16, 16), 6)
    pair[29:32] = False
    base |= pair
    follow |= _ball(dims, (30, 16, 16), 6)
    # disappear and new
    base |= _ball(dims, (48, 8, 8), 3)
    follow |= _ball(dims, (48, 24, 24), 3)
    # unchanged
    base |= _ball(dims, (56, 24, 8), 3)
    follow |= _ball(dims, (56, 24, 8), 3)
    b = connected_components(LabelMask(g, base))
    f = connected_components(LabelMask(g, follow))
    matches = match_lesions(b, f, identity_field(g))
    got = sorted((m.kind, len(m.baseline_ids), len(m.followup_ids)) for m in matches)
    expect = sorted([("split", 1, 2), ("merge", 2, 1), ("disappeared", 1, 0), ("new", 0, 1),
                     ("matched", 1, 1)])
    seen_b = sorted(i for m in matches for i in m.baseline_ids)
    seen_f = sorted(j for m in matches for j in m.followup_ids)
    partition = seen_b == b.ids and seen_f == f.ids
    ok = got == expect and partition
    record_criterion(8, "lesion matching", ok,
                     f"kinds {[k for k, _, _ in got]}, ids partitioned: {partition}")
    assert ok


FAST = {"stage1_units": [{"level_factor": 4, "iterations": 30},
                         {"level_factor": 2, "iterations": 20},
                         {"level_factor": 1, "iterations": 10}],
        "stage2_unit": {"level_factor": 1, "iterations": 10}}

DETERMINISTIC_FILES = ("field_ab.nii.gz", "field_ba.nii.gz", "jacobian.nii.gz",
                       "subseg_baseline.nii.gz", "subseg_followup.nii.gz", "lesion_matches.json")


def _report_without_runtime(path):
    rows = read_csv(path.read_text())
    for r in rows:
        r.pop("runtime_s")
    return rows


def test_c09_determinism(tmp_path):
    spec = {"phantom": {"grid": {"dims": [32, 32, 32]}, "seed": 9,
                        "lesions": [{"center_mm": [15.5, 15.5, 15.5], "radius_mm": 5.0}]},
            "deformation": {"kind": "radial_contraction", "core_radius": 7.0, "rim_width": 6.0,
                            "alpha": 0.15}}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert main(["phantom", "--config", str(tmp_path / "spec.json"), "--out", str(tmp_path)]) == 0
    cfg = json.loads((tmp_path / "pipeline.json").read_text())
    cfg["registration"] = FAST
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    outs = {}
    for name, threads in (("a", 1), ("b", 1), ("c", 2)):
        out = str(tmp_path / name)
        for cmd in ("register", "analyze"):
            assert main([cmd, "--config", str(tmp_path / "cfg.json"), "--out", out,
                         "--threads", str(threads), "--seed", "3"]) == 0
        outs[name] = tmp_path / name
    same_files = all((outs["a"] / f).read_bytes() == (outs["b"] / f).read_bytes()
                     for f in DETERMINISTIC_FILES)
    same_report = (_report_without_runtime(outs["a"] / "report.csv")
                   == _report_without_runtime(outs["b"] / "report.csv"))
    gap = max(float(np.abs(load_field(outs["a"] / f).u - load_field(outs["c"] / f).u).max())
              for f in ("field_ab.nii.gz", "field_ba.nii.gz"))
    ok = same_files and same_report and gap <= 1e-6
    record_criterion(9, "determinism", ok,
                     f"repeat run bitwise identical: fields/maps {same_files}, report {same_report}; "
                     f"1 vs 2 threads max field gap {gap:.1e} (<= 1e-6)")
    assert ok


def test_c10_percent_change_convention():
    a, b = percent_volume_change(0.46), percent_volume_change(1.34)
    ok = a == -54.0 and b == 34.0
    record_criterion(10, "percent-change convention", ok, f"0.46 -> {a:+g}%, 1.34 -> {b:+g}%")
    assert ok
