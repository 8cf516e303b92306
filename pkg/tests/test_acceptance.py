"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion.

Criteria 8-10 share one session fixture that runs the desk-scale workflow twice
through the CLI, with --threads 1 and --threads 2, in separate directories.
"""
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from cascade_seg.cli import usable_cpus
from cascade_seg.config import bundled_config_path
from cascade_seg.crf import CrfParams, build_crf, energy, exhaustive_map, mean_field_infer
from cascade_seg.detector import DetectionMask, DetectorNet, enumerate_patches, mask_segmentation
from cascade_seg.errors import EmptyForeground
from cascade_seg.metrics import ABLATION_ROWS, dice
from cascade_seg.nn import LossSpec, grad_check, weighted_masked_bce, weighted_masked_bce_logits
from cascade_seg.phantom import LabeledCase, PhantomParams, generate_phantom
from cascade_seg.segnet import (
    SegNetConfig,
    build_segnet,
    compute_class_weights,
    deep_supervision_loss,
    train_step,
)
from cascade_seg.volume import Volume, preprocess, stack_context_slices

from .helpers import linear_loss
from .oracles import class_weight_by_counting, dice_by_sets, window_labels_by_counting
from .test_nn import LAYERS


@pytest.fixture
def report(capsys):
    def emit(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} ({detail})"
        with capsys.disabled():
            print("\n" + line)
        assert passed, line
    return emit


# --- 1: gradients ------------------------------------------------------------------------

def _segnet_loss(rng, shape):
    y = (rng.random(shape) < 0.3).astype(np.float32)
    mask = rng.random(shape) < 0.8

    def fn(out):
        total, grads, _ = deep_supervision_loss(out, y, 0.3, mask)
        return total, grads
    return fn


def test_gradients_match_finite_differences(report):
    t0 = time.perf_counter()
    worst, failures, n_inputs = 0.0, [], 0
    models = {name: (make, shape, None) for name, (make, shape) in LAYERS.items()}
    small = SegNetConfig(stage_channels=[4, 6, 8, 8])
    models["segnet"] = (lambda rng, dt: build_segnet(small, seed=int(rng.integers(1 << 31)), dtype=dt),
                        (1, 3, 16, 16), _segnet_loss)
    models["detector"] = (lambda rng, dt: DetectorNet([3, 4, 5], seed=int(rng.integers(1 << 31)), dtype=dt),
                          (2, 1, 16, 16), None)
    for name, (make, shape, loss_factory) in models.items():
        for k in range(20):
            seed = 1000 * len(name) + k
            net = make(np.random.default_rng(seed), np.float32)
            ref = make(np.random.default_rng(seed), np.float64)
            rng = np.random.default_rng(seed + 1)
            x = rng.normal(size=shape).astype(np.float32)
            loss = loss_factory(rng, shape) if loss_factory else linear_loss(seed)
            r = grad_check(net, x, loss, reference=ref, tol=1e-3, n_samples=6, seed=seed)
            n_inputs += 1
            worst = max(worst, r.max_rel_error)
            if not r.passed:
                failures.append((name, k, r.max_rel_error))
    elapsed = time.perf_counter() - t0
    report(1, "gradient check", not failures and elapsed < 120,
           f"{len(models)} layer/net types x 20 inputs = {n_inputs}, max rel err {worst:.2e}, "
           f"{elapsed:.1f}s, failures {failures[:3]}")


# --- 2: masking ----------------------------------------------------------------------------

def _phantom_slab():
    case = generate_phantom(PhantomParams(shape=(12, 32, 32), lesion_radius_range=(2.0, 3.0), seed=5))
    slab = stack_context_slices(preprocess(case.image), 6)
    target = stack_context_slices(case.liver, 6).channels
    return slab, target


def test_masked_gradients_are_exactly_zero(report):
    bad = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 7, size=3))
        mask = rng.random(shape) < rng.uniform(0.1, 0.9)
        mask.flat[0] = True
        y = (rng.random(shape) < 0.4).astype(np.float64)
        w = rng.uniform(0.01, 0.99)
        for fn, x in ((weighted_masked_bce, rng.random(shape)),
                      (weighted_masked_bce_logits, rng.normal(scale=5, size=shape))):
            _, g = fn(x.astype(np.float32), y.astype(np.float32), LossSpec(w, mask))
            out = g[~mask]
            bad += int(not (np.all(out == 0) and not np.signbit(out).any()))

    slab, target = _phantom_slab()
    small = SegNetConfig(stage_channels=[4, 6, 8, 8])
    a, b = build_segnet(small, seed=1), build_segnet(small, seed=1)
    same_loss = True
    for _ in range(10):
        la = train_step(a, slab, target, 0.3, None, lr=0.01)
        lb = train_step(b, slab, target, 0.3, np.ones_like(target), lr=0.01)
        same_loss &= la == lb
    same_params = all(p.value.tobytes() == b.params()[n].value.tobytes() for n, p in a.params().items())
    report(2, "loss masking", bad == 0 and same_loss and same_params,
           f"{bad} of 200 gradients non-zero under mask; 10-step all-ones run bit-identical: "
           f"{same_loss and same_params}")


# --- 3: class weights ----------------------------------------------------------------------

def test_class_weights_match_voxel_counting(report):
    mismatches, checked = [], 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        cases = []
        for _ in range(rng.integers(1, 4)):
            shape = (rng.integers(1, 5), rng.integers(3, 9), rng.integers(3, 9))
            liver = rng.random(shape) < rng.uniform(0.2, 0.8)
            liver[rng.random(shape[0]) < 0.3] = False  # some slices without liver
            lesion = liver & (rng.random(shape) < rng.uniform(0.05, 0.4))
            cases.append(LabeledCase(Volume(np.zeros(shape)), Volume(liver.astype(np.float32)),
                                     Volume(lesion.astype(np.float32)), f"c{seed}"))
        for target, restrict in (("liver", False), ("lesion", False), ("lesion", True)):
            expected = class_weight_by_counting(cases, target, restrict)
            try:
                got = compute_class_weights(cases, target, restrict).w
            except EmptyForeground:
                got = None
            if expected is not None and not 0 < expected < 1:
                expected = None
            checked += 1
            if got != expected:
                mismatches.append((seed, target, restrict, got, expected))
    report(3, "class-weight oracle", not mismatches,
           f"50 randomized case sets, {checked} comparisons, {len(mismatches)} mismatches")


# --- 4: patch labels ----------------------------------------------------------------------

def _planted_plane_pair(rng):
    """200x200 masks whose 50x50 grid windows hit chosen liver/lesion counts, boundaries included."""
    liver = np.zeros((200, 200), bool)
    lesion = np.zeros((200, 200), bool)
    for y0 in range(0, 200, 50):
        for x0 in range(0, 200, 50):
            n_liver = int(rng.choice([624, 625, int(rng.integers(0, 2501))]))
            n_lesion = int(rng.choice([49, 50, int(rng.integers(0, 120))]))
            n_lesion = min(n_lesion, n_liver)
            idx = rng.permutation(2500)
            win_liver = np.zeros(2500, bool)
            win_liver[idx[:n_liver]] = True
            win_lesion = np.zeros(2500, bool)
            win_lesion[idx[:n_lesion]] = True
            liver[y0:y0 + 50, x0:x0 + 50] = win_liver.reshape(50, 50)
            lesion[y0:y0 + 50, x0:x0 + 50] = win_lesion.reshape(50, 50)
    return liver, lesion


def test_patch_labels_match_recount(report):
    mismatches, seen = 0, set()
    for seed in range(50):
        liver, lesion = _planted_plane_pair(np.random.default_rng(seed))
        got = {r.core[:2]: (r.label, round(r.liver_overlap * 2500), r.lesion_pixel_count)
               for r in enumerate_patches(liver, lesion, include_excluded=True)}
        expected = window_labels_by_counting(liver, lesion)
        mismatches += sum(got.get(k) != v for k, v in expected.items()) + len(set(got) - set(expected))
        for _, n_liver, n_lesion in expected.values():
            seen |= {n_liver} & {624, 625}
            if n_liver >= 625:
                seen |= {n_lesion} & {49, 50}
    boundaries = seen == {624, 625, 49, 50}
    report(4, "patch-labeling oracle", mismatches == 0 and boundaries,
           f"50 pairs of 200x200 masks, {mismatches} mismatches, boundary counts hit {sorted(seen)}")


# --- 5: fusion ------------------------------------------------------------------------------

def test_fusion_is_subtractive(report):
    bad = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        shape = (int(rng.integers(1, 4)), int(rng.integers(50, 160)), int(rng.integers(50, 160)))
        prob = rng.random(shape) * (rng.random(shape) < 0.8)
        positives = {}
        for z in range(shape[0]):
            corners = [(y, x) for y in range(0, shape[1] - 49, 50) for x in range(0, shape[2] - 49, 50)
                       if rng.random() < 0.4]
            if corners:
                positives[z] = corners
        det = DetectionMask(shape, positives)
        out = mask_segmentation(prob, det)
        cores = det.to_mask()
        ok = np.all(out <= prob) and np.array_equal(out != 0, (prob != 0) & cores)
        ok &= np.array_equal(out[cores], prob[cores])
        bad += int(not ok)
    report(5, "fusion subtractivity", bad == 0, f"50 randomized detection masks, {bad} violations")


# --- 6: CRF ----------------------------------------------------------------------------------

SMALL_SHAPES = [(1, 3, 4), (2, 2, 3), (1, 2, 6), (3, 2, 2), (2, 3, 2)]


def _unary_softmax(unary):
    e = np.exp(-(unary - unary.min(axis=1, keepdims=True)))
    return e / e.sum(axis=1, keepdims=True)


def test_crf_oracles(report):
    # (a) no pairwise terms: marginals are the softmax of the unaries
    err_a = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 6, size=3))
        m = build_crf(rng.random(shape), rng.random(shape), CrfParams(w_app=0.0, w_smooth=0.0))
        err_a = max(err_a, float(np.abs(mean_field_infer(m).q - _unary_softmax(m.unary)).max()))

    # (b) tiny random models, then strongly smoothed ones, against exhaustive MAP
    energy_ok, map_agree, norm_err = 0, 0, 0.0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        shape = SMALL_SHAPES[seed % 5]
        params = CrfParams(w_app=rng.uniform(0, 3), w_smooth=rng.uniform(0, 3),
                           theta_spatial_app=rng.uniform(0.5, 3), theta_intensity=rng.uniform(0.05, 0.5),
                           theta_spatial_smooth=rng.uniform(0.5, 3), iterations=10)
        m = build_crf(rng.random(shape), rng.random(shape), params)
        field = mean_field_infer(m)
        unary_lab = (m.unary[:, 1] < m.unary[:, 0]).astype(int)
        energy_ok += energy(m, field.labeling()) <= energy(m, unary_lab)
        norm_err = max(norm_err, *field.normalization_errors)

        smooth = build_crf(rng.random(shape), rng.random(shape),
                           CrfParams(w_app=0.0, w_smooth=rng.uniform(3, 6), theta_spatial_smooth=3.0,
                                     iterations=10))
        field = mean_field_infer(smooth)
        map_agree += np.array_equal(field.labeling(), exhaustive_map(smooth))
        norm_err = max(norm_err, *field.normalization_errors)

    passed = err_a <= 1e-6 and energy_ok == 20 and map_agree >= 18 and norm_err <= 1e-9
    report(6, "CRF oracles", passed,
           f"(a) max |Q - softmax| {err_a:.1e}; (b) energy not worse {energy_ok}/20, "
           f"exhaustive MAP agreement {map_agree}/20; (c) max normalization error {norm_err:.1e}")


# --- 7: Dice ----------------------------------------------------------------------------------

def test_dice_matches_set_arithmetic(report):
    bad, empties = 0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        shape = tuple(rng.integers(1, 8, size=3))
        p = rng.random(shape) < rng.uniform(0, 0.6)
        g = rng.random(shape) < rng.uniform(0, 0.6)
        if seed % 10 == 0:
            p[...] = False
        if seed % 15 == 0:
            g[...] = False
        empties += int(not p.any() or not g.any())
        bad += int(dice(p, g) != dice_by_sets(p, g))
    report(7, "Dice oracle", bad == 0, f"100 random pairs ({empties} with an empty mask), {bad} mismatches")


# --- 8-10: desk-scale runs through the CLI ----------------------------------------------------

WORKFLOW = ("gen-data", "train-liver", "train-lesion", "train-detector", "predict", "evaluate", "ablate")
OUTPUT_DIRS = ("data", "models", "predictions", "reports")


def _run_workflow(workdir: Path, threads: int) -> float:
    workdir.mkdir(parents=True)
    env = {k: v for k, v in os.environ.items() if k != "CASCADE_SEG_THREADS"}
    t0 = time.perf_counter()
    for cmd in WORKFLOW:
        proc = subprocess.run([sys.executable, "-m", "cascade_seg.cli", cmd, "--config",
                               str(bundled_config_path()), "--threads", str(threads)],
                              cwd=workdir, env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(f"{cmd} failed ({proc.returncode}): {proc.stderr[-2000:]}")
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    times = {n: _run_workflow(root / f"threads{n}", n) for n in (1, 2)}
    return root, times


def _load(root, name):
    return json.loads((root / "threads1" / "reports" / name).read_text())


def test_end_to_end_desk_run(desk_runs, report):
    root, times = desk_runs
    summary = _load(root, "evaluation.json")["summary"]
    n_test = len(_load(root, "evaluation.json")["cases"])
    liver, lesion = summary["mean_dice_liver"], summary["mean_dice_lesion"]
    passed = n_test == 10 and liver >= 0.85 and lesion >= 0.50 and times[1] <= 20 * 60
    report(8, "desk-scale end to end", passed,
           f"{n_test} test cases, liver Dice {liver:.3f} (>= 0.85), lesion Dice {lesion:.3f} (>= 0.50), "
           f"global lesion Dice {summary['global_dice_lesion']:.3f}, wall time {times[1]:.0f}s")


def test_ablation_structure(desk_runs, report):
    root, _ = desk_runs
    rows = _load(root, "ablation.json")["rows"]
    names = [r["config"] for r in rows]
    precision = [r["summary"]["lesion_precision"] for r in rows]
    csv_rows = (root / "threads1" / "reports" / "ablation.csv").read_text().splitlines()[1:]
    passed = names == list(ABLATION_ROWS) and len(csv_rows) == 4 and precision[2] >= precision[1]
    table = "; ".join(f"{n}: Dice {r['summary']['mean_dice_lesion']:.3f} precision {p:.3f}"
                      for n, r, p in zip(names, rows, precision))
    report(9, "ablation structure", passed, table)


def test_runs_are_bit_identical_across_thread_counts(desk_runs, report):
    root, _ = desk_runs
    diffs, n_files = [], 0
    for sub in OUTPUT_DIRS:
        a, b = root / "threads1" / sub, root / "threads2" / sub
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        if files_a != files_b:
            diffs.append(f"{sub}: file lists differ")
            continue
        for rel in files_a:
            n_files += 1
            if (a / rel).read_bytes() != (b / rel).read_bytes():
                diffs.append(f"{sub}/{rel}")
    report(10, "determinism across --threads 1 and 2", not diffs,
           f"{n_files} files compared, {len(diffs)} differ {diffs[:5]}, {usable_cpus()} usable cores")
