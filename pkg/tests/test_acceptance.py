"""Acceptance gate: every required numeric property, one pass/fail line each.

Each test checks one shipping requirement end to end at its stated tolerance
and prints a single [PASS]/[FAIL] line with the measured quantities. Criteria
6-8 share one noisy benchmark (built once per module): scenes are 24x24, 31
frames, feature noise sigma = 3.0 over unit-separated class means, tuned so
single-view quality lands mid-scale where pooling differences are visible.
"""

import filecmp
import os
import time

import numpy as np
import pytest

from conftest import random_labels
from test_cli import run_pipeline
from test_evaluate import brute_confusion, brute_metrics

from stpool.correspond import SamplingPolicy, build_table
from stpool.evaluate import (
    ConfusionMatrix,
    metrics,
    oracle_label,
    pixel_correspondence_baseline,
)
from stpool.grid import IGNORE, FeatureStack, LabelMap, SuperpixelStack
from stpool.learn import (
    SgdState,
    forward_item,
    grad_check,
    init_head,
    prepare_item,
    train,
)
from stpool.pooling import (
    RegionFeatureMap,
    pool_head_bwd,
    pool_head_fwd,
    region_to_pixel_bwd,
    region_to_pixel_fwd,
    spatial_pool_bwd,
    spatial_pool_fwd,
    temporal_pool_bwd,
    temporal_pool_fwd,
)
from stpool.synth import ObjectSpec, SceneSpec, corrupt_flow, generate, truth_rows


def report(criterion, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    print(line)
    assert ok, line


def random_regions(rng, n, h, w, p, p_ignore=0.1):
    labels = rng.integers(0, p, size=(n, h, w)).astype(np.int64)
    labels[rng.random((n, h, w)) < p_ignore] = IGNORE
    for i in range(n):
        if np.all(labels[i] == IGNORE):
            labels[i, 0, 0] = 0
    return SuperpixelStack(labels, p)


def grad_weights(rng, shape):
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# --- criterion 1: finite-difference gradient suite ------------------------------


def test_01_gradient_suite():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst = {"spatial": 0.0, "temporal": 0.0, "broadcast": 0.0, "composed": 0.0}

    for trial in range(20):
        n = int(rng.integers(1, 5))
        c = int(rng.integers(1, 6))
        h = int(rng.integers(3, 9))
        p = int(rng.integers(2, 7))
        sp = random_regions(rng, n, h, h, p)

        go_s = grad_weights(rng, (n, c, p))

        def fn_spatial(x):
            saved = spatial_pool_fwd(FeatureStack(x.reshape(n, c, h, h)), sp, "avg")
            loss = float(np.vdot(saved.values, go_s))
            return loss, spatial_pool_bwd(go_s, sp, saved).ravel()

        rep = grad_check(fn_spatial, rng.standard_normal(n * c * h * h),
                         seed=trial, num_coords=40)
        worst["spatial"] = max(worst["spatial"], rep.max_rel_error)

        presence = rng.random((n, p)) < 0.7
        presence[0, 0] = True
        counts = presence * (1 + rng.integers(0, 5, size=(n, p)))
        go_t = grad_weights(rng, (c, p))

        def fn_temporal(x):
            from stpool.pooling import RegionFeatureStack
            stack = RegionFeatureStack(
                values=x.reshape(n, c, p), presence=presence,
                counts=counts, mode="avg", grid_shape=(h, h))
            pooled = temporal_pool_fwd(stack, "avg")
            loss = float(np.vdot(pooled.values, go_t))
            return loss, temporal_pool_bwd(go_t, pooled).ravel()

        rep = grad_check(fn_temporal, rng.standard_normal(n * c * p),
                         seed=trial, num_coords=40)
        worst["temporal"] = max(worst["temporal"], rep.max_rel_error)

        target_map = rng.integers(0, p, size=(h, h)).astype(np.int64)
        go_r = grad_weights(rng, (c, h, h))

        def fn_broadcast(x):
            pooled = RegionFeatureMap(
                values=x.reshape(c, p), frame_counts=np.ones(p, dtype=np.int64),
                source_presence=np.ones((1, p), dtype=bool), mode="avg")
            dense = region_to_pixel_fwd(pooled, target_map)
            loss = float(np.vdot(dense, go_r))
            return loss, region_to_pixel_bwd(go_r, target_map, p).ravel()

        rep = grad_check(fn_broadcast, rng.standard_normal(c * p),
                         seed=trial, num_coords=40)
        worst["broadcast"] = max(worst["broadcast"], rep.max_rel_error)

    for trial in range(20):
        frames = int(rng.integers(2, 5))
        c = int(rng.integers(1, 6))
        bundle = generate(SceneSpec(
            frames=frames, height=8, width=8, channels=1,
            background_class=0, noise_std=0.0, seed=trial,
            class_means=((0.0,), (1.0,), (2.0,)),
            objects=(
                ObjectSpec(x=1, y=1, h=3, w=3, vx=0, vy=1, cls=1, g=2),
                ObjectSpec(x=5, y=4, h=2, w=3, vx=0, vy=-1, cls=2, g=1),
            ),
        ))
        target = frames // 2
        table, canonical = build_table(
            target, list(range(frames)), bundle.superpixels, bundle.flows, 0.4)
        go = grad_weights(rng, (c, 8, 8))

        def fn_composed(x):
            dense, state = pool_head_fwd(
                FeatureStack(x.reshape(frames, c, 8, 8)), canonical, table,
                "avg", "avg")
            loss = float(np.vdot(dense, go))
            return loss, pool_head_bwd(go, state).ravel()

        rep = grad_check(fn_composed, rng.standard_normal(frames * c * 64),
                         seed=trial, num_coords=40)
        worst["composed"] = max(worst["composed"], rep.max_rel_error)

    elapsed = time.monotonic() - start
    peak = max(worst.values())
    report(
        "gradient suite (20 instances per layer + composed head)",
        peak < 1e-5 and elapsed < 10.0,
        f"max rel err {peak:.3e} (per suite: " +
        ", ".join(f"{k} {v:.2e}" for k, v in worst.items()) +
        f"), tolerance 1e-5, {elapsed:.1f}s (< 10s)",
    )


# --- criterion 2: adjointness of the average pooling layers ------------------------


def test_02_adjointness():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 5))
        c = int(rng.integers(1, 6))
        h = int(rng.integers(3, 9))
        p = int(rng.integers(2, 7))
        sp = random_regions(rng, n, h, h, p)
        x = rng.standard_normal((n, c, h, h))
        g = rng.standard_normal((n, c, p))
        saved = spatial_pool_fwd(FeatureStack(x), sp, "avg")
        lhs = float(np.vdot(saved.values, g))
        rhs = float(np.vdot(x, spatial_pool_bwd(g, sp, saved)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30))

        pooled = temporal_pool_fwd(saved, "avg")
        gt = rng.standard_normal((c, p))
        lhs = float(np.vdot(pooled.values, gt))
        rhs = float(np.vdot(saved.values, temporal_pool_bwd(gt, pooled)))
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-30))
    report(
        "adjointness <fwd(x), g> = <x, bwd(g)> (both avg layers, 100 trials)",
        worst < 1e-10,
        f"max rel err {worst:.3e}, tolerance 1e-10",
    )


# --- criterion 3: matcher exactness on sparse exact scenes --------------------------


def sparse_spec(seed):
    rng = np.random.default_rng(seed)
    n_obj = int(rng.integers(4, 7))
    objects = []
    for band in range(n_obj):
        w = int(rng.integers(3, 6))
        objects.append(ObjectSpec(
            x=3 * band, y=int(rng.integers(5, 14)), h=2, w=w,
            vx=0, vy=int(rng.integers(-1, 2)),
            cls=int(rng.integers(1, 3)), g=int(rng.integers(1, 3)),
        ))
    return SceneSpec(
        frames=6, height=20, width=26, channels=1,
        background_class=0, noise_std=0.0, seed=seed,
        class_means=((0.0,), (1.0,), (2.0,)),
        objects=tuple(objects),
    )


def test_03_matcher_exactness():
    start = time.monotonic()
    taus = (0.1, 0.3, 0.5, 0.7, 0.9)
    worst_p, worst_r, monotone = 1.0, 1.0, True
    for seed in range(50):
        bundle = generate(sparse_spec(seed))
        target = 3
        table, _ = build_table(
            target, list(range(6)), bundle.superpixels, bundle.flows, 0.4)
        found = {(f, s, j) for j in table.target_regions
                 for f, (s, _) in table.matches[j].items()}
        truth = set(truth_rows(bundle, target))
        worst_p = min(worst_p, len(found & truth) / len(found))
        worst_r = min(worst_r, len(found & truth) / len(truth))
        last = None
        for tau in taus:
            t, _ = build_table(
                target, list(range(6)), bundle.superpixels, bundle.flows, tau)
            count = sum(len(t.matches[j]) for j in t.target_regions)
            if last is not None and count > last:
                monotone = False
            last = count
    elapsed = time.monotonic() - start
    report(
        "matcher exactness on 50 exact sparse bundles at tau=0.4",
        worst_p == 1.0 and worst_r == 1.0 and monotone and elapsed < 30.0,
        f"precision {worst_p}, recall {worst_r}, tau-monotone {monotone}, "
        f"{elapsed:.1f}s (< 30s)",
    )


# --- criterion 4: metrics equal the brute-force confusion computation ---------------


def test_04_metric_oracle_equivalence():
    rng = np.random.default_rng(404)
    mismatches = 0
    checked = 0
    for _ in range(1000):
        ncl = int(rng.integers(1, 7))
        gt = random_labels(rng, 16, 16, ncl, p_ignore=0.1)
        pred = random_labels(rng, 16, 16, ncl, p_ignore=0.05)
        cm = ConfusionMatrix(ncl)
        cm.accumulate(pred, gt)
        expected = brute_confusion(pred.labels, gt.labels, ncl)
        if not np.array_equal(cm.counts, expected):
            mismatches += 1
            continue
        if expected.sum() == 0:
            continue
        checked += 1
        m = metrics(cm)
        if (m.pixel_acc, m.mean_acc, m.mean_iou, m.fw_iou) != brute_metrics(expected):
            mismatches += 1
    report(
        "metrics equal brute-force confusion computation on 1000 random pairs",
        mismatches == 0 and checked >= 990,
        f"{mismatches} mismatches over {checked} non-empty pairs (exact equality)",
    )


# --- criterion 5: majority-vote labeling is optimal among region-constant maps ------


def test_05_oracle_labeling_optimality():
    rng = np.random.default_rng(505)
    violations = 0
    for _ in range(100):
        p = int(rng.integers(3, 11))
        ncl = int(rng.integers(2, 5))
        sp = random_regions(rng, 1, 12, 12, p, p_ignore=0.0)
        gt = random_labels(rng, 12, 12, ncl, p_ignore=0.1)
        mask = gt.labels != IGNORE
        if not mask.any():
            continue
        oracle = oracle_label(sp, 0, gt).labels
        oracle_acc = np.mean(oracle[mask] == gt.labels[mask])
        flat = sp.labels[0]
        for _ in range(20):
            assign = rng.integers(0, ncl, size=p)
            if np.mean(assign[flat][mask] == gt.labels[mask]) > oracle_acc:
                violations += 1
    report(
        "majority-vote oracle beats 20 random region-constant labelings x 100 cases",
        violations == 0,
        f"{violations} violations (strict optimality)",
    )


# --- criteria 6-8: noisy multi-view benchmark ---------------------------------------


def bench_spec(seed, sigma, rng):
    ys = [int(rng.integers(0, 17)) for _ in range(4)]
    return SceneSpec(
        frames=31, height=24, width=24, channels=3,
        background_class=0, noise_std=sigma, seed=seed,
        class_means=((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
        objects=tuple(
            ObjectSpec(x=6 * band, y=ys[band], h=6, w=8,
                       vx=0, vy=0, cls=1 + band % 2, g=4)
            for band in range(4)
        ),
    )


def bench_miou(pred, gt):
    cm = ConfusionMatrix(3)
    cm.accumulate(LabelMap(pred, 3), gt)
    return metrics(cm).mean_iou


@pytest.fixture(scope="module")
def benchmark():
    start = time.monotonic()
    sigma = 3.0
    policy = SamplingPolicy(interval=1, sample_size=11, max_candidates=100, seed=0)
    geometry = np.random.default_rng(12345)
    train_bundle = generate(bench_spec(999, 0.0, geometry))
    head = init_head(3, 3, seed=0)
    opt = SgdState(lr=0.05, momentum=0.9, weight_decay=0.0)
    head, _ = train([train_bundle], policy, head, opt, epochs=60,
                    view_mode="single", target_frames=[15])
    rows = []
    for seed in range(20):
        bundle = generate(bench_spec(seed, sigma, geometry))
        gt = bundle.labels[15]
        item_single = prepare_item(bundle, 15, policy, 0.4, "single")
        item_multi = prepare_item(bundle, 15, policy, 0.4, "multi")
        row = {}
        dense, _, _ = forward_item(head, item_single, "avg", "avg")
        row["single"] = bench_miou(np.argmax(dense, axis=0), gt)
        for sm in ("avg", "max"):
            for tm in ("avg", "max"):
                dense, _, _ = forward_item(head, item_multi, sm, tm)
                row[f"{sm}/{tm}"] = bench_miou(np.argmax(dense, axis=0), gt)
        noisy = corrupt_flow(bundle, 1.5, seed=seed)
        item_noisy = prepare_item(noisy, 15, policy, 0.4, "multi")
        dense, _, _ = forward_item(head, item_noisy, "avg", "avg")
        row["region_noisy"] = bench_miou(np.argmax(dense, axis=0), gt)
        feats = pixel_correspondence_baseline(
            noisy.features, noisy.flows, item_multi.table.sampled_frames, 15)
        scores = head.apply_dense(feats[None])[0]
        row["pixel_noisy"] = bench_miou(np.argmax(scores, axis=0), gt)
        rows.append(row)
    return rows, time.monotonic() - start


def test_06_multiview_beats_single_view(benchmark):
    rows, elapsed = benchmark
    wins = sum(1 for r in rows if r["avg/avg"] > r["single"])
    single_mean = float(np.mean([r["single"] for r in rows]))
    multi_mean = float(np.mean([r["avg/avg"] for r in rows]))
    report(
        "multi-view (K=11, avg/avg) beats single-view mean IoU, 20 paired seeds",
        wins >= 18 and 0.4 <= single_mean <= 0.7 and elapsed < 120.0,
        f"{wins}/20 wins (need >= 18), single mean {single_mean:.3f} "
        f"(in [0.4, 0.7]), multi mean {multi_mean:.3f}, {elapsed:.1f}s (< 2min)",
    )


def test_07_avg_avg_is_the_best_variant(benchmark):
    rows, _ = benchmark
    counts = {}
    for variant in ("avg/max", "max/avg", "max/max"):
        counts[variant] = sum(1 for r in rows if r["avg/avg"] >= r[variant])
    report(
        "avg/avg >= each pooling variant in mean IoU, majority of 20 seeds",
        all(v > 10 for v in counts.values()),
        ", ".join(f"vs {k}: {v}/20" for k, v in counts.items()) + " (need > 10 each)",
    )


def test_08_regions_beat_pixel_tracks_under_flow_noise(benchmark):
    rows, _ = benchmark
    wins = sum(1 for r in rows if r["region_noisy"] > r["pixel_noisy"])
    region_mean = float(np.mean([r["region_noisy"] for r in rows]))
    pixel_mean = float(np.mean([r["pixel_noisy"] for r in rows]))
    report(
        "region correspondence beats pixel tracks at 1.5 px flow noise",
        wins >= 15,
        f"{wins}/20 wins (need >= 15), region mean {region_mean:.3f}, "
        f"pixel mean {pixel_mean:.3f}",
    )


# --- criterion 9: CLI determinism ----------------------------------------------


def test_09_cli_rerun_byte_identical(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    dirs_a = run_pipeline(tmp_path / "a")
    dirs_b = run_pipeline(tmp_path / "b")
    identical = True
    compared = 0
    for name, dir_a in dirs_a.items():
        files = sorted(os.listdir(dir_a))
        match, mismatch, errors = filecmp.cmpfiles(
            dir_a, dirs_b[name], files, shallow=False)
        compared += len(files)
        if mismatch or errors or sorted(match) != files:
            identical = False
    report(
        "CLI pipeline rerun produces byte-identical outputs",
        identical,
        f"{compared} files compared across generate/match/train/infer/eval/sweep",
    )
