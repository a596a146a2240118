"""Acceptance criteria 1-9. Each test records a one-line verdict printed at the end of the run."""
import json
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from fundoscope.config import bundled_config
from fundoscope.lesionmap import expand_and_tile
from fundoscope.metrics import quadratic_weighted_kappa, roc_auc
from fundoscope.networks import TrainConfig, build_global, build_local, check_miniature, describe, train
from fundoscope.pipeline import run_all
from fundoscope.preprocess import FundusImage, PreprocessParams, enhance
from fundoscope.synthdata import patch_corpus
from fundoscope.tiling import grid_positions


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# ------------------------------------------------------------------ 1

def test_1_gradient_correctness():
    t0 = time.perf_counter()
    worst, probes, kinks, limited = {}, 0, 0, 0
    for kind in ("local", "global"):
        reports = [check_miniature(kind, seed, batch=8, max_entries=6, size=32, width_divisor=8)
                   for seed in range(20)]
        worst[kind] = max(r.max_error for r in reports)
        probes += sum(r.checked for r in reports)
        kinks += sum(r.kinks for r in reports)
        limited += sum(len(r.kink_limited) for r in reports)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and elapsed < 120
    record(1, ok, f"max rel. error local {worst['local']:.2e}, global {worst['global']:.2e} "
                  f"(< 1e-5, 20 seeds each, {probes} probes; {kinks} crossed a ReLU/pool switch, "
                  f"{limited} unresolvable and excluded) in {elapsed:.0f}s (< 120s)")


# ------------------------------------------------------------------ 2

def test_2_enhancement_fixed_point():
    side, radius = 800, 380
    yy, xx = np.mgrid[:side, :side]
    mask = np.hypot(yy - (side - 1) / 2, xx - (side - 1) / 2) <= radius
    worst = 0.0
    for level in (40.0, 117.0, 201.0):
        img = np.zeros((3, side, side))
        img[:, mask] = level
        out = enhance(FundusImage(img, mask), PreprocessParams(4, -4, 128, 10))
        worst = max(worst, float(np.abs(out.pixels[:, mask] - 128).max()))
    record(2, worst <= 1, f"max |output - 128| over the ROI = {worst:.2e} (<= 1)")


# ------------------------------------------------------------------ 3

def test_3_tiling_coverage_sweep():
    t0 = time.perf_counter()
    failures, n = [], 0
    for d in (64, 128, 256):
        for h in (8, 16, 32, 64):
            for ov in range(0, h, h // 8):
                g = grid_positions(d, h, ov)
                cover = np.zeros((d, d), dtype=int)
                for _, _, y0, x0 in g.windows():
                    cover[y0:y0 + h, x0:x0 + h] += 1
                n += 1
                if cover.min() < 1 or g.positions[-1] + h != d:
                    failures.append((d, h, ov))
    elapsed = time.perf_counter() - t0
    record(3, not failures and elapsed < 60,
           f"{n} geometries, {len(failures)} with uncovered pixels or a misplaced last window, {elapsed:.1f}s")


# ------------------------------------------------------------------ 4

def _windows(d, h, ov):
    out, p = [], 0
    while p + h <= d:
        out.append(p)
        p += h - ov
    if out[-1] + h < d:
        out.append(d - h)
    return out


def _accumulate_count(LP, d, h, ov):
    pos = _windows(d, h, ov)
    cover = [[r for r, p in enumerate(pos) if p <= y < p + h] for y in range(d)]
    M = np.empty((d, d))
    for y in range(d):
        for x in range(d):
            M[y, x] = LP[np.ix_(cover[y], cover[x])].mean()
    return M, max(len(c) for c in cover)


def test_4_weighting_matrix_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, corners = 0.0, 0
    for _ in range(1000):
        d = int(rng.integers(8, 41))
        h = int(rng.integers(2, d + 1))
        ov = int(rng.integers(0, h))
        g = grid_positions(d, h, ov)
        LP = (rng.integers(0, 4, (g.s, g.s)) + 1) * rng.uniform(0.25, 1.0, (g.s, g.s))
        oracle, depth = _accumulate_count(LP, d, h, ov)
        corners += depth >= 2  # at least 2 per axis -> 4-way overlaps at corners
        worst = max(worst, float(np.abs(expand_and_tile(LP, g) - oracle).max()))
    elapsed = time.perf_counter() - t0
    record(4, worst <= 1e-12 and corners > 0 and elapsed < 60,
           f"max |M - oracle| = {worst:.1e} over 1000 instances ({corners} with 4-way overlaps), {elapsed:.0f}s")


# ------------------------------------------------------------------ 5

def _kappa_definition(O):
    O = np.asarray(O, dtype=np.longdouble)
    C = O.shape[0]
    n = O.sum()
    rows, cols = O.sum(axis=1), O.sum(axis=0)
    num = den = np.longdouble(0)
    for i in range(C):
        for j in range(C):
            w = np.longdouble((i - j) ** 2) / (C - 1) ** 2
            num += w * O[i, j]
            den += w * rows[i] * cols[j] / n
    return float(1 - num / den)


def _pairwise_auc(s, y):
    pos, neg = s[y], s[~y]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def test_5_metric_oracles():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    k_err = 0.0
    done = 0
    while done < 10_000:
        O = rng.integers(0, rng.integers(1, 60), (4, 4))
        if O.sum() == 0 or np.outer(O.sum(1), O.sum(0)).astype(float).dot(np.ones(4)).sum() == 0:
            continue
        k = quadratic_weighted_kappa(O)
        if k is None:
            continue
        k_err = max(k_err, abs(k - _kappa_definition(O)))
        done += 1
    a_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 300))
        s = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # coarse rounding forces ties
        y = rng.uniform(size=n) < rng.uniform(0.1, 0.9)
        if y.all() or not y.any():
            y[0] = not y[0]
        a_err = max(a_err, abs(roc_auc(s, y).auc - _pairwise_auc(s, y)))
    i_err = 0.0
    for _ in range(500):
        r, c = rng.integers(1, 30, 4), rng.integers(1, 30, 4)
        i_err = max(i_err, abs(quadratic_weighted_kappa(np.outer(r, c))))
    elapsed = time.perf_counter() - t0
    ok = max(k_err, a_err, i_err) <= 1e-12 and elapsed < 120
    record(5, ok, f"kappa err {k_err:.1e} (10k matrices), AUC err {a_err:.1e} (1000 sets), "
                  f"independence |kappa| {i_err:.1e}, {elapsed:.0f}s")


# ------------------------------------------------------------------ 6

def test_6_local_network_learns_patch_corpus():
    t0 = time.perf_counter()
    best = []
    for seed in range(3):
        Xtr, ytr = patch_corpus(400, 32, seed=100 + seed)
        Xva, yva = patch_corpus(100, 32, seed=200 + seed)
        net = build_local(32, width_divisor=8, seed=seed)
        _, hist = train(net, Xtr / 255, ytr, Xva / 255, yva,
                        TrainConfig(epochs=15, batch_size=32, learning_rate=0.01, seed=seed))
        best.append(max(hist.val_accuracy))
    elapsed = time.perf_counter() - t0
    ok = min(best) >= 0.95 and elapsed < 600
    record(6, ok, f"best validation accuracy per seed {[round(b, 4) for b in best]} (>= 0.95), {elapsed:.0f}s")


# ------------------------------------------------------------------ 7

@pytest.mark.slow
def test_7_weighting_ablation(tmp_path):
    t0 = time.perf_counter()
    gains, aucs = [], []
    for seed in range(3):
        cfg = bundled_config("desk")
        cfg.train.seed = seed
        cfg.eval.figures = False
        run_all(cfg, tmp_path / f"seed{seed}")
        report = json.loads((tmp_path / f"seed{seed}" / "evaluate" / "report.json").read_text())
        w, p = report["referable"]["weighted"]["auc"], report["referable"]["plain"]["auc"]
        aucs.append((round(w, 4), round(p, 4)))
        gains.append(w - p)
    elapsed = time.perf_counter() - t0
    mean_gain = float(np.mean(gains))
    ok = mean_gain >= 0.02 and elapsed < 3600
    record(7, ok, f"referable AUC (weighted, all-ones) per seed {aucs}; mean gain {mean_gain:+.4f} "
                  f"(>= 0.02), {elapsed / 60:.1f} min")


# ------------------------------------------------------------------ 8

def test_8_end_to_end_determinism(tmp_path):
    digests = []
    for run in ("a", "b"):
        cfg = bundled_config("smoke")
        assert cfg.train.precision == 64
        run_all(cfg, tmp_path / run)
        digests.append((tmp_path / run / "summary.json").read_bytes())
    same = digests[0] == digests[1]
    record(8, same, f"two smoke runs, 64-bit: summaries {'identical' if same else 'differ'} "
                    f"({len(digests[0])} bytes)")


# ------------------------------------------------------------------ 9

LOCAL_ROWS = [
    (0, "input", "...", "..."),
    (1, "convolution", "3 × 3 × 64", "1"),
    (2, "convolution", "3 × 3 × 128", "1"),
    (3, "max-pooling", "2 × 2", "2"),
    (4, "convolution", "3 × 3 × 128", "1"),
    (5, "max-pooling", "2 × 2", "2"),
    (6, "convolution", "3 × 3 × 256", "1"),
    (7, "fully connected", "1 × 1 × 512", "..."),
    (8, "fully connected", "1 × 1 × 1024", "..."),
    (9, "soft-max", "...", "..."),
]

GLOBAL_ROWS = [
    (0, "input", "...", "..."),
    (1, "convolution", "3 × 3 × 32", "1"), (2, "max-pooling", "2 × 2", "2"),
    (3, "convolution", "3 × 3 × 32", "1"), (4, "max-pooling", "2 × 2", "2"),
    (5, "convolution", "3 × 3 × 64", "1"), (6, "max-pooling", "2 × 2", "2"),
    (7, "convolution", "3 × 3 × 64", "1"), (8, "max-pooling", "2 × 2", "2"),
    (9, "convolution", "3 × 3 × 128", "1"), (10, "max-pooling", "2 × 2", "2"),
    (11, "convolution", "3 × 3 × 128", "1"), (12, "max-pooling", "2 × 2", "2"),
    (13, "convolution", "3 × 3 × 256", "1"), (14, "max-pooling", "2 × 2", "2"),
    (15, "convolution", "3 × 3 × 256", "1"), (16, "max-pooling", "2 × 2", "2"),
    (17, "convolution", "3 × 3 × 512", "1"), (18, "max-pooling", "2 × 2", "2"),
    (19, "convolution", "3 × 3 × 512", "1"),
    (20, "fully connected", "1 × 1 × 1024", "..."),
    (21, "fully connected", "1 × 1 × 1024", "..."),
    (22, "fully connected", "1 × 1 × 4", "..."),
    (23, "soft-max", "...", "..."),
]


def test_9_architecture_conformance():
    local = describe(build_local(64))
    glob = describe(build_global(256))
    local_rows = [(r["row"], r["type"], r["kernel"], r["stride"]) for r in local if r["row"] is not None]
    global_rows = [(r["row"], r["type"], r["kernel"], r["stride"]) for r in glob if r["row"] is not None]
    flagged = [("local", r) for r in local if r["note"]] + [("global", r) for r in glob if r["note"]]
    inserted = [r for r in local if r["row"] is None]
    ok = (local_rows == LOCAL_ROWS and global_rows == GLOBAL_ROWS and len(flagged) == 2
          and len(inserted) == 1 and inserted[0]["kernel"] == "1 × 1 × 4" and inserted[0]["note"]
          and any(net == "global" and r["row"] == 18 and r["type"] == "max-pooling" for net, r in flagged))
    record(9, ok, f"local table {len(local_rows)} rows, global table {len(global_rows)} rows matched; flagged: "
                  + "; ".join(f"{net} row {r['row'] if r['row'] is not None else '+'} ({r['note']})"
                              for net, r in flagged))
