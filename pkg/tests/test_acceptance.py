"""Acceptance criteria 1-9.

Each criterion prints one ``criterion N: PASS|FAIL`` line as it finishes, and
the lines are repeated in the session summary.  The detection criteria train
the default toy configuration for every variant and seed, so this module takes
on the order of two hours on one core.  Runs are shared between criteria.

Run on its own with ``pytest tests/test_acceptance.py -v``.
"""

import itertools
import math
import time

import numpy as np
import pytest

import conftest
from _instances import deform_conv_setup, dense_equivalent, random_params
from _oracles import deform_conv_loops, hungarian_brute
from deformdet.attention import (
    AttnConfig,
    deform_attn,
    init_deform_params,
    ms_deform_attn,
    multi_head_attn,
    predict_sampling_params,
)
from deformdet.bench import benchmark
from deformdet.gradcheck import run_suite
from deformdet.matching import hungarian_match
from deformdet.train import MetricsRow, RunConfig, epochs_to_reach, read_curves, train

SEEDS = (0, 1, 2)
# AP@0.5 level used for the convergence-speed ordering; set from the dense
# baseline curves (see the decisions ledger), only the ordering is asserted
THRESHOLD_T = 0.25
TARGET_AP50 = 0.5

VARIANTS = {
    "plain": {},
    "dense": {"attention": "dense"},
    "single_scale": {"n_levels": 1, "n_points": 1},
    "refine": {"mode": "refine"},
    "two_stage": {"mode": "two_stage"},
}


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.report(line)
    return ok


# ---- 1. gradients ------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    t = time.perf_counter()
    results = run_suite(seed=0, n_instances=20)
    elapsed = time.perf_counter() - t
    worst = max(r.worst_rel for r in results)
    ok = all(r.passed and r.instances >= 20 for r in results) and worst < 1e-4 and elapsed < 120
    parts = ", ".join(f"{r.name} {r.instances} inst {r.checks} checks" for r in results)
    assert verdict(1, ok, f"worst rel err {worst:.2e}, {elapsed:.0f}s ({parts})")


# ---- 2. equivalence oracles ----------------------------------------------------------


def test_criterion_2_equivalences():
    rng = np.random.default_rng(2024)
    err_conv = 0.0
    for _ in range(20):
        cfg, p, z, ref_px, img, kernel, learned = deform_conv_setup(rng)
        out = deform_attn(z, ref_px, img, p, cfg)
        err_conv = max(err_conv, np.abs(out.T.reshape(img.shape) - deform_conv_loops(img, kernel, learned)).max())
    err_dense = 0.0
    for _ in range(20):
        cfg, cfg_d, p, dense, img, keys = dense_equivalent(rng)
        z = rng.normal(size=(5, cfg.d_model))
        out = ms_deform_attn(z, np.zeros((5, 2)), [img], p, cfg)
        err_dense = max(err_dense, np.abs(out - multi_head_attn(z, keys, dense, cfg_d)).max())
    err_order = 0.0
    for i in range(20):
        cfg = AttnConfig(n_heads=2, d_model=6, n_points=int(rng.integers(1, 4)), n_levels=3)
        p = random_params(cfg, rng)
        z = rng.normal(size=(2, 4, 6))
        ref = rng.uniform(0, 1, (2, 4, 4 if i % 2 else 2))
        levels = [rng.normal(size=(2, 6, h, w)) for h, w in [(5, 5), (3, 2), (1, 1)]]
        pre = ms_deform_attn(z, ref, levels, p, cfg, order="pre")
        post = ms_deform_attn(z, ref, levels, p, cfg, order="post")
        err_order = max(err_order, np.abs(pre - post).max())
    ok = max(err_conv, err_dense, err_order) <= 1e-10
    assert verdict(2, ok, f"(a) deform-conv {err_conv:.1e}, (b) dense {err_dense:.1e}, (c) orders {err_order:.1e}"
                          " over 20 instances each, tol 1e-10")


# ---- 3. initialization ---------------------------------------------------------------

# offsets of heads 1..8 as multiples of k, written out by hand
HEAD_DIRECTIONS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def test_criterion_3_initialization():
    mismatches = []
    rng = np.random.default_rng(3)
    for n_points, n_levels, refine in itertools.product(range(1, 5), range(1, 5), (False, True)):
        cfg = AttnConfig(n_heads=8, d_model=16, n_points=n_points, n_levels=n_levels)
        params = init_deform_params(cfg, refinement_mode=refine)
        plan = predict_sampling_params(rng.normal(size=(2, 3, 16)) * 10, params, cfg)
        if not np.all(plan.weights == 1 / (n_levels * n_points)):
            mismatches.append(("A", n_points, n_levels, refine))
        for m, lvl, k in itertools.product(range(8), range(n_levels), range(n_points)):
            scale = 1 / (2 * n_points) if refine else 1
            expect = [HEAD_DIRECTIONS[m][0] * (k + 1) * scale, HEAD_DIRECTIONS[m][1] * (k + 1) * scale]
            got = plan.offsets[..., m, lvl, k, :].reshape(-1, 2)
            if not np.all(got == np.array(expect)):
                mismatches.append(("offset", m, lvl, k, n_points, n_levels, refine))
    assert verdict(3, not mismatches, f"M=8, K,L in 1..4, plain and refinement biases; {len(mismatches)} mismatches")


# ---- 4. complexity ---------------------------------------------------------------------


def test_criterion_4_complexity():
    t = time.perf_counter()
    out = benchmark(AttnConfig(), sizes=(256, 384, 512, 640), n_queries=30, seed=0)
    elapsed = time.perf_counter() - t
    exps = out["exponents"]
    ok = (abs(exps["dense"] - 2) <= 0.2 and abs(exps["deformable"] - 1) <= 0.2
          and out["decoder_spread"] <= 0.05 and elapsed < 300)
    hw = [r["HW"] for r in out["rows"]]
    assert verdict(4, ok, f"HW {hw}: dense exponent {exps['dense']:.3f}, deformable {exps['deformable']:.3f}, "
                          f"decoder spread {out['decoder_spread']:.2%}, {elapsed:.0f}s")


# ---- 5. matching -------------------------------------------------------------------------


def test_criterion_5_matching():
    rng = np.random.default_rng(5)
    wrong = 0
    for _ in range(200):
        cost = rng.normal(size=(6, 6))
        if abs(hungarian_match(cost).total_cost - hungarian_brute(cost)) > 1e-12:
            wrong += 1
    assert verdict(5, wrong == 0, f"{200 - wrong}/200 random 6x6 instances equal the permutation minimum")


# ---- detection runs shared by 6-8 ----------------------------------------------------------


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    cache = {}

    def get(variant, seed):
        if (variant, seed) not in cache:
            cfg = RunConfig(seed=seed, data_seed=seed, out_dir=str(root / f"{variant}_{seed}"), **VARIANTS[variant])
            t = time.perf_counter()
            _, rows = train(cfg)
            conftest.TERMINAL.write_line(f"  trained {variant} seed {seed} in {time.perf_counter() - t:.0f}s: "
                                         f"AP50 {' '.join(f'{r.ap50:.2f}' for r in rows)}")
            conftest.TERMINAL.flush()
            cache[variant, seed] = rows
        return cache[variant, seed]

    return get


def test_criterion_6_convergence(runs):
    budget = RunConfig().epochs
    lines, ok = [], True
    for seed in SEEDS:
        plain, dense = runs("plain", seed), runs("dense", seed)
        reach = epochs_to_reach(plain, TARGET_AP50)
        e_plain, e_dense = epochs_to_reach(plain, THRESHOLD_T), epochs_to_reach(dense, THRESHOLD_T)
        ok &= reach <= budget and e_plain < e_dense
        lines.append(f"seed {seed}: AP50>={TARGET_AP50} at epoch {reach}, T={THRESHOLD_T} at {e_plain} vs dense {e_dense}")
    assert verdict(6, ok, f"budget {budget} epochs; " + "; ".join(lines))


def test_loss_drops_by_epoch_five(runs):
    drops = [runs("plain", s)[5].loss < runs("plain", s)[0].loss for s in SEEDS]
    assert all(drops)


def _final_ap(rows):
    return rows[-1].ap


def test_criterion_7_multi_scale(runs):
    pairs = [(_final_ap(runs("plain", s)), _final_ap(runs("single_scale", s))) for s in SEEDS]
    ok = all(m >= s for m, s in pairs)
    detail = "; ".join(f"seed {s}: L=4,K=4 AP {m:.3f} vs L=1,K=1 {o:.3f}" for s, (m, o) in zip(SEEDS, pairs))
    assert verdict(7, ok, detail)


def test_criterion_8_refine_and_two_stage(runs):
    parts, ok = [], True
    for s in SEEDS:
        plain, ref, two = (_final_ap(runs(v, s)) for v in ("plain", "refine", "two_stage"))
        ok &= ref >= plain and two >= plain
        parts.append(f"seed {s}: plain {plain:.3f}, refine {ref:.3f}, two-stage {two:.3f}")
    assert verdict(8, ok, "; ".join(parts))


# ---- 9. determinism ------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    base = dict(dtype="float64", epochs=2, n_train=64, n_val=32, seed=9, data_seed=9)
    a = train(RunConfig(out_dir=str(tmp_path / "a"), **base))[1]
    b = train(RunConfig(out_dir=str(tmp_path / "b"), **base))[1]
    from_disk = read_curves(tmp_path / "a" / "metrics.csv"), read_curves(tmp_path / "b" / "metrics.csv")
    cols = [c for c in MetricsRow.columns() if c != "wall_clock"]

    def same(x, y):
        return x == y or (isinstance(x, float) and math.isnan(x) and math.isnan(y))

    ok = len(a) == len(b) == 3 and all(same(getattr(r, c), getattr(q, c)) for r, q in zip(a, b) for c in cols)
    ok &= all(same(getattr(r, c), getattr(q, c)) for r, q in zip(*from_disk) for c in cols)
    assert verdict(9, ok, f"two float64 runs, {len(a)} logged epochs, {len(cols)} columns compared bit for bit "
                          "(wall-clock excluded)")
