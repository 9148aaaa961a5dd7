"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line for the terminal summary.

The ablation-backed criteria (6 to 10) share one 5-seed grid over the default
benchmark. Runs and pretrained backbones persist under ``runs/`` at the repository
root (override with PROMPTCL_ACCEPTANCE_DIR), so only the first session pays for
training. Later sessions reuse finished runs by their config hash.
"""
import os
import time
from pathlib import Path

import numpy as np
import pytest

from promptcl import serialization
from promptcl.bench import run_ablation_matrix, run_experiment
from promptcl.config import ExperimentConfig
from promptcl.data import generate_synthetic
from promptcl.evaluation import AccuracyMatrix, avg_acc, forgetting_ff, last_acc
from promptcl.gradcheck import entropy_gradient_identity, full_loss_gradcheck, tau_one_nullity
from promptcl.trainer import ExperimentState, TrainConfig, begin_task, train_task
from promptcl.vit import Backbone

ROOT = Path(os.environ.get("PROMPTCL_ACCEPTANCE_DIR") or Path(__file__).resolve().parents[1] / "runs")
SEEDS = [0, 1, 2, 3, 4]


@pytest.fixture(scope="module")
def grid():
    started = time.perf_counter()
    res = run_ablation_matrix(ExperimentConfig(seed=0), SEEDS, out_root=ROOT / "ablation",
                              cache_dir=ROOT / "cache", reuse=True)
    return res, time.perf_counter() - started


def _mean(res, variant, metric="last"):
    return next(s[metric] for s in res.summary if s["variant"] == variant)


def _checks(res, *names):
    by_name = {c["check"]: c for c in res.checks}
    return [by_name[n] for n in names]


def _verdict(checks):
    return all(c["passed"] for c in checks), "; ".join(f"{c['check']}: {c['detail']}" for c in checks)


def test_c01_entropy_gradient_identity(acceptance):
    t0 = time.perf_counter()
    r = entropy_gradient_identity(n_vectors=100, taus=(1.02, 1.15, 1.2), seed=0)
    elapsed = time.perf_counter() - t0
    ok = r["closed_form_rel_err"] < 1e-6 and r["finite_difference_rel_err"] < 1e-6 and elapsed < 5.0
    assert acceptance(1, "smoothing-entropy gradient identity", ok,
                      f"closed {r['closed_form_rel_err']:.1e}, fd {r['finite_difference_rel_err']:.1e}, "
                      f"{elapsed:.2f}s")


def test_c02_tau_one_nullity(acceptance):
    t0 = time.perf_counter()
    worst = tau_one_nullity(n_vectors=100, seed=0)
    elapsed = time.perf_counter() - t0
    assert acceptance(2, "zero gradient at tau = 1", worst <= 1e-12 and elapsed < 1.0,
                      f"max |g| {worst:.1e}, {elapsed:.2f}s")


def test_c03_full_loss_gradcheck(acceptance):
    t0 = time.perf_counter()
    errs = {}
    for variant in ({}, {"regularizer": "edl"}, {"enable_aux_head": False}, {"enable_mk": False}):
        for k, v in full_loss_gradcheck(seed=0, **variant).items():
            errs[f"{variant or 'full'}:{k}"] = v
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    assert acceptance(3, "total-loss gradient vs finite differences", errs[worst] < 1e-5 and elapsed < 60.0,
                      f"worst {errs[worst]:.1e} at {worst}, {len(errs)} leaves, {elapsed:.1f}s")


def test_c04_freeze_invariance(acceptance):
    cfg = ExperimentConfig(seed=0)
    stream = generate_synthetic(cfg.synthetic)[1]
    assert stream.num_tasks == 5
    backbone = Backbone(cfg.backbone, np.random.default_rng(0)).freeze()
    train_cfg = TrainConfig(seed=0)
    state = ExperimentState.create(backbone, stream.num_tasks, train_cfg)

    def frozen_bytes(upto):
        out = {"backbone": serialization.dumps("backbone", {}, backbone.state_arrays())}
        for i in range(upto):
            out[f"prompt{i}"] = serialization.dumps("prompt", {}, state.pool.tasks[i].arrays())
            out[f"head{i}"] = serialization.dumps("head", {}, state.bank.heads[i].arrays())
        return out

    before = frozen_bytes(0)
    changed = []
    compared = 0
    for t in range(stream.num_tasks):
        begin_task(state, stream.classes(t), train_cfg)
        train_task(state, stream.train(t), train_cfg)
        now = frozen_bytes(t)  # everything from tasks < t must be untouched by task t
        for name, blob in before.items():
            compared += 1
            if now[name] != blob:
                changed.append(f"{name}@task{t + 1}")
        before = frozen_bytes(t + 1)
    assert acceptance(4, "frozen backbone and past prompts/keys/heads byte-identical", not changed,
                      f"{compared} comparisons, changed: {changed or 'none'}")


def test_c05_metric_oracles(acceptance):
    results = []
    A = AccuracyMatrix([[0.9], [0.8, 0.7]])
    # Hand values as float expressions: 0.9 - 0.8 is the nearest double to 0.1 minus one ulp.
    results += [last_acc(A) == (0.8 + 0.7) / 2, avg_acc(A) == (0.9 + 0.75) / 2,
                forgetting_ff(A) == 0.9 - 0.8, abs(forgetting_ff(A) - 0.1) < 1e-15]
    # dyadic entries chosen so every hand value below is exactly representable
    B = AccuracyMatrix([[1.0], [0.5, 0.25], [0.5, 0.125, 0.875]])
    # FF: task 1 drops 1.0 -> 0.5, task 2 drops 0.25 -> 0.125
    results += [last_acc(B) == 0.5, avg_acc(B) == 0.625, forgetting_ff(B) == 0.3125]
    C = AccuracyMatrix([[0.5], [0.25, 0.75]], task_weights=[2, 6])
    results += [last_acc(C) == 0.625, avg_acc(C) == 0.5625, forgetting_ff(C) == 0.25]
    assert acceptance(5, "metric oracles on three hand matrices", all(results),
                      f"{sum(results)}/{len(results)} exact matches, two-task FF {forgetting_ff(A)!r}")


def test_c06_component_ordering(grid, acceptance):
    res, elapsed = grid
    checks = _checks(res, "full >= ccl (last)", "full >= pcl (last)", "full >= mk (last)",
                     "ccl >= backbone (last)", "pcl >= backbone (last)", "mk >= backbone (last)",
                     "full - backbone >= 0.02 (last)")
    ok, detail = _verdict(checks)
    assert acceptance(6, "component grid ordering on Last-acc (5 seeds)", ok,
                      f"{detail}; grid wall time this session {elapsed:.0f}s, finished runs reused")


def test_c07_multi_key_task_accuracy(grid, acceptance):
    res, _ = grid
    ok, detail = _verdict(_checks(res, "full > ccl_pcl (task_acc)", "til_last >= last on every run",
                                  "til task_acc = 1"))
    assert acceptance(7, "multi-key vs one-key Task-acc; TIL bounds", ok, detail)


def test_c08_fixed_prompt_probe(grid, acceptance):
    res, _ = grid
    ok, detail = _verdict(_checks(res, "full > wo_pcl (fixed_prompt_last)"))
    assert acceptance(8, "fixed-first-prompt probe, with vs without prompt consistency", ok, detail)


def test_c09_aux_ablation(grid, acceptance):
    res, _ = grid
    ok, detail = _verdict(_checks(res, "full >= wo_caux (last)", "wo_caux >= wo_laux - 0.005 (last)",
                                  "full > wo_laux (last)"))
    assert acceptance(9, "auxiliary head and loss ablation", ok, detail)


def test_c10_regularizer_replacements(grid, acceptance):
    res, _ = grid
    ok, detail = _verdict(_checks(res, "full > edl (last)", "full > roh (last)"))
    assert acceptance(10, "smoothing entropy vs EDL and ROH", ok, detail)


def test_c11_determinism(tmp_path, acceptance):
    cfg = ExperimentConfig(seed=0)
    fresh_cache = tmp_path / "cache"
    a = run_experiment(cfg, tmp_path / "a", cache_dir=fresh_cache)
    b = run_experiment(cfg, tmp_path / "b", cache_dir=fresh_cache)
    names = sorted(p.name for p in a.path.iterdir() if p.name.startswith("matrix") or p.name == "summary.json")
    differing = [n for n in names if (a.path / n).read_bytes() != (b.path / n).read_bytes()]
    ok = not a.cache_hit and b.cache_hit and len(names) >= 2 and not differing
    assert acceptance(11, "identical config and seed give identical bytes", ok,
                      f"{len(names)} files compared ({', '.join(names)}), differing: {differing or 'none'}")
