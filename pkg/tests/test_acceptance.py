"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from mpq.autodiff import finite_diff_check
from mpq.fixtures import llama_graph, random_toy_net, toy_transformer
from mpq.graphir import Bgemm, Linear, build_graph, partition_sequential
from mpq.perfmodel import (
    CostParams,
    SynthTiming,
    empirical_gains,
    group_perf_vector_m,
    memory_layer_gain,
)
from mpq.sensitivity import (
    FormatRegistry,
    FormatSpec,
    MPAssignment,
    calibrate,
    default_registry,
    mc_loss_mse,
    predict_config_mse,
    quant_noise,
)
from mpq.graphir import config_digits
from mpq.solver import baseline_prefix, baseline_random, random_instance, solve_bb, solve_brute, sweep_tau

M8 = FormatRegistry([FormatSpec("bf16", 7, 2, is_baseline=True), FormatSpec("fp_m8", 8, 1)])
MC_TRIALS = 10_000


@pytest.fixture(scope="module")
def toy_net():
    model, batch = toy_transformer()
    return model, batch, calibrate(model, batch)


def test_c01_gradient_correctness(criterion):
    t0 = time.perf_counter()
    worst = max(finite_diff_check(*random_toy_net(seed), h=1e-5) for seed in range(25))
    dt = time.perf_counter() - t0
    ok = worst < 1e-5 and dt < 30
    criterion(1, ok, f"max rel err {worst:.2e} over 25 nets (< 1e-5), {dt:.1f}s (< 30s)")
    assert ok


def test_c02_noise_variance(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for m in (0, 3, 7):
        f = FormatSpec(f"m{m}", m, 1)
        for z in (1.0, 4.0):
            draws = quant_noise(np.full(10**6, z), f, rng)
            want = z**2 * 2.0 ** (-2 * m) / 12
            worst = max(worst, abs(draws.var() / want - 1))
    dt = time.perf_counter() - t0
    ok = worst < 0.01 and dt < 10
    criterion(2, ok, f"max rel variance error {worst:.2e} (< 1%), {dt:.1f}s")
    assert ok


def test_c03_first_order_prediction(toy_net, criterion):
    model, batch, rep = toy_net
    t0 = time.perf_counter()
    layers = model.layers[::2][:10]
    z_scores, rel = [], []
    for i, vid in enumerate(layers):
        a = MPAssignment({vid: 1})
        est = mc_loss_mse(model, a, batch, MC_TRIALS, seed=100 + i, fmts=M8)
        pred = predict_config_mse(a, rep, M8)
        z_scores.append(abs(est.mean - pred) / est.stderr)
        rel.append(abs(est.mean - pred) / pred)
    dt = time.perf_counter() - t0
    med = float(np.median(rel))
    ok = max(z_scores) <= 3 and med < 0.10 and dt < 300
    criterion(3, ok, f"max |MC-pred|/SE {max(z_scores):.2f} (<= 3), median rel dev {med:.3f} (< 0.10), {dt:.0f}s")
    assert ok


def test_c04_cross_layer_additivity(toy_net, criterion):
    model, batch, _ = toy_net
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(10):
        perm = rng.permutation(model.layers)
        A, B = [int(v) for v in perm[:2]], [int(v) for v in perm[2:4]]
        a = mc_loss_mse(model, MPAssignment({v: 1 for v in A}), batch, MC_TRIALS, 10 + k, M8)
        b = mc_loss_mse(model, MPAssignment({v: 1 for v in B}), batch, MC_TRIALS, 20 + k, M8)
        ab = mc_loss_mse(model, MPAssignment({v: 1 for v in A + B}), batch, MC_TRIALS, 30 + k, M8)
        sigma = math.sqrt(a.stderr**2 + b.stderr**2 + ab.stderr**2)
        worst = max(worst, abs(ab.mean - a.mean - b.mean) / sigma)
    dt = time.perf_counter() - t0
    ok = worst <= 3 and dt < 300
    criterion(4, ok, f"max |MC(A+B) - MC(A) - MC(B)|/sigma {worst:.2f} over 10 pairs (<= 3), {dt:.0f}s")
    assert ok


INSTANCES = [random_instance(s, max_groups=12, max_layers=3) for s in range(200)]


def test_c05_solver_exactness(criterion):
    t0 = time.perf_counter()
    mismatches = 0
    for inst in INSTANCES:
        a, b = solve_brute(inst), solve_bb(inst)
        if (a.choice, a.total_gain, a.total_cost) != (b.choice, b.total_gain, b.total_cost):
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = mismatches == 0 and dt < 60
    criterion(5, ok, f"{mismatches} bb/brute mismatches on 200 instances, {dt:.1f}s")
    assert ok


def test_c06_optimality_dominance(criterion):
    t0 = time.perf_counter()
    violations = strict = 0
    for inst in INSTANCES:
        best = solve_bb(inst).total_gain
        pre = baseline_prefix(inst).total_gain
        rnd = [baseline_random(inst, seed=s).total_gain for s in range(5)]
        violations += (best < pre) + sum(best < r for r in rnd)
        strict += best > pre and all(best > r for r in rnd)
    dt = time.perf_counter() - t0
    ok = violations == 0 and strict >= 1 and dt < 60
    criterion(6, ok, f"{violations} violations, {strict}/200 strictly dominate both, {dt:.1f}s")
    assert ok


def test_c07_et_additivity(criterion):
    t0 = time.perf_counter()
    g = build_graph(llama_graph(n_blocks=2)[0])
    groups = partition_sequential(g)
    params = CostParams(default_registry(), n_tokens=64)
    exact = SynthTiming(groups, g, params, seed=7, interaction_strength=0.3)
    c = empirical_gains(exact.table(), groups, 2)
    rng = np.random.default_rng(7)
    configs = [[int(rng.integers(0, 2 ** len(grp))) for grp in groups] for _ in range(200)]
    exact_misses = sum(sum(c[j].values[p] for j, p in enumerate(cfg)) != exact.full_model_gain(cfg) for cfg in configs)

    jitter = 0.5
    noisy = SynthTiming(groups, g, params, seed=7, interaction_strength=0.3, jitter=jitter)
    cn = empirical_gains(noisy.table(), groups, 2)
    # each group gain and the full-model measurement average `repeats` jittered runs
    sigma = jitter * math.sqrt((len(groups) + 1) / noisy.repeats)
    worst = 0.0
    for k, cfg in enumerate(configs[:20]):
        pred = sum(cn[j].values[p] for j, p in enumerate(cfg))
        worst = max(worst, abs(pred - noisy.measure_full_model(cfg, seed=k)) / sigma)
    dt = time.perf_counter() - t0
    ok = exact_misses == 0 and worst <= 3 and dt < 10
    criterion(7, ok, f"{exact_misses}/200 inexact (jitter 0); max dev {worst:.2f} sigma with jitter, {dt:.2f}s")
    assert ok


def test_c08_partition_golden(criterion):
    t0 = time.perf_counter()
    g = build_graph(llama_graph(n_blocks=3)[0])
    got = [[g.name(v) for v in grp.layers] for grp in partition_sequential(g)]
    want = []
    for i in range(3):
        p = f"blocks.{i}."
        want += [
            [p + n for n in ("q_proj", "k_proj", "v_proj", "qk_matmul", "av_matmul")],
            [p + "o_proj"],
            [p + "gate_proj", p + "up_proj"],
            [p + "down_proj"],
        ]
    want.append(["lm_head"])
    dt = time.perf_counter() - t0
    ok = got == want and dt < 1
    criterion(8, ok, f"{len(got)} groups for 3 blocks match the golden partition, {dt * 1000:.0f}ms")
    assert ok


def test_c09_sweep_monotonicity(toy_net, criterion):
    model, _, rep = toy_net
    t0 = time.perf_counter()
    g = model.graph
    groups = partition_sequential(g)
    fmts = default_registry()
    params = CostParams(fmts, n_tokens=8)
    table = SynthTiming(groups, g, params, seed=3, interaction_strength=0.3, jitter=0.01, ms_per_mac=1e-3).table()
    gains = [v.values for v in empirical_gains(table, groups, len(fmts))]
    taus = [k / 1000 for k in range(8)]
    pts = sweep_tau(groups, gains, rep, fmts, taus)
    monotone = all(b.total_gain >= a.total_gain for a, b in zip(pts, pts[1:]))
    within = all(p.total_cost <= p.tau**2 * rep.mean_sq_loss for p in pts)
    dt = time.perf_counter() - t0
    ok = monotone and within and pts[0].total_cost == 0 and dt < 60
    gains_txt = ", ".join(f"{p.total_gain:.3f}" for p in pts)
    criterion(9, ok, f"gain by tau [{gains_txt}], budgets respected: {within}, {dt:.1f}s")
    assert ok


def test_c10_memory_metric(criterion):
    t0 = time.perf_counter()
    g = build_graph(llama_graph(n_blocks=2)[0])
    fmts = default_registry()
    params = CostParams(fmts)
    bad = 0
    for v in g.quantizable():
        k = g.kind(v)
        want = 0 if isinstance(k, Bgemm) else k.in_features * k.out_features * 1
        bad += memory_layer_gain(k, 1, params) != want
        assert isinstance(k, (Bgemm, Linear))
    checked = 0
    for grp in partition_sequential(g):
        if len(grp) > 4:
            continue
        vec = group_perf_vector_m(grp, g, params).values
        for p in range(len(vec)):
            digits = config_digits(p, len(grp), 2)
            bad += vec[p] != sum(memory_layer_gain(g.kind(v), d, params) for v, d in zip(grp.layers, digits))
            checked += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 1
    criterion(10, ok, f"{bad} mismatches over layers and {checked} group configs, {dt * 1000:.0f}ms")
    assert ok
