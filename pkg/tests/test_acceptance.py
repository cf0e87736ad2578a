"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from premap.approx import ApproxConfig, optimize_parameters
from premap.geometry import derive_rng, exact_volume, sample_box
from premap.model import compose_spec, save_network
from premap.oracle import count_unstable, exact_preimage
from premap.quant import QuantProperty, VerdictKind, verify
from premap.refine import RefineConfig, Status, refine_preimage
from premap.relax import (BoundMode, RelaxParams, Sign, SpecBounder, Split, Subregion,
                          concrete_bounds, init_params)

from _gradcheck import max_relative_error
from _nets import SOUNDNESS_NETS, balanced_spec, random_net, soundness_fixture, unit_box

pytestmark = pytest.mark.acceptance

SLACK = 1e-7


def test_soundness_suite(report):
    start = time.perf_counter()
    failures = []
    for i in range(len(SOUNDNESS_NETS)):
        net, box, spec = soundness_fixture(i)
        x = sample_box(box, 100_000, derive_rng(1000 + i, "soundness"))
        pre = spec.satisfied(net.forward(x))
        for mode, target in (("under", 0.9), ("over", 1.1)):
            res = refine_preimage(net, spec, box, RefineConfig(
                target_coverage=target, max_iterations=30,
                approx=ApproxConfig(n_samples=1000, mode=mode)))
            inside = res.union.contains(x)
            bad = np.count_nonzero(inside & ~pre) if mode == "under" \
                else np.count_nonzero(pre & ~inside)
            if bad:
                failures.append((i, mode, int(bad)))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    report("soundness suite", ok, f"{len(SOUNDNESS_NETS)} nets x 2 modes, "
           f"violations {failures or 0}, {elapsed:.1f}s (< 300s)")
    assert ok


def split_region(net, box, x):
    """Region with two splits: the most balanced unstable neuron of the first
    and of the last ReLU layer, each fixed to its majority sign."""
    pre = net.pre_activations(x)
    nb = concrete_bounds(net, Subregion(box))
    splits = []
    for layer in sorted({net.relu_layers[0], net.relu_layers[-1]}):
        unstable = np.flatnonzero(nb.unstable(layer))
        if unstable.size == 0:
            continue
        frac = np.mean(pre[layer][:, unstable] >= 0, axis=0)
        j = int(unstable[np.argmin(np.abs(frac - 0.5))])
        sign = Sign.NONNEG if np.mean(pre[layer][:, j] >= 0) >= 0.5 else Sign.NEG
        splits.append(Split(layer, j, sign))
    return Subregion(box, tuple(splits))


def test_bound_sandwich(report):
    worst, cases = -np.inf, 0
    for i in range(len(SOUNDNESS_NETS)):
        net, box, spec = soundness_fixture(i)
        g = compose_spec(net, spec)
        x = sample_box(box, 10_000, derive_rng(i, "sandwich"))
        for region in (Subregion(box), split_region(net, box, x)):
            nb = concrete_bounds(g, region)
            xs = x[region.true_region_mask(net, x)]
            truth = g.forward(xs)
            base = init_params(g, region, nb)
            rng = np.random.default_rng(i)
            random_beta = RelaxParams(base.alpha, rng.uniform(0.0, 1.0, base.beta.shape))
            cfg_u = ApproxConfig(n_samples=2000, mode="under", opt_steps=10)
            cfg_o = ApproxConfig(n_samples=2000, mode="over", opt_steps=10)
            opt_lo = optimize_parameters(g, region, cfg_u, base, samples=xs[:2000],
                                         volume=box.volume, bounds=nb)
            opt_up = optimize_parameters(g, region, cfg_o, base, samples=xs[:2000],
                                         volume=box.volume, bounds=nb)
            lower = SpecBounder(g, region, nb, BoundMode.LOWER)
            upper = SpecBounder(g, region, nb, BoundMode.UPPER)
            for p_lo, p_up in ((base, base), (opt_lo, opt_up), (random_beta, random_beta)):
                lo = lower.evaluate(p_lo).evaluate(xs)
                up = upper.evaluate(p_up).evaluate(xs)
                worst = max(worst, float(np.max(lo - truth)), float(np.max(truth - up)))
                cases += 1
    ok = worst <= SLACK
    report("bound sandwich", ok, f"{cases} (region, params) cases, "
           f"max violation {worst:.2e} (<= {SLACK:g})")
    assert ok


def test_gradient_check(report):
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for widths, seed in (([2, 16, 3], 1), ([3, 12, 12, 3], 2), ([4, 30, 30, 2], 3)):
        net = random_net(widths, seed)
        box = unit_box(widths[0])
        spec = balanced_spec(net, box)
        g = compose_spec(net, spec)
        x = sample_box(box, 2000, seed)
        region = split_region(net, box, x)
        nb = concrete_bounds(g, region)
        assert nb.num_unstable() <= 100
        rng = np.random.default_rng(seed)
        p = init_params(g, region, nb)
        p = RelaxParams(tuple(rng.uniform(0.05, 0.95, a.shape) for a in p.alpha),
                        rng.uniform(0.05, 0.5, p.beta.shape))
        for mode in ("under", "over"):
            cfg = ApproxConfig(n_samples=500, mode=mode)
            bounder = SpecBounder(g, region, nb, BoundMode.for_mode(cfg.mode))
            err, n = max_relative_error(bounder, p, x[:500], box.volume, cfg)
            worst, checked = max(worst, err), checked + n
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60
    report("gradient check", ok, f"{checked} alpha/beta entries, max rel. error "
           f"{worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok


def sample_polytope(p, n, seed):
    rng = derive_rng(seed, "containment")
    out, have = [], 0
    for _ in range(200):
        x = sample_box(p.box, 4 * n, rng)
        x = x[p.contains(x)]
        out.append(x)
        have += x.shape[0]
        if have >= n:
            break
    return np.concatenate(out)[:n]


def test_parking_oracle_equivalence(report, parking_net, parking_box):
    from premap.model import OutputSpec
    details, ok = [], True
    for label in range(4):
        spec = OutputSpec.argmax(label, 4)
        cfg = RefineConfig(target_coverage=0.9, max_iterations=200)
        start = time.perf_counter()
        res = refine_preimage(parking_net, spec, parking_box, cfg)
        elapsed = time.perf_counter() - start
        exact = exact_preimage(parking_net, parking_box, spec)
        violations = 0
        for k, p in enumerate(res.union.polytopes):
            if exact_volume(p) <= 0:
                continue
            xs = sample_polytope(p, 10_000, k)
            violations += int(np.count_nonzero(~exact.union.contains(xs)))
            violations += int(np.count_nonzero(~spec.satisfied(parking_net.forward(xs))))
        mc = res.stats.coverage_trace[-1]
        exact_cov = sum(exact_volume(p) for p in res.union.polytopes) / exact.area
        cov_x = sample_box(parking_box, cfg.coverage_factor * cfg.approx.n_samples,
                           derive_rng(cfg.seed, "coverage", "root"))
        n_pre = int(np.count_nonzero(spec.satisfied(parking_net.forward(cov_x))))
        se = np.sqrt(exact_cov * (1 - exact_cov) / n_pre)
        good = (res.stats.status is Status.TARGET_MET and mc >= 0.9 and elapsed < 60
                and violations == 0 and abs(exact_cov - mc) <= 3 * se)
        ok &= good
        details.append(f"class {label}: {res.stats.iterations} it, MC {mc:.4f}, "
                       f"exact {exact_cov:.4f} (3SE {3 * se:.4f}), {violations} viol, "
                       f"{elapsed:.1f}s")
    report("parking oracle equivalence", ok, "; ".join(details))
    assert ok


def test_monotone_refinement(report):
    bad, runs = [], 0
    for i in range(10):
        net, box, spec = soundness_fixture(i)
        steps = [0] + ([20] if i < 3 else [])
        for opt in steps:
            res = refine_preimage(net, spec, box, RefineConfig(
                target_coverage=1.0, max_iterations=100,
                approx=ApproxConfig(n_samples=1000, opt_steps=opt)))
            trace = np.array(res.stats.coverage_trace)
            runs += 1
            if np.any(np.diff(trace) < 0):
                bad.append((i, opt))
    ok = not bad
    report("monotone refinement", ok, f"{runs} runs (10 fixtures with opt_steps=0, 3 with "
           f"opt_steps=20, 100 iterations), decreasing traces: {bad or 'none'}")
    assert ok


QUANT_NETS = [([2, 6, 3], s) for s in (0, 1, 2, 3, 5)] + [([2, 5, 5, 3], s) for s in (1, 3, 4, 5, 6)]


def test_quantitative_verification(report):
    start = time.perf_counter()
    wrong = []
    cases = 0
    for widths, seed in QUANT_NETS:
        net = random_net(widths, seed)
        box = unit_box(2)
        spec = balanced_spec(net, box)
        assert count_unstable(net, box) <= 12
        exact = exact_preimage(net, box, spec).area / box.volume
        for delta in (-0.05, 0.05):
            p = exact + delta
            v = verify(net, QuantProperty(box, (), spec, p), RefineConfig(
                max_iterations=500, split_strategy="relu",
                approx=ApproxConfig(n_samples=1000)))
            expected = VerdictKind.TRUE if exact >= p else VerdictKind.FALSE
            cases += 1
            if v.result is not expected:
                wrong.append((widths, seed, delta, v.result.value))
    elapsed = time.perf_counter() - start
    ok = not wrong and elapsed < 120
    report("quantitative verification", ok, f"{cases - len(wrong)}/{cases} verdicts match "
           f"the oracle (p = exact +- 0.05, {len(QUANT_NETS)} nets), {elapsed:.1f}s (< 120s)")
    assert ok


SCALES = {4: [2, 1, .1, .05], 5: [2, 1, .1, .05, .05], 6: [2, 1.5, .1, .05, .05, .02]}


def iterations_to_target(net, box, spec, heuristic):
    res = refine_preimage(net, spec, box, RefineConfig(
        target_coverage=0.75, max_iterations=150, input_heuristic=heuristic,
        approx=ApproxConfig(n_samples=2000)))
    return res.stats.iterations if res.stats.status is Status.TARGET_MET else np.inf


def test_smoothed_split_benefit(report):
    rows, wins = [], 0
    for seed in range(5):
        d = 4 + seed % 3
        net = random_net([d, 16, 3], 100 + seed, feature_scale=SCALES[d])
        box = unit_box(d)
        spec = balanced_spec(net, box)
        smooth = iterations_to_target(net, box, spec, "smoothed")
        longest = iterations_to_target(net, box, spec, "longest_edge")
        wins += smooth <= longest and np.isfinite(smooth)
        rows.append(f"{smooth}/{longest}")
    ok = wins >= 4
    report("smoothed split benefit", ok, f"smoothed <= longest-edge in {wins}/5 "
           f"(iterations smoothed/longest: {', '.join(rows)})")
    assert ok


BETA_NETS = [([2, 6, 6, 3], 301), ([3, 8, 6, 3], 302), ([2, 8, 4, 2], 302)]


def test_beta_benefit(report):
    rows, good = [], 0
    for widths, seed in BETA_NETS:
        net = random_net(widths, seed)
        box = unit_box(widths[0])
        spec = balanced_spec(net, box)
        cov = {}
        for beta in (True, False):
            cfg = RefineConfig(target_coverage=1.0, max_iterations=30, split_strategy="relu",
                               approx=ApproxConfig(n_samples=1000, optimize_beta=beta))
            cov[beta] = refine_preimage(net, spec, box, cfg).stats.coverage_trace[-1]
        cov_x = sample_box(box, 4000, derive_rng(0, "coverage", "root"))
        n_pre = int(np.count_nonzero(spec.satisfied(net.forward(cov_x))))
        se = np.sqrt(cov[False] * (1 - cov[False]) / n_pre)
        good += cov[True] >= cov[False] - se
        rows.append(f"{cov[True]:.4f} vs {cov[False]:.4f} (SE {se:.4f})")
    ok = good == len(BETA_NETS)
    report("beta optimisation benefit", ok, f"{good}/3 with beta >= beta=0 - 1 SE: "
           + "; ".join(rows))
    assert ok


def run_cli(args, hashseed):
    env = dict(os.environ, PYTHONHASHSEED=str(hashseed))
    return subprocess.run([sys.executable, "-m", "premap.cli", *args], env=env,
                          capture_output=True, text=True).returncode


def test_cli_determinism(report, tmp_path, parking_net, parking_box):
    from premap.model import OutputSpec
    fixtures = [
        (parking_net, parking_box, OutputSpec.argmax(0, 4), ["--mode", "under"]),
        (parking_net, parking_box, OutputSpec.argmax(2, 4), ["--mode", "over"]),
        (random_net([2, 8, 8, 3], 301), unit_box(2), None, ["--split", "relu"]),
        (random_net([3, 16, 3], 5), unit_box(3), None, ["--mode", "under"]),
        (random_net([4, 12, 12, 2], 6), unit_box(4), None, ["--mode", "over"]),
    ]
    same = 0
    for k, (net, box, spec, extra) in enumerate(fixtures):
        spec = spec or balanced_spec(net, box)
        model = tmp_path / f"net{k}.json"
        save_network(net, model)
        prob = tmp_path / f"prob{k}.json"
        prob.write_text(json.dumps({
            "input_box": box.to_dict(),
            "output_constraints": [{"c": c.tolist(), "d": float(d)}
                                   for c, d in zip(spec.c, spec.d)]}))
        outputs = []
        for run in range(2):
            out = tmp_path / f"out{k}_{run}.json"
            code = run_cli(["approx", "--model", str(model), "--problem", str(prob),
                            "--out", str(out), "--samples", "1000", "--max-iters", "10",
                            "--seed", "7", *extra], hashseed=run + 1)
            stats = json.loads((tmp_path / f"out{k}_{run}.json.stats.json").read_text())
            stats.pop("wall_ms")
            outputs.append((code, out.read_bytes(), stats))
        same += outputs[0] == outputs[1]
    ok = same == len(fixtures)
    report("CLI determinism", ok, f"{same}/{len(fixtures)} fixtures byte-identical "
           "(wall_ms excluded)")
    assert ok
