"""Acceptance checks, one test per criterion.

Each test records a ``criterion N: PASS|FAIL ...`` line that is printed in
the pytest terminal summary.
"""

import math
import os
import time

import numpy as np
import pytest

from conftest import CRITERIA_LINES, seeded_subproblem
from d2drelay.allocator import SolverOptions, allocate_fixed, solve, verify_kkt
from d2drelay.baselines import oracle_solve
from d2drelay.chance import TradeoffConfig, chance_provider, sensitivity_total, table3_params
from d2drelay.harness import ExperimentSpec, Sweep, format_results, run_experiment
from d2drelay.robustness import UncertaintyModel, cost_of_robustness, robust_provider
from d2drelay.scenario import make_drop, relay_problem
from d2drelay.topology import ScenarioConfig

WORKERS = min(4, os.cpu_count() or 1)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}"
    CRITERIA_LINES.append(line)
    print(line)
    assert ok, line


def pava(y):
    """Non-decreasing least-squares fit (pool adjacent violators)."""
    blocks = [[float(v), 1] for v in y]
    i = 0
    while i < len(blocks) - 1:
        if blocks[i][0] > blocks[i + 1][0]:
            (a, na), (b, nb) = blocks[i], blocks[i + 1]
            blocks[i : i + 2] = [[(a * na + b * nb) / (na + nb), na + nb]]
            i = max(i - 1, 0)
        else:
            i += 1
    return np.concatenate([[v] * n for v, n in blocks])


def test_criterion_1_convergence_speed():
    cfg = ScenarioConfig(i_th_hop1_dbm=-70.0, i_th_hop2_dbm=-70.0)
    opts = SolverOptions(a=1e-3, epsilon=1e-3)
    per_drop, iters = [], []
    t0 = time.perf_counter()
    for k in range(25):
        d = make_drop(cfg, 0, k)
        worst = 0
        for l in range(d.topology.num_relays):
            pb = relay_problem(d, l)
            assert pb.num_ues == 8
            sol = solve(pb, None, opts)
            it = sol.iterations if sol.converged else math.inf
            iters.append(it)
            worst = max(worst, it)
        per_drop.append(worst)
    secs = (time.perf_counter() - t0) / 25
    frac = float(np.mean(np.array(per_drop) <= 50))
    med = float(np.median(iters))
    report(1, frac >= 0.9 and med <= 20,
           f"converged in <= 50 iterations on {frac:.0%} of drops, median {med:g}, max {max(iters):g}, {secs:.2f} s/drop")


def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst, kkt_bad, mismatch = 0.0, 0, 0
    for k in range(20):
        U, N = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        pb = seeded_subproblem(21, k, U, N)
        best = oracle_solve(pb)
        sol = solve(pb)
        if best.feasible != sol.feasible:
            mismatch += 1
            continue
        if best.feasible:
            worst = max(worst, (best.sum_rate - sol.sum_rate) / best.sum_rate)
            kkt_bad += not verify_kkt(pb, sol, tol=1e-4).ok
    secs = time.perf_counter() - t0
    ok = worst <= 0.02 and kkt_bad == 0 and mismatch == 0 and secs < 60
    report(2, ok, f"worst gap {worst:.2%}, KKT failures {kkt_bad}, feasibility mismatches {mismatch}, {secs:.1f} s")


def test_criterion_3_robustness_ordering():
    model = UncertaintyModel.uniform(0.2)
    fam = table3_params("unimodal-symmetric")
    bad = []
    gaps = []
    for k in range(25):
        d = make_drop(ScenarioConfig(), 0, k)
        nom = ch = rob = 0.0
        for l in range(d.topology.num_relays):
            pb = relay_problem(d, l)
            nom += solve(pb).sum_rate
            ch += solve(pb, chance_provider(TradeoffConfig.from_fraction(pb, 0.2, 0.2), fam, model, pb)).sum_rate
            rob += solve(pb, robust_provider(model, pb)).sum_rate
        gaps.append((ch - rob) / rob)
        if not (nom >= ch >= rob):
            bad.append(k)
    report(3, not bad,
           f"ordering nominal >= chance >= robust broken on {len(bad)}/25 drops, "
           f"(chance - robust)/robust in [{min(gaps):.3%}, {max(gaps):.3%}]")


@pytest.mark.parametrize("psi", [0.01, 0.05])
def test_criterion_4_cost_estimate(psi):
    rng = np.random.default_rng(4)
    errs = []
    for k in range(20):
        d = make_drop(ScenarioConfig(), 4, k)
        pb = relay_problem(d, k % 3)
        sp = pb.subset(sorted(rng.choice(pb.num_ues, 3, replace=False)), sorted(rng.choice(pb.num_rbs, 4, replace=False)))
        model = UncertaintyModel.uniform(psi)
        nom = solve(sp)
        prov = robust_provider(model, sp)
        rob = solve(sp, prov)
        if not (nom.feasible and rob.feasible):
            continue
        deltas = (prov.delta_gain_hop1(nom.s), prov.delta_gain_hop2(nom.s), prov.delta_interference())
        errs.append(cost_of_robustness(nom.dual, deltas, nom.sum_rate, rob.sum_rate).relative_error)
    worst = max(errs)
    report(4, worst <= 0.5 and len(errs) >= 15,
           f"psi={psi:.0%}: worst relative error {worst:.1%}, median {np.median(errs):.1%} over {len(errs)} instances")


def test_criterion_5_family_constants():
    ok = (
        (table3_params("bounded-support").eta_plus, table3_params("bounded-support").tau) == (1.0, 0.0)
        and (table3_params("unimodal-bounded").eta_plus, table3_params("unimodal-bounded").tau) == (0.5, 1 / math.sqrt(12))
        and (table3_params("unimodal-symmetric").eta_plus, table3_params("unimodal-symmetric").tau) == (0.0, 1 / math.sqrt(3))
    )
    report(5, ok, "bounded (1, 0), unimodal bounded (1/2, 1/sqrt 12), unimodal symmetric (0, 1/sqrt 3)")


def test_criterion_6_sensitivity():
    pb = relay_problem(make_drop(ScenarioConfig(), 0, 0), 0)
    fam = table3_params("unimodal-symmetric")

    def rate(x, theta):
        tc = TradeoffConfig.from_fraction(pb, theta, 0.5)
        return allocate_fixed(pb, x, chance_provider(tc, fam, None, pb)).sum_rate

    errs, sens = {}, {}
    for th in (0.05, 0.1, 0.2, 0.3, 0.4, 0.5):
        tc = TradeoffConfig.from_fraction(pb, th, 0.5)
        sol = solve(pb, chance_provider(tc, fam, None, pb))
        h = 1e-3 * th
        # measured cost is nominal minus chance rate, the assignment held fixed
        fd = -(rate(sol.x, th + h) - rate(sol.x, th - h)) / (2 * h)
        sens[th] = sensitivity_total(pb, sol, tc, fam)
        errs[th] = abs(sens[th] - fd) / abs(fd)
    worst = max(errs.values())
    ok = worst <= 0.2 and abs(sens[0.1]) > abs(sens[0.5])
    report(6, ok, f"worst relative error {worst:.2e} over theta in [0.05, 0.5], "
                  f"|S(0.1)| = {abs(sens[0.1]):.4g}, |S(0.5)| = {abs(sens[0.5]):.4g}")


def test_criterion_7_distance_trend():
    distances = [20.0, 40.0, 60.0, 80.0, 100.0, 120.0]
    spec = ExperimentSpec(ScenarioConfig(d2d_ring_radius_m=80.0), num_drops=25,
                          sweep=Sweep("d2d_pair_distance", distances))
    metrics = run_experiment(spec, WORKERS)
    gain = np.array([m.rate_gain_pct for m in metrics])
    smooth = pava(gain)
    signs = np.sign(smooth[smooth != 0])
    changes = int(np.sum(signs[1:] != signs[:-1]))
    ok = gain[0] < 0 and gain[-1] > 0 and changes == 1
    shown = ", ".join(f"{d:g} m: {g:+.1f}%" for d, g in zip(distances, gain))
    report(7, ok, f"rate gain {shown}; {changes} sign change(s) after monotone smoothing")


def test_criterion_8_determinism():
    spec = ExperimentSpec(ScenarioConfig(), num_drops=3, master_seed=11,
                          sweep=Sweep("d2d_pair_distance", [40.0, 100.0]))
    a = format_results(run_experiment(spec)).encode()
    b = format_results(run_experiment(spec)).encode()
    c = format_results(run_experiment(spec, workers=2)).encode()
    report(8, a == b == c, f"{len(a)} bytes of CSV identical across repeated and parallel runs")


def test_criterion_9_complexity_scaling():
    per = {}
    for N in (13, 26):
        cfg = ScenarioConfig(num_rbs=N)
        times = []
        for k in range(10):
            pb = relay_problem(make_drop(cfg, 0, k), 0)
            sol = solve(pb, None, SolverOptions(epsilon=0.0, t_max=200, refine_rounds=0, move_candidates=0))
            times.append(sol.seconds_per_iteration)
        per[N] = float(np.median(times))
    ratio = per[26] / per[13]
    report(9, ratio <= 2 * 1.3,
           f"per-iteration time {per[13] * 1e6:.0f} us at N=13, {per[26] * 1e6:.0f} us at N=26, ratio {ratio:.2f} (limit 2.6)")
