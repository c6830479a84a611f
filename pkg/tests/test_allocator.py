import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import seeded_subproblem, toy_problem
from d2drelay.allocator import (
    AllocationProblem,
    AllocationSolution,
    DualState,
    ProtectionProvider,
    SolverOptions,
    allocate_fixed,
    dual_update,
    marginal_value,
    omega_floor,
    rb_indicator,
    solve,
    step_weights,
    ue_rates,
    verify_kkt,
    waterfill_power,
)
from d2drelay.robustness import UncertaintyModel, robust_provider

B = 180e3


def unit_problem(U=1, N=1, **kw):
    args = dict(
        h1=np.ones((U, N)), h2=np.ones((U, N)), g1_ref=0.0, g2_ref=0.0,
        p_ue_max_w=1.0, p_relay_max_w=10.0, i_th1_w=1.0, i_th2_w=1.0,
        qos_bps=0.0, sigma2_w=1.0, i_bar_w=0.0,
    )
    args.update(kw)
    return AllocationProblem(**args)


def dual(problem, **kw):
    d = DualState.zeros(problem)
    d.omega = omega_floor(problem)
    return replace(d, **kw)


# --- water-filling -----------------------------------------------------------


def test_waterfill_below_floor_is_zero():
    pb = unit_problem()
    d = dual(pb, rho=np.array([1e9]), omega=np.array([[1e4]]))
    assert waterfill_power(pb, d)[0, 0] == 0.0


def test_waterfill_value():
    pb = unit_problem()
    d = dual(pb, rho=np.array([1.0]), lam=np.array([1.0]), omega=np.array([[1e4]]))
    p = waterfill_power(pb, d)[0, 0]
    assert p == pytest.approx(249685.107360013, rel=1e-12)


def test_protection_lowers_power():
    pb = toy_problem(2, 3, seed=1)
    d = dual(pb, rho=np.full(2, 1e6), psi=np.full(3, 1e14), phi=np.full(3, 1e14))
    nominal = waterfill_power(pb, d)
    prot = robust_provider(UncertaintyModel(psi1=0.3, psi2=0.3), pb)
    robust = waterfill_power(pb, d, prot)
    on = nominal > 0
    assert np.all(robust[on] < nominal[on])


def test_zero_multipliers_hit_the_floor_flag():
    pb = unit_problem()
    p, flagged = waterfill_power(pb, dual(pb), return_flag=True)
    assert flagged and np.isfinite(p).all()


# --- RB indicator ------------------------------------------------------------


def test_single_ue_gets_rb():
    pb = unit_problem()
    d = dual(pb)
    x, chi = rb_indicator(pb, d, np.array([[0.5]]))
    assert x[0, 0] == 1.0 and chi[0, 0] > 0


def test_larger_chi_wins():
    pb = unit_problem(U=2, N=1, h1=np.array([[2.0], [1.0]]))
    d = dual(pb)
    p = np.array([[1.0], [1.0]])
    chi = marginal_value(pb, d, p)
    assert chi[0, 0] > chi[1, 0]
    d.mu = np.array([chi[1, 0]])
    x, _ = rb_indicator(pb, d, p)
    assert x[:, 0].tolist() == [1.0, 0.0]
    # exhaustive check of the two possible owners on the Lagrangian value
    assert max(range(2), key=lambda u: chi[u, 0]) == 0


def test_zero_power_leaves_rb_idle():
    pb = unit_problem(U=2, N=2)
    x, _ = rb_indicator(pb, dual(pb), np.zeros((2, 2)))
    assert not x.any()


def test_chi_matches_lagrangian_at_waterfill_power():
    pb = toy_problem(2, 3, seed=2)
    d = dual(pb, rho=np.array([3e5, 1e6]), lam=np.array([0.5, 0.0]))
    p = waterfill_power(pb, d)
    c = 0.5 * B / math.log(2)
    lag = (1 + d.lam[:, None]) * c * np.log1p(p * pb.h1 / d.omega) - d.rho[:, None] * p
    assert np.allclose(marginal_value(pb, d, p), lag, rtol=1e-9)


# --- dual update ---------------------------------------------------------------


def test_slack_constraints_keep_zero_multipliers():
    pb = unit_problem(qos_bps=0.0)
    x = np.ones((1, 1))
    s = np.full((1, 1), 0.1)
    new = dual_update(dual(pb), pb, x, s, a=0.01, t=1)
    assert new.rho[0] == 0 and new.nu == 0 and new.psi[0] == 0 and new.phi[0] == 0
    assert new.mu[0] == 0 and new.lam[0] == 0


def test_overbooked_rb_raises_mu_by_step_times_excess():
    pb = unit_problem(U=2, N=1)
    x = np.array([[1.0], [0.5]])
    s = np.zeros((2, 1))
    a = 0.01
    new = dual_update(dual(pb), pb, x, s, a=a, t=1)
    assert new.mu[0] == pytest.approx(a * 0.5)


def test_exact_qos_leaves_lambda():
    pb = unit_problem()
    x = np.ones((1, 1))
    s = np.full((1, 1), 0.5)
    rate = ue_rates(pb, x, s, omega_floor(pb))[0]
    pb.qos_bps = np.array([rate])
    d = dual(pb, lam=np.array([0.7]))
    new = dual_update(d, pb, x, s, a=0.01, t=4)
    assert new.lam[0] == pytest.approx(0.7, abs=1e-15)


def test_dual_update_needs_positive_iteration():
    pb = unit_problem()
    with pytest.raises(ValueError):
        dual_update(dual(pb), pb, np.ones((1, 1)), np.ones((1, 1)), t=0)


@given(
    st.integers(0, 10_000),
    st.floats(1e-4, 1.0),
    st.integers(1, 50),
    st.booleans(),
)
def test_projection_invariant(seed, a, t, normalized):
    pb = toy_problem(3, 4, seed=seed % 97)
    rng = np.random.default_rng(seed)
    prot = robust_provider(UncertaintyModel.uniform(0.2), pb)
    floor = omega_floor(pb, prot)
    d = DualState(
        mu=rng.uniform(0, 1e5, 4), rho=rng.uniform(0, 1e6, 3), nu=float(rng.uniform(0, 1e5)),
        psi=rng.uniform(0, 1e14, 4), phi=rng.uniform(0, 1e14, 4), lam=rng.uniform(0, 2, 3),
        varrho=rng.uniform(0, 1e18, (3, 4)), omega=floor * rng.uniform(1, 3, (3, 4)),
    )
    x = (rng.uniform(size=(3, 4)) > 0.5).astype(float)
    s = x * rng.uniform(0, 0.3, (3, 4))
    w = step_weights(pb, floor) if normalized else None
    new = dual_update(d, pb, x, s, prot, a=a, t=t, weights=w)
    assert new.is_nonnegative()
    assert np.all(new.omega >= floor)


# --- solve -------------------------------------------------------------------


def test_single_channel_closed_form():
    h, sigma2, pmax = 1e-9, 1e-14, 0.2
    pb = AllocationProblem(
        h1=[[h]], h2=[[h]], g1_ref=0.0, g2_ref=0.0, p_ue_max_w=pmax, p_relay_max_w=1e3,
        i_th1_w=1e-3, i_th2_w=1e-3, qos_bps=0.0, sigma2_w=sigma2, i_bar_w=0.0,
    )
    sol = solve(pb)
    assert sol.s[0, 0] == pytest.approx(pmax, rel=1e-9)
    assert sol.rate[0] == pytest.approx(0.5 * B * math.log2(1 + pmax * h / sigma2), rel=1e-9)
    assert sol.p2[0, 0] == pytest.approx(pmax, rel=1e-9)


def test_solution_invariants(relay0):
    sol = solve(relay0)
    assert np.all(sol.x.sum(axis=0) <= 1)
    assert np.all(sol.s >= 0)
    assert np.all(sol.omega >= relay0.sigma2_w)
    p1 = np.where(sol.x > 0, sol.s / np.where(sol.x > 0, sol.x, 1), 0)
    assert np.allclose(sol.p1, p1)
    assert np.allclose(sol.p2, sol.p1 * relay0.ratio)
    assert sol.sum_rate == pytest.approx(sol.rate.sum())


def test_constraints_hold_at_convergence(relay0):
    for prot in (None, robust_provider(UncertaintyModel.uniform(0.2), relay0)):
        sol = solve(relay0, prot)
        rep = verify_kkt(relay0, sol, protect=prot)
        for k in ("ue_power", "relay_power", "interference_hop1", "interference_hop2"):
            assert rep.primal[k] <= 1e-6, k
        assert sol.feasible


def test_infeasible_qos_is_reported():
    pb = toy_problem(2, 2, seed=3, qos_bps=np.full(2, 50e6))
    sol = solve(pb)
    assert not sol.feasible
    assert sol.status.startswith("infeasible")


def test_zero_provider_matches_nominal_bit_for_bit(relay0):
    a = solve(relay0, None)
    b = solve(relay0, ProtectionProvider(relay0))
    c = solve(relay0, robust_provider(UncertaintyModel(), relay0))
    for other in (b, c):
        assert np.array_equal(a.s, other.s) and np.array_equal(a.x, other.x)
        assert a.history == other.history


def test_solver_is_deterministic(relay0):
    a = solve(relay0)
    b = solve(relay0)
    assert np.array_equal(a.s, b.s) and a.history == b.history


def test_refinement_never_lowers_rate():
    for k in range(6):
        pb = seeded_subproblem(7, k, 2, 3)
        plain = solve(pb, opts=SolverOptions(refine_rounds=0))
        refined = solve(pb)
        if plain.feasible:
            assert refined.sum_rate >= plain.sum_rate * (1 - 1e-12)


@pytest.mark.parametrize("k", range(4))
def test_protection_orders_sum_rate(k):
    pb = seeded_subproblem(11, k, 3, 4)
    rates = [solve(pb, robust_provider(UncertaintyModel.uniform(f), pb)).sum_rate for f in (0.0, 0.1, 0.3)]
    assert rates[0] >= rates[1] >= rates[2]


def test_unfinalized_iterate_is_returned(relay0):
    sol = solve(relay0, opts=SolverOptions(t_max=3), finalize=False)
    assert sol.iterations <= 3
    assert len(sol.history) == sol.iterations


# --- fixed assignment and KKT ---------------------------------------------------


def test_fixed_assignment_meets_qos_and_budgets():
    pb = toy_problem(2, 4, seed=5, qos_bps=np.array([300e3, 300e3]))
    x = np.array([[1, 1, 0, 0], [0, 0, 1, 1]], dtype=float)
    sol = allocate_fixed(pb, x)
    if sol.feasible:
        assert np.all(sol.rate >= pb.qos_bps * (1 - 1e-6))
    assert np.all(sol.s.sum(axis=1) <= pb.p_ue_max_w * (1 + 1e-9))


def test_kkt_passes_on_small_converged_instances():
    for k in range(5):
        pb = seeded_subproblem(3, k, 2, 3)
        sol = solve(pb)
        rep = verify_kkt(pb, sol, tol=1e-4)
        assert rep.ok, rep.violations


def test_kkt_flags_power_over_budget():
    pb = toy_problem(1, 2, seed=0)
    sol = solve(pb)
    bad = AllocationSolution(
        x=np.ones((1, 2)), s=np.full((1, 2), 1.0), omega=sol.omega, p1=np.full((1, 2), 1.0),
        p2=np.full((1, 2), 1.0) * pb.ratio, rate=sol.rate, sum_rate=sol.sum_rate,
        converged=True, iterations=1, dual=sol.dual,
    )
    rep = verify_kkt(pb, bad)
    assert not rep.ok
    assert any("ue_power" in v for v in rep.violations)


def test_kkt_slackness_passes_with_zero_multipliers_on_slack_constraints():
    pb = unit_problem(p_ue_max_w=1.0, p_relay_max_w=100.0, i_th1_w=1.0, i_th2_w=1.0)
    sol = solve(pb)
    assert sol.dual.nu == 0.0 and np.all(sol.dual.psi == 0) and np.all(sol.dual.phi == 0)
    rep = verify_kkt(pb, sol)
    assert rep.slackness["relay_power"] == 0.0
    assert rep.slackness["interference_hop1"] == 0.0
