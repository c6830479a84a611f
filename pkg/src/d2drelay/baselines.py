"""Comparison schemes: direct D2D underlay and a brute-force oracle.

The reference scheme lets each D2D pair talk directly, reusing the RBs of one
relay-aided CUE. The oracle enumerates every binary RB assignment of a small
problem and water-fills the powers of each, which certifies the
dual-decomposition solver on desk-size instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .allocator import (
    AllocationProblem,
    AllocationSolution,
    ProtectionProvider,
    SolverOptions,
    omega_floor,
    solve,
    ue_rates,
)
from .propagation import dbm_to_watt
from .topology import CUE, D2D_TX

__all__ = [
    "D2DLink",
    "ReferenceSolution",
    "OracleResult",
    "OracleGuardError",
    "solve_reference",
    "oracle_solve",
    "rate_gain",
    "RateGain",
]

LN2 = math.log(2.0)
ORACLE_MAX_RBS = 4
ORACLE_MAX_UES = 3


# ---------------------------------------------------------------------------
# reference scheme


@dataclass
class D2DLink:
    pair_tx: int
    shared_cue: int = -1
    rb_set: list = field(default_factory=list)
    power_w: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rate_bps: float = 0.0
    admitted: bool = False


@dataclass
class ReferenceSolution:
    cue_alloc: dict
    d2d_direct: list

    @property
    def d2d_rates(self) -> np.ndarray:
        return np.array([d.rate_bps for d in self.d2d_direct])


def _direct_rate(p, h_dd, noise, i_cue, i_relay, B):
    """Direct D2D rate on the shared RBs.

    The CUE transmits during the first half of the slot and its relay during
    the second, so the receiver sees two interference levels.
    """
    r1 = B * np.log2(1.0 + p * h_dd / (noise + i_cue))
    r2 = B * np.log2(1.0 + p * h_dd / (noise + i_relay))
    return float(0.5 * (r1 + r2).sum())


def _cue_rate(x, p1, p2, h1, h2, noise, i_hop1, i_hop2, B):
    """CUE end-to-end rate with extra interference on each hop."""
    r1 = B * np.log2(1.0 + p1 * h1 / (noise + i_hop1))
    r2 = B * np.log2(1.0 + p2 * h2 / (noise + i_hop2))
    return float((0.5 * x * np.minimum(r1, r2)).sum())


def solve_reference(drop, opts: Optional[SolverOptions] = None, cue_solutions: Optional[dict] = None) -> ReferenceSolution:
    """Direct D2D underlay over relay-aided CUEs.

    CUEs are allocated per relay with :func:`d2drelay.allocator.solve`. D2D
    pairs (by index) scan the CUEs of their relay (by index) and take the
    first one whose RBs they can reuse with both QoS targets met. The D2D
    transmitter uses the largest power, up to its budget split evenly over
    the shared RBs, that keeps the CUE at its target; it is admitted if its
    own direct rate then meets its target. Each CUE hosts at most one pair.

    Parameters
    ----------
    drop : d2drelay.scenario.Drop
    opts : SolverOptions, optional
    cue_solutions : dict, optional
        Precomputed ``{relay: (problem, solution)}`` for the CUE-only problems.
    """
    from .scenario import relay_problem

    cfg, topo, real = drop.config, drop.topology, drop.realization
    B = cfg.rb_bandwidth_hz
    sigma2 = real.sigma2_w
    noise = sigma2 * (1.0 + cfg.i_bar_factor)
    p_max = float(dbm_to_watt(cfg.p_ue_max_dbm))

    if cue_solutions is None:
        cue_solutions = {}
        for l in range(topo.num_relays):
            pb = relay_problem(drop, l, kinds=(CUE,))
            if pb.num_ues == 0:
                continue
            cue_solutions[l] = (pb, solve(pb, None, opts))

    links = []
    for l in range(topo.num_relays):
        pairs = [u for u in topo.users_of(l) if topo.ue_records[u].kind == D2D_TX]
        taken: set = set()
        pb_sol = cue_solutions.get(l)
        for tx in pairs:
            link = D2DLink(pair_tx=tx)
            links.append(link)
            if pb_sol is None:
                continue
            pb, sol = pb_sol
            rx = topo.ue_records[tx].pair
            n_tx, n_rx = topo.ue_node(tx), topo.ue_node(rx)
            n_relay = topo.relay_node(l)
            h_dd = real.gain[n_tx, n_rx]
            for i, cue in enumerate(pb.ue_ids):
                if cue in taken or cue < 0:
                    continue
                rbs = np.where(sol.x[i] > 0)[0]
                if len(rbs) == 0:
                    continue
                n_cue = topo.ue_node(cue)
                x = sol.x[i, rbs]
                p1, p2 = sol.p1[i, rbs], sol.p2[i, rbs]
                h1, h2 = pb.h1[i, rbs], pb.h2[i, rbs]
                g_to_relay = real.gain[n_tx, n_relay][rbs]
                g_to_enb = real.gain[n_tx, 0][rbs]
                i_cue = p1 * real.gain[n_cue, n_rx][rbs]
                i_relay = p2 * real.gain[n_relay, n_rx][rbs]
                hd = h_dd[rbs]

                def cue_ok(scale):
                    pd = scale * p_max / len(rbs)
                    return _cue_rate(x, p1, p2, h1, h2, noise, pd * g_to_relay, pd * g_to_enb, B) >= cfg.qos_cue_bps

                if not cue_ok(0.0):
                    continue
                if cue_ok(1.0):
                    scale = 1.0
                else:
                    lo, hi = 0.0, 1.0
                    for _ in range(60):
                        mid = 0.5 * (lo + hi)
                        lo, hi = (mid, hi) if cue_ok(mid) else (lo, mid)
                    scale = lo
                pd = np.full(len(rbs), scale * p_max / len(rbs))
                rate = _direct_rate(pd, hd, noise, i_cue, i_relay, B)
                if rate >= cfg.qos_d2d_bps:
                    link.shared_cue = cue
                    link.rb_set = [int(n) for n in rbs]
                    link.power_w = pd
                    link.rate_bps = rate
                    link.admitted = True
                    taken.add(cue)
                    break
    return ReferenceSolution(cue_alloc=cue_solutions, d2d_direct=links)


# ---------------------------------------------------------------------------
# oracle


class OracleGuardError(ValueError):
    """Instance too large for exhaustive enumeration."""


@dataclass
class OracleResult:
    sum_rate: float
    solution: Optional[AllocationSolution]
    assignments_checked: int
    feasible: bool


def _linear_cap(problem, protect, u, n, floor):
    """Largest power of UE ``u`` alone on RB ``n`` under both thresholds.

    The margins are read from the provider's own margin functions at a unit
    power, which is exact because they are linear along a single coordinate.
    """
    U, N = problem.num_ues, problem.num_rbs
    e = np.zeros((U, N))
    e[u, n] = 1.0
    if protect is None:
        m1 = m2 = 0.0
    else:
        m1 = float(protect.delta_gain_hop1(e)[n])
        m2 = float(protect.delta_gain_hop2(e)[n])
    r = problem.h1[u, n] / problem.h2[u, n]
    per_w1 = problem.g1_ref[u, n] + m1
    per_w2 = r * problem.g2_ref[n] + m2
    cap = math.inf
    if per_w1 > 0:
        cap = min(cap, problem.i_th1_w[n] / per_w1)
    if per_w2 > 0:
        cap = min(cap, problem.i_th2_w[n] / per_w2)
    return cap


def _fill(level_fn, items, budget):
    """Bisection on one UE's water level so its powers use at most ``budget``.

    ``items`` holds ``(inv_k, cap, r)`` per RB; ``level_fn(level, r)`` maps the
    UE's level to the RB's power before clipping.
    """

    def use(level):
        return sum(min(max(level_fn(level, r) - ik, 0.0), cap) for ik, cap, r in items)

    top = sum(cap for _, cap, _ in items)
    if top <= budget:
        return math.inf
    lo, hi = 0.0, 1.0
    while use(hi) < budget:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if use(mid) > budget:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-12 * hi:
            break
    return lo


class _Assignment:
    """Power optimisation for one fixed assignment, scalar code."""

    def __init__(self, problem, owner, caps, floor):
        self.pb = problem
        self.owner = owner
        self.caps = caps
        self.floor = floor
        self.c = 0.5 * problem.rb_bandwidth_hz / LN2
        self.rbs_of = {u: [n for n, o in enumerate(owner) if o == u] for u in range(problem.num_ues)}

    def ue_powers(self, u, nu, weight):
        """Powers of UE ``u`` for relay price ``nu`` and QoS weight ``weight``.

        The KKT point is ``P_n = clip(weight c / (rho + nu r_n) - 1/k_n, 0, cap)``;
        writing ``rho = weight c / level`` turns the per-UE budget into a
        search over the scalar water level.
        """
        pb = self.pb
        rbs = self.rbs_of[u]
        items = []
        for n in rbs:
            ik = self.floor[u, n] / pb.h1[u, n]
            items.append((ik, self.caps[n], pb.h1[u, n] / pb.h2[u, n]))

        def level_fn(level, r):
            if math.isinf(level):
                den = nu * r
                return math.inf if den == 0 else weight * self.c / den
            den = weight * self.c / level + nu * r
            return weight * self.c / den

        level = _fill(level_fn, items, pb.p_ue_max_w[u])
        return {n: min(max(level_fn(level, r) - ik, 0.0), cap) for n, (ik, cap, r) in zip(rbs, items)}

    def ue_rate(self, u, pw):
        pb = self.pb
        return sum(
            0.5 * pb.rb_bandwidth_hz * math.log2(1.0 + p * pb.h1[u, n] / self.floor[u, n])
            for n, p in pw.items()
        )

    def ue_solve(self, u, nu):
        """Smallest QoS weight meeting the UE's target (bisection on the weight)."""
        q = self.pb.qos_bps[u]
        pw = self.ue_powers(u, nu, 1.0)
        if self.ue_rate(u, pw) >= q:
            return pw, True
        hi = 1e6
        pw_hi = self.ue_powers(u, nu, hi)
        if self.ue_rate(u, pw_hi) < q:
            return pw_hi, False
        lo = 1.0
        for _ in range(200):
            mid = math.sqrt(lo * hi)
            if self.ue_rate(u, self.ue_powers(u, nu, mid)) < q:
                lo = mid
            else:
                hi = mid
            if hi / lo - 1.0 < 1e-13:
                break
        return self.ue_powers(u, nu, hi), True

    def all_powers(self, nu):
        out, ok = {}, True
        for u in range(self.pb.num_ues):
            pw, good = self.ue_solve(u, nu)
            ok &= good
            for n, p in pw.items():
                out[(u, n)] = p
        return out, ok

    def relay_use(self, powers):
        pb = self.pb
        return sum(p * pb.h1[u, n] / pb.h2[u, n] for (u, n), p in powers.items())

    def run(self):
        pb = self.pb
        powers, ok = self.all_powers(0.0)
        if self.relay_use(powers) > pb.p_relay_max_w:
            lo, hi = 0.0, 1.0
            while self.relay_use(self.all_powers(hi)[0]) > pb.p_relay_max_w:
                hi *= 4.0
            for _ in range(300):
                mid = 0.5 * (lo + hi)
                if self.relay_use(self.all_powers(mid)[0]) > pb.p_relay_max_w:
                    lo = mid
                else:
                    hi = mid
                if hi - lo <= 1e-12 * hi:
                    break
            powers, ok = self.all_powers(hi)
        rates = np.zeros(pb.num_ues)
        for (u, n), p in powers.items():
            rates[u] += 0.5 * pb.rb_bandwidth_hz * math.log2(1.0 + p * pb.h1[u, n] / self.floor[u, n])
        ok = ok and bool(np.all(rates >= pb.qos_bps * (1.0 - 1e-9)))
        return powers, rates, ok


def oracle_solve(problem: AllocationProblem, protect: Optional[ProtectionProvider] = None) -> OracleResult:
    """Best binary RB assignment by enumeration, with optimal powers for each.

    Every RB is given to one UE or left idle; for each assignment the powers
    are water-filled under the UE and relay budgets, the per-RB interference
    caps and the QoS targets. Only instances with at most 4 RBs and 3 UEs are
    accepted.
    """
    U, N = problem.num_ues, problem.num_rbs
    if N > ORACLE_MAX_RBS or U > ORACLE_MAX_UES:
        raise OracleGuardError(f"oracle limited to N <= {ORACLE_MAX_RBS}, U <= {ORACLE_MAX_UES}")
    floor = omega_floor(problem, protect)
    best_rate = -math.inf
    best = None
    checked = 0
    for owner in itertools.product(range(-1, U), repeat=N):
        if any(problem.qos_bps[u] > 0 and u not in owner for u in range(U)):
            continue
        checked += 1
        caps = [(_linear_cap(problem, protect, o, n, floor) if o >= 0 else 0.0) for n, o in enumerate(owner)]
        powers, rates, ok = _Assignment(problem, owner, caps, floor).run()
        if not ok:
            continue
        total = float(rates.sum())
        if total > best_rate:
            best_rate = total
            best = (owner, powers)
    if best is None:
        return OracleResult(0.0, None, checked, False)
    owner, powers = best
    x = np.zeros((U, N))
    p = np.zeros((U, N))
    for n, o in enumerate(owner):
        if o >= 0:
            x[o, n] = 1.0
            p[o, n] = powers[(o, n)]
    rates = ue_rates(problem, x, p, floor)
    sol = AllocationSolution(
        x=x, s=p.copy(), omega=floor.copy(), p1=p, p2=p * problem.ratio,
        rate=rates, sum_rate=float(rates.sum()), converged=True, iterations=0,
    )
    return OracleResult(float(rates.sum()), sol, checked, True)


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RateGain:
    percent: float
    undefined: bool = False


def rate_gain(r_prop: float, r_ref: float) -> RateGain:
    """Relative gain of the proposed scheme in percent.

    A zero reference rate gives ``+inf`` (or ``nan`` when both are zero) with
    ``undefined`` set.
    """
    if r_ref == 0:
        return RateGain(math.inf if r_prop > 0 else math.nan, True)
    return RateGain((r_prop - r_ref) / r_ref * 100.0, False)
