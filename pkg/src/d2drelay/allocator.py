"""Joint RB and power allocation at one relay by dual decomposition.

One engine serves the nominal, worst-case and chance-constrained variants:
the variant only changes the :class:`ProtectionProvider` handed to
:func:`solve`.

Each iteration water-fills the power of every (UE, RB) pair for the current
multipliers, gives every RB to the UE with the largest marginal Lagrangian
value ``chi`` and takes one projected subgradient step on the multipliers.
Once the sum-rate settles, the final allocation step keeps the RB assignment
and computes exact powers and multipliers for it (see :func:`allocate_fixed`).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .propagation import second_hop_power

__all__ = [
    "AllocationProblem",
    "AllocationSolution",
    "DualState",
    "ProtectionProvider",
    "NominalProvider",
    "SolverOptions",
    "KKTReport",
    "InfeasibleError",
    "waterfill_power",
    "rb_indicator",
    "marginal_value",
    "capped_value",
    "refine_assignment",
    "improve_by_moves",
    "dual_update",
    "step_weights",
    "solve",
    "allocate_fixed",
    "verify_kkt",
    "omega_floor",
    "ue_rates",
]

LN2 = np.log(2.0)
_BISECT_ITERS = 64
_TINY = 1e-300


class InfeasibleError(RuntimeError):
    """QoS targets cannot be met under the budgets and thresholds."""


@dataclass
class AllocationProblem:
    """Solver input for one relay.

    Shapes: ``U`` UEs by ``N`` RBs. ``g2_ref`` is per RB because the
    second-hop victim is chosen per relay.

    Attributes
    ----------
    h1, h2 : ndarray (U, N)
        First-hop (UE to relay) and second-hop (relay to eNB or D2D receiver) gains.
    g1_ref : ndarray (U, N)
        Cross gain from each UE to its most exposed foreign relay.
    g2_ref : ndarray (N,)
        Cross gain from this relay to the most exposed foreign D2D receiver.
    p_ue_max_w : ndarray (U,)
    p_relay_max_w : float
    i_th1_w, i_th2_w : ndarray (N,)
        Per-RB interference thresholds for both hops.
    qos_bps : ndarray (U,)
    sigma2_w : float
    i_bar_w : ndarray (U, N)
        Estimated interference at each receiver.
    rb_bandwidth_hz : float
    """

    h1: np.ndarray
    h2: np.ndarray
    g1_ref: np.ndarray
    g2_ref: np.ndarray
    p_ue_max_w: np.ndarray
    p_relay_max_w: float
    i_th1_w: np.ndarray
    i_th2_w: np.ndarray
    qos_bps: np.ndarray
    sigma2_w: float
    i_bar_w: np.ndarray
    rb_bandwidth_hz: float = 180e3
    ue_ids: Optional[list] = None

    def __post_init__(self):
        self.h1 = np.atleast_2d(np.asarray(self.h1, dtype=float))
        U, N = self.h1.shape
        self.h2 = np.broadcast_to(np.asarray(self.h2, dtype=float), (U, N)).copy()
        self.g1_ref = np.broadcast_to(np.asarray(self.g1_ref, dtype=float), (U, N)).copy()
        self.g2_ref = np.broadcast_to(np.asarray(self.g2_ref, dtype=float), (N,)).copy()
        self.p_ue_max_w = np.broadcast_to(np.asarray(self.p_ue_max_w, dtype=float), (U,)).copy()
        self.i_th1_w = np.broadcast_to(np.asarray(self.i_th1_w, dtype=float), (N,)).copy()
        self.i_th2_w = np.broadcast_to(np.asarray(self.i_th2_w, dtype=float), (N,)).copy()
        self.qos_bps = np.broadcast_to(np.asarray(self.qos_bps, dtype=float), (U,)).copy()
        self.i_bar_w = np.broadcast_to(np.asarray(self.i_bar_w, dtype=float), (U, N)).copy()
        self.p_relay_max_w = float(self.p_relay_max_w)
        self.sigma2_w = float(self.sigma2_w)
        if self.ue_ids is None:
            self.ue_ids = list(range(U))
        self.validate()

    def validate(self) -> None:
        if np.any(~(self.h1 > 0)) or np.any(~(self.h2 > 0)):
            raise ValueError("direct gains must be positive")
        if np.any(~np.isfinite(self.h1)) or np.any(~np.isfinite(self.h2)):
            raise ValueError("direct gains must be finite")
        if np.any(self.g1_ref < 0) or np.any(self.g2_ref < 0):
            raise ValueError("reference gains must be non-negative")
        if np.any(~(self.p_ue_max_w > 0)) or not self.p_relay_max_w > 0:
            raise ValueError("power budgets must be positive")
        if np.any(~(self.i_th1_w > 0)) or np.any(~(self.i_th2_w > 0)):
            raise ValueError("interference thresholds must be positive")
        if np.any(self.qos_bps < 0):
            raise ValueError("QoS targets must be non-negative")
        if np.any(self.i_bar_w < 0):
            raise ValueError("estimated interference must be non-negative")
        if not self.sigma2_w > 0 or not self.rb_bandwidth_hz > 0:
            raise ValueError("noise power and RB bandwidth must be positive")

    @property
    def num_ues(self) -> int:
        return self.h1.shape[0]

    @property
    def num_rbs(self) -> int:
        return self.h1.shape[1]

    @property
    def ratio(self) -> np.ndarray:
        """``h1 / h2``: relay watts spent per UE watt on the same RB."""
        return self.h1 / self.h2

    def subset(self, ues=None, rbs=None) -> "AllocationProblem":
        """Restrict to a subset of UEs and/or RBs."""
        u = np.arange(self.num_ues) if ues is None else np.asarray(ues)
        n = np.arange(self.num_rbs) if rbs is None else np.asarray(rbs)
        return AllocationProblem(
            h1=self.h1[np.ix_(u, n)],
            h2=self.h2[np.ix_(u, n)],
            g1_ref=self.g1_ref[np.ix_(u, n)],
            g2_ref=self.g2_ref[n],
            p_ue_max_w=self.p_ue_max_w[u],
            p_relay_max_w=self.p_relay_max_w,
            i_th1_w=self.i_th1_w[n],
            i_th2_w=self.i_th2_w[n],
            qos_bps=self.qos_bps[u],
            sigma2_w=self.sigma2_w,
            i_bar_w=self.i_bar_w[np.ix_(u, n)],
            rb_bandwidth_hz=self.rb_bandwidth_hz,
            ue_ids=[self.ue_ids[i] for i in u],
        )


class ProtectionProvider:
    """Protection margins added to the interference constraints.

    The base class is the nominal provider: every margin is zero.

    ``delta_gain_hop1(s)`` and ``delta_gain_hop2(s)`` return per-RB margins in
    watts for the power matrix ``s`` (U, N). ``delta_interference()`` returns
    the (U, N) margin on the interference-plus-noise floor. The two
    ``delta_pow_coeff`` methods return (U, N) coefficients added to the
    reference gains in the water-filling denominator: the derivative of the
    hop-1 margin with respect to ``S`` and of the hop-2 margin with respect to
    ``(h1/h2) S``. ``s`` is the previous iterate, used by providers whose
    margin is not linear.
    """

    def __init__(self, problem: AllocationProblem):
        self.problem = problem

    def delta_gain_hop1(self, s: np.ndarray) -> np.ndarray:
        return np.zeros(self.problem.num_rbs)

    def delta_gain_hop2(self, s: np.ndarray) -> np.ndarray:
        return np.zeros(self.problem.num_rbs)

    def delta_interference(self) -> np.ndarray:
        return np.zeros((self.problem.num_ues, self.problem.num_rbs))

    def delta_pow_coeff_hop1(self, s: Optional[np.ndarray] = None) -> np.ndarray:
        return np.zeros((self.problem.num_ues, self.problem.num_rbs))

    def delta_pow_coeff_hop2(self, s: Optional[np.ndarray] = None) -> np.ndarray:
        return np.zeros((self.problem.num_ues, self.problem.num_rbs))

    @property
    def is_nominal(self) -> bool:
        return type(self) is ProtectionProvider


NominalProvider = ProtectionProvider


@dataclass
class DualState:
    """Lagrange multipliers (SI units) plus the auxiliary variable omega.

    mu (N), rho (U), nu (scalar), psi (N), phi (N), lam (U), varrho (U, N)
    and omega (U, N) in watts.
    """

    mu: np.ndarray
    rho: np.ndarray
    nu: float
    psi: np.ndarray
    phi: np.ndarray
    lam: np.ndarray
    varrho: np.ndarray
    omega: np.ndarray

    def copy(self) -> "DualState":
        return DualState(
            self.mu.copy(), self.rho.copy(), float(self.nu), self.psi.copy(),
            self.phi.copy(), self.lam.copy(), self.varrho.copy(), self.omega.copy(),
        )

    def is_nonnegative(self) -> bool:
        return bool(
            np.all(self.mu >= 0) and np.all(self.rho >= 0) and self.nu >= 0
            and np.all(self.psi >= 0) and np.all(self.phi >= 0)
            and np.all(self.lam >= 0) and np.all(self.varrho >= 0)
        )

    @classmethod
    def zeros(cls, problem: AllocationProblem) -> "DualState":
        U, N = problem.num_ues, problem.num_rbs
        return cls(
            np.zeros(N), np.zeros(U), 0.0, np.zeros(N), np.zeros(N),
            np.zeros(U), np.zeros((U, N)), omega_floor(problem),
        )


@dataclass
class SolverOptions:
    """Solver settings.

    Attributes
    ----------
    a : float
        Step scale; the step at iteration ``t`` is ``a / sqrt(t)``.
    t_max : int
    epsilon : float
        Stop when the sum-rate changes by less than ``epsilon`` times its value.
    mult_init : float
        Initial value of every multiplier, in the solver's normalised units.
    lambda_ceiling : float
        A QoS multiplier above this value certifies infeasibility.
    denom_floor : float
        Floor on the water-filling denominator.
    normalize : bool
        Step every constraint in units relative to its bound (see
        :func:`step_weights`). ``False`` steps in raw SI units.
    refine_rounds : int
        Rounds of assignment refinement after the final allocation (see
        :func:`refine_assignment`); 0 disables it.
    move_candidates : int
        UEs tried per RB in the single-RB move search that follows the
        refinement (see :func:`improve_by_moves`); 0 disables it.
    """

    a: float = 1e-3
    t_max: int = 500
    epsilon: float = 1e-3
    mult_init: float = 1e-3
    lambda_ceiling: float = 1e6
    denom_floor: float = 1e-12
    normalize: bool = True
    refine_rounds: int = 20
    move_candidates: int = 2


@dataclass
class AllocationSolution:
    x: np.ndarray
    s: np.ndarray
    omega: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    rate: np.ndarray
    sum_rate: float
    converged: bool
    iterations: int
    dual: Optional[DualState] = None
    feasible: bool = True
    status: str = "ok"
    history: list = field(default_factory=list)
    iterate_violation: float = 0.0
    loop_seconds: float = 0.0
    floored: bool = False

    @property
    def seconds_per_iteration(self) -> float:
        return self.loop_seconds / max(self.iterations, 1)


def omega_floor(problem: AllocationProblem, protect: Optional[ProtectionProvider] = None) -> np.ndarray:
    """Lower bound on omega: estimated interference, its margin and noise."""
    d = 0.0 if protect is None else protect.delta_interference()
    return problem.i_bar_w + d + problem.sigma2_w


def _coeffs(problem, protect, s_prev):
    if protect is None:
        return problem.g1_ref, np.broadcast_to(problem.g2_ref, problem.h1.shape)
    a1 = problem.g1_ref + protect.delta_pow_coeff_hop1(s_prev)
    a2 = problem.g2_ref[None, :] + protect.delta_pow_coeff_hop2(s_prev)
    return a1, a2


def _denominator(problem, dual, a1, a2):
    r = problem.ratio
    return (
        dual.rho[:, None]
        + dual.nu * r
        + dual.psi[None, :] * a1
        + dual.phi[None, :] * r * a2
    )


def waterfill_power(
    problem: AllocationProblem,
    dual: DualState,
    protect: Optional[ProtectionProvider] = None,
    s_prev: Optional[np.ndarray] = None,
    denom_floor: float = 1e-12,
    return_flag: bool = False,
):
    """Per-(UE, RB) power ``[delta - omega / h1]^+``.

    ``delta = 0.5 B (1 + lam) / ln 2`` divided by
    ``rho + nu h1/h2 + psi (g1 + c1) + phi (h1/h2) (g2 + c2)`` where ``c1``,
    ``c2`` are the provider's protection coefficients.

    Returns
    -------
    ndarray (U, N), and a flag telling whether the denominator floor was hit
    when ``return_flag`` is set.
    """
    a1, a2 = _coeffs(problem, protect, s_prev)
    den = _denominator(problem, dual, a1, a2)
    floored = bool(np.any(den < denom_floor))
    den = np.maximum(den, denom_floor)
    num = 0.5 * problem.rb_bandwidth_hz * (1.0 + dual.lam[:, None]) / LN2
    p = np.maximum(num / den - dual.omega / problem.h1, 0.0)
    return (p, floored) if return_flag else p


def marginal_value(problem: AllocationProblem, dual: DualState, p: np.ndarray) -> np.ndarray:
    """``chi``: the Lagrangian value of giving an RB exclusively to a UE.

    ``0.5 (1 + lam) B [log2(1 + q) - q / ((1 + q) ln 2)]`` with
    ``q = P h1 / omega``. It is zero at ``P = 0`` and increasing in ``P``.
    """
    q = p * problem.h1 / dual.omega
    w = 0.5 * (1.0 + dual.lam[:, None]) * problem.rb_bandwidth_hz
    return w * (np.log1p(q) - q / (1.0 + q)) / LN2


def rb_indicator(problem: AllocationProblem, dual: DualState, p: np.ndarray):
    """Binary RB assignment for candidate powers ``p``.

    Every RB goes to the UE with the largest ``chi`` (lowest index on ties)
    provided ``mu_n <= chi`` and the power is positive; otherwise the RB stays
    idle for this iterate.

    Returns
    -------
    x : ndarray (U, N) of 0/1 floats
    chi : ndarray (U, N)
    """
    chi = marginal_value(problem, dual, p)
    U, N = chi.shape
    best = np.argmax(chi, axis=0)
    top = chi[best, np.arange(N)]
    take = (top > 0) & (dual.mu <= top)
    x = np.zeros((U, N))
    x[best[take], np.arange(N)[take]] = 1.0
    return x, chi


def ue_rates(problem: AllocationProblem, x: np.ndarray, s: np.ndarray, omega: np.ndarray) -> np.ndarray:
    """Per-UE end-to-end rate ``sum_n 0.5 x B log2(1 + S h1 / (x omega))``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(x > 0, s * problem.h1 / np.where(x > 0, x * omega, 1.0), 0.0)
    per_rb = 0.5 * x * problem.rb_bandwidth_hz * np.log2(1.0 + q)
    return per_rb.sum(axis=1)


def step_weights(problem: AllocationProblem, floor: np.ndarray) -> dict:
    """SI step multipliers equivalent to stepping relative violations.

    Dividing the rate by ``B`` and every constraint by its bound ``c`` turns
    a multiplier ``k`` into ``k c / B``. A unit step on the normalised
    multiplier with the normalised subgradient is an SI step of ``B / c**2``
    times the SI subgradient; omega is a primal variable and gets ``c**2 / B``.
    """
    B = problem.rb_bandwidth_hz
    q = np.maximum(problem.qos_bps, 1.0)
    return {
        "mu": B,
        "rho": B / problem.p_ue_max_w**2,
        "nu": B / problem.p_relay_max_w**2,
        "psi": B / problem.i_th1_w**2,
        "phi": B / problem.i_th2_w**2,
        "lam": B / q**2,
        "varrho": B / floor**2,
        "omega": floor**2 / B,
    }


def _unit_scales(problem: AllocationProblem, floor: np.ndarray) -> dict:
    """SI value of one normalised unit of each multiplier (``B / c``)."""
    B = problem.rb_bandwidth_hz
    q = np.maximum(problem.qos_bps, 1.0)
    return {
        "mu": np.full(problem.num_rbs, B),
        "rho": B / problem.p_ue_max_w,
        "nu": B / problem.p_relay_max_w,
        "psi": B / problem.i_th1_w,
        "phi": B / problem.i_th2_w,
        "lam": B / q,
        "varrho": B / floor,
    }


def dual_update(
    dual: DualState,
    problem: AllocationProblem,
    x: np.ndarray,
    s: np.ndarray,
    protect: Optional[ProtectionProvider] = None,
    a: float = 1e-3,
    t: int = 1,
    weights: Optional[dict] = None,
) -> DualState:
    """One projected subgradient step on every multiplier and on omega.

    The step is ``a / sqrt(t)``, times the per-family entry of ``weights``
    when given (see :func:`step_weights`). All subgradients are taken at the
    current state. Multipliers are projected onto ``>= 0`` and omega onto its
    floor ``I_bar + Delta_I + sigma2``.
    """
    if t < 1:
        raise ValueError("iteration index starts at 1")
    step = a / np.sqrt(t)
    w = weights or {}

    def wt(name):
        return w.get(name, 1.0)

    r = problem.ratio
    B = problem.rb_bandwidth_hz
    if protect is None:
        d1 = d2 = 0.0
        floor = omega_floor(problem)
    else:
        d1 = protect.delta_gain_hop1(s)
        d2 = protect.delta_gain_hop2(s)
        floor = omega_floor(problem, protect)

    rates = ue_rates(problem, x, s, dual.omega)
    g_mu = x.sum(axis=0) - 1.0
    g_rho = s.sum(axis=1) - problem.p_ue_max_w
    g_nu = float((r * s).sum() - problem.p_relay_max_w)
    g_psi = (s * problem.g1_ref).sum(axis=0) + d1 - problem.i_th1_w
    g_phi = (r * s * problem.g2_ref[None, :]).sum(axis=0) + d2 - problem.i_th2_w
    g_lam = problem.qos_bps - rates
    g_varrho = floor - dual.omega

    sh = s * problem.h1
    xo = x * dual.omega
    with np.errstate(divide="ignore", invalid="ignore"):
        d_omega = np.where(
            sh > 0,
            0.5 * B * (dual.lam[:, None] + 1.0) * x * sh / (dual.omega * (xo + sh) * LN2),
            0.0,
        ) - dual.varrho

    new = DualState(
        mu=np.maximum(dual.mu + step * wt("mu") * g_mu, 0.0),
        rho=np.maximum(dual.rho + step * wt("rho") * g_rho, 0.0),
        nu=max(dual.nu + step * float(np.mean(wt("nu"))) * g_nu, 0.0),
        psi=np.maximum(dual.psi + step * wt("psi") * g_psi, 0.0),
        phi=np.maximum(dual.phi + step * wt("phi") * g_phi, 0.0),
        lam=np.maximum(dual.lam + step * wt("lam") * g_lam, 0.0),
        varrho=np.maximum(dual.varrho + step * wt("varrho") * g_varrho, 0.0),
        omega=np.maximum(dual.omega - step * wt("omega") * d_omega, floor),
    )
    return new


def _initial_dual(problem, protect, opts: SolverOptions) -> DualState:
    floor = omega_floor(problem, protect)
    U, N = problem.num_ues, problem.num_rbs
    k = opts.mult_init
    if opts.normalize:
        sc = _unit_scales(problem, floor)
    else:
        sc = {
            "mu": np.ones(N), "rho": np.ones(U), "nu": 1.0, "psi": np.ones(N),
            "phi": np.ones(N), "lam": np.ones(U), "varrho": np.ones((U, N)),
        }
    return DualState(
        mu=k * sc["mu"] * np.ones(N),
        rho=k * sc["rho"] * np.ones(U),
        nu=float(k * np.mean(sc["nu"])),
        psi=k * sc["psi"] * np.ones(N),
        phi=k * sc["phi"] * np.ones(N),
        lam=k * sc["lam"] * np.ones(U),
        varrho=k * sc["varrho"] * np.ones((U, N)),
        omega=floor.copy(),
    )


def _relative_violation(problem, x, s, omega, protect) -> float:
    """Largest constraint violation of an iterate, relative to its bound."""
    r = problem.ratio
    d1 = protect.delta_gain_hop1(s) if protect is not None else 0.0
    d2 = protect.delta_gain_hop2(s) if protect is not None else 0.0
    rates = ue_rates(problem, x, s, omega)
    v = [
        np.max(x.sum(axis=0) - 1.0),
        np.max(s.sum(axis=1) / problem.p_ue_max_w - 1.0),
        (r * s).sum() / problem.p_relay_max_w - 1.0,
        np.max(((s * problem.g1_ref).sum(axis=0) + d1) / problem.i_th1_w - 1.0),
        np.max(((r * s * problem.g2_ref).sum(axis=0) + d2) / problem.i_th2_w - 1.0),
        np.max(np.where(problem.qos_bps > 0, 1.0 - rates / np.maximum(problem.qos_bps, 1.0), 0.0)),
    ]
    return float(max(0.0, max(v)))


def solve(
    problem: AllocationProblem,
    protect: Optional[ProtectionProvider] = None,
    opts: Optional[SolverOptions] = None,
    finalize: bool = True,
) -> AllocationSolution:
    """Run the dual-decomposition allocation for one relay.

    Parameters
    ----------
    problem : AllocationProblem
    protect : ProtectionProvider, optional
        ``None`` runs the nominal problem.
    opts : SolverOptions, optional
    finalize : bool
        Apply the final allocation step (exact powers and multipliers for the
        converged RB assignment). With ``False`` the last iterate is returned
        as is, which is generally not feasible.

    Returns
    -------
    AllocationSolution
    """
    opts = opts or SolverOptions()
    U, N = problem.num_ues, problem.num_rbs
    floor = omega_floor(problem, protect)
    weights = step_weights(problem, floor) if opts.normalize else None
    dual = _initial_dual(problem, protect, opts)
    s = np.tile((problem.p_ue_max_w / N)[:, None], (1, N))
    x = np.zeros((U, N))
    history: list = []
    converged = False
    floored_any = False
    status = "ok"
    t = 0
    t0 = time.perf_counter()
    for t in range(1, opts.t_max + 1):
        p, floored = waterfill_power(problem, dual, protect, s, opts.denom_floor, return_flag=True)
        floored_any |= floored
        x, _ = rb_indicator(problem, dual, p)
        s = x * p
        total = float(ue_rates(problem, x, s, dual.omega).sum())
        history.append(total)
        dual = dual_update(dual, problem, x, s, protect, opts.a, t, weights)
        if np.any(dual.lam > opts.lambda_ceiling):
            status = "infeasible: QoS multiplier exceeded its ceiling"
            break
        if t > 1 and abs(history[-1] - history[-2]) < opts.epsilon * max(abs(history[-1]), _TINY):
            converged = True
            break
    loop_seconds = time.perf_counter() - t0
    violation = _relative_violation(problem, x, s, dual.omega, protect)

    if not finalize:
        rates = ue_rates(problem, x, s, dual.omega)
        p1 = np.where(x > 0, s / np.where(x > 0, x, 1.0), 0.0)
        return AllocationSolution(
            x=x, s=s, omega=dual.omega.copy(), p1=p1,
            p2=p1 * problem.ratio, rate=rates, sum_rate=float(rates.sum()),
            converged=converged, iterations=t, dual=dual,
            feasible=violation <= 1e-6, status=status, history=history,
            iterate_violation=violation, loop_seconds=loop_seconds,
            floored=floored_any,
        )

    sol = allocate_fixed(problem, x, protect, dual=dual, repair=True)
    if opts.refine_rounds > 0:
        sol = refine_assignment(problem, sol, protect, opts.refine_rounds)
        if opts.move_candidates > 0:
            sol = improve_by_moves(problem, sol, protect, opts.move_candidates, opts.refine_rounds)
    sol.converged = converged
    sol.iterations = t
    sol.history = history
    sol.iterate_violation = violation
    sol.loop_seconds = loop_seconds
    sol.floored = floored_any
    if status != "ok":
        sol.status = status
        sol.feasible = False
    return sol


# ---------------------------------------------------------------------------
# final allocation for a fixed RB assignment


def _caps(problem, x, a1, a2):
    """Per-(UE, RB) power cap implied by the two interference constraints.

    With one UE per RB both constraints are linear in that UE's power. Also
    returns which hop defines the cap (1 or 2).
    """
    r = problem.ratio
    with np.errstate(divide="ignore"):
        c1 = np.where(a1 > 0, problem.i_th1_w[None, :] / np.where(a1 > 0, a1, 1.0), np.inf)
        c2 = np.where(a2 > 0, problem.i_th2_w[None, :] / np.where(a2 > 0, r * a2, 1.0), np.inf)
    cap = np.minimum(c1, c2)
    which = np.where(c1 <= c2, 1, 2)
    return np.where(x > 0, cap, 0.0), which


class _FixedAssignment:
    """Capped water-filling for one binary RB assignment.

    Power on an assigned RB is ``clip(c w / (rho + nu r) - 1/k, 0, cap)`` with
    ``c = B / (2 ln 2)``, ``k = h1 / omega`` and ``w = 1 + lam``. ``rho`` is
    found per UE, ``nu`` for the relay, ``w`` for UEs whose QoS binds.
    """

    def __init__(self, problem, x, omega, cap, w_max):
        self.pb = problem
        self.x = x > 0
        self.r = problem.ratio
        self.inv_k = omega / problem.h1
        self.cap = cap
        self.c = 0.5 * problem.rb_bandwidth_hz / LN2
        self.w_max = w_max

    def power(self, rho, nu, w):
        den = rho[:, None] + nu * self.r
        with np.errstate(divide="ignore", over="ignore"):
            lvl = np.where(den > 0, self.c * w[:, None] / np.where(den > 0, den, 1.0), np.inf)
        p = np.clip(lvl - self.inv_k, 0.0, self.cap)
        return np.where(self.x, p, 0.0)

    def rates(self, p):
        q = p / self.inv_k
        return (0.5 * self.pb.rb_bandwidth_hz * np.log2(1.0 + q) * self.x).sum(axis=1)

    def rho_for(self, nu, w):
        """Per-UE multiplier of the UE budget by log-space bisection."""
        pb = self.pb
        U = pb.num_ues
        zero = np.zeros(U)
        use0 = self.power(zero, nu, w).sum(axis=1)
        need = use0 > pb.p_ue_max_w * (1.0 + 1e-12)
        rho = zero.copy()
        if not np.any(need):
            return rho
        # at rho_hi every assigned RB is switched off
        k = np.where(self.x, 1.0 / self.inv_k, 0.0)
        hi = np.log(np.maximum((self.c * w[:, None] * k).max(axis=1), 1e-300) * 2.0)
        lo = hi - np.log(1e40)
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            use = self.power(np.exp(mid), nu, w).sum(axis=1)
            over = use > pb.p_ue_max_w
            lo = np.where(over, mid, lo)
            hi = np.where(over, hi, mid)
        rho[need] = np.exp(hi[need])
        return rho

    def inner(self, nu, w):
        rho = self.rho_for(nu, w)
        return rho, self.power(rho, nu, w)

    def qos_weights(self, nu):
        """Raise ``w`` for UEs below their QoS target; returns (w, rho, p, ok)."""
        pb = self.pb
        U = pb.num_ues
        w = np.ones(U)
        rho, p = self.inner(nu, w)
        short = self.rates(p) < pb.qos_bps * (1.0 - 1e-12)
        if not np.any(short):
            return w, rho, p, True
        wmax = np.full(U, self.w_max)
        rho_m, p_m = self.inner(nu, np.where(short, wmax, w))
        reach = self.rates(p_m) >= pb.qos_bps
        ok = bool(np.all(reach | ~short))
        lo = np.zeros(U)
        hi = np.log(wmax)
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            w_try = np.where(short, np.exp(mid), 1.0)
            _, p_try = self.inner(nu, w_try)
            below = self.rates(p_try) < pb.qos_bps
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        w = np.where(short, np.exp(hi), 1.0)
        rho, p = self.inner(nu, w)
        return w, rho, p, ok

    def relay_use(self, p):
        return float((self.r * p).sum())

    def solve(self):
        pb = self.pb
        w, rho, p, ok = self.qos_weights(0.0)
        nu = 0.0
        if self.relay_use(p) > pb.p_relay_max_w * (1.0 + 1e-12):
            k = np.where(self.x, 1.0 / (self.inv_k * self.r), 0.0)
            hi = np.log(max(float((self.c * self.w_max * k).max()), 1e-300) * 2.0)
            lo = hi - np.log(1e40)

            def excess(log_nu):
                _, _, pp, _ = self.qos_weights(np.exp(log_nu))
                return self.relay_use(pp) / pb.p_relay_max_w - 1.0

            if excess(lo) <= 0:
                log_nu = lo
            else:
                log_nu = brentq(excess, lo, hi, xtol=1e-13, rtol=1e-14, maxiter=200)
                # keep the feasible side of the bracket
                step = 1e-12 * max(1.0, abs(log_nu))
                while excess(log_nu) > 1e-12:
                    log_nu += step
                    step *= 2.0
            nu = float(np.exp(log_nu))
            w, rho, p, ok = self.qos_weights(nu)
        return p, rho, nu, w, ok


def _repair_assignment(problem, x, chi):
    """Give an RB to every UE that has none, taking it where it costs least.

    The donor RB must belong to a UE holding at least two RBs or be idle. The
    loss is measured by the difference in ``chi``. Returns the new
    assignment and whether every UE with a positive target got an RB.
    """
    x = x.copy()
    U, N = x.shape
    for _ in range(U):
        counts = x.sum(axis=1)
        starving = [u for u in range(U) if counts[u] == 0 and problem.qos_bps[u] > 0]
        if not starving:
            return x, True
        owner = np.where(x.sum(axis=0) > 0, np.argmax(x, axis=0), -1)
        best = None
        for u in starving:
            for n in range(N):
                o = owner[n]
                if o >= 0 and counts[o] < 2:
                    continue
                loss = (chi[o, n] if o >= 0 else 0.0) - chi[u, n]
                if best is None or loss < best[0]:
                    best = (loss, u, n, o)
        if best is None:
            return x, False
        _, u, n, o = best
        if o >= 0:
            x[o, n] = 0.0
        x[u, n] = 1.0
    return x, bool(np.all((x.sum(axis=1) > 0) | (problem.qos_bps <= 0)))


def allocate_fixed(
    problem: AllocationProblem,
    x: np.ndarray,
    protect: Optional[ProtectionProvider] = None,
    dual: Optional[DualState] = None,
    repair: bool = False,
    w_max: float = 1e6,
) -> AllocationSolution:
    """Optimal powers and multipliers for a binary RB assignment ``x``.

    With one UE per RB the interference constraints reduce to per-RB power
    caps, so the remaining problem is capped water-filling under the UE and
    relay budgets and the QoS targets. The returned multipliers satisfy the
    water-filling and ``chi`` stationarity conditions exactly.

    ``repair`` first hands an RB to every UE without one (see
    :func:`_repair_assignment`) and adds RBs to UEs that still miss their
    target.
    """
    x = (np.asarray(x) > 0).astype(float)
    U, N = problem.num_ues, problem.num_rbs
    floor = omega_floor(problem, protect)
    s_probe = np.ones((U, N))
    a1, a2 = _coeffs(problem, protect, s_probe)
    if dual is None:
        dual = DualState.zeros(problem)

    def chi_of(p, lam):
        d = replace(dual.copy(), lam=lam, omega=floor)
        return marginal_value(problem, d, p)

    if repair:
        # candidate powers at the iterate's multipliers rank the RBs
        probe = dual.copy()
        probe.omega = floor
        p_cand = waterfill_power(problem, probe, protect, s_probe)
        x, _ = _repair_assignment(problem, x, marginal_value(problem, probe, p_cand))

    for _attempt in range(U * N + 1):
        cap, which = _caps(problem, x, a1, a2)
        fa = _FixedAssignment(problem, x, floor, cap, w_max)
        p, rho, nu, w, ok = fa.solve()
        rates = fa.rates(p)
        if ok or not repair:
            break
        # a UE misses its target even at the largest weight: give it another RB
        short = np.where(rates < problem.qos_bps * (1.0 - 1e-9))[0]
        counts = x.sum(axis=1)
        owner = np.where(x.sum(axis=0) > 0, np.argmax(x, axis=0), -1)
        moved = False
        for u in short:
            k_u = problem.h1[u] / floor[u]
            cands = [n for n in range(N) if x[u, n] == 0 and (owner[n] < 0 or (counts[owner[n]] >= 2 and owner[n] not in short))]
            if cands:
                n = max(cands, key=lambda j: k_u[j])
                if owner[n] >= 0:
                    x[owner[n], n] = 0.0
                x[u, n] = 1.0
                moved = True
                break
        if not moved:
            break

    s = p.copy()
    lam = w - 1.0
    r = problem.ratio
    c = 0.5 * problem.rb_bandwidth_hz / LN2
    inv_k = floor / problem.h1
    # multipliers of binding interference caps
    psi = np.zeros(N)
    phi = np.zeros(N)
    base = rho[:, None] + nu * r
    need = c * w[:, None] / (cap + inv_k)
    extra = np.where((x > 0) & (p > 0) & np.isfinite(cap) & (p >= cap * (1 - 1e-12)), need - base, 0.0)
    extra = np.maximum(extra, 0.0)
    for n in range(N):
        u_idx = np.where(x[:, n] > 0)[0]
        if len(u_idx) == 0 or extra[u_idx[0], n] <= 0:
            continue
        u = u_idx[0]
        if which[u, n] == 1:
            psi[n] = extra[u, n] / a1[u, n]
        else:
            phi[n] = extra[u, n] / (r[u, n] * a2[u, n])
    final = DualState(
        mu=np.zeros(N), rho=rho, nu=nu, psi=psi, phi=phi, lam=lam,
        varrho=np.zeros((U, N)), omega=floor.copy(),
    )
    chi = marginal_value(problem, final, p)
    final.mu = (chi * x).sum(axis=0)
    q = p / inv_k
    final.varrho = np.where(x > 0, c * w[:, None] * q / (floor * (1.0 + q)), 0.0)

    rates = ue_rates(problem, x, s, floor)
    gamma = problem.h1 / floor
    p2 = np.where(x > 0, second_hop_power(p, gamma, problem.h2 / floor), 0.0)
    feasible = bool(ok) and bool(np.all(rates >= problem.qos_bps * (1 - 1e-6)))
    return AllocationSolution(
        x=x, s=s, omega=floor.copy(), p1=p.copy(), p2=p2, rate=rates,
        sum_rate=float(rates.sum()), converged=True, iterations=0, dual=final,
        feasible=feasible, status="ok" if feasible else "infeasible: QoS not reachable",
    )


def capped_value(problem: AllocationProblem, dual: DualState, protect: Optional[ProtectionProvider] = None) -> np.ndarray:
    """Per-(UE, RB) Lagrangian value with the interference caps as power bounds.

    ``(1 + lam) 0.5 B log2(1 + P k) - (rho + nu h1/h2) P`` at the power that
    maximises it within ``[0, cap]``, where ``cap`` is the UE's own
    interference cap on the RB. Without caps this equals ``chi``.
    """
    U, N = problem.num_ues, problem.num_rbs
    floor = omega_floor(problem, protect)
    a1, a2 = _coeffs(problem, protect, np.ones((U, N)))
    cap, _ = _caps(problem, np.ones((U, N)), a1, a2)
    c = 0.5 * problem.rb_bandwidth_hz / LN2
    w = 1.0 + dual.lam[:, None]
    price = dual.rho[:, None] + dual.nu * problem.ratio
    inv_k = floor / problem.h1
    with np.errstate(divide="ignore"):
        lvl = np.where(price > 0, c * w / np.where(price > 0, price, 1.0), np.inf)
    p = np.clip(lvl - inv_k, 0.0, cap)
    cost = np.where(price > 0, price * np.where(np.isfinite(p), p, 0.0), 0.0)
    return c * w * np.log1p(p / inv_k) - cost


def refine_assignment(
    problem: AllocationProblem,
    solution: AllocationSolution,
    protect: Optional[ProtectionProvider] = None,
    rounds: int = 20,
) -> AllocationSolution:
    """Re-run the max-value RB rule at the exact multipliers of ``solution``.

    The subgradient iterates settle the assignment before the interference
    and QoS multipliers are accurate. Each round hands every RB to the UE with
    the largest :func:`capped_value` at the current exact multipliers and
    re-solves the powers; a round is kept only if it stays feasible and raises
    the sum-rate.
    """
    best = solution
    seen = {best.x.tobytes()}
    for _ in range(rounds):
        v = capped_value(problem, best.dual, protect)
        U, N = v.shape
        x = np.zeros((U, N))
        top = np.argmax(v, axis=0)
        on = v[top, np.arange(N)] > 0
        x[top[on], np.arange(N)[on]] = 1.0
        if x.tobytes() in seen:
            break
        seen.add(x.tobytes())
        cand = allocate_fixed(problem, x, protect, dual=best.dual, repair=True)
        better = cand.sum_rate > best.sum_rate * (1.0 + 1e-12)
        if (cand.feasible and (better or not best.feasible)):
            best = cand
        else:
            break
    return best


def _moves(x, v):
    """Single-RB reassignments and owner swaps, ranked by estimated gain."""
    U, N = x.shape
    owner = np.where(x.sum(axis=0) > 0, np.argmax(x, axis=0), -1)
    held = np.array([v[owner[n], n] if owner[n] >= 0 else 0.0 for n in range(N)])
    moves = []
    for n in range(N):
        for u in range(U):
            if u != owner[n]:
                moves.append((v[u, n] - held[n], ((n, u),)))
    for n in range(N):
        for m in range(n + 1, N):
            a, b = owner[n], owner[m]
            if a == b or a < 0 or b < 0:
                continue
            gain = v[b, n] + v[a, m] - held[n] - held[m]
            moves.append((gain, ((n, b), (m, a))))
    moves.sort(key=lambda mv: -mv[0])
    return moves


def improve_by_moves(
    problem: AllocationProblem,
    solution: AllocationSolution,
    protect: Optional[ProtectionProvider] = None,
    candidates: int = 2,
    passes: int = 20,
) -> AllocationSolution:
    """Local search over single-RB reassignments and owner swaps.

    Each pass ranks every move by its :func:`capped_value` gain at the
    current multipliers, re-solves the ``candidates * N`` best exactly and
    keeps the best feasible one if it raises the sum-rate. Stops after
    ``passes`` passes or when no move helps.
    """
    best = solution
    if best.dual is None or not best.feasible:
        return best
    budget = candidates * problem.num_rbs
    for _ in range(passes):
        v = capped_value(problem, best.dual, protect)
        top = None
        for _, change in _moves(best.x, v)[:budget]:
            x = best.x.copy()
            for n, u in change:
                x[:, n] = 0.0
                x[u, n] = 1.0
            if np.any((x.sum(axis=1) == 0) & (problem.qos_bps > 0)):
                continue
            cand = allocate_fixed(problem, x, protect, dual=best.dual)
            if not cand.feasible:
                continue
            ref = top if top is not None else best
            if cand.sum_rate > ref.sum_rate * (1.0 + 1e-12):
                top = cand
        if top is None:
            break
        best = top
    return best


# ---------------------------------------------------------------------------
# optimality check


@dataclass
class KKTReport:
    primal: dict
    slackness: dict
    stationarity: float
    assignment_gap: float
    tol: float
    violations: list

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_residual(self) -> float:
        vals = list(self.primal.values()) + list(self.slackness.values()) + [self.stationarity]
        return float(max(vals))


def verify_kkt(
    problem: AllocationProblem,
    solution: AllocationSolution,
    dual: Optional[DualState] = None,
    protect: Optional[ProtectionProvider] = None,
    tol: float = 1e-4,
) -> KKTReport:
    """Check feasibility, complementary slackness and power stationarity.

    Residuals are relative: constraint violations are divided by the bound,
    complementary-slackness products ``|k g|`` by the sum-rate, and the
    power residual by the water level ``P + omega / h1``.
    ``assignment_gap`` reports how far any unassigned UE's ``chi`` exceeds
    ``mu_n`` (relative); it is informational and not part of ``ok``.
    """
    dual = dual if dual is not None else solution.dual
    if dual is None:
        raise ValueError("a dual state is required")
    x, s, omega = solution.x, solution.s, solution.omega
    r = problem.ratio
    floor = omega_floor(problem, protect)
    d1 = protect.delta_gain_hop1(s) if protect is not None else np.zeros(problem.num_rbs)
    d2 = protect.delta_gain_hop2(s) if protect is not None else np.zeros(problem.num_rbs)
    rates = ue_rates(problem, x, s, omega)

    g = {
        "rb_share": x.sum(axis=0) - 1.0,
        "ue_power": s.sum(axis=1) - problem.p_ue_max_w,
        "relay_power": np.array([(r * s).sum() - problem.p_relay_max_w]),
        "interference_hop1": (s * problem.g1_ref).sum(axis=0) + d1 - problem.i_th1_w,
        "interference_hop2": (r * s * problem.g2_ref).sum(axis=0) + d2 - problem.i_th2_w,
        "qos": problem.qos_bps - rates,
        "omega_floor": floor - omega,
    }
    bounds = {
        "rb_share": np.ones(problem.num_rbs),
        "ue_power": problem.p_ue_max_w,
        "relay_power": np.array([problem.p_relay_max_w]),
        "interference_hop1": problem.i_th1_w,
        "interference_hop2": problem.i_th2_w,
        "qos": np.maximum(problem.qos_bps, 1.0),
        "omega_floor": floor,
    }
    mults = {
        "rb_share": dual.mu,
        "ue_power": dual.rho,
        "relay_power": np.array([dual.nu]),
        "interference_hop1": dual.psi,
        "interference_hop2": dual.phi,
        "qos": dual.lam,
        "omega_floor": dual.varrho,
    }
    primal = {k: float(max(0.0, np.max(g[k] / bounds[k]))) for k in g}
    primal["nonneg_power"] = float(max(0.0, np.max(-s / problem.p_ue_max_w[:, None])))
    scale = max(abs(solution.sum_rate), 1.0)
    slack = {k: float(np.max(np.abs(mults[k] * g[k])) / scale) for k in g}

    p1 = np.where(x > 0, s / np.where(x > 0, x, 1.0), 0.0)
    probe = dual.copy()
    p_wf = waterfill_power(problem, probe, protect, s)
    level = p1 + omega / problem.h1
    stat = np.where(x > 0, np.abs(p1 - p_wf) / level, 0.0)
    stationarity = float(stat.max()) if stat.size else 0.0

    chi = marginal_value(problem, probe, p_wf)
    assigned = x.sum(axis=0) > 0
    gap = np.where(assigned[None, :] & (x == 0), (chi - dual.mu[None, :]) / np.maximum(dual.mu[None, :], _TINY), 0.0)
    assignment_gap = float(max(0.0, gap.max())) if gap.size else 0.0

    violations = [f"primal {k}: {v:.3g}" for k, v in primal.items() if v > tol]
    violations += [f"slackness {k}: {v:.3g}" for k, v in slack.items() if v > tol]
    if stationarity > tol:
        violations.append(f"stationarity: {stationarity:.3g}")
    return KKTReport(primal, slack, stationarity, assignment_gap, tol, violations)
