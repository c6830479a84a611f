"""Probabilistic interference constraints via Bernstein approximations.

Instead of protecting against every gain inside the uncertainty set, the
interference thresholds may be violated with a small probability ``theta``.
For gain errors ``g_hat * xi`` with ``xi`` in [-1, 1] drawn from a known
family, the chance constraint is replaced by the convex, safe margin

    sum eta+ S g_hat + sqrt(2 ln(1/theta)) * sqrt(sum tau**2 (S g_hat)**2)

where ``(eta+, tau)`` depend on the family.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .allocator import AllocationProblem, AllocationSolution, DualState, ProtectionProvider
from .robustness import UncertaintyModel, first_order_cost, protection_interference

__all__ = [
    "BernsteinParams",
    "TradeoffConfig",
    "FAMILIES",
    "table3_params",
    "bernstein_protection_hop1",
    "bernstein_protection_hop2",
    "ChanceProvider",
    "chance_provider",
    "sensitivity_theta",
    "sensitivity_total",
    "cost_estimate_chance",
    "chance_margins",
]

BOUNDED = "bounded-support"
UNIMODAL_BOUNDED = "unimodal-bounded"
UNIMODAL_SYMMETRIC = "unimodal-symmetric"
FAMILIES = (BOUNDED, UNIMODAL_BOUNDED, UNIMODAL_SYMMETRIC)
_ALIASES = {
    "bounded": BOUNDED,
    "bounded-support": BOUNDED,
    "unimodal-bounded": UNIMODAL_BOUNDED,
    "unimodal": UNIMODAL_BOUNDED,
    "unimodal-symmetric": UNIMODAL_SYMMETRIC,
    "symmetric": UNIMODAL_SYMMETRIC,
    "gaussian": UNIMODAL_SYMMETRIC,
}


@dataclass(frozen=True)
class BernsteinParams:
    eta_plus: float
    tau: float
    family: str

    def __post_init__(self):
        if not -1.0 <= self.eta_plus <= 1.0:
            raise ValueError("eta_plus must lie in [-1, 1]")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


_TABLE = {
    BOUNDED: (1.0, 0.0),
    UNIMODAL_BOUNDED: (0.5, 1.0 / math.sqrt(12.0)),
    UNIMODAL_SYMMETRIC: (0.0, 1.0 / math.sqrt(3.0)),
}


def table3_params(family: str) -> BernsteinParams:
    """``(eta+, tau)`` for a distribution family of the normalised error.

    ``bounded-support`` gives (1, 0), ``unimodal-bounded`` (1/2, 1/sqrt(12))
    and ``unimodal-symmetric`` (0, 1/sqrt(3)).
    """
    key = _ALIASES.get(str(family).strip().lower())
    if key is None:
        raise ValueError(f"unknown distribution family {family!r}")
    eta, tau = _TABLE[key]
    return BernsteinParams(eta, tau, key)


def _check_theta(theta) -> np.ndarray:
    th = np.asarray(theta, dtype=float)
    if np.any(~((th > 0) & (th < 1))):
        raise ValueError("violation probability must lie in (0, 1)")
    return th


def _param_arrays(params, U: int):
    if isinstance(params, BernsteinParams):
        return np.full(U, params.eta_plus), np.full(U, params.tau)
    eta = np.array([p.eta_plus for p in params], dtype=float)
    tau = np.array([p.tau for p in params], dtype=float)
    if len(eta) != U:
        raise ValueError("need one parameter set per UE")
    return eta, tau


def _bernstein(y, theta, eta, tau):
    """Margin for error-scaled powers ``y = S g_hat`` of shape (U,) or (U, N)."""
    th = _check_theta(theta)
    y = np.asarray(y, dtype=float)
    e = eta if y.ndim == 1 else eta[:, None]
    t = tau if y.ndim == 1 else tau[:, None]
    lin = e * y
    quad = np.sqrt(((t * y) ** 2).sum(axis=0))
    return lin.sum(axis=0) + np.sqrt(2.0 * np.log(1.0 / th)) * quad


def bernstein_protection_hop1(s, ghat1, theta1, params: Union[BernsteinParams, Sequence[BernsteinParams]]):
    """Hop-1 margin in watts for powers ``s`` (U,) or (U, N)."""
    s = np.asarray(s, dtype=float)
    eta, tau = _param_arrays(params, s.shape[0])
    out = _bernstein(s * np.asarray(ghat1, dtype=float), theta1, eta, tau)
    return float(out) if np.ndim(out) == 0 else out


def bernstein_protection_hop2(s, ghat2, theta2, params, h_ratios):
    """Hop-2 margin; powers are weighted by ``h1 / h2``."""
    s = np.asarray(s, dtype=float)
    eta, tau = _param_arrays(params, s.shape[0])
    y = np.asarray(h_ratios, dtype=float) * s * np.asarray(ghat2, dtype=float)
    out = _bernstein(y, theta2, eta, tau)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class TradeoffConfig:
    """Violation probabilities and error half-widths.

    Attributes
    ----------
    theta1, theta2 : float or ndarray (N,)
    g_hat1 : ndarray (U, N)
        Error half-width of each UE's hop-1 reference gain.
    g_hat2 : ndarray (N,) or (U, N)
        Error half-width of the relay's hop-2 reference gain.
    """

    theta1: object
    theta2: object
    g_hat1: np.ndarray
    g_hat2: np.ndarray

    def __post_init__(self):
        _check_theta(self.theta1)
        _check_theta(self.theta2)
        self.g_hat1 = np.asarray(self.g_hat1, dtype=float)
        self.g_hat2 = np.asarray(self.g_hat2, dtype=float)
        if np.any(self.g_hat1 < 0) or np.any(self.g_hat2 < 0):
            raise ValueError("error half-widths must be non-negative")

    @classmethod
    def from_fraction(cls, problem: AllocationProblem, theta, fraction: float) -> "TradeoffConfig":
        """Half-widths as a fraction of the nominal reference gains."""
        return cls(theta, theta, fraction * problem.g1_ref, fraction * problem.g2_ref)


class ChanceProvider(ProtectionProvider):
    """Bernstein margins on the gains and the worst-case interference margin.

    ``linearization="l1"`` uses the coefficient ``g_hat (eta+ + k tau)`` for
    every UE, i.e. the bound ``||y||_2 <= ||y||_1`` applied to the square-root
    term (``k = sqrt(2 ln(1/theta))``). It equals the exact derivative when a
    single UE transmits on the RB. ``"gradient"`` differentiates the margin at
    the previous iterate instead and falls back to the ``l1`` value on RBs
    with no power.
    """

    def __init__(self, tradeoff: TradeoffConfig, params, model: Optional[UncertaintyModel], problem: AllocationProblem, linearization: str = "l1"):
        super().__init__(problem)
        if linearization not in ("l1", "gradient"):
            raise ValueError("linearization must be 'l1' or 'gradient'")
        U, N = problem.num_ues, problem.num_rbs
        self.tradeoff = tradeoff
        self.params = params
        self.model = model
        self.linearization = linearization
        self.eta, self.tau = _param_arrays(params, U)
        self.th1 = np.broadcast_to(_check_theta(tradeoff.theta1), (N,))
        self.th2 = np.broadcast_to(_check_theta(tradeoff.theta2), (N,))
        self.gh1 = np.broadcast_to(tradeoff.g_hat1, (U, N))
        self.gh2 = np.broadcast_to(tradeoff.g_hat2, (U, N))
        self.k1 = np.sqrt(2.0 * np.log(1.0 / self.th1))
        self.k2 = np.sqrt(2.0 * np.log(1.0 / self.th2))
        if model is None:
            self._d_i = np.zeros((U, N))
        else:
            self._d_i = np.broadcast_to(protection_interference(model, problem.i_bar_w), (U, N)).copy()
        ep = self.eta[:, None]
        self._l1_1 = self.gh1 * (ep + self.k1[None, :] * self.tau[:, None])
        self._l1_2 = self.gh2 * (ep + self.k2[None, :] * self.tau[:, None])

    def delta_gain_hop1(self, s):
        return bernstein_protection_hop1(s, self.gh1, self.th1, self.params)

    def delta_gain_hop2(self, s):
        return bernstein_protection_hop2(s, self.gh2, self.th2, self.params, self.problem.ratio)

    def delta_interference(self):
        return self._d_i

    def _gradient(self, y, gh, k, l1):
        t = self.tau[:, None]
        norm = np.sqrt(((t * y) ** 2).sum(axis=0))
        with np.errstate(divide="ignore", invalid="ignore"):
            d = self.eta[:, None] * gh + k[None, :] * np.where(
                norm[None, :] > 0, t**2 * y * gh / norm[None, :], 0.0
            )
        return np.where(norm[None, :] > 0, d, l1)

    def delta_pow_coeff_hop1(self, s=None):
        if self.linearization == "l1" or s is None:
            return self._l1_1
        return self._gradient(s * self.gh1, self.gh1, self.k1, self._l1_1)

    def delta_pow_coeff_hop2(self, s=None):
        if self.linearization == "l1" or s is None:
            return self._l1_2
        y = self.problem.ratio * s * self.gh2
        return self._gradient(y, self.gh2, self.k2, self._l1_2)


def chance_provider(tradeoff: TradeoffConfig, params, model: Optional[UncertaintyModel], problem: AllocationProblem, linearization: str = "l1") -> ProtectionProvider:
    """Provider for the chance-constrained problem.

    Zero error half-widths with no interference margin give the nominal
    provider.
    """
    no_gain_error = not (np.any(tradeoff.g_hat1 > 0) or np.any(tradeoff.g_hat2 > 0))
    if no_gain_error and (model is None or not np.any(np.asarray(model.upsilon) > 0)):
        return ProtectionProvider(problem)
    return ChanceProvider(tradeoff, params, model, problem, linearization)


def sensitivity_theta(hop: int, s, ghat, theta, params, multiplier, h_ratios=None) -> float:
    """Derivative of the rate cost with respect to the violation probability.

    ``-k* sqrt(sum tau**2 (w S g_hat)**2) / (theta sqrt(2 ln(1/theta)))`` for
    one RB, where ``k*`` is the optimal multiplier of the hop's interference
    constraint and ``w`` is ``h1/h2`` on hop 2. Never positive.
    """
    if hop not in (1, 2):
        raise ValueError("hop must be 1 or 2")
    th = float(theta)
    if th == 1.0:
        raise ValueError("sensitivity is singular at theta = 1")
    _check_theta(th)
    s = np.asarray(s, dtype=float)
    _, tau = _param_arrays(params, s.shape[0])
    y = s * np.asarray(ghat, dtype=float)
    if hop == 2:
        if h_ratios is None:
            raise ValueError("hop 2 needs the h1/h2 ratios")
        y = y * np.asarray(h_ratios, dtype=float)
    t = tau if y.ndim == 1 else tau[:, None]
    quad = np.sqrt(((t * y) ** 2).sum(axis=0))
    val = -np.asarray(multiplier, dtype=float) * quad / (th * np.sqrt(2.0 * np.log(1.0 / th)))
    return float(np.sum(val))


def sensitivity_total(problem: AllocationProblem, solution: AllocationSolution, tradeoff: TradeoffConfig, params) -> float:
    """Sum of both hops' sensitivities over all RBs for a common ``theta``."""
    th1 = np.broadcast_to(np.asarray(tradeoff.theta1, dtype=float), (problem.num_rbs,))
    th2 = np.broadcast_to(np.asarray(tradeoff.theta2, dtype=float), (problem.num_rbs,))
    if not (np.all(th1 == th1[0]) and np.all(th2 == th1[0])):
        raise ValueError("sensitivity_total expects one theta for every RB and hop")
    dual = solution.dual
    U, N = problem.num_ues, problem.num_rbs
    gh1 = np.broadcast_to(tradeoff.g_hat1, (U, N))
    gh2 = np.broadcast_to(tradeoff.g_hat2, (U, N))
    s1 = sensitivity_theta(1, solution.s, gh1, th1[0], params, dual.psi)
    s2 = sensitivity_theta(2, solution.s, gh2, th1[0], params, dual.phi, problem.ratio)
    return s1 + s2


def chance_margins(provider: ChanceProvider, s) -> tuple:
    """(hop-1 margins, hop-2 margins, interference margins) at powers ``s``."""
    return provider.delta_gain_hop1(s), provider.delta_gain_hop2(s), provider.delta_interference()


def cost_estimate_chance(duals: DualState, margins: tuple) -> float:
    """First-order rate cost of the chance margins, in bits/s."""
    return first_order_cost(duals, *margins)
