"""Worst-case protection against uncertain cross gains and interference.

The cross gains toward the reference victims and the interference estimate
are only known up to a normed uncertainty set around their nominal values.
Keeping the interference constraints valid for every member of the set adds
a protection margin, the dual norm of the weighted power vector scaled by the
set radius. By default the margin uses the linear bound ``||y||_2 <= ||y||_1``
which keeps the allocation engine's per-UE water-filling structure.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .allocator import AllocationProblem, DualState, ProtectionProvider

__all__ = [
    "UncertaintyModel",
    "CostReport",
    "RobustProvider",
    "protection_gain_hop1",
    "protection_gain_hop2",
    "protection_interference",
    "robust_provider",
    "first_order_cost",
    "cost_of_robustness",
]


@dataclass
class UncertaintyModel:
    """Radii and weights of the uncertainty sets.

    Attributes
    ----------
    psi1, psi2 : float or ndarray (N,)
        Relative radius of the hop-1 / hop-2 cross-gain sets.
    upsilon : float or ndarray (U, N)
        Relative radius of the interference set.
    m1, m2 : ndarray (N, U, U), optional
        Weight matrices of the gain sets; identity when ``None``.
    m_i : float or ndarray (U, N)
        Scalar weight of the interference set.
    norm_order_alpha : float
        Order of the set norm (>= 2); the margin uses the dual order.
    linearize : bool
        Use the linear ``l1`` bound of the dual norm (default) instead of
        evaluating the dual norm itself.
    """

    psi1: object = 0.0
    psi2: object = 0.0
    upsilon: object = 0.0
    m1: Optional[np.ndarray] = None
    m2: Optional[np.ndarray] = None
    m_i: object = 1.0
    norm_order_alpha: float = 2.0
    linearize: bool = True

    def __post_init__(self):
        for name in ("psi1", "psi2", "upsilon"):
            if np.any(np.asarray(getattr(self, name), dtype=float) < 0):
                raise ValueError(f"{name} must be non-negative")
        if not self.norm_order_alpha >= 2:
            raise ValueError("norm order must be >= 2")
        if np.any(~(np.asarray(self.m_i, dtype=float) > 0)):
            raise ValueError("interference weight must be positive")
        for name in ("m1", "m2"):
            m = getattr(self, name)
            if m is None:
                continue
            m = np.asarray(m, dtype=float)
            if m.ndim == 2:
                m = m[None]
            if np.any(np.abs(np.linalg.det(m)) < 1e-300):
                raise ValueError(f"{name} must be invertible")
            setattr(self, name, m)

    @property
    def dual_order(self) -> float:
        """``beta = 1 + 1 / (alpha - 1)``."""
        a = self.norm_order_alpha
        return np.inf if a == 1 else 1.0 + 1.0 / (a - 1.0)

    @classmethod
    def uniform(cls, fraction: float, **kw) -> "UncertaintyModel":
        """Same relative radius on both hops and on the interference."""
        return cls(psi1=fraction, psi2=fraction, upsilon=fraction, **kw)

    def is_zero(self) -> bool:
        return all(
            not np.any(np.asarray(getattr(self, k), dtype=float) > 0)
            for k in ("psi1", "psi2", "upsilon")
        )


def _inv_weights(m: Optional[np.ndarray], U: int, N: int) -> np.ndarray:
    """``M^-1`` per RB as an (N, U, U) array."""
    if m is None:
        return np.broadcast_to(np.eye(U), (N, U, U))
    m = np.broadcast_to(m, (N, U, U))
    return np.linalg.inv(m)


def _diag_inv(m: Optional[np.ndarray], U: int, N: int) -> np.ndarray:
    """Diagonal of ``M^-1`` laid out as (U, N)."""
    inv = _inv_weights(m, U, N)
    return np.diagonal(inv, axis1=1, axis2=2).T


def _margin(weighted: np.ndarray, psi, m, model: UncertaintyModel) -> np.ndarray:
    """Per-RB margin for weighted power ``y = S * g_bar`` of shape (U, N)."""
    U, N = weighted.shape
    psi = np.broadcast_to(np.asarray(psi, dtype=float), (N,))
    if model.linearize:
        return psi * (_diag_inv(m, U, N) * weighted).sum(axis=0)
    inv = _inv_weights(m, U, N)
    z = np.einsum("nuv,vn->un", inv, weighted)
    return psi * np.linalg.norm(z, ord=model.dual_order, axis=0)


def protection_gain_hop1(s, model: UncertaintyModel, ref_gains, rb: Optional[int] = None):
    """Hop-1 margin in watts.

    Parameters
    ----------
    s : array_like (U,) or (U, N)
        Actual powers of the relay's UEs.
    ref_gains : array_like, same shape as ``s``
        Nominal cross gains toward the reference victims.
    rb : int, optional
        RB index used to pick ``psi1`` and ``m1`` when ``s`` is a single column.
    """
    s = np.asarray(s, dtype=float)
    y = s * np.asarray(ref_gains, dtype=float)
    if s.ndim == 1:
        psi, m = _column(model.psi1, model.m1, rb)
        return float(_margin(y[:, None], psi, m, model)[0])
    return _margin(y, model.psi1, model.m1, model)


def protection_gain_hop2(s, model: UncertaintyModel, ref_gains, h_ratios, rb: Optional[int] = None):
    """Hop-2 margin in watts; powers are weighted by ``h1 / h2``."""
    s = np.asarray(s, dtype=float)
    y = np.asarray(h_ratios, dtype=float) * s * np.asarray(ref_gains, dtype=float)
    if s.ndim == 1:
        psi, m = _column(model.psi2, model.m2, rb)
        return float(_margin(y[:, None], psi, m, model)[0])
    return _margin(y, model.psi2, model.m2, model)


def _column(psi, m, rb):
    psi = np.asarray(psi, dtype=float)
    if psi.ndim > 0:
        psi = psi[rb or 0]
    if m is not None:
        m = m[min(rb or 0, len(m) - 1)][None]
    return psi, m


def protection_interference(model: UncertaintyModel, i_bar, ue=None, rb=None):
    """Interference margin ``upsilon * I_bar / m_i`` in watts."""
    ups = np.asarray(model.upsilon, dtype=float)
    mi = np.asarray(model.m_i, dtype=float)
    if ue is not None and ups.ndim == 2:
        ups = ups[ue, rb]
    if ue is not None and mi.ndim == 2:
        mi = mi[ue, rb]
    out = ups * np.asarray(i_bar, dtype=float) / mi
    return float(out) if np.ndim(out) == 0 else out


class RobustProvider(ProtectionProvider):
    """Worst-case margins for :func:`d2drelay.allocator.solve`."""

    def __init__(self, model: UncertaintyModel, problem: AllocationProblem):
        super().__init__(problem)
        self.model = model
        U, N = problem.num_ues, problem.num_rbs
        self._m1_diag = _diag_inv(model.m1, U, N)
        self._m2_diag = _diag_inv(model.m2, U, N)
        self._psi1 = np.broadcast_to(np.asarray(model.psi1, dtype=float), (N,))
        self._psi2 = np.broadcast_to(np.asarray(model.psi2, dtype=float), (N,))
        self._d_i = np.broadcast_to(
            protection_interference(model, problem.i_bar_w), (U, N)
        ).copy()
        g2 = np.broadcast_to(problem.g2_ref, (U, N))
        self._c1 = self._psi1[None, :] * self._m1_diag * problem.g1_ref
        self._c2 = self._psi2[None, :] * self._m2_diag * g2

    def delta_gain_hop1(self, s):
        return protection_gain_hop1(s, self.model, self.problem.g1_ref)

    def delta_gain_hop2(self, s):
        pb = self.problem
        g2 = np.broadcast_to(pb.g2_ref, s.shape)
        return protection_gain_hop2(s, self.model, g2, pb.ratio)

    def delta_interference(self):
        return self._d_i

    def delta_pow_coeff_hop1(self, s=None):
        return self._c1

    def delta_pow_coeff_hop2(self, s=None):
        return self._c2


def robust_provider(model: UncertaintyModel, problem: AllocationProblem) -> ProtectionProvider:
    """Provider for the worst-case problem; a zero model gives the nominal one."""
    if model.is_zero():
        return ProtectionProvider(problem)
    return RobustProvider(model, problem)


@dataclass
class CostReport:
    r_nominal: float
    r_robust: float
    r_delta_direct: float
    r_delta_estimate: float

    @property
    def relative_error(self) -> float:
        if self.r_delta_direct == 0:
            return 0.0 if self.r_delta_estimate == 0 else np.inf
        return abs(self.r_delta_estimate - self.r_delta_direct) / abs(self.r_delta_direct)


def first_order_cost(dual: DualState, d_gain1, d_gain2, d_interference) -> float:
    """``sum psi* D1 + sum phi* D2 + sum varrho* D_I`` in bits/s."""
    return float(
        np.sum(dual.psi * d_gain1)
        + np.sum(dual.phi * d_gain2)
        + np.sum(dual.varrho * d_interference)
    )


def cost_of_robustness(
    nominal_dual: DualState,
    deltas: tuple,
    r_nominal: float,
    r_robust: float,
) -> CostReport:
    """First-order estimate of the rate lost to protection next to the measured loss.

    Parameters
    ----------
    nominal_dual : DualState
        Optimal multipliers of the nominal problem.
    deltas : (d_gain1, d_gain2, d_interference)
        Margins evaluated at the nominal optimum.
    r_nominal, r_robust : float
        Measured sum-rates.
    """
    est = first_order_cost(nominal_dual, *deltas)
    return CostReport(
        r_nominal=float(r_nominal),
        r_robust=float(r_robust),
        r_delta_direct=float(r_nominal - r_robust),
        r_delta_estimate=est,
    )
