"""Path loss, SINR and rate formulas for the two-hop relay links.

All powers are in watts and all gains are linear power ratios. dB and dBm
appear only at the boundaries (path loss, configuration).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FadingDraw",
    "NoiseModel",
    "NO_FADING",
    "dbm_to_watt",
    "watt_to_dbm",
    "path_loss_access_db",
    "path_loss_backhaul_db",
    "gain_from_pathloss",
    "unit_sinr_hop1",
    "end_to_end_rate",
    "rate_on_rb",
    "second_hop_power",
]

# UE-relay, relay-UE and UE-UE links
ACCESS_INTERCEPT_DB = 103.8
ACCESS_SLOPE_DB = 20.9
# relay-eNB links
BACKHAUL_INTERCEPT_DB = 100.7
BACKHAUL_SLOPE_DB = 23.5


@dataclass(frozen=True)
class FadingDraw:
    """One fading sample for a link.

    Attributes
    ----------
    shadow_db : float
        Log-normal shadowing sample in dB.
    rayleigh_gain : float
        Small-scale power gain (unit-mean exponential sample).
    """

    shadow_db: float = 0.0
    rayleigh_gain: float = 1.0

    def __post_init__(self):
        if not self.rayleigh_gain >= 0.0:
            raise ValueError("rayleigh_gain must be non-negative")


NO_FADING = FadingDraw(0.0, 1.0)


@dataclass(frozen=True)
class NoiseModel:
    """Thermal noise over one resource block."""

    n0_dbm_per_hz: float = -174.0
    rb_bandwidth_hz: float = 180e3

    @property
    def sigma2_w(self) -> float:
        """Noise power N0 * B_RB in watts."""
        s2 = dbm_to_watt(self.n0_dbm_per_hz) * self.rb_bandwidth_hz
        if not s2 > 0:
            raise ValueError("noise power must be positive")
        return s2


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


def _fading_db(fading: FadingDraw) -> float:
    if fading.rayleigh_gain <= 0:
        raise ValueError("rayleigh_gain must be positive to express in dB")
    return fading.shadow_db + 10.0 * np.log10(fading.rayleigh_gain)


def _check_distance(distance_km):
    d = np.asarray(distance_km, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("distance must be positive")
    return d


def path_loss_access_db(distance_km, fading: FadingDraw = NO_FADING):
    """Path loss of an access link (UE-relay, relay-UE or UE-UE) in dB.

    Parameters
    ----------
    distance_km : float or array_like
        Link length in kilometres, strictly positive.
    fading : FadingDraw
        Shadowing and Rayleigh sample added in dB.

    Returns
    -------
    float or ndarray
        ``103.8 + 20.9 log10(d) + shadow + 10 log10(rayleigh)``.
    """
    d = _check_distance(distance_km)
    pl = ACCESS_INTERCEPT_DB + ACCESS_SLOPE_DB * np.log10(d) + _fading_db(fading)
    return float(pl) if pl.ndim == 0 else pl


def path_loss_backhaul_db(distance_km, fading: FadingDraw = NO_FADING):
    """Path loss of the relay-eNB link in dB (``100.7 + 23.5 log10(d)`` plus fading)."""
    d = _check_distance(distance_km)
    pl = BACKHAUL_INTERCEPT_DB + BACKHAUL_SLOPE_DB * np.log10(d) + _fading_db(fading)
    return float(pl) if pl.ndim == 0 else pl


def gain_from_pathloss(pl_db):
    """Linear power gain ``10**(-pl_db / 10)``."""
    g = 10.0 ** (-np.asarray(pl_db, dtype=float) / 10.0)
    return float(g) if g.ndim == 0 else g


def unit_sinr_hop1(h, interference_w, sigma2):
    """SINR per watt of transmit power, ``h / (I + sigma2)``.

    The same expression serves the second hop with the relay-side gain.
    """
    h = np.asarray(h, dtype=float)
    interference_w = np.asarray(interference_w, dtype=float)
    if np.any(~(h > 0)):
        raise ValueError("link gain must be positive")
    if np.any(interference_w < 0):
        raise ValueError("interference must be non-negative")
    if not sigma2 > 0:
        raise ValueError("noise power must be positive")
    out = h / (interference_w + sigma2)
    return float(out) if out.ndim == 0 else out


def end_to_end_rate(r1, r2):
    """Two-hop rate: half of the slower hop."""
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    if np.any(r1 < 0) or np.any(r2 < 0):
        raise ValueError("rates must be non-negative")
    out = 0.5 * np.minimum(r1, r2)
    return float(out) if out.ndim == 0 else out


def rate_on_rb(power_w, unit_sinr, rb_bandwidth_hz):
    """End-to-end rate on one RB when both hops are balanced.

    ``0.5 * B_RB * log2(1 + P * gamma)``; the second-hop power is assumed to
    equalise the hop SINRs so the first-hop expression carries the rate.
    """
    p = np.asarray(power_w, dtype=float)
    if np.any(p < 0):
        raise ValueError("power must be non-negative")
    out = 0.5 * rb_bandwidth_hz * np.log2(1.0 + p * np.asarray(unit_sinr, dtype=float))
    return float(out) if out.ndim == 0 else out


def second_hop_power(p1_w, gamma1, gamma2):
    """Relay power that balances the two hops, ``p1 * gamma1 / gamma2``."""
    gamma2 = np.asarray(gamma2, dtype=float)
    if np.any(~(gamma2 > 0)):
        raise ZeroDivisionError("second-hop unit SINR must be positive")
    out = np.asarray(p1_w, dtype=float) * np.asarray(gamma1, dtype=float) / gamma2
    return float(out) if out.ndim == 0 else out
