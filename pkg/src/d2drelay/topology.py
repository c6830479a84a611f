"""Scenario geometry, channel realisation and reference-node selection.

Node indexing used by :class:`ChannelRealization`: node 0 is the eNB, nodes
``1..L`` are the relays and UEs follow in id order.
"""

from __future__ import annotations

import configparser
import ast
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .propagation import (
    FadingDraw,
    NoiseModel,
    gain_from_pathloss,
    path_loss_access_db,
    path_loss_backhaul_db,
)

__all__ = [
    "ScenarioConfig",
    "UERecord",
    "NetworkTopology",
    "ChannelRealization",
    "GeometryError",
    "generate_topology",
    "realize_channels",
    "reference_node_hop1",
    "reference_node_hop2",
    "load_config",
    "parse_value",
]

CUE = "CUE"
D2D_TX = "D2D-TX"
D2D_RX = "D2D-RX"

# links shorter than this are evaluated at this length (log-distance laws blow up at 0)
MIN_LINK_M = 1.0
_MAX_REJECTIONS = 10_000


class GeometryError(ValueError):
    """Raised when the requested placement cannot be realised."""


@dataclass
class ScenarioConfig:
    """Scenario parameters; defaults follow the evaluation setup of the model."""

    num_cues: int = 15
    num_d2d_pairs: int = 9
    num_relays: int = 3
    relay_cell_radius_m: float = 200.0
    enb_relay_distance_m: float = 125.0
    min_ue_relay_distance_m: float = 10.0
    d2d_ring_radius_m: float = 80.0
    d2d_pair_distance_m: float = 60.0
    qos_cue_bps: float = 128e3
    qos_d2d_bps: float = 256e3
    p_ue_max_dbm: float = 23.0
    p_relay_max_dbm: float = 30.0
    i_th_hop1_dbm: float = -70.0
    i_th_hop2_dbm: float = -70.0
    num_rbs: int = 13
    rng_seed: int = 0
    rb_bandwidth_hz: float = 180e3
    n0_dbm_per_hz: float = -174.0
    shadow_access_db: float = 10.0
    shadow_backhaul_db: float = 6.0
    # estimated interference as a multiple of the noise power
    i_bar_factor: float = 2.0
    # "per_rb": independent reference victim on every RB; "per_ue": one victim across RBs
    reference_mode: str = "per_rb"
    fading: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = [
            "relay_cell_radius_m",
            "enb_relay_distance_m",
            "min_ue_relay_distance_m",
            "d2d_ring_radius_m",
            "qos_cue_bps",
            "qos_d2d_bps",
            "rb_bandwidth_hz",
        ]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.d2d_pair_distance_m < 0:
            raise ValueError("d2d_pair_distance_m must be non-negative")
        if self.num_rbs < 1:
            raise ValueError("num_rbs must be >= 1")
        if self.num_relays < 1:
            raise ValueError("num_relays must be >= 1")
        if self.num_cues < 0 or self.num_d2d_pairs < 0:
            raise ValueError("UE counts must be non-negative")
        if self.d2d_ring_radius_m < self.min_ue_relay_distance_m:
            raise ValueError("d2d_ring_radius_m must be >= min_ue_relay_distance_m")
        if self.min_ue_relay_distance_m >= self.relay_cell_radius_m:
            raise ValueError("min_ue_relay_distance_m must be below the cell radius")
        if self.reference_mode not in ("per_rb", "per_ue"):
            raise ValueError("reference_mode must be 'per_rb' or 'per_ue'")
        if self.i_bar_factor < 0:
            raise ValueError("i_bar_factor must be non-negative")

    @property
    def noise(self) -> NoiseModel:
        return NoiseModel(self.n0_dbm_per_hz, self.rb_bandwidth_hz)

    def replace(self, **changes) -> "ScenarioConfig":
        d = asdict(self)
        d.update(changes)
        return ScenarioConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise KeyError(f"unknown scenario keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in mapping.items():
            default = known[k].default
            if isinstance(default, bool):
                kwargs[k] = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[k] = int(v)
            elif isinstance(default, float):
                kwargs[k] = float(v)
            else:
                kwargs[k] = v
        return cls(**kwargs)


def parse_value(text: str):
    """Parse a config value: Python literal if possible, else the raw string."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config(path) -> dict:
    """Read a flat ``key = value`` file; ``[name]`` blocks become nested dicts.

    Keys before the first block header land at the top level. ``#`` and ``;``
    start comments.
    """
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser(
        inline_comment_prefixes=("#", ";"), interpolation=None
    )
    parser.optionxform = str
    parser.read_string("[__top__]\n" + text)
    out: dict = {}
    for section in parser.sections():
        items = {k: parse_value(v) for k, v in parser.items(section)}
        if section == "__top__":
            out.update(items)
        else:
            out[section] = items
    return out


@dataclass
class UERecord:
    id: int
    kind: str
    position: tuple
    serving_relay: int
    # partner UE id for D2D endpoints, -1 for CUEs
    pair: int = -1


@dataclass
class NetworkTopology:
    enb_position: tuple
    relay_positions: list
    ue_records: list

    @property
    def num_relays(self) -> int:
        return len(self.relay_positions)

    @property
    def num_nodes(self) -> int:
        return 1 + self.num_relays + len(self.ue_records)

    def relay_node(self, relay: int) -> int:
        return 1 + relay

    def ue_node(self, ue: int) -> int:
        return 1 + self.num_relays + ue

    def node_positions(self) -> np.ndarray:
        pts = [self.enb_position] + list(self.relay_positions)
        pts += [r.position for r in self.ue_records]
        return np.asarray(pts, dtype=float)

    def users_of(self, relay: int) -> list:
        """Transmitting UEs served by ``relay``: CUEs first, then D2D transmitters."""
        cues = [r.id for r in self.ue_records if r.serving_relay == relay and r.kind == CUE]
        txs = [r.id for r in self.ue_records if r.serving_relay == relay and r.kind == D2D_TX]
        return cues + txs

    def d2d_receivers_of(self, relay: int) -> list:
        return [r.id for r in self.ue_records if r.serving_relay == relay and r.kind == D2D_RX]

    def to_dict(self) -> dict:
        return {
            "enb_position": list(self.enb_position),
            "relay_positions": [list(p) for p in self.relay_positions],
            "ue_records": [
                {**asdict(r), "position": list(r.position)} for r in self.ue_records
            ],
        }


@dataclass
class ChannelRealization:
    """Per-RB power gains between every pair of nodes of one drop.

    ``gain[a, b, n]`` is the gain between nodes ``a`` and ``b`` on RB ``n``
    (links are reciprocal). Direct links (``h``) and cross links (``g``) are
    both read from this tensor.
    """

    topology: NetworkTopology
    gain: np.ndarray
    sigma2_w: float

    def link(self, a: int, b: int) -> np.ndarray:
        return self.gain[a, b]

    def h_uplink(self, ue: int) -> np.ndarray:
        """UE (transmitter) to its serving relay."""
        t = self.topology
        rec = t.ue_records[ue]
        return self.gain[t.ue_node(ue), t.relay_node(rec.serving_relay)]

    def h_second_hop(self, ue: int) -> np.ndarray:
        """Serving relay to the eNB (CUE) or to the paired receiver (D2D)."""
        t = self.topology
        rec = t.ue_records[ue]
        relay = t.relay_node(rec.serving_relay)
        if rec.kind == CUE:
            return self.gain[relay, 0]
        return self.gain[relay, t.ue_node(rec.pair)]

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "sigma2_w": self.sigma2_w,
            "gain": self.gain.tolist(),
        }

    def dump_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def _relay_positions(config: ScenarioConfig) -> list:
    n = config.num_relays
    if n == 1:
        return [(config.enb_relay_distance_m, 0.0)]
    # one relay on the boresight of each sector
    ang = 2.0 * np.pi * np.arange(n) / n
    d = config.enb_relay_distance_m
    return [(float(d * np.cos(a)), float(d * np.sin(a))) for a in ang]


def _split(total: int, parts: int) -> list:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def _nearest_relay(pt, relays: np.ndarray) -> int:
    d = np.hypot(relays[:, 0] - pt[0], relays[:, 1] - pt[1])
    return int(np.argmin(d))


def generate_topology(config: ScenarioConfig, rng: Optional[np.random.Generator] = None) -> NetworkTopology:
    """Drop relays, CUEs and D2D pairs.

    CUEs are uniform over the relay cell (annulus between the minimum distance
    and the cell radius) restricted to the points whose nearest relay is the
    serving one. Both D2D endpoints lie on the ring of radius
    ``d2d_ring_radius_m`` around their relay with chord ``d2d_pair_distance_m``.
    """
    config.validate()
    if config.d2d_pair_distance_m > 2.0 * config.d2d_ring_radius_m:
        raise GeometryError("D2D pair distance exceeds the ring diameter")
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    relays = _relay_positions(config)
    rel = np.asarray(relays)
    records: list = []
    cue_counts = _split(config.num_cues, config.num_relays)
    pair_counts = _split(config.num_d2d_pairs, config.num_relays)
    r_lo, r_hi = config.min_ue_relay_distance_m, config.relay_cell_radius_m

    for l in range(config.num_relays):
        cx, cy = relays[l]
        for _ in range(cue_counts[l]):
            for _attempt in range(_MAX_REJECTIONS):
                r = np.sqrt(rng.uniform(r_lo**2, r_hi**2))
                a = rng.uniform(0.0, 2.0 * np.pi)
                pt = (float(cx + r * np.cos(a)), float(cy + r * np.sin(a)))
                if _nearest_relay(pt, rel) == l:
                    break
            else:
                raise GeometryError("could not place a CUE inside its relay cell")
            records.append(UERecord(len(records), CUE, pt, l))

    rad = config.d2d_ring_radius_m
    half = np.arcsin(min(1.0, config.d2d_pair_distance_m / (2.0 * rad)))
    for l in range(config.num_relays):
        cx, cy = relays[l]
        for _ in range(pair_counts[l]):
            a1 = rng.uniform(0.0, 2.0 * np.pi)
            a2 = a1 + (2.0 * half if rng.uniform() < 0.5 else -2.0 * half)
            tx = (float(cx + rad * np.cos(a1)), float(cy + rad * np.sin(a1)))
            rx = (float(cx + rad * np.cos(a2)), float(cy + rad * np.sin(a2)))
            i = len(records)
            records.append(UERecord(i, D2D_TX, tx, l, pair=i + 1))
            records.append(UERecord(i + 1, D2D_RX, rx, l, pair=i))

    return NetworkTopology((0.0, 0.0), relays, records)


def realize_channels(
    topology: NetworkTopology,
    config: ScenarioConfig,
    rng: Optional[np.random.Generator] = None,
    fading: Optional[bool] = None,
) -> ChannelRealization:
    """Draw shadowing (per link) and Rayleigh fading (per link and RB).

    Relay-eNB links use the backhaul law, every other link the access law.
    ``fading=False`` returns pure path-loss gains.
    """
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    if fading is None:
        fading = config.fading
    pos = topology.node_positions()
    n_nodes = len(pos)
    N = config.num_rbs
    diff = pos[:, None, :] - pos[None, :, :]
    dist_km = np.maximum(np.hypot(diff[..., 0], diff[..., 1]), MIN_LINK_M) / 1000.0

    backhaul = np.zeros((n_nodes, n_nodes), dtype=bool)
    relay_nodes = [topology.relay_node(l) for l in range(topology.num_relays)]
    backhaul[0, relay_nodes] = True
    backhaul[relay_nodes, 0] = True

    iu = np.triu_indices(n_nodes, k=1)
    if fading:
        shadow_u = rng.standard_normal(len(iu[0]))
        ray_u = rng.exponential(1.0, size=(len(iu[0]), N))
    else:
        shadow_u = np.zeros(len(iu[0]))
        ray_u = np.ones((len(iu[0]), N))
    sigma_db = np.where(backhaul[iu], config.shadow_backhaul_db, config.shadow_access_db)
    shadow_db = shadow_u * sigma_db

    d = dist_km[iu]
    pl = np.where(
        backhaul[iu],
        path_loss_backhaul_db(d, FadingDraw()),
        path_loss_access_db(d, FadingDraw()),
    )
    pl = pl + shadow_db
    g_u = gain_from_pathloss(pl)[:, None] * ray_u
    # Rayleigh draws of exactly 0 would give an infinite path loss
    g_u = np.maximum(g_u, np.finfo(float).tiny)

    gain = np.zeros((n_nodes, n_nodes, N))
    gain[iu[0], iu[1]] = g_u
    gain[iu[1], iu[0]] = g_u
    return ChannelRealization(topology, gain, config.noise.sigma2_w)


def _select(cand_gain: np.ndarray, cand_ids: list, mode: str):
    """Per-RB (or per-UE) argmax over candidate rows with lowest-index ties."""
    N = cand_gain.shape[1]
    if len(cand_ids) == 0:
        return np.full(N, -1, dtype=int), np.zeros(N)
    if mode == "per_ue":
        k = int(np.argmax(cand_gain.mean(axis=1)))
        return np.full(N, cand_ids[k], dtype=int), cand_gain[k].copy()
    k = np.argmax(cand_gain, axis=0)
    ids = np.asarray(cand_ids, dtype=int)[k]
    return ids, cand_gain[k, np.arange(N)]


def reference_node_hop1(ue: int, realization: ChannelRealization, mode: str = "per_rb"):
    """Most exposed foreign relay for a first-hop transmitter.

    Returns
    -------
    (ids, gains) : (ndarray of int, ndarray)
        Victim relay index and its cross gain on every RB. With a single relay
        the ids are -1 and the gains are 0.
    """
    t = realization.topology
    own = t.ue_records[ue].serving_relay
    others = [j for j in range(t.num_relays) if j != own]
    N = realization.gain.shape[2]
    rows = np.array(
        [realization.gain[t.ue_node(ue), t.relay_node(j)] for j in others]
    ).reshape(len(others), N)
    return _select(rows, others, mode)


def reference_node_hop2(relay: int, realization: ChannelRealization, mode: str = "per_rb"):
    """Most exposed foreign D2D receiver for a relay's second-hop transmission."""
    t = realization.topology
    cands = [
        r.id
        for r in t.ue_records
        if r.kind == D2D_RX and r.serving_relay != relay
    ]
    N = realization.gain.shape[2]
    rows = np.array(
        [realization.gain[t.relay_node(relay), t.ue_node(u)] for u in cands]
    ).reshape(len(cands), N)
    return _select(rows, cands, mode)
