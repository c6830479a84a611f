"""Turn a dropped scenario into per-relay allocation problems."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .allocator import AllocationProblem
from .propagation import dbm_to_watt
from .topology import (
    CUE,
    D2D_TX,
    ChannelRealization,
    NetworkTopology,
    ScenarioConfig,
    generate_topology,
    realize_channels,
    reference_node_hop1,
    reference_node_hop2,
)

__all__ = ["Drop", "make_drop", "relay_problem", "drop_rng"]


def drop_rng(master_seed: int, drop_index: int) -> np.random.Generator:
    """Independent stream for drop ``k`` of a run seeded with ``master_seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(drop_index)]))


@dataclass
class Drop:
    config: ScenarioConfig
    topology: NetworkTopology
    realization: ChannelRealization


def make_drop(config: ScenarioConfig, master_seed: int, drop_index: int) -> Drop:
    rng = drop_rng(master_seed, drop_index)
    topo = generate_topology(config, rng)
    real = realize_channels(topo, config, rng)
    return Drop(config, topo, real)


def relay_problem(drop: Drop, relay: int, kinds=(CUE, D2D_TX)) -> AllocationProblem:
    """Allocation problem of one relay for the UEs of the given kinds.

    Reference gains are taken from the drop's own realisation.
    """
    cfg, topo, real = drop.config, drop.topology, drop.realization
    ues = [u for u in topo.users_of(relay) if topo.ue_records[u].kind in kinds]
    N = cfg.num_rbs
    U = len(ues)
    h1 = np.array([real.h_uplink(u) for u in ues]).reshape(U, N)
    h2 = np.array([real.h_second_hop(u) for u in ues]).reshape(U, N)
    g1 = np.array(
        [reference_node_hop1(u, real, cfg.reference_mode)[1] for u in ues]
    ).reshape(U, N)
    g2 = reference_node_hop2(relay, real, cfg.reference_mode)[1]
    qos = np.array(
        [cfg.qos_cue_bps if topo.ue_records[u].kind == CUE else cfg.qos_d2d_bps for u in ues]
    )
    sigma2 = real.sigma2_w
    return AllocationProblem(
        h1=h1,
        h2=h2,
        g1_ref=g1,
        g2_ref=g2,
        p_ue_max_w=np.full(U, float(dbm_to_watt(cfg.p_ue_max_dbm))),
        p_relay_max_w=float(dbm_to_watt(cfg.p_relay_max_dbm)),
        i_th1_w=np.full(N, float(dbm_to_watt(cfg.i_th_hop1_dbm))),
        i_th2_w=np.full(N, float(dbm_to_watt(cfg.i_th_hop2_dbm))),
        qos_bps=qos,
        sigma2_w=sigma2,
        i_bar_w=np.full((U, N), cfg.i_bar_factor * sigma2),
        rb_bandwidth_hz=cfg.rb_bandwidth_hz,
        ue_ids=ues,
    )
