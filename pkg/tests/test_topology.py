import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from d2drelay.propagation import gain_from_pathloss, path_loss_access_db
from d2drelay.topology import (
    CUE,
    D2D_RX,
    D2D_TX,
    ChannelRealization,
    GeometryError,
    NetworkTopology,
    ScenarioConfig,
    UERecord,
    generate_topology,
    load_config,
    realize_channels,
    reference_node_hop1,
    reference_node_hop2,
)


def rng(seed=0):
    return np.random.default_rng(seed)


def test_default_split_is_five_cues_and_three_pairs_per_relay():
    topo = generate_topology(ScenarioConfig(), rng())
    for l in range(3):
        users = topo.users_of(l)
        assert len(users) == 8
        kinds = [topo.ue_records[u].kind for u in users]
        assert kinds.count(CUE) == 5 and kinds.count(D2D_TX) == 3


def test_repeat_seed_gives_identical_topology():
    a = generate_topology(ScenarioConfig(), rng(4))
    b = generate_topology(ScenarioConfig(), rng(4))
    assert a.to_dict() == b.to_dict()


def test_zero_pair_distance_is_allowed():
    topo = generate_topology(ScenarioConfig(d2d_pair_distance_m=0.0), rng())
    for r in topo.ue_records:
        if r.kind == D2D_TX:
            rx = topo.ue_records[r.pair]
            assert np.allclose(r.position, rx.position)


def test_pair_distance_beyond_ring_diameter_fails():
    with pytest.raises(GeometryError):
        generate_topology(ScenarioConfig(d2d_ring_radius_m=40.0, d2d_pair_distance_m=81.0), rng())


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        ScenarioConfig(num_rbs=0)
    with pytest.raises(ValueError):
        ScenarioConfig(d2d_ring_radius_m=5.0, min_ue_relay_distance_m=10.0)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 160.0))
def test_geometry_invariants(seed, d_dd):
    cfg = ScenarioConfig(d2d_pair_distance_m=d_dd)
    topo = generate_topology(cfg, rng(seed))
    relays = np.asarray(topo.relay_positions)
    # partition of the UEs over the relays
    served = [u for l in range(3) for u in topo.users_of(l)]
    tx = [r for r in topo.ue_records if r.kind != D2D_RX]
    assert sorted(served) == sorted(r.id for r in tx)
    assert len(served) == cfg.num_cues + cfg.num_d2d_pairs
    for r in topo.ue_records:
        c = relays[r.serving_relay]
        d = math.dist(r.position, c)
        if r.kind == CUE:
            assert cfg.min_ue_relay_distance_m - 1e-9 <= d <= cfg.relay_cell_radius_m + 1e-9
            assert int(np.argmin(np.hypot(*(relays - r.position).T))) == r.serving_relay
        else:
            assert d == pytest.approx(cfg.d2d_ring_radius_m, abs=1e-9)
        if r.kind == D2D_TX:
            rx = topo.ue_records[r.pair]
            assert rx.kind == D2D_RX and rx.pair == r.id
            assert math.dist(r.position, rx.position) == pytest.approx(d_dd, abs=1e-9)


def _line_topology(d_m):
    """eNB at the origin, one relay and one CUE ``d_m`` metres from it."""
    recs = [UERecord(0, CUE, (125.0 + d_m, 0.0), 0)]
    return NetworkTopology((0.0, 0.0), [(125.0, 0.0)], recs)


def test_no_fading_gives_path_loss_gain():
    topo = _line_topology(100.0)
    cfg = ScenarioConfig(num_relays=1, num_cues=1, num_d2d_pairs=0, num_rbs=2)
    real = realize_channels(topo, cfg, rng(), fading=False)
    assert real.h_uplink(0) == pytest.approx([5.12861383991365e-9] * 2, rel=1e-12)


def test_seeds_change_fading_but_not_positions():
    cfg = ScenarioConfig()
    topo = generate_topology(cfg, rng(1))
    a = realize_channels(topo, cfg, rng(2))
    b = realize_channels(topo, cfg, rng(3))
    assert not np.allclose(a.gain, b.gain)
    assert a.topology.to_dict() == b.topology.to_dict()


def test_gains_positive_finite_reciprocal():
    cfg = ScenarioConfig()
    topo = generate_topology(cfg, rng(5))
    real = realize_channels(topo, cfg, rng(6))
    off = ~np.eye(topo.num_nodes, dtype=bool)
    g = real.gain[off]
    assert np.all(np.isfinite(g)) and np.all(g > 0)
    assert np.allclose(real.gain, real.gain.transpose(1, 0, 2))


def _hand_realization(gains_to_other_relay):
    """Two relays; UE 0 served by relay 0. Gains toward relay 1 given per RB."""
    recs = [UERecord(0, CUE, (10.0, 0.0), 0)]
    topo = NetworkTopology((0.0, 0.0), [(0.0, 0.0), (100.0, 0.0)], recs)
    N = len(gains_to_other_relay)
    g = np.full((4, 4, N), 1e-12)
    g[3, 2] = g[2, 3] = gains_to_other_relay
    return ChannelRealization(topo, g, 1e-15)


def test_reference_hop1_argmax_and_single_relay():
    real = _hand_realization([1e-9, 3e-9])
    ids, gains = reference_node_hop1(0, real)
    assert list(ids) == [1, 1]
    assert gains.tolist() == [1e-9, 3e-9]
    recs = [UERecord(0, CUE, (10.0, 0.0), 0)]
    one = ChannelRealization(NetworkTopology((0.0, 0.0), [(0.0, 0.0)], recs), np.full((3, 3, 2), 1e-9), 1e-15)
    ids, gains = reference_node_hop1(0, one)
    assert np.all(gains == 0)


def test_reference_ties_pick_lowest_index():
    cfg = ScenarioConfig()
    topo = generate_topology(cfg, rng(0))
    n = topo.num_nodes
    real = ChannelRealization(topo, np.full((n, n, 4), 2e-10), 1e-15)
    ids, gains = reference_node_hop1(0, real)
    # candidates of a relay-0 UE are relays 1 and 2; lowest index wins
    assert list(ids) == [1] * 4
    ids2, _ = reference_node_hop2(0, real)
    other_rx = [u for l in (1, 2) for u in topo.d2d_receivers_of(l)]
    assert list(ids2) == [min(other_rx)] * 4


@given(st.integers(0, 1000))
def test_reference_nodes_are_per_rb_maxima(seed):
    cfg = ScenarioConfig(num_rbs=4)
    topo = generate_topology(cfg, rng(seed))
    real = realize_channels(topo, cfg, rng(seed + 1))
    ue = topo.users_of(0)[0]
    ids, gains = reference_node_hop1(ue, real)
    cand = [topo.relay_node(l) for l in (1, 2)]
    src = topo.ue_node(ue)
    assert np.allclose(gains, real.gain[src, cand].max(axis=0))
    ids, gains = reference_node_hop2(0, real)
    rx = [topo.ue_node(u) for l in (1, 2) for u in topo.d2d_receivers_of(l)]
    assert np.allclose(gains, real.gain[topo.relay_node(0), rx].max(axis=0))


def test_per_ue_reference_mode_uses_one_victim():
    cfg = ScenarioConfig(reference_mode="per_ue")
    topo = generate_topology(cfg, rng(0))
    real = realize_channels(topo, cfg, rng(1))
    ids, _ = reference_node_hop1(0, real, "per_ue")
    assert len(set(ids.tolist())) == 1


def test_load_config(tmp_path):
    p = tmp_path / "s.cfg"
    p.write_text("num_rbs = 6  # comment\nfading = false\n[sweep]\nvariable = theta\nvalues = [0.1, 0.2]\n")
    cfg = load_config(p)
    assert cfg["num_rbs"] == 6 and cfg["fading"] is False
    assert cfg["sweep"] == {"variable": "theta", "values": [0.1, 0.2]}
    sc = ScenarioConfig.from_mapping({"num_rbs": 6, "fading": "false"})
    assert sc.num_rbs == 6 and sc.fading is False
    with pytest.raises(KeyError):
        ScenarioConfig.from_mapping({"bogus": 1})
