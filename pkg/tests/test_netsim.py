import numpy as np
import pytest
from hypothesis import given, strategies as st

from combofl.netsim import (
    Flow, FluidSimulator, NetConfig, TraceError, allocate_rates, fedavg_timing, simulate,
    simulate_flows,
)
from oracles import maxmin_oracle

NET = NetConfig()
MB10 = 10_000_000


def rates(pairs, cfg=NET):
    return allocate_rates([Flow(s, d, 1.0) for s, d in pairs], cfg)


def test_single_flow_gets_pair_cap():
    assert rates([(0, 1)]).tolist() == [10e6]


def test_ten_flows_into_one_node_fit_exactly():
    assert np.allclose(rates([(i, 99) for i in range(10)]), 10e6)


def test_twenty_flows_into_one_node_share_ingress():
    assert np.allclose(rates([(i, 99) for i in range(20)]), 5e6, rtol=1e-12)


def test_egress_shared_like_ingress():
    assert np.allclose(rates([(0, i) for i in range(1, 41)]), 2.5e6, rtol=1e-12)


def test_unbottlenecked_flow_takes_leftover():
    # 20 flows into node 99 get 5 Mbps each; source 0 also sends to node 50,
    # which is limited only by the pair cap
    pairs = [(i, 99) for i in range(20)] + [(0, 50)]
    got = rates(pairs)
    assert np.allclose(got[:20], 5e6) and got[20] == pytest.approx(10e6)


def test_empty_flow_set():
    assert allocate_rates([], NET).shape == (0,)


def test_ten_megabytes_take_eight_seconds():
    f = Flow(0, 1, MB10)
    simulate_flows([f], NET)
    assert f.completion_time == pytest.approx(8.0, rel=1e-12)


def test_later_release_shifts_completion():
    f = Flow(0, 1, MB10, release_time=3.0)
    simulate_flows([f], NET)
    assert f.completion_time == pytest.approx(11.0, rel=1e-12)


def test_rates_recomputed_when_a_flow_finishes():
    # 20 flows into one node at 5 Mbps; a short one finishes early and the
    # survivors speed up.  Short flow: 10 Mbit at 5 Mbps -> 2 s.  Long flows
    # then have 80 - 10 = 70 Mbit left at 100/19 Mbps each.
    flows = [Flow(i, 99, MB10) for i in range(19)] + [Flow(19, 99, 1_250_000)]
    simulate_flows(flows, NET)
    assert flows[-1].completion_time == pytest.approx(2.0, rel=1e-12)
    want = 2.0 + 70e6 / (100e6 / 19)
    assert all(f.completion_time == pytest.approx(want, rel=1e-12) for f in flows[:-1])


def test_delay_chain():
    sim = FluidSimulator(NET)
    a = sim.add_delay(1.0)
    b = sim.add_delay(0.5, [a])
    f = sim.add_flow(0, 1, 1_250_000, [b])
    sim.run()
    assert sim.finish[f] == pytest.approx(2.5)


def test_loopback_flow_is_instant():
    sim = FluidSimulator(NET)
    f = sim.add_flow(3, 3, MB10)
    sim.run()
    assert sim.finish[f] == 0.0


@st.composite
def flow_sets(draw, max_nodes=8, max_flows=25):
    nodes = draw(st.integers(2, max_nodes))
    m = draw(st.integers(1, max_flows))
    pairs = []
    for _ in range(m):
        s = draw(st.integers(0, nodes - 1))
        d = draw(st.integers(0, nodes - 2))
        pairs.append((s, d if d < s else d + 1))
    return pairs


def assert_matches_oracle(pairs, cfg):
    got = rates(pairs, cfg)
    want = maxmin_oracle(pairs, int(cfg.per_pair_bw), int(cfg.node_capacity))
    for g, w in zip(got, want):
        assert abs(g - float(w)) <= 1e-9 * float(w)


@given(flow_sets())
def test_allocation_matches_exact_oracle(pairs):
    assert_matches_oracle(pairs, NET)


@given(flow_sets(), st.integers(1, 50), st.integers(1, 200))
def test_allocation_matches_oracle_other_caps(pairs, pair_mbps, node_mbps):
    cfg = NetConfig(per_pair_bw=pair_mbps * 1e6, node_capacity=node_mbps * 1e6)
    assert_matches_oracle(pairs, cfg)


@given(flow_sets())
def test_allocation_is_feasible_and_every_flow_is_bottlenecked(pairs):
    got = rates(pairs)
    tol = 1e-6
    out, inn = {}, {}
    for (s, d), r in zip(pairs, got):
        out[s] = out.get(s, 0.0) + r
        inn[d] = inn.get(d, 0.0) + r
    assert all(v <= NET.node_capacity + tol for v in list(out.values()) + list(inn.values()))
    assert got.max() <= NET.per_pair_bw + tol
    for (s, d), r in zip(pairs, got):
        # a flow cannot grow: it is at the cap, or it shares a saturated node
        # where no other flow is faster than it
        at_cap = r >= NET.per_pair_bw - tol
        eg = out[s] >= NET.node_capacity - tol and all(
            r2 <= r + tol for (s2, _), r2 in zip(pairs, got) if s2 == s)
        ig = inn[d] >= NET.node_capacity - tol and all(
            r2 <= r + tol for (_, d2), r2 in zip(pairs, got) if d2 == d)
        assert at_cap or eg or ig


@given(flow_sets(max_flows=15), st.data())
def test_volume_conservation(pairs, data):
    sizes = [data.draw(st.integers(1, 5_000_000)) for _ in pairs]
    rel = [data.draw(st.floats(0, 5)) for _ in pairs]
    flows = [Flow(s, d, b, r) for (s, d), b, r in zip(pairs, sizes, rel)]
    sim = simulate_flows(flows, NET, record_epochs=True)
    sent = {tid: 0.0 for tid in sim.flow_ids}
    for ep in sim.epochs:
        for tid, r in zip(ep.flows, ep.rates):
            sent[int(tid)] += r * (ep.end - ep.start)
    for f, tid in zip(flows, sim.flow_ids):
        assert abs(sent[tid] - 8.0 * f.size) <= 1e-9 * 8.0 * f.size
        assert f.completion_time >= f.release_time + 8.0 * f.size / NET.per_pair_bw * (1 - 1e-12)


# -------------------------------------------------------------- trace timing

def gossip_trace(n, S, R, providers, seg_bytes, rounds=1, tau=10):
    header = {"mode": "combo", "n": n, "S": S, "R": R, "tau": tau, "seg_bytes": seg_bytes}
    recs = []
    for t in range(rounds):
        for w in range(n):
            recs.append({"kind": "round", "round": t, "worker": w,
                         "providers": providers(t, w), "failures": []})
    return header, recs


def test_compute_only_round():
    # tau=16 steps at 0.025 s, no pulls
    h, recs = gossip_trace(3, 1, 0, lambda t, w: [[]], [MB10], tau=16)
    tl = simulate(h, recs, NET)
    assert tl.round_end[0] == pytest.approx(0.4)
    assert all(r["sync"] == 0.0 for r in tl.records)


def test_whole_model_pull_costs_eight_seconds():
    h, recs = gossip_trace(2, 1, 1, lambda t, w: [[1 - w]], [MB10], tau=40)
    tl = simulate(h, recs, NET)
    assert tl.round_end[0] == pytest.approx(1.0 + 8.0)
    assert tl.sync_times()[0] == pytest.approx(8.0)
    assert tl.total_bytes == 2 * MB10


def test_two_segments_from_two_peers_halve_sync():
    def prov1(t, w):
        return [[(w + 1) % 3]]

    def prov2(t, w):
        return [[(w + 1) % 3], [(w + 2) % 3]]

    h1, r1 = gossip_trace(3, 1, 1, prov1, [MB10])
    h2, r2 = gossip_trace(3, 2, 1, prov2, [MB10 // 2, MB10 // 2])
    s1 = simulate(h1, r1, NET).sync_times()[0]
    s2 = simulate(h2, r2, NET).sync_times()[0]
    assert s1 == pytest.approx(8.0) and s2 == pytest.approx(4.0)


def test_rounds_chain_per_worker():
    h, recs = gossip_trace(2, 1, 1, lambda t, w: [[1 - w]], [MB10], rounds=3, tau=40)
    tl = simulate(h, recs, NET)
    assert [tl.round_end[t] for t in range(3)] == pytest.approx([9.0, 18.0, 27.0])


def test_missing_provider_record_is_an_error():
    h, recs = gossip_trace(2, 1, 1, lambda t, w: [[5]], [MB10])
    with pytest.raises(TraceError):
        simulate(h, recs, NET)


def test_failure_detection_delay_gates_replacement():
    cfg = NetConfig(failure_detection_delay=2.0)
    h, recs = gossip_trace(3, 1, 1, lambda t, w: [[(w + 1) % 3]], [MB10])
    recs[0]["failures"] = [[0, 2, 1]]   # worker 0: peer 2 dead, re-routed to 1
    tl = simulate(h, recs, cfg).by_key()
    # tau=10 -> compute ends at 0.25 s; worker 0's replacement flow waits
    # for the 2 s detection timer, the others start right away
    assert tl[(0, 0)]["agg"] == pytest.approx(2.0 + 8.0)
    assert tl[(0, 1)]["agg"] == pytest.approx(0.25 + 8.0)


def test_compute_multiplier_slows_one_worker():
    cfg = NetConfig(compute_multipliers={1: 3.0})
    h, recs = gossip_trace(2, 1, 0, lambda t, w: [[]], [MB10], tau=40)
    tl = simulate(h, recs, cfg).by_key()
    assert tl[(0, 1)]["update_end"] == pytest.approx(3.0)
    assert tl[(0, 0)]["update_end"] == pytest.approx(1.0)


def fedavg_trace(n, server=0, tau=40):
    header = {"mode": "fedavg", "n": n, "S": 1, "R": 0, "tau": tau, "seg_bytes": [MB10]}
    recs = [{"kind": "round", "round": 0, "worker": w, "server": server,
             "providers": None, "failures": []} for w in range(n)]
    return header, recs


def test_fedavg_two_workers():
    # upload 8 s then download 8 s after 1 s of compute
    tl = fedavg_timing(*fedavg_trace(2), NET)
    assert tl.round_end[0] == pytest.approx(17.0)
    assert tl.by_key()[(0, 1)]["sync"] == pytest.approx(16.0)


def test_fedavg_server_ingress_binds():
    # 10 uploads share the 100 Mbps ingress: exactly 10 Mbps each
    tl = fedavg_timing(*fedavg_trace(11), NET)
    by = tl.by_key()
    assert by[(0, 0)]["agg"] - by[(0, 0)]["update_end"] == pytest.approx(8.0)
    # 20 uploads: 5 Mbps each, 16 s; downloads likewise
    tl = fedavg_timing(*fedavg_trace(21), NET)
    assert tl.round_end[0] == pytest.approx(1.0 + 16.0 + 16.0)


def test_netconfig_round_trip_and_validation():
    cfg = NetConfig(compute_multipliers={2: 1.5})
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        NetConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        NetConfig(per_pair_bw=0)
    with pytest.raises(ValueError):
        NetConfig(compute_multipliers={0: -1})
