from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from combofl.aggregation import global_average_oracle
from combofl.gossip import (
    ChurnEvent, ChurnKind, Federation, InsufficientPeers, JoinRejected, Phase, PullRequest,
    WorkerState, handle_peer_failure, plan_pulls,
)
from combofl.params import ModelParams, make_scheme
from combofl.rng import Purpose, round_stream
from combofl.tasks import QuadraticTask, SgdConfig

POLICIES = ["balanced", "pool"]


def gen(seed=0):
    return np.random.default_rng(seed)


def federation(n=6, dim=12, S=3, R=2, tau=5, seed=0, policy="balanced", n_task=None, **kw):
    task = QuadraticTask.generate(n_task or n, dim, seed, mu=0.1, L=1.0, **kw)
    init = gen(seed + 100).standard_normal(dim)
    return Federation(task, make_scheme(dim, S), SgdConfig(alpha=0.5, tau=tau), R, seed,
                      list(range(n)), init, policy=policy)


# ------------------------------------------------------------- planning

@pytest.mark.parametrize("policy", POLICIES)
def test_two_peers_both_targeted(policy):
    plan = plan_pulls(0, [1, 2], 1, 2, gen(), policy=policy)
    assert sorted(p.target for p in plan) == [1, 2]


@pytest.mark.parametrize("policy", POLICIES)
def test_twenty_requests_twenty_distinct_targets(policy):
    plan = plan_pulls(0, range(1, 21), 10, 2, gen(3), policy=policy)
    assert len(plan) == 20 and len({p.target for p in plan}) == 20


@pytest.mark.parametrize("policy", POLICIES)
def test_plan_is_deterministic_and_balanced(policy):
    a = plan_pulls(0, range(1, 5), 10, 2, gen(7), policy=policy)
    b = plan_pulls(0, range(1, 5), 10, 2, gen(7), policy=policy)
    assert a == b
    assert sorted(Counter(p.target for p in a).values()) == [5, 5, 5, 5]


def test_insufficient_peers():
    with pytest.raises(InsufficientPeers):
        plan_pulls(0, [1], 2, 2, gen())


def test_self_in_peer_set_is_ignored():
    plan = plan_pulls(0, [0, 1, 2], 2, 2, gen(), policy="pool")
    assert all(p.target != 0 for p in plan)


def test_unknown_policy():
    with pytest.raises(ValueError):
        plan_pulls(0, [1, 2], 1, 1, gen(), policy="nearest")


@given(st.integers(2, 25), st.integers(1, 12), st.data(), st.sampled_from(POLICIES), st.integers(0, 10**6))
def test_plan_invariants(n, S, data, policy, seed):
    R = data.draw(st.integers(1, n - 1))
    plan = plan_pulls(0, range(1, n), S, R, gen(seed), round=4, policy=policy)
    assert len(plan) == S * R
    assert all(p.requester == 0 and p.target != 0 and p.round == 4 for p in plan)
    for l in range(S):
        reqs = [p for p in plan if p.segment_index == l]
        assert sorted(p.replica_index for p in reqs) == list(range(R))
        assert len({p.target for p in reqs}) == R
    if S * R <= n - 1:
        assert len({p.target for p in plan}) == S * R
    counts = Counter(p.target for p in plan)
    assert max(counts.values()) - min(counts.get(q, 0) for q in range(1, n)) <= 1 + (policy == "pool")


@pytest.mark.parametrize("policy", POLICIES)
def test_selection_uniform_over_many_rounds(policy):
    n, S, R, rounds = 10, 10, 2, 1000
    counts = Counter()
    pool_rng = gen(11)
    for t in range(rounds):
        rng = round_stream(5, Purpose.RING, t) if policy == "balanced" else pool_rng
        counts.update(p.target for p in plan_pulls(0, range(1, n), S, R, rng, t, policy))
    expect = rounds * S * R / (n - 1)
    assert all(abs(counts[q] - expect) <= 0.05 * expect for q in range(1, n))


def test_balanced_ring_loads_every_worker_equally():
    n, S, R = 12, 7, 2
    load = Counter()
    for w in range(n):
        rng = round_stream(1, Purpose.RING, 3)
        load.update(p.target for p in plan_pulls(w, range(n), S, R, rng, 3))
    assert set(load.values()) == {S * R}


# ------------------------------------------------------------- failure handling

def test_handle_peer_failure_marks_offline_and_reroutes():
    st_ = WorkerState(0, np.zeros(2), 1, peers={1: False, 2: False, 3: False, 4: False})
    req = PullRequest(0, 2, 1, 0)
    new = handle_peer_failure(st_, req, used={2, 3}, rng=gen())
    assert st_.peers[2] is True
    assert new.target in {1, 4} and new.segment_index == 1 and new.replica_index == 0


def test_handle_peer_failure_without_candidates():
    st_ = WorkerState(0, np.zeros(2), 1, peers={1: False, 2: False})
    assert handle_peer_failure(st_, PullRequest(0, 1, 0, 0), used={1, 2}, rng=gen()) is None
    assert st_.peers[1] is True


# ------------------------------------------------------------- rounds

def test_single_worker_only_trains():
    fed = federation(n=1, R=0)
    before = fed.workers[0].model.copy()
    res = fed.step_round()
    path = fed.task.descend(0, before, fed.sgd)
    assert np.array_equal(res.workers[0].model, path[-1])
    assert res.workers[0].providers == [[] for _ in range(3)]


def test_two_workers_one_replica_meet_in_the_middle():
    fed = federation(n=2, S=1, R=1)
    fed.workers[1].model = fed.workers[1].model + 1.0   # differ before training
    res = fed.step_round()
    a, b = res.workers[0].model, res.workers[1].model
    assert np.allclose(a, b, rtol=1e-14)


@pytest.mark.parametrize("S", [1, 2, 5, 12])
@pytest.mark.parametrize("policy", POLICIES)
def test_full_replication_equals_global_average(S, policy):
    fed = federation(n=4, S=S, R=3, policy=policy)
    for _ in range(3):
        ids = fed.alive_ids()
        post = [ModelParams(fed.task.descend(w, fed.workers[w].model, fed.sgd)[-1]) for w in ids]
        want = global_average_oracle(post, [fed.workers[w].weight for w in ids]).values
        res = fed.step_round()
        for wr in res.workers:
            assert np.allclose(wr.model, want, rtol=0, atol=1e-9)
        assert np.allclose(res.oracle, want, rtol=0, atol=1e-12)


def test_received_volume_is_r_models_for_any_s():
    for S in (1, 3, 12):
        fed = federation(n=6, dim=12, S=S, R=2)
        res = fed.step_round()
        sch = fed.scheme
        for wr in res.workers:
            received = sum(sch.length(l) * len(p) for l, p in enumerate(wr.providers))
            assert received == 2 * sch.dim


def test_phases_return_to_updating():
    fed = federation()
    fed.step_round()
    assert all(w.phase is Phase.UPDATING and w.round == 1 for w in fed.workers.values())


def test_same_seed_same_rounds():
    a, b = federation(seed=4), federation(seed=4)
    for _ in range(4):
        ra, rb = a.step_round(), b.step_round()
        for x, y in zip(ra.workers, rb.workers):
            assert x.providers == y.providers and x.checkpoint == y.checkpoint
            assert x.model.tobytes() == y.model.tobytes()


# ------------------------------------------------------------- churn

@pytest.mark.parametrize("policy", POLICIES)
def test_crash_is_routed_around(policy):
    fed = federation(n=11, S=10, R=2, dim=20, policy=policy)
    fed.step_round()
    fed.apply(ChurnEvent(1, ChurnKind.CRASH, 4))
    res = fed.step_round()
    assert 4 not in [w.worker for w in res.workers]
    for wr in res.workers:
        assert all(4 not in p and len(p) == 2 for p in wr.providers)
    assert any(f[1] == 4 for wr in res.workers for f in wr.failures)
    # later rounds keep it out of every provider set
    res = fed.step_round()
    for wr in res.workers:
        assert all(4 not in p for p in wr.providers)


def test_too_few_peers_aggregates_short():
    fed = federation(n=3, S=2, R=2)
    fed.apply(ChurnEvent(0, ChurnKind.CRASH, 2))
    res = fed.step_round()
    # each survivor has one live peer left for R=2
    for wr in res.workers:
        assert all(len(p) == 1 for p in wr.providers)
        assert wr.short == 2
    assert res.warnings


def test_recover_clears_offline_flag_on_contact():
    fed = federation(n=4, S=3, R=3)
    fed.apply(ChurnEvent(0, ChurnKind.CRASH, 3))
    fed.step_round()
    assert all(fed.workers[w].peers[3] for w in (0, 1, 2))
    fed.apply(ChurnEvent(1, ChurnKind.RECOVER, 3))
    fed.step_round()
    # worker 3 pulled from everyone, which re-establishes contact
    assert not any(fed.workers[w].peers[3] for w in (0, 1, 2))


def test_recovered_worker_keeps_stale_model():
    fed = federation(n=4, S=2, R=2)
    fed.apply(ChurnEvent(0, ChurnKind.CRASH, 1))
    stale = fed.workers[1].model.copy()
    fed.step_round()
    fed.apply(ChurnEvent(1, ChurnKind.RECOVER, 1))
    assert np.array_equal(fed.workers[1].model, stale)
    assert fed.workers[1].round == 1


def test_leave_removes_from_every_peer_list():
    fed = federation(n=5)
    fed.apply(ChurnEvent(0, ChurnKind.LEAVE, 2))
    assert all(2 not in w.peers for i, w in fed.workers.items() if i != 2)
    res = fed.step_round()
    assert all(not wr.failures for wr in res.workers)
    with pytest.raises(ValueError):
        fed.recover(2)


def test_join_into_identical_federation_copies_model():
    fed = federation(n=4, S=2, R=2, n_task=5)
    res = fed.apply(ChurnEvent(0, ChurnKind.JOIN, 4))
    assert np.allclose(res.model, fed.workers[0].model, rtol=1e-14)
    assert len(res.providers) == 2 and all(len(p) == 2 and 4 not in p for p in res.providers)


def test_join_with_full_replication_is_peer_average():
    fed = federation(n=4, S=3, R=4, n_task=5)
    for w in range(4):
        fed.workers[w].model = gen(w).standard_normal(fed.scheme.dim)
    res = fed.apply(ChurnEvent(0, ChurnKind.JOIN, 4))
    want = global_average_oracle([ModelParams(fed.workers[w].model) for w in range(4)],
                                 [fed.workers[w].weight for w in range(4)])
    assert np.allclose(res.model, want.values, rtol=0, atol=1e-12)


def test_join_then_crash():
    fed = federation(n=4, S=2, R=2, n_task=5)
    fed.apply(ChurnEvent(0, ChurnKind.JOIN, 4))
    fed.step_round()
    fed.apply(ChurnEvent(1, ChurnKind.CRASH, 4))
    res = fed.step_round()
    assert len(res.workers) == 4
    assert all(4 not in p for wr in res.workers for p in wr.providers)


def test_join_rejections():
    fed = federation(n=2, S=1, R=2, n_task=4)
    with pytest.raises(JoinRejected):
        fed.join(0)
    fed.replicas = 3
    with pytest.raises(JoinRejected):
        fed.join(3)


def test_newcomer_becomes_known_on_first_contact():
    fed = federation(n=4, S=3, R=3, n_task=5)
    fed.apply(ChurnEvent(0, ChurnKind.JOIN, 4))
    assert all(4 in fed.workers[w].peers for w in range(4))
