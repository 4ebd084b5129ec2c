"""Segmented-gossip worker state machine, peer selection and churn handling.

A round is bulk-synchronous: every alive worker (1) runs tau local steps,
(2) has its S x R pull requests planned up front, (3) serves segments of its
post-update model to whoever asked, and (4) aggregates once every request is
satisfied or re-routed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .params import SegmentationScheme
from .rng import Purpose, checkpoint, round_stream, stream
from .tasks import SgdConfig

log = logging.getLogger(__name__)


class InsufficientPeers(ValueError):
    pass


class JoinRejected(RuntimeError):
    pass


class Phase(Enum):
    UPDATING = "updating"
    AWAITING = "awaiting_segments"
    AGGREGATING = "aggregating"
    OFFLINE = "offline"


class ChurnKind(Enum):
    JOIN = "join"
    LEAVE = "leave"
    CRASH = "crash"
    RECOVER = "recover"


@dataclass(frozen=True, order=True)
class ChurnEvent:
    """A membership change applied at the start of ``round``."""
    round: int
    kind: ChurnKind = field(compare=False)
    worker: int = field(compare=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ChurnEvent":
        return cls(int(d["round"]), ChurnKind(d["kind"]), int(d["worker"]))

    def to_dict(self) -> dict:
        return {"round": self.round, "kind": self.kind.value, "worker": self.worker}


@dataclass(frozen=True)
class PullRequest:
    requester: int
    target: int
    segment_index: int
    replica_index: int
    round: int = 0


POLICIES = ("balanced", "pool")


def plan_pulls(worker: int, alive_peers: Iterable[int], S: int, R: int,
               rng: np.random.Generator, round: int = 0,
               policy: str = "balanced") -> list[PullRequest]:
    """Pick S x R pull targets, spreading them as evenly as possible.

    ``pool``: targets come from a shuffled pool of peers consumed without
    replacement and refilled with a fresh shuffle when empty.  A pool entry
    that would repeat a target within the current segment is left for a
    later segment.

    ``balanced``: ``rng`` must be the shared per-round stream, identical on
    every worker.  It orders the worker's view of the federation into a
    ring; request m goes to the ring member ``1 + m mod (size-1)`` steps
    ahead.  Each worker still sees a uniformly random order of its peers,
    and when views agree every worker serves exactly S x R requests.

    Either way the R targets of one segment are distinct, and all S x R
    targets are distinct when S x R <= number of peers.
    """
    peers = sorted(set(alive_peers) - {worker})
    if len(peers) < R:
        raise InsufficientPeers(f"worker {worker}: {len(peers)} peers for R={R}")
    if policy == "balanced":
        members = sorted(peers + [worker])
        ring = [members[k] for k in rng.permutation(len(members))]
        pos = ring.index(worker)
        size = len(ring)
        return [
            PullRequest(worker, ring[(pos + 1 + (l * R + r) % (size - 1)) % size], l, r, round)
            for l in range(S) for r in range(R)
        ]
    if policy != "pool":
        raise ValueError(f"unknown peer selection policy {policy!r}")
    pool: list[int] = []
    plan = []
    for l in range(S):
        used: set[int] = set()
        for r in range(R):
            pick = next((k for k, p in enumerate(pool) if p not in used), None)
            if pick is None:
                pool.extend(peers[k] for k in rng.permutation(len(peers)))
                pick = next(k for k, p in enumerate(pool) if p not in used)
            target = pool.pop(pick)
            used.add(target)
            plan.append(PullRequest(worker, target, l, r, round))
    return plan


@dataclass
class WorkerState:
    id: int
    model: np.ndarray
    weight: int
    round: int = 0
    phase: Phase = Phase.UPDATING
    peers: dict[int, bool] = field(default_factory=dict)    # peer id -> offline flag
    pending: list[PullRequest] = field(default_factory=list)
    providers: list[list[int]] = field(default_factory=list)
    plan_rng: np.random.Generator | None = field(default=None, repr=False)
    failover_rng: np.random.Generator | None = field(default=None, repr=False)

    def known_alive(self) -> list[int]:
        return sorted(p for p, offline in self.peers.items() if not offline and p != self.id)


def handle_peer_failure(worker: WorkerState, failed: PullRequest, used: Iterable[int],
                        rng: np.random.Generator) -> PullRequest | None:
    """Flag the unreachable target and re-issue the request elsewhere.

    The replacement is drawn uniformly from peers the worker believes alive
    that are not already involved with this segment.  Returns None when no
    such peer exists; the caller then aggregates with fewer replicas.
    """
    worker.peers[failed.target] = True
    excluded = set(used) | {failed.target, worker.id}
    candidates = [p for p in worker.known_alive() if p not in excluded]
    if not candidates:
        return None
    target = candidates[int(rng.integers(len(candidates)))]
    return PullRequest(worker.id, target, failed.segment_index, failed.replica_index, failed.round)


@dataclass
class WorkerRound:
    """What one worker did in one round (or in its join)."""
    worker: int
    round: int
    providers: list[list[int]]          # per segment, peers only (self excluded)
    failures: list[tuple[int, int, int | None]]   # (segment, dead target, replacement)
    model: np.ndarray
    checkpoint: str
    short: int = 0                      # replicas missing after re-routing


@dataclass
class RoundResult:
    round: int
    workers: list[WorkerRound]
    oracle: np.ndarray                  # full weighted average of post-update models
    visited: list[np.ndarray] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


class Federation:
    """The logical Combo engine over a fixed task and segmentation."""

    def __init__(self, task, scheme: SegmentationScheme, sgd: SgdConfig, replicas: int,
                 seed: int, members: Sequence[int], init_model: np.ndarray,
                 record_visited: bool = False, policy: str = "balanced"):
        if policy not in POLICIES:
            raise ValueError(f"unknown peer selection policy {policy!r}")
        if scheme.dim != task.dim:
            raise ValueError("scheme and task dimensions differ")
        self.task = task
        self.scheme = scheme
        self.sgd = sgd
        self.replicas = replicas
        self.seed = seed
        self.record_visited = record_visited
        self.policy = policy
        self.round = 0
        self.workers: dict[int, WorkerState] = {}
        self.alive: set[int] = set()
        self.registry: set[int] = set()
        self._bounds = scheme.as_array()
        for wid in members:
            self.workers[wid] = self._new_state(wid, init_model)
            self.alive.add(wid)
            self.registry.add(wid)
        for wid in members:
            self.workers[wid].peers = {p: False for p in members if p != wid}

    def _new_state(self, wid: int, model: np.ndarray) -> WorkerState:
        return WorkerState(
            id=wid,
            model=np.array(model, dtype=np.float64),
            weight=int(self.task.weights[wid]),
            round=self.round,
            plan_rng=stream(self.seed, Purpose.PLAN, wid),
            failover_rng=stream(self.seed, Purpose.FAILOVER, wid),
        )

    def alive_ids(self) -> list[int]:
        return sorted(self.alive)

    def _plan_rng(self, state: WorkerState) -> np.random.Generator:
        if self.policy == "balanced":
            return round_stream(self.seed, Purpose.RING, self.round)
        return state.plan_rng

    # ---------------------------------------------------------------- churn

    def apply(self, event: ChurnEvent) -> WorkerRound | None:
        if event.kind is ChurnKind.JOIN:
            return self.join(event.worker)
        if event.kind is ChurnKind.CRASH:
            self.crash(event.worker)
        elif event.kind is ChurnKind.LEAVE:
            self.leave(event.worker)
        elif event.kind is ChurnKind.RECOVER:
            self.recover(event.worker)
        return None

    def crash(self, wid: int) -> None:
        if wid not in self.alive:
            raise ValueError(f"worker {wid} is not alive")
        self.alive.discard(wid)
        self.workers[wid].phase = Phase.OFFLINE

    def leave(self, wid: int) -> None:
        if wid not in self.alive:
            raise ValueError(f"worker {wid} is not alive")
        self.alive.discard(wid)
        self.registry.discard(wid)
        self.workers[wid].phase = Phase.OFFLINE
        for w in self.workers.values():
            w.peers.pop(wid, None)

    def recover(self, wid: int) -> None:
        state = self.workers.get(wid)
        if state is None or wid in self.alive or wid not in self.registry:
            raise ValueError(f"worker {wid} cannot recover")
        self.alive.add(wid)
        state.phase = Phase.UPDATING
        state.round = self.round

    def join(self, wid: int) -> WorkerRound:
        """Admit a new worker at the current round boundary.

        The newcomer pulls S x R segments from the member list and adopts
        their aggregate, with no local term.
        """
        if wid in self.workers:
            raise JoinRejected(f"worker id {wid} already used")
        members = sorted(self.registry)
        R = max(self.replicas, 1)
        if len(self.alive & self.registry) < R:
            raise JoinRejected(f"only {len(self.alive)} alive workers, need R={R}")
        state = self._new_state(wid, np.zeros(self.scheme.dim))
        state.peers = {p: False for p in members}
        plan_rng = self._plan_rng(state)
        plan = plan_pulls(wid, members, self.scheme.num_segments, R, plan_rng,
                          self.round, self.policy)
        providers, failures, short = self._resolve(state, plan)
        if any(not p for p in providers):
            raise JoinRejected(f"worker {wid}: no reachable provider for some segment")
        ids = self.alive_ids()
        current = np.vstack([self.workers[i].model for i in ids])
        state.model = self._aggregate(current, ids, [providers], [None])[0]
        self.workers[wid] = state
        self.alive.add(wid)
        self.registry.add(wid)
        self._contact(wid, providers)
        return WorkerRound(wid, self.round, providers, failures, state.model.copy(),
                           checkpoint(plan_rng), short)

    # ---------------------------------------------------------------- round

    def _resolve(self, state: WorkerState, plan: list[PullRequest]):
        """Contact every planned target, re-routing around dead ones."""
        S = self.scheme.num_segments
        providers: list[list[int]] = [[] for _ in range(S)]
        failures: list[tuple[int, int, int | None]] = []
        short = 0
        by_seg: list[list[PullRequest]] = [[] for _ in range(S)]
        for req in plan:
            by_seg[req.segment_index].append(req)
        for l, reqs in enumerate(by_seg):
            used = {r.target for r in reqs}
            for req in reqs:
                cur = req
                while cur is not None:
                    if cur.target in self.alive:
                        state.peers[cur.target] = False
                        providers[l].append(cur.target)
                        break
                    nxt = handle_peer_failure(state, cur, used, state.failover_rng)
                    failures.append((l, cur.target, None if nxt is None else nxt.target))
                    if nxt is None:
                        short += 1
                        log.warning("worker %d round %d: segment %d short one replica",
                                    state.id, self.round, l)
                    else:
                        used.add(nxt.target)
                    cur = nxt
        return providers, failures, short

    def _contact(self, requester: int, providers: list[list[int]]) -> None:
        # a served request tells the target the requester is alive
        for seg in providers:
            for target in seg:
                self.workers[target].peers[requester] = False

    def _aggregate(self, models: np.ndarray, ids: list[int], providers: list[list[list[int]]],
                   local: list[int | None]) -> np.ndarray:
        row = {wid: k for k, wid in enumerate(ids)}
        S = self.scheme.num_segments
        width = 1 + max((len(p) for per in providers for p in per), default=0)
        table = np.full((len(providers), S, width), -1, dtype=np.int64)
        for i, per in enumerate(providers):
            for l, peers in enumerate(per):
                members = sorted(peers + ([local[i]] if local[i] is not None else []))
                if len(set(members)) != len(members):
                    raise ValueError(f"duplicate provider for segment {l}: {members}")
                table[i, l, :len(members)] = [row[m] for m in members]
        weights = np.array([float(self.workers[w].weight) for w in ids])
        return _kernels.segment_aggregate(models, weights, table, self._bounds)

    def step_round(self) -> RoundResult:
        t = self.round
        ids = self.alive_ids()
        S = self.scheme.num_segments
        warnings: list[str] = []

        # requests are planned before the update starts (pipelined)
        plans = {}
        marks = {}
        for wid in ids:
            st = self.workers[wid]
            st.phase = Phase.UPDATING
            known = st.known_alive()
            R = min(self.replicas, len(known))
            if R < self.replicas:
                msg = f"worker {wid} round {t}: only {len(known)} known peers, R reduced to {R}"
                warnings.append(msg)
                log.warning(msg)
            plan_rng = self._plan_rng(st)
            plans[wid] = plan_pulls(wid, known, S, R, plan_rng, t, self.policy)
            marks[wid] = checkpoint(plan_rng)
            st.pending = list(plans[wid])

        visited: list[np.ndarray] = []
        post = np.empty((len(ids), self.scheme.dim))
        for k, wid in enumerate(ids):
            path = self.task.descend(wid, self.workers[wid].model, self.sgd)
            if self.record_visited:
                visited.append(path[:-1])
            post[k] = path[-1]

        all_providers = []
        results = []
        for wid in ids:
            st = self.workers[wid]
            st.phase = Phase.AWAITING
            providers, failures, short = self._resolve(st, plans[wid])
            if short:
                warnings.append(f"worker {wid} round {t}: {short} replica(s) missing")
            st.providers = providers
            st.pending = []
            all_providers.append(providers)
            results.append((wid, providers, failures, short))
        for wid, providers in zip(ids, all_providers):
            self._contact(wid, providers)

        for wid in ids:
            self.workers[wid].phase = Phase.AGGREGATING
        new = self._aggregate(post, ids, all_providers, ids)
        weights = [self.workers[w].weight for w in ids]
        oracle = np.zeros(self.scheme.dim)
        total = 0.0
        for k, w in enumerate(weights):
            total += float(w)
            oracle += float(w) * post[k]
        oracle = oracle / total

        out = []
        for k, (wid, providers, failures, short) in enumerate(results):
            st = self.workers[wid]
            st.model = new[k]
            st.round = t + 1
            st.phase = Phase.UPDATING
            out.append(WorkerRound(wid, t, providers, failures, new[k].copy(), marks[wid], short))
        self.round = t + 1
        return RoundResult(t, out, oracle, visited, warnings)
