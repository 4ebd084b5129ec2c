"""Flow-level discrete-event network simulator.

Transfers are fluid flows sharing bandwidth max-min fairly under three
constraint families: a per-flow cap (the per-pair bottleneck), and per-node
egress and ingress capacities.  Rates are piecewise constant and recomputed
whenever a flow starts or finishes.

Work is expressed as a DAG of tasks.  A task is either a fixed-length delay
(local computation, detection timeouts, zero-length barriers) or a flow; it
starts as soon as all of its prerequisites have finished.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _kernels


class TraceError(ValueError):
    pass


@dataclass
class NetConfig:
    per_pair_bw: float = 10e6          # bit/s between any two workers
    node_capacity: float = 100e6       # bit/s, separately for ingress and egress
    bytes_per_parameter: int = 8
    compute_time_per_step: float = 0.025
    compute_multipliers: dict = field(default_factory=dict)
    failure_detection_delay: float = 0.0

    def __post_init__(self):
        if self.per_pair_bw <= 0 or self.node_capacity <= 0:
            raise ValueError("bandwidths must be positive")
        if self.bytes_per_parameter <= 0 or self.compute_time_per_step <= 0:
            raise ValueError("bytes_per_parameter and compute_time_per_step must be positive")
        if self.failure_detection_delay < 0:
            raise ValueError("failure_detection_delay must be >= 0")
        self.compute_multipliers = {int(k): float(v) for k, v in self.compute_multipliers.items()}
        if any(v <= 0 for v in self.compute_multipliers.values()):
            raise ValueError("compute multipliers must be positive")

    def compute_time(self, worker: int, steps: int) -> float:
        return steps * self.compute_time_per_step * self.compute_multipliers.get(worker, 1.0)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown NetConfig keys: {sorted(unknown)}")
        return cls(**known)

    def to_dict(self) -> dict:
        return {
            "per_pair_bw": self.per_pair_bw,
            "node_capacity": self.node_capacity,
            "bytes_per_parameter": self.bytes_per_parameter,
            "compute_time_per_step": self.compute_time_per_step,
            "compute_multipliers": {str(k): v for k, v in sorted(self.compute_multipliers.items())},
            "failure_detection_delay": self.failure_detection_delay,
        }


@dataclass
class Flow:
    src: int
    dst: int
    size: float                 # bytes
    release_time: float = 0.0
    completion_time: float | None = None


def _node_index(flows_src: Sequence[int], flows_dst: Sequence[int]):
    nodes = sorted(set(flows_src) | set(flows_dst))
    idx = {v: k for k, v in enumerate(nodes)}
    return nodes, idx


def allocate_rates(flows: Sequence[Flow], config: NetConfig) -> np.ndarray:
    """Max-min fair rates (bit/s) for a set of simultaneously active flows."""
    if not flows:
        return np.zeros(0)
    nodes, idx = _node_index([f.src for f in flows], [f.dst for f in flows])
    src = np.array([idx[f.src] for f in flows], dtype=np.int64)
    dst = np.array([idx[f.dst] for f in flows], dtype=np.int64)
    cap = np.full(len(nodes), float(config.node_capacity))
    return _kernels.maxmin_rates(src, dst, cap, cap, float(config.per_pair_bw))


@dataclass
class Epoch:
    start: float
    end: float
    flows: np.ndarray       # task ids
    rates: np.ndarray       # bit/s


class FluidSimulator:
    """Event-driven execution of a task DAG over a fluid network."""

    def __init__(self, config: NetConfig, record_epochs: bool = False):
        self.config = config
        self.record_epochs = record_epochs
        self.epochs: list[Epoch] = []
        self._kind: list[int] = []          # 0 delay, 1 flow
        self._dur: list[float] = []
        self._src: list[int] = []
        self._dst: list[int] = []
        self._bits: list[float] = []
        self._waiting: list[int] = []
        self._dependents: list[list[int]] = []
        self._roots: list[int] = []
        self._node: dict[int, int] = {}
        self.start: np.ndarray | None = None
        self.finish: np.ndarray | None = None

    def _add(self, kind, dur, src, dst, bits, deps) -> int:
        tid = len(self._kind)
        self._kind.append(kind)
        self._dur.append(dur)
        self._src.append(src)
        self._dst.append(dst)
        self._bits.append(bits)
        self._dependents.append([])
        deps = [d for d in deps if d is not None]
        self._waiting.append(len(deps))
        for d in deps:
            self._dependents[d].append(tid)
        if not deps:
            self._roots.append(tid)
        return tid

    def add_delay(self, duration: float, deps: Iterable[int] = ()) -> int:
        if duration < 0:
            raise ValueError("negative delay")
        return self._add(0, float(duration), -1, -1, 0.0, list(deps))

    def add_flow(self, src: int, dst: int, size_bytes: float, deps: Iterable[int] = ()) -> int:
        if size_bytes < 0:
            raise ValueError("negative flow size")
        s = self._node.setdefault(src, len(self._node))
        d = self._node.setdefault(dst, len(self._node))
        return self._add(1, 0.0, s, d, 8.0 * float(size_bytes), list(deps))

    def run(self) -> "FluidSimulator":
        n = len(self._kind)
        start = np.full(n, np.nan)
        finish = np.full(n, np.nan)
        waiting = list(self._waiting)
        cap = np.full(max(len(self._node), 1), float(self.config.node_capacity))
        pair = float(self.config.per_pair_bw)
        heap: list[tuple[float, int]] = []
        act_ids: list[int] = []
        act_rem = np.zeros(0)
        rates = np.zeros(0)
        dirty = False
        now = 0.0

        def release(tids, t):
            nonlocal act_rem, dirty
            stack = list(tids)
            new_ids, new_rem = [], []
            while stack:
                tid = stack.pop()
                start[tid] = t
                if self._kind[tid] == 0 and self._dur[tid] > 0:
                    heapq.heappush(heap, (t + self._dur[tid], tid))
                elif self._kind[tid] == 1 and self._bits[tid] > 0 and self._src[tid] != self._dst[tid]:
                    new_ids.append(tid)
                    new_rem.append(self._bits[tid])
                else:
                    finish[tid] = t
                    for dep in self._dependents[tid]:
                        waiting[dep] -= 1
                        if waiting[dep] == 0:
                            stack.append(dep)
            if new_ids:
                # keep active flows ordered by task id for tie-stable output
                act_ids.extend(new_ids)
                act_rem = np.concatenate([act_rem, new_rem])
                dirty = True

        def complete(tids, t):
            ready = []
            for tid in sorted(tids):
                finish[tid] = t
                for dep in self._dependents[tid]:
                    waiting[dep] -= 1
                    if waiting[dep] == 0:
                        ready.append(dep)
            release(sorted(ready), t)

        release(sorted(self._roots), 0.0)
        while heap or act_ids:
            if dirty:
                order = np.argsort(act_ids, kind="stable")
                act_ids = [act_ids[k] for k in order]
                act_rem = act_rem[order]
                ids = np.asarray(act_ids, dtype=np.int64)
                src = np.asarray([self._src[k] for k in act_ids], dtype=np.int64)
                dst = np.asarray([self._dst[k] for k in act_ids], dtype=np.int64)
                rates = _kernels.maxmin_rates(src, dst, cap, cap, pair)
                dirty = False
            t_next = heap[0][0] if heap else np.inf
            if act_ids:
                ttf = act_rem / rates
                ttf_min = ttf.min()
                t_flow = now + ttf_min
                flow_first = t_flow <= t_next
                t_next = min(t_next, t_flow)
            dt = t_next - now
            if act_ids:
                if self.record_epochs and dt > 0:
                    self.epochs.append(Epoch(now, t_next, ids.copy(), rates.copy()))
                # completion by clock value, so sub-ulp remainders cannot stall the loop
                done = now + ttf <= t_next
                if flow_first:
                    done |= ttf <= ttf_min * (1.0 + 1e-10)
                act_rem = act_rem - rates * dt
                if done.any():
                    finished = [act_ids[k] for k in np.flatnonzero(done)]
                    keep = ~done
                    act_ids = [a for a, k in zip(act_ids, keep) if k]
                    act_rem = act_rem[keep]
                    dirty = True
                else:
                    finished = []
            else:
                finished = []
            now = t_next
            while heap and heap[0][0] <= now:
                finished.append(heapq.heappop(heap)[1])
            if finished:
                complete(finished, now)
        if np.isnan(finish).any():
            raise TraceError("task graph has unsatisfiable dependencies (cycle)")
        self.start, self.finish = start, finish
        return self


def simulate_flows(flows: Sequence[Flow], config: NetConfig,
                   record_epochs: bool = False) -> FluidSimulator:
    """Run independent flows released at their ``release_time``; fills ``completion_time``."""
    sim = FluidSimulator(config, record_epochs)
    ids = []
    for f in flows:
        gate = sim.add_delay(f.release_time)
        ids.append(sim.add_flow(f.src, f.dst, f.size, [gate]))
    sim.run()
    for f, tid in zip(flows, ids):
        f.completion_time = float(sim.finish[tid])
    sim.flow_ids = ids
    return sim


# --------------------------------------------------------------------------
# trace-driven timing
# --------------------------------------------------------------------------

@dataclass
class Timeline:
    """Wall-clock times per (round, worker) plus federation round ends."""
    records: list[dict]
    round_end: dict[int, float]
    total_bytes: float = 0.0

    def by_key(self) -> dict[tuple[int, int], dict]:
        return {(r["round"], r["worker"]): r for r in self.records}

    def sync_times(self) -> dict[int, float]:
        """Mean over workers of (aggregation - own update end), per round."""
        acc: dict[int, list[float]] = {}
        for r in self.records:
            acc.setdefault(r["round"], []).append(r["sync"])
        return {t: float(np.mean(v)) for t, v in sorted(acc.items())}


def _group_records(records: Iterable[dict]):
    rounds: dict[int, dict[int, dict]] = {}
    joins: dict[int, dict[int, dict]] = {}
    for rec in records:
        kind = rec.get("kind")
        if kind == "round":
            rounds.setdefault(rec["round"], {})[rec["worker"]] = rec
        elif kind == "join":
            joins.setdefault(rec["round"], {})[rec["worker"]] = rec
    return rounds, joins


class _Builder:
    """Shared bookkeeping for turning a trace into a task DAG."""

    def __init__(self, sim: FluidSimulator, steps: int, config: NetConfig):
        self.sim = sim
        self.steps = steps
        self.config = config
        self.agg: dict[tuple[int, int], int] = {}      # (round, worker) -> task
        self.compute: dict[tuple[int, int], int] = {}
        self.ready: dict[tuple[int, int], int] = {}    # join completion
        self.barrier: dict[int, int] = {}
        self.total_bytes = 0.0

    def round_barrier(self, t: int) -> int | None:
        """Task finishing once every worker has aggregated round t."""
        if t < 0:
            return None
        if t not in self.barrier:
            deps = [v for (r, _), v in self.agg.items() if r == t]
            self.barrier[t] = self.sim.add_delay(0.0, deps)
        return self.barrier[t]

    def start_deps(self, t: int, w: int) -> list[int]:
        if (t - 1, w) in self.agg:
            return [self.agg[(t - 1, w)]]
        if (t, w) in self.ready:
            return [self.ready[(t, w)]]
        b = self.round_barrier(t - 1)
        return [] if b is None else [b]

    def flow(self, src, dst, size, deps):
        self.total_bytes += size if src != dst else 0.0
        return self.sim.add_flow(src, dst, size, deps)

    def pulls(self, t, w, rec, seg_bytes, provider_gate, start_deps):
        """Flows for one worker's segment pulls, with failover delays."""
        depth: dict[tuple[int, int], int] = {}
        for seg, dead, repl in rec.get("failures", []):
            if repl is not None:
                depth[(seg, repl)] = depth.get((seg, dead), 0) + 1
        timers: dict[int, int] = {}
        flows = []
        for l, provs in enumerate(rec["providers"]):
            for j in provs:
                deps = list(provider_gate(j))
                k = depth.get((l, j), 0)
                if k and self.config.failure_detection_delay > 0:
                    if k not in timers:
                        timers[k] = self.sim.add_delay(k * self.config.failure_detection_delay, start_deps)
                    deps.append(timers[k])
                flows.append(self.flow(j, w, seg_bytes[l], deps))
        return flows


def simulate(header: dict, records: Sequence[dict], config: NetConfig) -> Timeline:
    """Wall-clock timeline for a segmented-gossip (or naive gossip) trace."""
    if header.get("mode") == "fedavg":
        return fedavg_timing(header, records, config)
    seg_bytes = header["seg_bytes"]
    steps = int(header["tau"])
    rounds, joins = _group_records(records)
    sim = FluidSimulator(config)
    b = _Builder(sim, steps, config)
    for t in sorted(set(rounds) | set(joins)):
        for w, rec in sorted(joins.get(t, {}).items()):
            gate = b.round_barrier(t - 1)
            start = [] if gate is None else [gate]
            flows = b.pulls(t, w, rec, seg_bytes, lambda j: start, start)
            b.ready[(t, w)] = sim.add_delay(0.0, start + flows)
        recs = rounds.get(t, {})
        starts = {w: b.start_deps(t, w) for w in recs}
        for w in sorted(recs):
            b.compute[(t, w)] = sim.add_delay(config.compute_time(w, steps), starts[w])
        for w, rec in sorted(recs.items()):
            for l, provs in enumerate(rec["providers"]):
                for j in provs:
                    if (t, j) not in b.compute:
                        raise TraceError(f"round {t}: provider {j} of worker {w} has no record")
            flows = b.pulls(t, w, rec, seg_bytes, lambda j: [b.compute[(t, j)]], starts[w])
            b.agg[(t, w)] = sim.add_delay(0.0, [b.compute[(t, w)]] + flows)
    return _timeline(sim.run(), b)


def fedavg_timing(header: dict, records: Sequence[dict], config: NetConfig,
                  server: int | None = None) -> Timeline:
    """Timeline for FedAvg: upload everything to the server, then download."""
    model_bytes = float(sum(header["seg_bytes"]))
    steps = int(header["tau"])
    rounds, joins = _group_records(records)
    sim = FluidSimulator(config)
    b = _Builder(sim, steps, config)
    for t in sorted(set(rounds) | set(joins)):
        recs = rounds.get(t, {})
        srv = server
        if srv is None and recs:
            srv = next(iter(recs.values())).get("server")
        for w, rec in sorted(joins.get(t, {}).items()):
            gate = b.round_barrier(t - 1)
            start = [] if gate is None else [gate]
            src = rec.get("server", srv)
            f = b.flow(src, w, model_bytes, start)
            b.ready[(t, w)] = sim.add_delay(0.0, start + [f])
        if not recs:
            continue
        if srv not in recs:
            raise TraceError(f"round {t}: server {srv} has no record")
        for w in sorted(recs):
            b.compute[(t, w)] = sim.add_delay(config.compute_time(w, steps), b.start_deps(t, w))
        uploads = [b.flow(w, srv, model_bytes, [b.compute[(t, w)]]) for w in sorted(recs) if w != srv]
        gathered = sim.add_delay(0.0, [b.compute[(t, srv)]] + uploads)
        for w in sorted(recs):
            if w == srv:
                b.agg[(t, w)] = gathered
            else:
                down = b.flow(srv, w, model_bytes, [gathered])
                b.agg[(t, w)] = sim.add_delay(0.0, [down])
    return _timeline(sim.run(), b)


def _timeline(sim: FluidSimulator, b: _Builder) -> Timeline:
    out = []
    round_end: dict[int, float] = {}
    for (t, w), agg in sorted(b.agg.items()):
        c = b.compute[(t, w)]
        rec = {
            "round": t,
            "worker": w,
            "start": float(sim.start[c]),
            "update_end": float(sim.finish[c]),
            "agg": float(sim.finish[agg]),
        }
        rec["sync"] = rec["agg"] - rec["update_end"]
        out.append(rec)
        round_end[t] = max(round_end.get(t, 0.0), rec["agg"])
    return Timeline(out, round_end, b.total_bytes)
