"""Experiment orchestration: seeded runs, trace files, timing, CSV reports.

Runs are two-phase.  :func:`run` executes the logical protocol and writes a
trace; :func:`attach_times` replays the trace through the network simulator
and writes a timeline; :func:`report` turns timelines into CSV tables.
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .baselines import FedAvgFederation
from .config import RunConfig, with_overrides
from .gossip import ChurnKind, Federation
from .netsim import NetConfig, TraceError, simulate
from .params import make_scheme
from .rng import Purpose, stream
from .tasks import NumericError, SgdConfig, make_task
from .trace import TIMELINE_SCHEMA, TRACE_SCHEMA, JsonlWriter, read_timeline, read_trace

log = logging.getLogger(__name__)

HIGHER_IS_BETTER = {"accuracy"}


class RunFailed(RuntimeError):
    """The run stopped early; the trace written so far is kept."""


@dataclass
class Setup:
    cfg: RunConfig
    task: object
    scheme: object
    seg_bytes: list[int]
    init: np.ndarray
    engine: object


def build(cfg: RunConfig, record_visited: bool = False) -> Setup:
    """Task, segmentation and protocol engine for a config."""
    task = make_task(cfg.task_kind, cfg.n_total, cfg.dim, cfg.seed, **cfg.task_params)
    S = cfg.effective_S
    scheme = make_scheme(cfg.dim, S)
    wire = make_scheme(cfg.wire, S)
    seg_bytes = [int(x) * cfg.net.bytes_per_parameter for x in wire.lengths()]
    init = cfg.init_scale * stream(cfg.seed, Purpose.INIT).standard_normal(cfg.dim)
    sgd = SgdConfig(cfg.alpha, cfg.batch_size, cfg.tau, cfg.seed)
    members = list(range(cfg.n))
    if cfg.mode == "fedavg":
        engine = FedAvgFederation(task, sgd, cfg.seed, members, init, record_visited)
    else:
        engine = Federation(task, scheme, sgd, cfg.R, cfg.seed, members, init, record_visited,
                            cfg.peer_selection)
    return Setup(cfg, task, scheme, seg_bytes, init, engine)


def _metrics(task, w: np.ndarray) -> dict:
    return task.evaluate(w)


def _vec(w: np.ndarray) -> list[float]:
    return [float(x) for x in w]


def execute(cfg: RunConfig, sink: Callable[[dict], None],
            on_round: Callable | None = None, setup: Setup | None = None) -> Setup:
    """Run the configured protocol, passing every trace record to ``sink``."""
    st = setup or build(cfg)
    task, engine = st.task, st.engine
    header = {
        "schema": TRACE_SCHEMA,
        "kind": "init",
        "config": cfg.to_dict(),
        "mode": cfg.mode,
        "n": cfg.n,
        "S": cfg.effective_S,
        "R": cfg.R,
        "tau": cfg.tau,
        "seg_bytes": st.seg_bytes,
        "weights": [int(x) for x in task.weights],
        "members": list(range(cfg.n)),
        "model": _vec(st.init),
        **_metrics(task, st.init),
    }
    if hasattr(task, "optimum"):
        header["optimum"] = _vec(task.optimum)
    sink(header)
    events = cfg.events
    keep_models = cfg.record_models
    for t in range(cfg.rounds):
        for ev in (e for e in events if e.round == t):
            joined = engine.apply(ev)
            sink({"kind": "churn", "round": t, "event": ev.kind.value, "worker": ev.worker})
            if ev.kind is ChurnKind.JOIN:
                rec = {"kind": "join", "round": t, "worker": ev.worker}
                if cfg.mode == "fedavg":
                    rec.update(server=engine.server, providers=None, failures=[])
                    model = engine.model
                else:
                    rec.update(providers=joined.providers,
                               failures=[list(f) for f in joined.failures],
                               short=joined.short, rng=joined.checkpoint)
                    model = joined.model
                rec.update(_metrics(task, model))
                if keep_models:
                    rec["model"] = _vec(model)
                sink(rec)
        try:
            res = engine.step_round()
        except NumericError as exc:
            sink({"kind": "error", "round": t, "message": str(exc)})
            raise RunFailed(f"round {t}: {exc}") from exc
        if on_round is not None:
            on_round(res)
        if cfg.mode == "fedavg":
            oracle = res.model
            sink({"kind": "oracle", "round": t, **_metrics(task, oracle),
                  **({"model": _vec(oracle)} if keep_models else {})})
            m = _metrics(task, res.model)
            for wid in res.workers:
                rec = {"kind": "round", "round": t, "worker": wid, "server": res.server,
                       "providers": None, "failures": [], **m}
                if keep_models:
                    rec["model"] = _vec(res.model)
                sink(rec)
        else:
            sink({"kind": "oracle", "round": t, **_metrics(task, res.oracle),
                  **({"model": _vec(res.oracle)} if keep_models else {})})
            for wr in res.workers:
                rec = {"kind": "round", "round": t, "worker": wr.worker,
                       "providers": wr.providers, "failures": [list(f) for f in wr.failures],
                       "short": wr.short, "rng": wr.checkpoint, **_metrics(task, wr.model)}
                if keep_models:
                    rec["model"] = _vec(wr.model)
                sink(rec)
    return st


def run(cfg: RunConfig, out_path) -> Path:
    """Execute a run and write its trace; raises :class:`RunFailed` after
    writing a partial trace if the numerics blow up."""
    out_path = Path(out_path)
    with JsonlWriter(out_path) as w:
        execute(cfg, w.write)
    return out_path


def run_records(cfg: RunConfig, on_round=None) -> tuple[dict, list[dict]]:
    recs: list[dict] = []
    execute(cfg, recs.append, on_round)
    return recs[0], recs[1:]


# --------------------------------------------------------------------------
# timing
# --------------------------------------------------------------------------

_METRIC_KEYS = ("loss", "suboptimality", "distance", "accuracy")


def timeline_records(header: dict, records: Sequence[dict], net: NetConfig) -> tuple[dict, list[dict]]:
    try:
        tl = simulate(header, records, net)
    except KeyError as exc:
        raise TraceError(f"trace record missing field {exc}") from exc
    metrics = {(r["round"], r["worker"]): r for r in records if r.get("kind") == "round"}
    theader = {
        "schema": TIMELINE_SCHEMA,
        "kind": "timeline",
        "mode": header["mode"],
        "n": header["n"],
        "S": header["S"],
        "R": header["R"],
        "seed": header["config"]["seed"],
        "net": net.to_dict(),
        "total_bytes": tl.total_bytes,
        "init": {k: header[k] for k in _METRIC_KEYS if k in header},
    }
    out = []
    for rec in tl.records:
        src = metrics[(rec["round"], rec["worker"])]
        row = {"kind": "worker", **rec}
        row.update({k: src[k] for k in _METRIC_KEYS if k in src})
        out.append(row)
    for t, end in sorted(tl.round_end.items()):
        out.append({"kind": "round_end", "round": t, "time": end})
    return theader, out


def attach_times(trace_path, net: NetConfig | None, out_path) -> Path:
    header, records = read_trace(trace_path)
    if header.get("kind") != "init":
        raise TraceError(f"{trace_path}:1: first record must be the init record")
    if net is None:
        net = NetConfig.from_dict(header["config"]["net"])
    theader, rows = timeline_records(header, records, net)
    with JsonlWriter(out_path) as w:
        w.write(theader)
        for r in rows:
            w.write(r)
    return Path(out_path)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

def default_metric(header: dict) -> str:
    return "accuracy" if "accuracy" in header.get("init", {}) else "suboptimality"


def crossed(value: float, target: float, metric: str) -> bool:
    return value >= target if metric in HIGHER_IS_BETTER else value <= target


@dataclass
class RunSummary:
    run: str
    header: dict
    rounds: list[int]
    times: list[float]          # federation time at which each round completed
    means: list[float]          # federation-mean metric per round
    per_worker: list[dict]      # round -> {worker: metric}
    sync: list[float]           # mean per-worker sync time per round
    init_metric: float

    def time_to_target(self, target: float, metric: str):
        if crossed(self.init_metric, target, metric):
            return 0.0, -1
        for t, tm, m in zip(self.rounds, self.times, self.means):
            if crossed(m, target, metric):
                return tm, t
        return None, None


def summarize(run: str, header: dict, rows: Iterable[dict], metric: str) -> RunSummary:
    ends: dict[int, float] = {}
    vals: dict[int, dict[int, float]] = {}
    syncs: dict[int, list[float]] = {}
    for r in rows:
        if r["kind"] == "round_end":
            ends[r["round"]] = r["time"]
        elif r["kind"] == "worker":
            if metric not in r:
                raise TraceError(f"{run}: metric {metric!r} not recorded")
            vals.setdefault(r["round"], {})[r["worker"]] = r[metric]
            syncs.setdefault(r["round"], []).append(r["sync"])
    rounds = sorted(vals)
    return RunSummary(
        run, header, rounds, [ends[t] for t in rounds],
        [float(np.mean(list(vals[t].values()))) for t in rounds],
        [vals[t] for t in rounds],
        [float(np.mean(syncs[t])) for t in rounds],
        header["init"][metric],
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def report(timeline_paths: Sequence, target: float, out_dir, metric: str | None = None) -> dict[str, Path]:
    """Write curves, time-to-target, sync-vs-S and time-vs-R tables."""
    if not timeline_paths:
        raise ValueError("report needs at least one timeline")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs: list[RunSummary] = []
    for p in timeline_paths:
        header, rows = read_timeline(p)
        m = metric or default_metric(header)
        runs.append(summarize(Path(p).stem, header, rows, m))
    metric = metric or default_metric(runs[0].header)

    curves, ttt, per_round = [], [], []
    for s in runs:
        h = s.header
        key = [s.run, h["mode"], h["n"], h["S"], h["R"], h["seed"]]
        curves.append(key + [-1, 0.0, "mean", s.init_metric])
        for t, tm, mean, per in zip(s.rounds, s.times, s.means, s.per_worker):
            curves.append(key + [t, tm, "mean", mean])
            curves.extend(key + [t, tm, w, v] for w, v in sorted(per.items()))
        for t, tm, sy in zip(s.rounds, s.times, s.sync):
            per_round.append([s.run, t, tm, sy])
        when, rnd = s.time_to_target(target, metric)
        end = s.times[-1] if s.times else 0.0
        cap = h["net"]["node_capacity"]
        util = 8.0 * h["total_bytes"] / (end * h["n"] * cap) if end > 0 else 0.0
        ttt.append(key + [metric, target, when is not None,
                          "" if rnd is None else rnd + 1,
                          "unreached" if when is None else when,
                          s.means[-1] if s.means else s.init_metric,
                          float(np.mean(s.sync)) if s.sync else 0.0, util])

    def grouped(keyfn, valfn):
        groups: dict[tuple, list] = {}
        for s in runs:
            groups.setdefault(keyfn(s.header), []).append(valfn(s))
        return sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0]))

    sync_vs_s = [
        list(k) + [len(v), float(np.mean(v))]
        for k, v in grouped(lambda h: (h["mode"], h["n"], h["R"], h["S"]),
                            lambda s: float(np.mean(s.sync)) if s.sync else 0.0)
    ]
    ttt_vs_r = []
    for k, v in grouped(lambda h: (h["mode"], h["n"], h["S"], h["R"]),
                        lambda s: s.time_to_target(target, metric)[0]):
        reached = [x for x in v if x is not None]
        ttt_vs_r.append(list(k) + [len(v), len(reached),
                                   float(np.mean(reached)) if reached else "unreached"])

    ident = ["run", "mode", "n", "S", "R", "seed"]
    return {
        "curves": _write_csv(out_dir / "curves.csv", ident + ["round", "time", "worker", metric], curves),
        "time_to_target": _write_csv(
            out_dir / "time_to_target.csv",
            ident + ["metric", "target", "reached", "rounds_to_target", "time_to_target",
                     "final_metric", "mean_sync_time", "utilization"], ttt),
        "sync": _write_csv(out_dir / "sync.csv", ["run", "round", "time", "sync_time"], per_round),
        "sync_vs_S": _write_csv(out_dir / "sync_vs_S.csv",
                                ["mode", "n", "R", "S", "runs", "mean_sync_time"], sync_vs_s),
        "ttt_vs_R": _write_csv(out_dir / "ttt_vs_R.csv",
                               ["mode", "n", "S", "R", "runs", "reached_runs", "mean_time_to_target"],
                               ttt_vs_r),
    }


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

def parse_vary(spec: str) -> tuple[str, list]:
    """``"S=1,2,5"`` -> ("S", [1, 2, 5]); values are JSON where possible."""
    if "=" not in spec:
        raise ValueError(f"--vary expects KEY=V1,V2,..., got {spec!r}")
    key, raw = spec.split("=", 1)
    values = []
    for item in raw.split(","):
        try:
            values.append(json.loads(item))
        except json.JSONDecodeError:
            values.append(item)
    return key.strip(), values


def sweep(cfg: RunConfig, vary: dict[str, list], out_dir, target: float | None = None,
          metric: str | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(vary)
    timelines = []
    for combo in itertools.product(*(vary[k] for k in keys)):
        tag = "_".join(f"{k.replace('.', '-')}{v}" for k, v in zip(keys, combo)) or "base"
        run_cfg = with_overrides(cfg, **dict(zip(keys, combo)))
        trace = run(run_cfg, out_dir / f"trace_{tag}.jsonl")
        timelines.append(attach_times(trace, run_cfg.net, out_dir / f"timeline_{tag}.jsonl"))
    result = {"timelines": timelines}
    if target is None and cfg.target is not None:
        target, metric = cfg.target["value"], metric or cfg.target["metric"]
    if target is not None:
        result["reports"] = report(timelines, target, out_dir, metric)
    return result
