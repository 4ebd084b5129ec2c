"""Command line entry point: ``combofl run|attach-times|report|sweep``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig
from .harness import RunFailed, attach_times, parse_vary, report, run, sweep
from .netsim import NetConfig, TraceError
from .trace import TraceFormatError


def _net_arg(value: str | None) -> NetConfig | None:
    if value is None:
        return None
    data = json.loads(Path(value).read_text())
    return NetConfig.from_dict(data.get("net", data))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="combofl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="execute a run and write its trace")
    p.add_argument("config")
    p.add_argument("-o", "--out", help="trace path (default: <config stem>.trace.jsonl)")

    p = sub.add_parser("attach-times", help="replay a trace through the network simulator")
    p.add_argument("trace")
    p.add_argument("netconfig", nargs="?", help="NetConfig JSON (default: the trace's own)")
    p.add_argument("-o", "--out", help="timeline path (default: <trace stem>.timeline.jsonl)")

    p = sub.add_parser("report", help="CSV summaries from timelines")
    p.add_argument("timelines", nargs="+")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--metric", help="metric to compare against the target")
    p.add_argument("-o", "--out", default="report")

    p = sub.add_parser("sweep", help="run a config over a grid of overrides")
    p.add_argument("config")
    p.add_argument("--vary", action="append", default=[], help="KEY=V1,V2,... (repeatable)")
    p.add_argument("--target", type=float)
    p.add_argument("--metric")
    p.add_argument("-o", "--out", default="sweep")

    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "run":
            cfg = RunConfig.load(args.config)
            out = args.out or Path(args.config).with_suffix(".trace.jsonl").name
            print(run(cfg, out))
        elif args.cmd == "attach-times":
            out = args.out or Path(args.trace).name.replace(".trace", "").replace(".jsonl", "") + ".timeline.jsonl"
            print(attach_times(args.trace, _net_arg(args.netconfig), out))
        elif args.cmd == "report":
            for name, path in report(args.timelines, args.target, args.out, args.metric).items():
                print(f"{name}: {path}")
        elif args.cmd == "sweep":
            cfg = RunConfig.load(args.config)
            vary = dict(parse_vary(v) for v in args.vary)
            res = sweep(cfg, vary, args.out, args.target, args.metric)
            for path in res["timelines"]:
                print(path)
            for name, path in res.get("reports", {}).items():
                print(f"{name}: {path}")
    except RunFailed as exc:
        print(f"error: run failed, partial trace kept: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, TraceError, TraceFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
