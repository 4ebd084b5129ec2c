"""Run configuration: one JSON document with every knob named."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .gossip import ChurnEvent, ChurnKind
from .netsim import NetConfig

MODES = ("combo", "gossip", "fedavg")

DEFAULT_TASK = {
    "quadratic": {"mu": 0.002, "L": 0.2, "spread": 0.3, "sizes": 100, "curvature_noise": 0.5,
                  "basis": "axis"},
    "logistic": {"sizes": 200, "separation": 1.0, "noise": 1.0, "val_size": 2000, "l2": 1e-4},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    n: int = 30
    dim: int = 20
    S: int = 10
    R: int = 2
    tau: int = 40
    alpha: float = 0.1
    batch_size: int = 128
    task: dict = field(default_factory=lambda: {"kind": "quadratic"})
    mode: str = "combo"
    net: NetConfig = field(default_factory=NetConfig)
    wire_params: int | None = None      # parameter count used for transfer sizes
    init_scale: float = 1.0
    churn: list = field(default_factory=list)
    seed: int = 0
    rounds: int = 50
    target: dict | None = None          # {"metric": ..., "value": ...}
    record_models: bool = True
    peer_selection: str = "balanced"    # or "pool"

    # ------------------------------------------------------------ derived

    @property
    def task_kind(self) -> str:
        return self.task.get("kind", "quadratic")

    @property
    def task_params(self) -> dict:
        params = dict(DEFAULT_TASK.get(self.task_kind, {}))
        params.update({k: v for k, v in self.task.items() if k != "kind"})
        return params

    @property
    def events(self) -> list[ChurnEvent]:
        return sorted((ChurnEvent.from_dict(e) for e in self.churn), key=lambda e: e.round)

    @property
    def n_total(self) -> int:
        joins = [e.worker for e in self.events if e.kind is ChurnKind.JOIN]
        return max([self.n] + [w + 1 for w in joins])

    @property
    def effective_S(self) -> int:
        # naive gossip and FedAvg always move whole models
        return self.S if self.mode == "combo" else 1

    @property
    def wire(self) -> int:
        return self.dim if self.wire_params is None else int(self.wire_params)

    # ------------------------------------------------------------ checks

    def validate(self) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.mode in MODES, f"mode must be one of {MODES}, got {self.mode!r}")
        need(self.peer_selection in ("balanced", "pool"),
             f"peer_selection must be 'balanced' or 'pool', got {self.peer_selection!r}")
        need(self.n >= 1, f"n must be >= 1, got {self.n}")
        need(self.dim >= 1, f"dim must be >= 1, got {self.dim}")
        if self.mode == "combo":
            need(1 <= self.S <= self.dim, f"S={self.S} must satisfy 1 <= S <= dim={self.dim}")
            need(self.S <= self.wire, f"S={self.S} exceeds wire_params={self.wire}")
        need(self.R >= 0, f"R must be >= 0, got {self.R}")
        if self.mode != "fedavg":
            need(self.R <= self.n - 1, f"R={self.R} exceeds n-1={self.n - 1}")
        need(self.tau >= 1 and self.batch_size >= 1, "tau and batch_size must be positive")
        need(self.alpha > 0, "alpha must be positive")
        need(self.rounds >= 0, "rounds must be >= 0")
        need(self.task_kind in DEFAULT_TASK, f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "quadratic":
            L = self.task_params["L"]
            need(self.alpha <= 1.0 / L, f"alpha={self.alpha} exceeds 1/L={1.0 / L:g}")
        if self.target is not None:
            need({"metric", "value"} <= set(self.target), "target needs 'metric' and 'value'")
        self._validate_churn()
        return self

    def _validate_churn(self):
        alive = set(range(self.n))
        crashed: set[int] = set()
        used = set(range(self.n))
        for ev in self.events:
            w = ev.worker
            if not 0 <= ev.round < max(self.rounds, 1):
                raise ConfigError(f"churn event {ev.to_dict()} outside rounds [0, {self.rounds})")
            if ev.kind is ChurnKind.JOIN:
                if w in used:
                    raise ConfigError(f"join of worker {w}: id already in use")
                used.add(w)
                alive.add(w)
            elif ev.kind in (ChurnKind.CRASH, ChurnKind.LEAVE):
                if w not in alive:
                    raise ConfigError(f"{ev.kind.value} of worker {w}: not alive at round {ev.round}")
                alive.discard(w)
                if ev.kind is ChurnKind.CRASH:
                    crashed.add(w)
            elif ev.kind is ChurnKind.RECOVER:
                if w not in crashed:
                    raise ConfigError(f"recover of worker {w}: it never crashed")
                crashed.discard(w)
                alive.add(w)
            if not alive:
                raise ConfigError(f"no alive workers after {ev.to_dict()}")

    # ------------------------------------------------------------ io

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "net" in d:
                d["net"] = NetConfig.from_dict(d["net"])
            cfg = cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    d = cfg.to_dict()
    for key, value in changes.items():
        if "." in key:
            outer, inner = key.split(".", 1)
            d[outer] = dict(d.get(outer) or {})
            d[outer][inner] = value
        else:
            d[key] = value
    return RunConfig.from_dict(d)
