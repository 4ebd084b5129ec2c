"""Comparison systems: server-based FedAvg and naive (unsegmented) gossip."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from .aggregation import global_average_oracle
from .gossip import ChurnEvent, ChurnKind, JoinRejected
from .params import ModelParams
from .rng import Purpose, stream
from .tasks import SgdConfig, local_update


class BaselineKind(Enum):
    FEDAVG = "fedavg"
    NAIVE_GOSSIP = "gossip"


def fedavg_round(models: dict[int, ModelParams], server: int, task, sgd: SgdConfig) -> dict[int, ModelParams]:
    """One FedAvg round with full participation.

    Every worker (the server included) trains locally; the server averages
    all post-update models and everyone adopts the result.
    """
    if server not in models:
        raise ValueError(f"server {server} is not a federation member")
    ids = sorted(models)
    updated = [local_update(task, w, models[w], sgd) for w in ids]
    avg = global_average_oracle(updated, [int(task.weights[w]) for w in ids])
    return {w: avg for w in ids}


def make_naive_gossip_config(base: dict) -> dict:
    """Same run, whole models only: S forced to 1, R and everything else kept."""
    cfg = copy.deepcopy(base)
    cfg["S"] = 1
    cfg["mode"] = "gossip"
    return cfg


@dataclass
class FedAvgRound:
    round: int
    server: int
    workers: list[int]
    model: np.ndarray
    visited: list[np.ndarray] = field(default_factory=list)


class FedAvgFederation:
    """FedAvg over a churning membership; the server is one of the workers."""

    def __init__(self, task, sgd: SgdConfig, seed: int, members: Sequence[int],
                 init_model: np.ndarray, record_visited: bool = False):
        self.task = task
        self.sgd = sgd
        self.round = 0
        self.record_visited = record_visited
        self.model = np.array(init_model, dtype=np.float64)
        self.models = {w: self.model.copy() for w in members}
        self.alive = set(members)
        self._server_rng = stream(seed, Purpose.SERVER)
        self.server = self._pick_server()

    def _pick_server(self) -> int:
        ids = sorted(self.alive)
        return ids[int(self._server_rng.integers(len(ids)))]

    def alive_ids(self) -> list[int]:
        return sorted(self.alive)

    def apply(self, event: ChurnEvent):
        wid = event.worker
        if event.kind is ChurnKind.JOIN:
            if wid in self.models:
                raise JoinRejected(f"worker id {wid} already used")
            if not self.alive:
                raise JoinRejected("no live server to join")
            self.models[wid] = self.model.copy()
            self.alive.add(wid)
            return wid
        if event.kind in (ChurnKind.CRASH, ChurnKind.LEAVE):
            if wid not in self.alive:
                raise ValueError(f"worker {wid} is not alive")
            self.alive.discard(wid)
            if event.kind is ChurnKind.LEAVE:
                del self.models[wid]
            if wid == self.server and self.alive:
                self.server = self._pick_server()
        elif event.kind is ChurnKind.RECOVER:
            if wid not in self.models or wid in self.alive:
                raise ValueError(f"worker {wid} cannot recover")
            self.alive.add(wid)
        return None

    def step_round(self) -> FedAvgRound:
        ids = self.alive_ids()
        visited = []
        acc = np.zeros(self.model.shape[0])
        total = 0.0
        for wid in ids:
            path = self.task.descend(wid, self.models[wid], self.sgd)
            if self.record_visited:
                visited.append(path[:-1])
            w = float(self.task.weights[wid])
            total += w
            acc += w * path[-1]
        self.model = acc / total
        for wid in ids:
            self.models[wid] = self.model.copy()
        res = FedAvgRound(self.round, self.server, ids, self.model.copy(), visited)
        self.round += 1
        return res
