"""Stable per-purpose / per-worker random streams from one master seed.

Every stream is ``SeedSequence(seed, spawn_key=(purpose, worker + 1))``; the
global stream of a purpose uses worker slot 0.  Streams depend only on
(seed, purpose, worker), so adding workers never perturbs existing streams.
"""
from __future__ import annotations

from enum import IntEnum

import numpy as np


class Purpose(IntEnum):
    TASK = 0        # synthetic data / objective generation
    PLAN = 1        # pull-target selection
    SGD = 2         # minibatch shuffling
    FAILOVER = 3    # replacement target after a failed pull
    INIT = 4        # shared initial parameters
    SERVER = 5      # FedAvg server choice
    RING = 6        # shared per-round ring order for balanced peer selection


def stream(seed: int, purpose: Purpose, worker: int | None = None, sub: int = 0) -> np.random.Generator:
    """``sub`` > 0 gives further independent streams for the same slot."""
    slot = 0 if worker is None else int(worker) + 1
    key = (int(purpose), slot) if sub == 0 else (int(purpose), slot, int(sub))
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def round_stream(seed: int, purpose: Purpose, round: int) -> np.random.Generator:
    """A stream every worker can derive identically for a given round."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(purpose), 0, int(round)))
    return np.random.Generator(np.random.PCG64(ss))


def checkpoint(rng: np.random.Generator) -> str:
    """Short hex fingerprint of a generator's current state."""
    state = rng.bit_generator.state["state"]
    return format((state["state"] ^ state["inc"]) & 0xFFFFFFFFFFFF, "012x")
