"""Segment-wise weighted aggregation and the full-federation average."""
from __future__ import annotations

import numbers
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .params import ModelParams, Segment, SegmentationScheme, SchemeError


class AggregationError(ValueError):
    pass


def _check_weight(w) -> float:
    if isinstance(w, bool) or not isinstance(w, numbers.Integral):
        raise AggregationError(f"weights must be integer dataset sizes, got {w!r}")
    if w <= 0:
        raise AggregationError(f"weights must be positive, got {w}")
    return float(w)


def aggregate_segment(providers: Sequence[tuple[int, int, np.ndarray]]) -> np.ndarray:
    """Weighted mean of one segment over ``(worker_id, weight, values)`` triples.

    Terms are summed in ascending worker id so the result does not depend on
    the order providers arrive in.
    """
    if not providers:
        raise AggregationError("empty provider list")
    ordered = sorted(providers, key=lambda p: p[0])
    ids = [p[0] for p in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"duplicate provider ids {ids}")
    weights = np.array([_check_weight(p[1]) for p in ordered])
    rows = [np.asarray(p[2], dtype=np.float64).reshape(-1) for p in ordered]
    length = rows[0].shape[0]
    if any(r.shape[0] != length for r in rows):
        raise AggregationError("segment length mismatch between providers")
    table = np.arange(len(rows), dtype=np.int64).reshape(1, 1, -1)
    bounds = np.array([0, length], dtype=np.int64)
    return _kernels.segment_aggregate(np.vstack(rows), weights, table, bounds)[0]


def aggregate_model(
    local: ModelParams | None,
    mixed: Sequence[Sequence[Segment]],
    scheme: SegmentationScheme,
    weights: Mapping[int, int],
    local_id: int | None = None,
) -> ModelParams:
    """Aggregate the local model with R mixed models segment by segment.

    ``mixed`` holds R mixed models, each a sequence of segments tagged with
    their provider.  ``local`` may be None for a newly joined worker, which
    aggregates the pulled segments alone.
    """
    if local is not None:
        if local_id is None:
            raise AggregationError("local_id is required when a local model is given")
        if local.dim != scheme.dim:
            raise SchemeError(f"local dim {local.dim} != scheme dim {scheme.dim}")
    per_segment: list[list[tuple[int, int, np.ndarray]]] = [[] for _ in range(scheme.num_segments)]
    if local is not None:
        for l, (lo, hi) in enumerate(scheme.boundaries):
            per_segment[l].append((local_id, weights[local_id], local.values[lo:hi]))
    for replica in mixed:
        for seg in replica:
            l = seg.segment_index
            if not 0 <= l < scheme.num_segments:
                raise SchemeError(f"segment index {l} out of range")
            if seg.values.shape[0] != scheme.length(l):
                raise SchemeError(f"segment {l} has wrong length {seg.values.shape[0]}")
            if any(p[0] == seg.provider_id for p in per_segment[l]):
                raise AggregationError(
                    f"worker {seg.provider_id} supplies segment {l} more than once"
                )
            per_segment[l].append((seg.provider_id, weights[seg.provider_id], seg.values))
    out = np.empty(scheme.dim)
    for l, (lo, hi) in enumerate(scheme.boundaries):
        out[lo:hi] = aggregate_segment(per_segment[l])
    return ModelParams(out)


def global_average_oracle(models: Sequence[ModelParams], weights: Sequence[int]) -> ModelParams:
    """Weighted mean of all models (FedAvg aggregation), summed in the given order."""
    if len(models) == 0:
        raise AggregationError("no models to average")
    if len(models) != len(weights):
        raise AggregationError("one weight per model required")
    dim = models[0].dim
    acc = np.zeros(dim)
    total = 0.0
    for m, w in zip(models, weights):
        if m.dim != dim:
            raise AggregationError("models differ in dimension")
        w = _check_weight(w)
        total += w
        acc += w * m.values
    return ModelParams(acc / total)
