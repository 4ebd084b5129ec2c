"""Flat parameter vectors, equal-split segmentation, and mixed-model rebuild."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class SchemeError(ValueError):
    """Invalid segmentation, or segments that do not fit a scheme."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.size == 0:
            raise ValueError("model must have at least one parameter")
        if not np.all(np.isfinite(v)):
            raise ValueError("model contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.dim == other.dim and bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash(self.values.tobytes())


@dataclass(frozen=True)
class SegmentationScheme:
    """S contiguous half-open ranges covering ``[0, dim)``.

    ``offsets`` has S+1 entries; segment ``l`` is ``[offsets[l], offsets[l+1])``.
    """
    dim: int
    num_segments: int
    offsets: tuple[int, ...] = field(repr=False)

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        return [(self.offsets[l], self.offsets[l + 1]) for l in range(self.num_segments)]

    def length(self, l: int) -> int:
        return self.offsets[l + 1] - self.offsets[l]

    def lengths(self) -> np.ndarray:
        return np.diff(np.asarray(self.offsets))

    def segment_of(self, index: int) -> int:
        if not 0 <= index < self.dim:
            raise IndexError(index)
        return int(np.searchsorted(self.offsets, index, side="right") - 1)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.offsets, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Segment:
    segment_index: int
    values: np.ndarray
    provider_id: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "values", v)


def make_scheme(dim: int, S: int) -> SegmentationScheme:
    """Equal split; the first ``dim % S`` segments get one extra index."""
    if dim < 1:
        raise SchemeError(f"dim must be positive, got {dim}")
    if not 1 <= S <= dim:
        raise SchemeError(f"need 1 <= S <= dim, got S={S}, dim={dim}")
    base, extra = divmod(dim, S)
    offsets = [0]
    for l in range(S):
        offsets.append(offsets[-1] + base + (1 if l < extra else 0))
    return SegmentationScheme(dim, S, tuple(offsets))


def split(model: ModelParams, scheme: SegmentationScheme, provider_id: int = -1) -> list[Segment]:
    if model.dim != scheme.dim:
        raise SchemeError(f"model dim {model.dim} != scheme dim {scheme.dim}")
    return [
        Segment(l, model.values[lo:hi].copy(), provider_id)
        for l, (lo, hi) in enumerate(scheme.boundaries)
    ]


def rebuild(segments: Sequence[Segment], scheme: SegmentationScheme) -> ModelParams:
    """Concatenate one segment per index; providers may differ per segment."""
    by_index: dict[int, Segment] = {}
    for seg in segments:
        l = seg.segment_index
        if not 0 <= l < scheme.num_segments:
            raise SchemeError(f"segment index {l} outside [0, {scheme.num_segments})")
        if l in by_index:
            raise SchemeError(f"duplicate segment index {l}")
        if seg.values.shape[0] != scheme.length(l):
            raise SchemeError(
                f"segment {l} has length {seg.values.shape[0]}, expected {scheme.length(l)}"
            )
        by_index[l] = seg
    missing = sorted(set(range(scheme.num_segments)) - by_index.keys())
    if missing:
        raise SchemeError(f"missing segment indices {missing}")
    return ModelParams(np.concatenate([by_index[l].values for l in range(scheme.num_segments)]))
