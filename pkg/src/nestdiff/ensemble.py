"""Nested-ensemble aggregation of diffusion samples.

Each hierarchy level contributes a candidate group of M label-space samples.
The lower level turns every sample into a class vote, the upper level takes
the mode over the union of all votes. Ties go to the lowest class index.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

REFERENCE_TEMPERATURES = {"xray": 0.1737, "isic": 0.3162}
DEFAULT_TEMPERATURE = 0.3162


@dataclass(frozen=True)
class CandidateGroup:
    level: int
    samples: np.ndarray  # (M, C)

    def __post_init__(self) -> None:
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"samples must be (M, C), got shape {arr.shape}")
        object.__setattr__(self, "samples", arr)

    @property
    def size(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class EnsembleOutput:
    cls: int
    proba: np.ndarray
    raw: np.ndarray  # (K*M, C)

    def to_record(self) -> dict:
        from .metrics import piw, pv

        C = self.proba.shape[0]
        return {
            "class": int(self.cls),
            "proba": [float(p) for p in self.proba],
            # a single sample has no interval; PIW is left undefined
            "piw": [piw(self.raw, c) for c in range(C)] if self.raw.shape[0] >= 2 else None,
            "pv": [pv(self.raw, c) for c in range(C)],
        }


def _distances(samples: np.ndarray) -> np.ndarray:
    return (np.asarray(samples, dtype=np.float64) - 1.0) ** 2


def vote_of(sample: Sequence[float] | np.ndarray) -> int:
    """Class whose coordinate lies closest to 1 in squared distance."""
    s = np.asarray(sample, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("sample must be finite")
    return int(np.argmax(-_distances(s)))


def votes(samples: np.ndarray) -> np.ndarray:
    """Row-wise :func:`vote_of`; ``np.argmax`` keeps the first maximum, i.e. the lowest index."""
    s = np.asarray(samples, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("samples must be finite")
    return np.argmax(-_distances(s), axis=-1)


def aggregate_lower(group: CandidateGroup) -> list[int]:
    if group.size == 0:
        raise ValueError(f"candidate group at level {group.level} is empty")
    return [int(v) for v in votes(group.samples)]


def mode(values: Sequence[int]) -> int:
    counts = Counter(int(v) for v in values)
    if not counts:
        raise ValueError("no votes")
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def aggregate_upper(groups: Sequence[CandidateGroup]) -> int:
    if not groups:
        raise ValueError("need at least one candidate group")
    pooled: list[int] = []
    for g in groups:
        pooled.extend(aggregate_lower(g))
    return mode(pooled)


def sample_probabilities(samples: np.ndarray, temperature: float) -> np.ndarray:
    """Per-sample softmax of ``-(s - 1)^2 / temperature`` along the class axis."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = -_distances(samples) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def predict_proba(groups: Sequence[CandidateGroup], temperature: float = DEFAULT_TEMPERATURE) -> np.ndarray:
    pooled = np.concatenate([g.samples for g in groups], axis=0)
    return sample_probabilities(pooled, temperature).mean(axis=0)


def combine(groups: Sequence[CandidateGroup], temperature: float = DEFAULT_TEMPERATURE) -> EnsembleOutput:
    raw = np.concatenate([g.samples for g in groups], axis=0)
    return EnsembleOutput(aggregate_upper(groups), predict_proba(groups, temperature), raw)
