"""Accuracy, ten-bin expected calibration error, and per-instance PIW / PV."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numerics import percentile

N_BINS = 10
# Right edges 0.1, ..., 1.0; i/10 rounds to the same double as the decimal literal.
BIN_EDGES = np.array([i / N_BINS for i in range(1, N_BINS + 1)])


@dataclass
class EvalRecord:
    true_class: int
    predicted_class: int
    confidence: float
    samples: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in (0, 1], got {self.confidence}")

    @property
    def correct(self) -> bool:
        return self.true_class == self.predicted_class


@dataclass
class BinStats:
    count: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray


def _require(records: Sequence[EvalRecord]) -> None:
    if len(records) == 0:
        raise ValueError("empty record set")


def bin_index(confidence: np.ndarray) -> np.ndarray:
    """Bin of each confidence for the half-open bins (0, 0.1], ..., (0.9, 1.0]."""
    return np.searchsorted(BIN_EDGES, np.asarray(confidence, dtype=np.float64), side="left")


def bin_stats(records: Sequence[EvalRecord]) -> BinStats:
    _require(records)
    conf = np.array([r.confidence for r in records])
    hit = np.array([r.correct for r in records], dtype=np.float64)
    idx = bin_index(conf)
    count = np.bincount(idx, minlength=N_BINS).astype(np.int64)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(count > 0, np.bincount(idx, hit, N_BINS) / count, 0.0)
        mean_conf = np.where(count > 0, np.bincount(idx, conf, N_BINS) / count, 0.0)
    return BinStats(count, acc, mean_conf)


def ece10(records: Sequence[EvalRecord]) -> float:
    stats = bin_stats(records)
    weights = stats.count / len(records)
    return float(np.sum(weights * np.abs(stats.accuracy - stats.confidence)))


def accuracy(records: Sequence[EvalRecord]) -> float:
    _require(records)
    return sum(r.correct for r in records) / len(records)


def piw(samples: np.ndarray, c: int) -> float:
    """Width of the central 95% interval of coordinate ``c`` across samples."""
    s = np.asarray(samples, dtype=np.float64)
    if s.shape[0] < 2:
        raise ValueError("PIW needs at least two samples")
    col = s[:, c]
    return percentile(col, 97.5) - percentile(col, 2.5)


def pv(samples: np.ndarray, c: int) -> float:
    """Population variance of coordinate ``c`` across samples."""
    s = np.asarray(samples, dtype=np.float64)
    if s.shape[0] < 1:
        raise ValueError("PV needs at least one sample")
    col = s[:, c]
    return float(np.mean((col - col.mean()) ** 2))


def records_from_predictions(rows: Iterable[dict]) -> list[EvalRecord]:
    """Build records from prediction dicts carrying ``true``, ``class`` and ``proba``."""
    out = []
    for row in rows:
        raw = row.get("raw")
        out.append(EvalRecord(int(row["true"]), int(row["class"]), float(max(row["proba"])),
                              None if raw is None else np.asarray(raw)))
    return out


def uncertainty_table(rows: Sequence[dict], num_classes: int) -> list[dict]:
    """Mean PIW and PV per (predicted class, correctness) cell.

    For class c, instances predicted as c are split by correctness and the
    c-th coordinate's PIW / PV is averaged within each cell.
    """
    table = []
    for c in range(num_classes):
        for label, want in (("correct", True), ("incorrect", False)):
            cell = [r for r in rows if int(r["class"]) == c and (int(r["true"]) == c) == want]
            table.append({
                "class": c,
                "correctness": label,
                "count": len(cell),
                "piw": float(np.mean(widths)) if (widths := [r["piw"][c] for r in cell if r["piw"] is not None])
                else float("nan"),
                "pv": float(np.mean([r["pv"][c] for r in cell])) if cell else float("nan"),
            })
    return table


def write_csv(path: str | Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})


def read_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
