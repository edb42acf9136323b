"""Tensor helpers, counter-based random streams and a finite-difference gradient checker.

Tensors are plain ``torch.Tensor`` values and reverse-mode gradients come from
torch autograd. This module adds the pieces the rest of the package needs on
top of that: replayable RNG streams, the handful of ops with pinned
conventions (percentile, clamped log) and ``grad_check``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DEFAULT_DTYPE = torch.float32
PROB_FLOOR = 1e-12


class DimensionError(ValueError):
    """Raised when tensor shapes do not agree with an op's contract."""


class NumericError(ArithmeticError):
    """Raised when a computation produces a non-finite value."""


def stream_id(*parts: object) -> int:
    """Pack a tuple of labels into a 64-bit stream id.

    Consumers name their streams by purpose and indices, e.g.
    ``stream_id("chain", instance, k, m)``. The mapping is a BLAKE2b digest of
    the ``repr`` of the parts, so it is stable across hosts and runs.
    """
    digest = hashlib.blake2b(repr(parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass
class RngStream:
    """Replayable normal/uniform source keyed by ``(seed, stream_id)``.

    Backed by the Philox-4x64 counter-based generator: the key is built from
    the seed and stream id, so two streams never share a key and the sequence
    is identical on every host.
    """

    seed: int
    stream_id: int = 0
    _gen: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not (0 <= self.seed < 2**64 and 0 <= self.stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    @property
    def counter(self) -> int:
        state = self._gen.bit_generator.state["state"]
        words = state["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(words)))

    def child(self, *parts: object) -> "RngStream":
        """Fresh stream with the same seed and an id derived from ``parts``."""
        return RngStream(self.seed, stream_id(self.stream_id, *parts))

    def normal(self, shape: Sequence[int], dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
        return gaussian(self, shape, dtype)

    def integers(self, low: int, high: int, size: int) -> np.ndarray:
        """Uniform integers on ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def numpy(self) -> np.random.Generator:
        return self._gen


def gaussian(rng: RngStream, shape: Sequence[int], dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """I.i.d. standard normal tensor drawn from ``rng``.

    Samples are always produced in float64 and then cast, so a float32 draw is
    the rounded float64 draw from the same stream position.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise DimensionError("shape must be non-empty")
    if any(s < 0 for s in shape):
        raise DimensionError(f"negative dimension in {shape}")
    draw = rng.numpy().standard_normal(shape)
    return torch.from_numpy(draw).to(dtype)


def truncated_normal(rng: RngStream, shape: Sequence[int], std: float = 0.02,
                     dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    """Normal draws truncated at two standard deviations by resampling."""
    gen = rng.numpy()
    out = gen.standard_normal(tuple(shape))
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = gen.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return torch.from_numpy(out * std).to(dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise DimensionError("matmul needs at least 1-D operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    if inner_a != inner_b:
        raise DimensionError(f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.softmax(x, dim=dim)


def log_softmax(x: torch.Tensor, dim: int = -1) -> torch.Tensor:
    return torch.log_softmax(x, dim=dim)


def layer_norm(x: torch.Tensor, weight: torch.Tensor | None = None,
               bias: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    return torch.nn.functional.layer_norm(x, x.shape[-1:], weight, bias, eps)


def clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(PROB_FLOOR))


def cross_entropy(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ``-sum_c y_c log p_c`` with ``p`` clamped at 1e-12.

    ``target`` must be one-hot along the last axis.
    """
    check_one_hot(target)
    if prob.shape != target.shape:
        raise DimensionError(f"prediction {tuple(prob.shape)} vs target {tuple(target.shape)}")
    per_row = -(target * clamped_log(prob)).sum(dim=-1)
    return per_row.mean()


def check_one_hot(y: torch.Tensor) -> None:
    ok = bool(((y == 0) | (y == 1)).all()) and bool((y.sum(dim=-1) == 1).all())
    if not ok:
        raise ValueError("target is not one-hot")


def one_hot(labels: Iterable[int], num_classes: int, dtype: torch.dtype = DEFAULT_DTYPE) -> torch.Tensor:
    idx = torch.as_tensor(list(labels), dtype=torch.long)
    return torch.nn.functional.one_hot(idx, num_classes).to(dtype)


def percentile(values: Sequence[float] | np.ndarray, p: float) -> float:
    """Percentile with linear interpolation between order statistics.

    Uses the index ``h = (n - 1) * p / 100`` and interpolates between the
    ``floor(h)`` and ``ceil(h)`` order statistics.
    """
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty set")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"p must lie in [0, 100], got {p}")
    h = (v.size - 1) * p / 100.0
    lo = math.floor(h)
    hi = min(lo + 1, v.size - 1)
    frac = h - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-3) -> float:
    """Compare autograd gradients of a scalar ``f`` with finite differences.

    ``f`` is a closure over ``params`` (float64 leaf tensors with
    ``requires_grad``). The numeric gradient uses the five-point stencil, whose
    truncation error is O(eps^4). Returns the maximum over all parameter
    entries of ``|analytic - numeric| / (|numeric| + 1e-12)``, skipping entries
    where both gradients are below 1e-8 in magnitude.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    if not torch.isfinite(loss).all():
        raise NumericError("loss is not finite")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                vals = []
                for step in (2, 1, -1, -2):
                    flat[i] = orig + step * eps
                    vals.append(f().item())
                flat[i] = orig
                if not all(math.isfinite(v) for v in vals):
                    raise NumericError("loss is not finite under perturbation")
                numeric = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * eps)
                a = gflat[i].item()
                if abs(a) < 1e-8 and abs(numeric) < 1e-8:
                    continue
                worst = max(worst, abs(a - numeric) / (abs(numeric) + 1e-12))
    return worst


def tensor_digest(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes, dtypes and shapes of a tensor sequence."""
    h = hashlib.sha256()
    for t in tensors:
        t = t.detach().contiguous().cpu()
        h.update(str(t.dtype).encode())
        h.update(repr(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()
