"""Corrective diffusion over label space.

The forward chain pulls a one-hot label ``y_0`` toward the shift
``z_k + e(x)`` while adding Gaussian noise; the reverse chain starts from
``N(z_k, I)`` and walks back to a label-space prediction. All closed forms work
on batched tensors of shape (B, C) with per-row integer time steps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbone import init_linear
from .numerics import NumericError, RngStream, gaussian

FULL_T = 1000
FULL_ALPHA_FIRST = 1 - 1e-4
FULL_ALPHA_LAST = 0.98


@dataclass(frozen=True)
class NoiseSchedule:
    """Retention factors ``alpha[t-1]`` for t = 1..T and ``alpha_bar[t]`` for t = 0..T."""

    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_first: float
    alpha_last: float

    @property
    def T(self) -> int:
        return len(self.alpha)

    def a(self, t: int) -> float:
        return float(self.alpha[t - 1])

    def ab(self, t: int) -> float:
        return float(self.alpha_bar[t])

    def to_dict(self) -> dict:
        return {"T": self.T, "alpha_first": self.alpha_first, "alpha_last": self.alpha_last}


def make_schedule(T: int, alpha_first: float = FULL_ALPHA_FIRST,
                  alpha_last: float = FULL_ALPHA_LAST) -> NoiseSchedule:
    """Schedule with ``1 - alpha_t`` linear in t between the two endpoints.

    ``alpha_bar`` is accumulated one step at a time from ``alpha_bar[0] = 1`` so
    that ``alpha_bar[t] == alpha_bar[t-1] * alpha[t-1]`` holds exactly.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not 0.0 < alpha_last < alpha_first < 1.0:
        raise ValueError(f"need 0 < alpha_last < alpha_first < 1, got {alpha_first}, {alpha_last}")
    alpha = np.linspace(alpha_first, alpha_last, int(T), dtype=np.float64)
    alpha_bar = np.empty(int(T) + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    for t in range(1, int(T) + 1):
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t - 1]
    alpha.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(alpha, alpha_bar, float(alpha_first), float(alpha_last))


def _steps(t, schedule: NoiseSchedule, low: int = 1) -> np.ndarray:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    arr = arr.astype(np.int64)
    if arr.size and (arr.min() < low or arr.max() > schedule.T):
        raise ValueError(f"time step out of range [{low}, {schedule.T}]: {arr.min()}..{arr.max()}")
    return arr


def _coef(values: np.ndarray, ref: torch.Tensor) -> torch.Tensor:
    """Broadcastable coefficient column matching ``ref``'s dtype."""
    c = torch.as_tensor(values, dtype=ref.dtype)
    if c.dim() == 1:
        c = c.unsqueeze(-1)
    return c


def forward_sample(y0: torch.Tensor, z: torch.Tensor, e_x: torch.Tensor, t, eps: torch.Tensor,
                   schedule: NoiseSchedule) -> torch.Tensor:
    """Draw ``y_t`` from ``y_0`` in one shot (reparameterised closed form)."""
    ab = schedule.alpha_bar[_steps(t, schedule)]
    s = _coef(np.sqrt(ab), y0)
    n = _coef(np.sqrt(1.0 - ab), y0)
    return s * y0 + (1 - s) * (z + e_x) + n * eps


def forward_step(y_prev: torch.Tensor, z: torch.Tensor, e_x: torch.Tensor, t, eps: torch.Tensor,
                 schedule: NoiseSchedule) -> torch.Tensor:
    """One transition ``y_{t-1} -> y_t`` of the guided Markov chain."""
    a = schedule.alpha[_steps(t, schedule) - 1]
    s = _coef(np.sqrt(a), y_prev)
    n = _coef(np.sqrt(1.0 - a), y_prev)
    return s * y_prev + (1 - s) * (z + e_x) + n * eps


def posterior_coefficients(t, schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients of ``y_t``, ``y_0`` and the shift in the posterior mean, plus its variance."""
    t = _steps(t, schedule, low=2)
    a = schedule.alpha[t - 1]
    ab = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    c_t = np.sqrt(a) * (1 - ab_prev) / (1 - ab)
    c_0 = np.sqrt(ab_prev) * (1 - a) / (1 - ab)
    c_shift = -(c_t + c_0 - 1)
    var = (1 - a) * (1 - ab_prev) / (1 - ab)
    return c_t, c_0, c_shift, var


def posterior_params(y_t: torch.Tensor, y0: torch.Tensor, z: torch.Tensor, e_x: torch.Tensor, t,
                     schedule: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and (isotropic) variance of ``q(y_{t-1} | y_t, y_0, z, x)`` for t >= 2."""
    c_t, c_0, c_shift, var = posterior_coefficients(t, schedule)
    mean = _coef(c_t, y_t) * y_t + _coef(c_0, y_t) * y0 + _coef(c_shift, y_t) * (z + e_x)
    return mean, _coef(var, y_t)


def recover_y0(y_t: torch.Tensor, z: torch.Tensor, e_x: torch.Tensor, t, eps_hat: torch.Tensor,
               schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the closed-form sample for ``y_0`` given a noise estimate."""
    ab = schedule.alpha_bar[_steps(t, schedule)]
    if np.any(ab < 1e-12):
        raise NumericError("alpha_bar below 1e-12; cannot recover y_0")
    s = _coef(np.sqrt(ab), y_t)
    n = _coef(np.sqrt(1.0 - ab), y_t)
    return (y_t - (1 - s) * (z + e_x) - n * eps_hat) / s


def _mlp(sizes: Sequence[int], rng: RngStream, tag: str) -> nn.ModuleList:
    layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
    for i, layer in enumerate(layers):
        init_linear(layer, rng.child(tag, i))
    return layers


class ChainMeanEncoder(nn.Module):
    """e(x): image to label space, used in the chain's mean shift."""

    def __init__(self, in_dim: int, num_classes: int, hidden: Sequence[int], rng: RngStream):
        super().__init__()
        self.layers = _mlp([in_dim, *hidden, num_classes], rng, "chain_encoder")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.flatten(1)
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h)


class ImageEncoder(nn.Module):
    """Conditioning encoder inside the denoiser: Linear, then (BatchNorm, ReLU, Linear) repeated."""

    def __init__(self, in_dim: int, hidden: Sequence[int], width: int, rng: RngStream):
        super().__init__()
        sizes = [in_dim, *hidden, width]
        self.layers = _mlp(sizes, rng, "image_encoder")
        self.norms = nn.ModuleList(nn.BatchNorm1d(h, momentum=0.1) for h in hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.layers[0](x.flatten(1))
        for norm, layer in zip(self.norms, self.layers[1:]):
            h = layer(torch.relu(norm(h)))
        return h


@dataclass(frozen=True)
class DenoiserConfig:
    image_dim: int
    num_classes: int
    T: int
    width: int = 128
    encoder_hidden: tuple[int, ...] = (128, 64)
    chain_hidden: tuple[int, ...] = (64, 32)


class Denoiser(nn.Module):
    """theta_k: noise estimator f(y_t, z_k, x, t) together with the chain-mean encoder e(x)."""

    def __init__(self, cfg: DenoiserConfig, rng: RngStream, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.chain_encoder = ChainMeanEncoder(cfg.image_dim, cfg.num_classes, cfg.chain_hidden, rng.child("e"))
        self.image_encoder = ImageEncoder(cfg.image_dim, cfg.encoder_hidden, cfg.width, rng.child("enc"))
        self.joint = nn.Linear(2 * cfg.num_classes, cfg.width)
        init_linear(self.joint, rng.child("joint"))
        self.time_embed = nn.Embedding(cfg.T, cfg.width)
        with torch.no_grad():
            self.time_embed.weight.copy_(gaussian(rng.child("time"), (cfg.T, cfg.width)))
        self.norm = nn.BatchNorm1d(cfg.width, momentum=0.1)
        self.out = nn.Linear(cfg.width, cfg.num_classes)
        init_linear(self.out, rng.child("out"))
        self.to(dtype)

    def condition(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Image-only terms: the chain shift encoding e(x) and the conditioning features."""
        return self.chain_encoder(x), self.image_encoder(x)

    def estimate(self, y_t: torch.Tensor, z: torch.Tensor, features: torch.Tensor, t) -> torch.Tensor:
        if isinstance(t, int):
            t = torch.full((y_t.shape[0],), t, dtype=torch.long)
        t = torch.as_tensor(t, dtype=torch.long)
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.cfg.T):
            raise ValueError(f"time step out of range [1, {self.cfg.T}]")
        h = self.joint(torch.cat([y_t, z], dim=-1))
        h = h * self.time_embed(t - 1) * features
        h = torch.nn.functional.softplus(self.norm(h))
        return self.out(h)

    def forward(self, y_t: torch.Tensor, z: torch.Tensor, x: torch.Tensor, t) -> torch.Tensor:
        return self.estimate(y_t, z, self.image_encoder(x), t)


def draw_t_eps(rng: RngStream, batch: int, num_classes: int, T: int,
               dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    t = torch.as_tensor(rng.integers(1, T + 1, batch), dtype=torch.long)
    return t, gaussian(rng, (batch, num_classes), dtype)


def loss_diffusion(model: Denoiser, x: torch.Tensor, y0: torch.Tensor, z: torch.Tensor,
                   schedule: NoiseSchedule, rng: RngStream | None = None,
                   t: torch.Tensor | None = None, eps: torch.Tensor | None = None) -> torch.Tensor:
    """Batch mean of ``||eps - f(y_t, z, x, t)||^2`` with ``y_t`` from the closed form.

    ``t`` and ``eps`` are drawn from ``rng`` unless both are given.
    """
    if t is None or eps is None:
        if rng is None:
            raise ValueError("need rng or explicit (t, eps)")
        t, eps = draw_t_eps(rng, y0.shape[0], y0.shape[1], schedule.T, y0.dtype)
    e_x, features = model.condition(x)
    y_t = forward_sample(y0, z, e_x, t, eps, schedule)
    eps_hat = model.estimate(y_t, z, features, t)
    return ((eps - eps_hat) ** 2).sum(dim=-1).mean()


@torch.no_grad()
def sample_chain(model: Denoiser, x: torch.Tensor, z: torch.Tensor, schedule: NoiseSchedule,
                 streams: Sequence[RngStream]) -> torch.Tensor:
    """Run one reverse chain per row of ``(x, z)``; row i draws all its noise from ``streams[i]``.

    Each stream yields a (T, C) block: row 0 perturbs the prior draw
    ``y_T ~ N(z, I)`` and row ``T - t + 1`` is the noise for step t >= 2.
    Returns the final ``y_0`` estimates, shape (B, C).
    """
    if len(streams) != z.shape[0]:
        raise ValueError("need one stream per chain")
    model.eval()
    T, C = schedule.T, z.shape[-1]
    noise = torch.stack([gaussian(s, (T, C), z.dtype) for s in streams], dim=1)
    e_x, features = model.condition(x)
    y = z + noise[0]
    y0_hat = y
    for t in range(T, 0, -1):
        eps_hat = model.estimate(y, z, features, t)
        y0_hat = recover_y0(y, z, e_x, t, eps_hat, schedule)
        if t > 1:
            mean, var = posterior_params(y, y0_hat, z, e_x, t, schedule)
            y = mean + torch.sqrt(var) * noise[T - t + 1]
    return y0_hat
