"""Test-time corruptions and L-infinity attacks on the backbone.

Images are (B, H, W, A) or (H, W, A) tensors in normalised float space. No
transform clips to a pixel range.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import Backbone, loss_init
from .numerics import RngStream, gaussian

KINDS = ("gaussian", "lowres", "contrast", "fgsm", "pgd")


@dataclass(frozen=True)
class PerturbSpec:
    kind: str
    strength: float
    steps: int = 10
    step_size: float | None = None  # PGD; defaults to strength / 4

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}; expected one of {KINDS}")
        s = self.strength
        bad = {
            "gaussian": s < 0,
            "lowres": s < 1,
            "contrast": s <= 0,
            "fgsm": s < 0,
            "pgd": s < 0,
        }[self.kind]
        if bad:
            raise ValueError(f"invalid strength {s} for {self.kind}")
        if self.kind == "pgd" and self.steps < 1:
            raise ValueError("PGD needs at least one step")

    @classmethod
    def parse(cls, text: str) -> "PerturbSpec":
        """Parse ``kind:strength[:steps[:step_size]]``, e.g. ``gaussian:0.5`` or ``pgd:0.03:10``."""
        parts = text.split(":")
        if len(parts) < 2:
            raise ValueError(f"perturbation must look like kind:strength, got {text!r}")
        kind, strength = parts[0], float(parts[1])
        steps = int(parts[2]) if len(parts) > 2 else 10
        step_size = float(parts[3]) if len(parts) > 3 else None
        return cls(kind, strength, steps, step_size)

    def __str__(self) -> str:
        if self.kind == "pgd":
            return f"pgd:{self.strength}:{self.steps}:{self.pgd_step_size}"
        return f"{self.kind}:{self.strength}"

    @property
    def pgd_step_size(self) -> float:
        return self.strength / 4 if self.step_size is None else self.step_size


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    return (x.unsqueeze(0), True) if x.dim() == 3 else (x, False)


def gaussian_noise(x: torch.Tensor, scale: float, rng: RngStream) -> torch.Tensor:
    if scale < 0:
        raise ValueError("noise scale must be non-negative")
    if scale == 0:
        return x.clone()
    return x + scale * gaussian(rng, x.shape, x.dtype)


def downsample(x: torch.Tensor, factor: float, patch_size: int = 1) -> torch.Tensor:
    """Area-average to (floor(H/w), floor(W/w)), then nearest-neighbour back to (H, W)."""
    if factor < 1:
        raise ValueError("downsampling factor must be >= 1")
    xb, squeeze = _batched(x)
    _, h, w, _ = xb.shape
    lh, lw = int(h // factor), int(w // factor)
    if lh < patch_size or lw < patch_size:
        raise ValueError(f"downsampled size {lh}x{lw} is below the patch size {patch_size}")
    if (lh, lw) == (h, w):
        return x.clone()
    chw = xb.permute(0, 3, 1, 2)
    low = F.adaptive_avg_pool2d(chw, (lh, lw))
    up = F.interpolate(low, size=(h, w), mode="nearest").permute(0, 2, 3, 1).contiguous()
    return up[0] if squeeze else up


def contrast(x: torch.Tensor, r: float) -> torch.Tensor:
    """Scale deviations from the per-image mean (over all pixels and channels) by ``r``."""
    if r <= 0:
        raise ValueError("contrast level must be positive")
    if r == 1:
        return x.clone()
    xb, squeeze = _batched(x)
    mu = xb.mean(dim=(1, 2, 3), keepdim=True)
    out = r * (xb - mu) + mu
    return out[0] if squeeze else out


def project_linf(x: torch.Tensor, x_adv: torch.Tensor, eps: float) -> torch.Tensor:
    """Clip ``x_adv`` into the closed eps-ball around ``x`` so that ``|x_adv - x| <= eps`` holds in floating point.

    ``x + eps`` can round so that its difference from ``x`` exceeds ``eps``;
    such entries are stepped one ulp at a time toward ``x``.
    """
    eps_t = torch.tensor(eps, dtype=x.dtype)
    out = torch.maximum(torch.minimum(x_adv, x + eps_t), x - eps_t)
    for _ in range(8):
        over = (out - x).abs() > eps_t
        if not bool(over.any()):
            break
        out = torch.where(over, torch.nextafter(out, x), out)
    return out


def _input_grad(model: Backbone, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    prob, _ = model(x)
    (grad,) = torch.autograd.grad(loss_init(prob, y), x)
    return grad


def fgsm(x: torch.Tensor, y: torch.Tensor, model: Backbone, eps: float) -> torch.Tensor:
    """One signed-gradient step of size ``eps`` on the backbone cross-entropy."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    if eps == 0:
        return x.clone()
    xb, squeeze = _batched(x)
    yb = y.unsqueeze(0) if y.dim() == 1 else y
    adv = project_linf(xb, xb + eps * _input_grad(model, xb, yb).sign(), eps).detach()
    return adv[0] if squeeze else adv


def pgd(x: torch.Tensor, y: torch.Tensor, model: Backbone, eps: float, steps: int = 10,
        step_size: float | None = None) -> torch.Tensor:
    """Iterated signed-gradient ascent, projected onto the eps-ball after every step (no random start)."""
    if steps < 1:
        raise ValueError("PGD needs at least one step")
    step_size = eps / 4 if step_size is None else step_size
    xb, squeeze = _batched(x)
    yb = y.unsqueeze(0) if y.dim() == 1 else y
    adv = xb.clone()
    for _ in range(steps):
        adv = project_linf(xb, adv + step_size * _input_grad(model, adv, yb).sign(), eps).detach()
    return adv[0] if squeeze else adv


def apply(spec: PerturbSpec, x: torch.Tensor, y: torch.Tensor | None = None, model: Backbone | None = None,
          rng: RngStream | None = None, patch_size: int = 1) -> torch.Tensor:
    if spec.kind == "gaussian":
        if rng is None:
            raise ValueError("gaussian noise needs an rng stream")
        return gaussian_noise(x, spec.strength, rng)
    if spec.kind == "lowres":
        return downsample(x, spec.strength, patch_size)
    if spec.kind == "contrast":
        return contrast(x, spec.strength)
    if model is None or y is None:
        raise ValueError(f"{spec.kind} needs the backbone and labels")
    if spec.kind == "fgsm":
        return fgsm(x, y, model, spec.strength)
    return pgd(x, y, model, spec.strength, spec.steps, spec.pgd_step_size)
