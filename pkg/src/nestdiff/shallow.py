"""Shallow mapping: per-level MLP from tap tokens to an intermediate class prediction."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .backbone import init_linear
from .numerics import DimensionError, RngStream, cross_entropy

TOY_HIDDEN = (256, 128, 64)
FULL_HIDDEN = (4096, 2048, 128)


class ShallowMap(nn.Module):
    """g(r_k; psi_k): flatten the N x D tap row-major, ReLU MLP, softmax."""

    def __init__(self, num_tokens: int, dim: int, num_classes: int, hidden: Sequence[int],
                 rng: RngStream, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.num_tokens = num_tokens
        self.dim = dim
        sizes = [num_tokens * dim, *hidden, num_classes]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        for i, layer in enumerate(self.layers):
            init_linear(layer, rng.child("layer", i))
        self.to(dtype)

    def logits(self, r: torch.Tensor) -> torch.Tensor:
        if tuple(r.shape[-2:]) != (self.num_tokens, self.dim):
            raise DimensionError(f"expected tap of shape ({self.num_tokens}, {self.dim}), got {tuple(r.shape)}")
        h = r.reshape(*r.shape[:-2], self.num_tokens * self.dim)
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(r), dim=-1)


def loss_shallow(z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return cross_entropy(z, y)
