"""Vision transformer backbone with per-block taps for shallow mapping."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .numerics import DimensionError, RngStream, cross_entropy, truncated_normal


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 32
    channels: int = 1
    patch_size: int = 8
    embed_dim: int = 64
    num_blocks: int = 6
    num_heads: int = 4
    mlp_hidden: int = 128
    num_classes: int = 2
    tap_levels: int = 3
    ln_eps: float = 1e-6

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if not 1 <= self.tap_levels < self.num_blocks:
            raise ValueError(f"need 1 <= K < L, got K={self.tap_levels}, L={self.num_blocks}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "toy": BackboneConfig(),
    # ViT-B/16 at 224x224x3, two classes, five taps.
    "full": BackboneConfig(image_size=224, channels=3, patch_size=16, embed_dim=768, num_blocks=12,
                            num_heads=12, mlp_hidden=3072, num_classes=2, tap_levels=5),
}


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * inv)
    table[:, 1::2] = torch.cos(pos * inv[: dim // 2])
    return table.to(dtype)


def patchify(x: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, H, W, A) images to (B, N, P*P*A) row-major patches."""
    b, h, w, a = x.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, h // p, p, w // p, p, a).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * a)


def init_linear(layer: nn.Linear, rng: RngStream, std: float = 0.02) -> None:
    with torch.no_grad():
        layer.weight.copy_(truncated_normal(rng, layer.weight.shape, std, layer.weight.dtype))
        if layer.bias is not None:
            layer.bias.zero_()


class PatchEmbed(nn.Module):
    """Patch projection, class token and fixed sinusoidal positions (level 0 tokens)."""

    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(cfg.patch_dim, cfg.embed_dim)
        init_linear(self.proj, rng.child("proj"))
        self.cls_token = nn.Parameter(truncated_normal(rng.child("cls"), (1, 1, cfg.embed_dim)))
        self.register_buffer("positions", sinusoidal_positions(cfg.num_patches + 1, cfg.embed_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != (cfg.image_size, cfg.image_size, cfg.channels):
            raise DimensionError(
                f"expected images {cfg.image_size}x{cfg.image_size}x{cfg.channels}, got {tuple(x.shape[1:])}")
        tokens = self.proj(patchify(x, cfg.patch_size))
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        return torch.cat([cls, tokens], dim=1) + self.positions


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rng: RngStream):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        init_linear(self.qkv, rng.child("qkv"))
        init_linear(self.out, rng.child("out"))

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        """Attention weights of shape (B, heads, N+1, N+1)."""
        q, k, _ = self._split(x)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)

    def _split(self, x: torch.Tensor):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        _, _, v = self._split(x)
        ctx = (self.scores(x) @ v).transpose(1, 2).reshape(b, n, d)
        return self.out(ctx)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: two residual branches, attention then MLP."""

    def __init__(self, cfg: BackboneConfig, rng: RngStream):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.embed_dim, eps=cfg.ln_eps)
        self.attn = SelfAttention(cfg.embed_dim, cfg.num_heads, rng.child("attn"))
        self.ln2 = nn.LayerNorm(cfg.embed_dim, eps=cfg.ln_eps)
        self.fc1 = nn.Linear(cfg.embed_dim, cfg.mlp_hidden)
        self.fc2 = nn.Linear(cfg.mlp_hidden, cfg.embed_dim)
        init_linear(self.fc1, rng.child("fc1"))
        init_linear(self.fc2, rng.child("fc2"))

    def mlp(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))

    def forward(self, e_prev: torch.Tensor) -> torch.Tensor:
        e_mid = self.attn(self.ln1(e_prev)) + e_prev
        return self.mlp(self.ln2(e_mid)) + e_mid


class Backbone(nn.Module):
    """Patch embedding (gamma), L encoder blocks (Phi) and a linear head (omega)."""

    def __init__(self, cfg: BackboneConfig, rng: RngStream, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng.child("embed"))
        self.blocks = nn.ModuleList(EncoderBlock(cfg, rng.child("block", i)) for i in range(cfg.num_blocks))
        self.head = nn.Linear(cfg.embed_dim, cfg.num_classes)
        init_linear(self.head, rng.child("head"))
        self.to(dtype)

    def sequences(self, x: torch.Tensor, depth: int | None = None) -> list[torch.Tensor]:
        """Token sequences ``[e_0, e_1, ..., e_depth]`` each (B, N+1, D)."""
        depth = self.cfg.num_blocks if depth is None else depth
        seqs = [self.embed(x)]
        for block in self.blocks[:depth]:
            seqs.append(block(seqs[-1]))
        return seqs

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.sequences(x)[-1][:, 0])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the class probabilities and the taps ``r_1..r_K`` (head token dropped)."""
        seqs = self.sequences(x)
        prob = torch.softmax(self.head(seqs[-1][:, 0]), dim=-1)
        taps = [seqs[k][:, 1:] for k in range(1, self.cfg.tap_levels + 1)]
        return prob, taps

    def taps(self, x: torch.Tensor, levels: int | None = None) -> list[torch.Tensor]:
        """Only the first ``levels`` blocks are evaluated."""
        levels = self.cfg.tap_levels if levels is None else levels
        seqs = self.sequences(x, depth=levels)
        return [s[:, 1:] for s in seqs[1:]]


def loss_init(prob: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between backbone probabilities and one-hot labels."""
    return cross_entropy(prob, y)


@torch.no_grad()
def representation_drift(model: Backbone, x: torch.Tensor, x_perturbed: torch.Tensor) -> torch.Tensor:
    """Euclidean distance between whole token sequences at every block.

    Returns a (B, L) tensor; column ``k-1`` holds ``||e_k(x) - e_k(x')||``.
    """
    a = model.sequences(x)[1:]
    b = model.sequences(x_perturbed)[1:]
    return torch.stack([(sa - sb).flatten(1).norm(dim=1) for sa, sb in zip(a, b)], dim=1)
