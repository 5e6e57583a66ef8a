"""Patch-embedding transformer encoder shared by the three augmentation branches.

One class token carries the global feature; patch tokens from the clean
branch are pooled into horizontal stripes to form the local features. The
encoder is a plain pre-norm ViT: no side-information embeddings, no token
shuffling, no dropout.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError


@dataclass
class BackboneConfig:
    patch_size: int = 16
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    train_size: tuple[int, int] = (256, 128)
    n_locals: int = 4
    mlp_ratio: float = 4.0

    def validate(self) -> None:
        h, w = self.train_size
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError(
                f"train_size {self.train_size} must be divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} must be divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        rows = h // self.patch_size
        if self.n_locals < 1 or rows % self.n_locals:
            raise ConfigError(
                f"n_locals {self.n_locals} must be >= 1 and divide the patch row count {rows}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.train_size[0] // self.patch_size,
                self.train_size[1] // self.patch_size)

    @property
    def num_patches(self) -> int:
        rows, cols = self.grid
        return rows * cols


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class VitEncoder(nn.Module):
    """Images (B, 3, H, W) -> class-token global (B, d) + patch tokens (B, P, d).

    Patch tokens keep row-major spatial order: token index = row * cols + col.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_embed = nn.Conv2d(3, d, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            [Block(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(d)
        self._init_weights()

    def _init_weights(self) -> None:
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Conv2d)):
                nn.init.trunc_normal_(m.weight, std=0.02)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h, w = self.cfg.train_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (h, w):
            raise ConfigError(
                f"expected images of shape (B, 3, {h}, {w}), got {tuple(images.shape)}")
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(x.shape[0], -1, -1)
        x = torch.cat([cls, x], dim=1) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        x = self.norm(x)
        return x[:, 0], x[:, 1:]


def split_locals(tokens: torch.Tensor, n: int, grid: tuple[int, int]) -> list[torch.Tensor]:
    """Mean-pool row-major patch tokens into n contiguous horizontal stripes."""
    b, p, d = tokens.shape
    rows, cols = grid
    if p != rows * cols:
        raise ConfigError(f"got {p} patch tokens for a {rows}x{cols} grid")
    if n < 1 or rows % n:
        raise ConfigError(f"{n} locals must divide {rows} patch rows")
    stripe = rows // n
    x = tokens.reshape(b, rows, cols, d)
    return [x[:, i * stripe:(i + 1) * stripe].reshape(b, stripe * cols, d).mean(dim=1)
            for i in range(n)]


@dataclass
class FeatureBundle:
    """Per-branch global features plus clean-branch locals, before enhancement."""

    g1: torch.Tensor
    locals: list[torch.Tensor]
    g2: torch.Tensor | None = None  # erased branch
    g3: torch.Tensor | None = None  # cropped branch


def forward_triplet(encoder: VitEncoder, base: torch.Tensor,
                    erased: torch.Tensor | None = None,
                    cropped: torch.Tensor | None = None) -> FeatureBundle:
    """Encode all present branches with the shared weights in one pass.

    Locals are split from the base-branch patch tokens only; the erased and
    cropped branches contribute just their global features.
    """
    parts = [base]
    if erased is not None:
        parts.append(erased)
    if cropped is not None:
        parts.append(cropped)
    globals_, tokens = encoder(torch.cat(parts, dim=0))
    b = base.shape[0]
    g1 = globals_[:b]
    locs = split_locals(tokens[:b], encoder.cfg.n_locals, encoder.cfg.grid)
    g2 = g3 = None
    offset = b
    if erased is not None:
        g2 = globals_[offset:offset + erased.shape[0]]
        offset += erased.shape[0]
    if cropped is not None:
        g3 = globals_[offset:offset + cropped.shape[0]]
    return FeatureBundle(g1=g1, locals=locs, g2=g2, g3=g3)
