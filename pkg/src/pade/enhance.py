"""Gated residual enhancement between global and local features.

The relation unit projects source and target with 1x1 linear maps, turns
their scaled inner product into a sigmoid gate, and adds the gated source
message on top of both raw inputs. The two-step strategy first boosts each
local feature with the clean global feature, then folds the boosted locals
back into the global feature one at a time. The erased/cropped globals pass
through untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import FeatureBundle
from .errors import ConfigError


@dataclass
class EnhancedBundle:
    """Feature bundle after (or without) enhancement; g2/g3 are passthrough."""

    g1: torch.Tensor
    locals: list[torch.Tensor]
    g2: torch.Tensor | None = None
    g3: torch.Tensor | None = None


class REM(nn.Module):
    """Relation-based enhancement: target + source + gate * project(source).

    The gate is sigmoid(<W_src1 source, W_tgt target> / sqrt(d)), one scalar
    per sample, so the message magnitude is always below the projected source
    norm.
    """

    def __init__(self, dim: int, init_std: float = 0.02):
        super().__init__()
        self.src_in = nn.Linear(dim, dim, bias=False)
        self.tgt_in = nn.Linear(dim, dim, bias=False)
        self.src_out = nn.Linear(dim, dim, bias=False)
        self.scale = dim ** -0.5
        for layer in (self.src_in, self.tgt_in, self.src_out):
            nn.init.trunc_normal_(layer.weight, std=init_std)

    def forward(self, target: torch.Tensor, source: torch.Tensor) -> torch.Tensor:
        if target.shape != source.shape:
            raise ConfigError(
                f"target/source shape mismatch: {tuple(target.shape)} vs {tuple(source.shape)}")
        gate = torch.sigmoid(
            (self.src_in(source) * self.tgt_in(target)).sum(dim=-1, keepdim=True) * self.scale)
        return gate * self.src_out(source) + target + source


class DualEnhancement(nn.Module):
    """Two sequential enhancement passes over a clean-branch feature bundle.

    Each local stripe owns its own relation unit; a single shared unit is
    reused across the sequential global fold.
    """

    def __init__(self, dim: int, n_locals: int, init_std: float = 0.02):
        super().__init__()
        if n_locals < 1:
            raise ConfigError(f"n_locals must be >= 1, got {n_locals}")
        self.local_rems = nn.ModuleList(REM(dim, init_std) for _ in range(n_locals))
        self.global_rem = REM(dim, init_std)

    def enhance_locals(self, locals_: list[torch.Tensor],
                       g1: torch.Tensor) -> list[torch.Tensor]:
        if len(locals_) != len(self.local_rems):
            raise ConfigError(
                f"expected {len(self.local_rems)} locals, got {len(locals_)}")
        return [rem(loc, g1) + loc for rem, loc in zip(self.local_rems, locals_)]

    def enhance_global(self, g1: torch.Tensor,
                       locals_: list[torch.Tensor]) -> torch.Tensor:
        if not locals_:
            raise ConfigError("enhance_global needs at least one local feature")
        acc = self.global_rem(g1, locals_[0])
        for loc in locals_[1:]:
            acc = self.global_rem(acc, loc)
        return acc

    def forward(self, bundle: FeatureBundle) -> EnhancedBundle:
        locals_e = self.enhance_locals(bundle.locals, bundle.g1)
        g1_e = self.enhance_global(bundle.g1, locals_e)
        return EnhancedBundle(g1=g1_e, locals=locals_e, g2=bundle.g2, g3=bundle.g3)


def passthrough(bundle: FeatureBundle) -> EnhancedBundle:
    """Identity wrapper used when enhancement is disabled."""
    return EnhancedBundle(g1=bundle.g1, locals=list(bundle.locals),
                          g2=bundle.g2, g3=bundle.g3)
