"""Full model: shared encoder, optional dual enhancement, per-stream heads."""

from __future__ import annotations

import torch
from torch import nn

from .augment import derive_seed
from .backbone import BackboneConfig, VitEncoder, forward_triplet
from .enhance import DualEnhancement, EnhancedBundle, passthrough
from .errors import ConfigError
from .objective import BNNeckHead

VALID_BRANCHES = ("erased", "cropped")


class PadeModel(nn.Module):
    def __init__(self, backbone: BackboneConfig, num_classes: int,
                 branches: tuple[str, ...] = ("erased", "cropped"),
                 enhance: bool = True):
        super().__init__()
        for b in branches:
            if b not in VALID_BRANCHES:
                raise ConfigError(f"unknown branch '{b}', valid: {VALID_BRANCHES}")
        if num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {num_classes}")
        self.backbone_cfg = backbone
        self.branches = tuple(branches)
        self.num_classes = num_classes
        self.encoder = VitEncoder(backbone)
        d, n = backbone.embed_dim, backbone.n_locals
        self.enhancer = DualEnhancement(d, n) if enhance else None
        names = ["global_base"]
        if "erased" in self.branches:
            names.append("global_erased")
        if "cropped" in self.branches:
            names.append("global_cropped")
        names.extend(f"local_{i}" for i in range(n))
        self.heads = nn.ModuleDict({name: BNNeckHead(d, num_classes) for name in names})

    @property
    def descriptor_dim(self) -> int:
        return (1 + self.backbone_cfg.n_locals) * self.backbone_cfg.embed_dim

    def features(self, base: torch.Tensor, erased: torch.Tensor | None = None,
                 cropped: torch.Tensor | None = None) -> EnhancedBundle:
        bundle = forward_triplet(self.encoder, base, erased, cropped)
        if self.enhancer is not None:
            return self.enhancer(bundle)
        return passthrough(bundle)

    def descriptors(self, images: torch.Tensor) -> torch.Tensor:
        """Test-time person description: [global | local_1 ... local_n]."""
        bundle = self.features(images)
        return torch.cat([bundle.g1, *bundle.locals], dim=1)


def build_model(backbone: BackboneConfig, num_classes: int,
                branches: tuple[str, ...] = ("erased", "cropped"),
                enhance: bool = True, seed: int = 0) -> PadeModel:
    """Construct a model with reproducible weight initialization."""
    torch.manual_seed(derive_seed(seed, "model-init") % (2 ** 63))
    return PadeModel(backbone, num_classes, branches=branches, enhance=enhance)
