"""Identity classification heads and the combined multi-stream loss.

Every feature stream (clean global, erased global, cropped global, and each
enhanced local) gets its own batch-norm bottleneck + linear classifier for
the cross-entropy term, and contributes one batch-hard triplet term. All
terms are summed with weight 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .enhance import EnhancedBundle
from .errors import ConfigError


class BNNeckHead(nn.Module):
    """Batch-norm bottleneck (no shift) followed by a bias-free classifier."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.bottleneck = nn.BatchNorm1d(dim)
        self.bottleneck.bias.requires_grad_(False)
        self.classifier = nn.Linear(dim, num_classes, bias=False)
        nn.init.normal_(self.classifier.weight, std=0.001)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.bottleneck(feat))


def id_loss(feature: torch.Tensor, labels: torch.Tensor, head: BNNeckHead,
            label_smoothing: float = 0.0) -> torch.Tensor:
    """Mean cross entropy of the head's softmax prediction against labels."""
    num_classes = head.classifier.weight.shape[0]
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(head(feature), labels, label_smoothing=label_smoothing)


def validate_pk_batch(labels: torch.Tensor) -> None:
    """Triplet mining needs >= 2 identities and >= 2 samples per identity."""
    uniq, counts = torch.unique(labels, return_counts=True)
    if uniq.numel() < 2:
        raise ValueError(f"batch has {uniq.numel()} identity, need at least 2")
    bad = uniq[counts < 2]
    if bad.numel():
        raise ValueError(
            f"identity {int(bad[0])} has a single sample in the batch; "
            "use P x K sampling with K >= 2")


def pairwise_euclidean(x: torch.Tensor, y: torch.Tensor | None = None) -> torch.Tensor:
    y = x if y is None else y
    d2 = (x * x).sum(1, keepdim=True) + (y * y).sum(1) - 2.0 * (x @ y.t())
    return torch.sqrt(torch.clamp(d2, min=1e-12))


def triplet_loss(features: torch.Tensor, labels: torch.Tensor,
                 margin: float = 0.3) -> torch.Tensor:
    """Batch-hard margin loss: per anchor, hardest positive vs hardest negative."""
    validate_pk_batch(labels)
    dist = pairwise_euclidean(features)
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=labels.device)
    pos = same & ~eye
    neg = ~same
    d_ap = dist.masked_fill(~pos, float("-inf")).max(dim=1).values
    d_an = dist.masked_fill(~neg, float("inf")).min(dim=1).values
    return torch.clamp(d_ap - d_an + margin, min=0.0).mean()


@dataclass
class LossReport:
    """Loss breakdown for one forward pass; tensor-valued so it can backprop."""

    l_cls: torch.Tensor
    l_metric: torch.Tensor
    total: torch.Tensor
    per_term: dict[str, tuple[torch.Tensor, torch.Tensor]]  # stream -> (ce, triplet)

    def scalars(self) -> dict[str, float]:
        out = {"l_cls": float(self.l_cls.detach()),
               "l_metric": float(self.l_metric.detach()),
               "total": float(self.total.detach())}
        for name, (ce, tri) in self.per_term.items():
            out[f"ce_{name}"] = float(ce.detach())
            out[f"tri_{name}"] = float(tri.detach())
        return out


def stream_features(bundle: EnhancedBundle) -> list[tuple[str, torch.Tensor]]:
    """Named feature streams in their canonical order."""
    streams: list[tuple[str, torch.Tensor]] = [("global_base", bundle.g1)]
    if bundle.g2 is not None:
        streams.append(("global_erased", bundle.g2))
    if bundle.g3 is not None:
        streams.append(("global_cropped", bundle.g3))
    streams.extend((f"local_{i}", loc) for i, loc in enumerate(bundle.locals))
    return streams


def total_loss(bundle: EnhancedBundle, labels: torch.Tensor, heads: nn.ModuleDict,
               margin: float = 0.3, label_smoothing: float = 0.0) -> LossReport:
    """Cross entropy + batch-hard triplet over every feature stream."""
    per_term: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    for name, feat in stream_features(bundle):
        if name not in heads:
            raise ConfigError(f"no classification head for stream '{name}'")
        ce = id_loss(feat, labels, heads[name], label_smoothing)
        tri = triplet_loss(feat, labels, margin)
        per_term[name] = (ce, tri)
    l_cls = torch.stack([ce for ce, _ in per_term.values()]).sum()
    l_metric = torch.stack([tri for _, tri in per_term.values()]).sum()
    return LossReport(l_cls=l_cls, l_metric=l_metric, total=l_cls + l_metric,
                      per_term=per_term)
