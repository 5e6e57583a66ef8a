"""Training loop: SGD with step decay, P x K identity batches, and the
triple-branch forward pass through shared weights.

Determinism contract: every stochastic choice is keyed off ``cfg.seed`` via
``derive_seed`` (identity sampling per epoch, augmentation per slot), and
checkpoints carry the optimizer and torch RNG state, so resuming at epoch e
reproduces the uninterrupted run step for step.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .augment import (AugmentConfig, base_augment, cropping_augment, derive_seed,
                      erasing_augment, parallel_augment, serial_augment)
from .backbone import BackboneConfig
from .data import ReIDDataset
from .errors import ConfigError, TrainingDiverged
from .evaluation import evaluate_model
from .model import VALID_BRANCHES, PadeModel, build_model
from .objective import LossReport, total_loss

CHECKPOINT_FORMAT_VERSION = 1
AUGMENT_MODES = ("parallel", "serial")


@dataclass
class TrainConfig:
    lr: float = 0.008
    lr_decay_epochs: tuple[int, ...] = (40, 70)
    lr_decay_factor: float = 0.1
    max_epoch: int = 170
    batch_size: int = 32
    pk: tuple[int, int] = (8, 4)
    weight_decay: float = 0.0004
    momentum: float = 0.9
    margin: float = 0.3
    label_smoothing: float = 0.0
    seed: int = 0
    augment_mode: str = "parallel"
    branches: tuple[str, ...] = ("erased", "cropped")
    enhance: bool = True
    serial_erase_prob: float = 0.5  # only used by the serial baseline pipeline
    steps_per_epoch: int | None = None
    checkpoint_every: int = 1
    val_every: int | None = None
    device: str = "cpu"

    def validate(self) -> None:
        p, k = self.pk
        if p * k != self.batch_size:
            raise ConfigError(f"P*K = {p}*{k} must equal batch_size {self.batch_size}")
        if p < 2 or k < 2:
            raise ConfigError(f"need P >= 2 and K >= 2 for triplet mining, got {self.pk}")
        if self.max_epoch < 1:
            raise ConfigError(f"max_epoch must be >= 1, got {self.max_epoch}")
        if list(self.lr_decay_epochs) != sorted(set(self.lr_decay_epochs)):
            raise ConfigError(f"lr_decay_epochs must be strictly increasing, "
                              f"got {self.lr_decay_epochs}")
        if any(e < 0 or e >= self.max_epoch for e in self.lr_decay_epochs):
            raise ConfigError(f"lr_decay_epochs must lie in [0, max_epoch), "
                              f"got {self.lr_decay_epochs}")
        if self.lr <= 0 or self.lr_decay_factor <= 0:
            raise ConfigError("lr and lr_decay_factor must be positive")
        if self.augment_mode not in AUGMENT_MODES:
            raise ConfigError(f"augment_mode must be one of {AUGMENT_MODES}, "
                              f"got {self.augment_mode!r}")
        for b in self.branches:
            if b not in VALID_BRANCHES:
                raise ConfigError(f"unknown branch '{b}', valid: {VALID_BRANCHES}")
        if self.augment_mode == "serial" and self.branches:
            raise ConfigError("serial augmentation trains a single stream; "
                              "set branches = ()")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1 when given")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class FitResult:
    checkpoint: Path
    best_checkpoint: Path | None
    epochs_run: int
    first_epoch_loss: float
    final_epoch_loss: float
    best_val_map: float | None


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: lr = base * factor^(number of decay epochs <= epoch)."""
    if not 0 <= epoch < cfg.max_epoch:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.max_epoch})")
    decays = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr * cfg.lr_decay_factor ** decays


def sample_batch(dataset: ReIDDataset, pk: tuple[int, int],
                 rng: np.random.Generator) -> tuple[list[int], list[int]]:
    """Pick P identities then K instances each; identities short on images
    are resampled with replacement. Returns (dataset indices, labels)."""
    p, k = pk
    by_label: dict[int, list[int]] = {}
    for idx, item in enumerate(dataset.items):
        if item.label is None:
            raise ConfigError(f"item {idx} in split '{dataset.split}' has no label")
        by_label.setdefault(item.label, []).append(idx)
    if len(by_label) < p:
        raise ConfigError(f"need >= {p} identities, dataset has {len(by_label)}")
    labels_sorted = sorted(by_label)
    chosen = rng.choice(len(labels_sorted), size=p, replace=False)
    indices: list[int] = []
    labels: list[int] = []
    for li in chosen:
        label = labels_sorted[int(li)]
        pool = by_label[label]
        picks = rng.choice(len(pool), size=k, replace=len(pool) < k)
        indices.extend(pool[int(j)] for j in picks)
        labels.extend([label] * k)
    return indices, labels


def build_batch(
    dataset: ReIDDataset,
    indices: list[int],
    aug_cfg: AugmentConfig,
    cfg: TrainConfig,
    epoch: int,
    step: int,
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None]:
    """Augment one sampled batch into (base, erased, cropped) tensors.

    Slot seeds are ``derive_seed(cfg.seed, "augment", epoch, step, slot)``;
    the per-branch child seeds match ``parallel_augment`` so disabling a
    branch never perturbs the remaining ones.
    """
    bases, eraseds, croppeds = [], [], []
    for slot, idx in enumerate(indices):
        img = dataset.load_image(idx)
        slot_seed = derive_seed(cfg.seed, "augment", epoch, step, slot)
        if cfg.augment_mode == "serial":
            bases.append(serial_augment(img, aug_cfg, slot_seed, cfg.serial_erase_prob))
            continue
        bases.append(base_augment(img, aug_cfg))
        if "erased" in cfg.branches:
            eraseds.append(erasing_augment(img, aug_cfg, derive_seed(slot_seed, "erase")))
        if "cropped" in cfg.branches:
            croppeds.append(cropping_augment(img, aug_cfg, derive_seed(slot_seed, "crop")))

    def stack(arrs: list[np.ndarray]) -> torch.Tensor | None:
        if not arrs:
            return None
        return torch.from_numpy(np.stack(arrs))

    return stack(bases), stack(eraseds), stack(croppeds)


def build_optimizer(model: PadeModel, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def train_step(
    model: PadeModel,
    optimizer: torch.optim.Optimizer,
    batch: tuple[torch.Tensor, torch.Tensor | None, torch.Tensor | None],
    labels: torch.Tensor,
    cfg: TrainConfig,
) -> LossReport:
    """One SGD step over the combined objective of all feature streams."""
    model.train()
    base, erased, cropped = batch
    bundle = model.features(base, erased, cropped)
    report = total_loss(bundle, labels, model.heads,
                        margin=cfg.margin, label_smoothing=cfg.label_smoothing)
    if not torch.isfinite(report.total):
        raise TrainingDiverged(
            f"non-finite loss {float(report.total.detach())}; "
            f"per-term dump: {report.scalars()}")
    optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    optimizer.step()
    return report


def save_checkpoint(path: str | Path, model: PadeModel,
                    optimizer: torch.optim.Optimizer, epoch: int,
                    cfg: TrainConfig, backbone_cfg: BackboneConfig,
                    aug_cfg: AugmentConfig,
                    metadata: dict[str, Any] | None = None) -> Path:
    """Atomic write: serialize to a sibling temp file, then rename over."""
    path = Path(path)
    state = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "num_classes": model.num_classes,
        "train_config": asdict(cfg),
        "backbone_config": asdict(backbone_cfg),
        "augment_config": asdict(aug_cfg),
        "torch_rng": torch.get_rng_state(),
        "metadata": {"momentum": cfg.momentum, **(metadata or {})},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(state, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ConfigError(f"checkpoint {path} is not readable: {exc}") from exc
    version = state.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format_version {version!r} "
                          f"(expected {CHECKPOINT_FORMAT_VERSION})")
    return state


def configs_from_checkpoint(
    state: dict[str, Any],
) -> tuple[TrainConfig, BackboneConfig, AugmentConfig]:
    def detuple(d: dict[str, Any]) -> dict[str, Any]:
        return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}

    return (TrainConfig(**detuple(state["train_config"])),
            BackboneConfig(**detuple(state["backbone_config"])),
            AugmentConfig(**detuple(state["augment_config"])))


def model_from_checkpoint(state: dict[str, Any] | str | Path) -> PadeModel:
    if not isinstance(state, dict):
        state = load_checkpoint(state)
    cfg, backbone_cfg, _ = configs_from_checkpoint(state)
    model = PadeModel(backbone_cfg, state["num_classes"],
                      branches=cfg.branches, enhance=cfg.enhance)
    model.load_state_dict(state["model_state"])
    model.eval()
    return model


def _count_classes(dataset: ReIDDataset) -> int:
    labels = {item.label for item in dataset.items}
    if None in labels:
        raise ConfigError(f"split '{dataset.split}' has unlabeled items")
    if sorted(labels) != list(range(len(labels))):
        raise ConfigError("training labels must be contiguous from 0, "
                          f"got {sorted(labels)[:8]}...")
    return len(labels)


def _truncate_loss_log(path: Path, start_epoch: int) -> None:
    if not path.exists():
        return
    with path.open() as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return
    header, body = rows[0], rows[1:]
    epoch_col = header.index("epoch")
    kept = [r for r in body if int(r[epoch_col]) < start_epoch]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(kept)


def fit(
    train: ReIDDataset,
    cfg: TrainConfig,
    backbone_cfg: BackboneConfig,
    aug_cfg: AugmentConfig,
    out_dir: str | Path,
    val: tuple[ReIDDataset, ReIDDataset] | None = None,
    resume: bool = False,
    log_every: int = 0,
    stop_after_epoch: int | None = None,
) -> FitResult:
    """Full training loop with per-step CSV logging and periodic checkpoints.

    Writes ``last.ckpt`` every ``checkpoint_every`` epochs (and at the end)
    and ``best.ckpt`` whenever validation mAP improves. With ``resume=True``
    an existing ``last.ckpt`` in ``out_dir`` is picked up and continued.
    ``stop_after_epoch`` ends the session early after that many epochs while
    keeping the configured schedule, e.g. to time-box a run that will be
    resumed later.
    """
    cfg.validate()
    backbone_cfg.validate()
    aug_cfg.validate()
    if backbone_cfg.train_size != aug_cfg.train_size:
        raise ConfigError(f"backbone train_size {backbone_cfg.train_size} != "
                          f"augment train_size {aug_cfg.train_size}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    loss_path = out_dir / "loss.csv"
    device = torch.device(cfg.device)

    num_classes = _count_classes(train)
    best_map: float | None = None
    best_epoch: int | None = None
    if resume and last_path.exists():
        state = load_checkpoint(last_path)
        saved_cfg, saved_backbone, saved_aug = configs_from_checkpoint(state)
        if asdict(saved_cfg) != asdict(cfg) or asdict(saved_backbone) != asdict(backbone_cfg):
            raise ConfigError("resume config does not match the checkpointed run")
        model = model_from_checkpoint(state).to(device)
        optimizer = build_optimizer(model, cfg)
        optimizer.load_state_dict(state["optimizer_state"])
        torch.set_rng_state(state["torch_rng"].cpu().to(torch.uint8))
        start_epoch = int(state["epoch"])
        best_map = state["metadata"].get("best_map")
        best_epoch = state["metadata"].get("best_epoch")
        _truncate_loss_log(loss_path, start_epoch)
    else:
        model = build_model(backbone_cfg, num_classes, branches=cfg.branches,
                            enhance=cfg.enhance, seed=cfg.seed).to(device)
        optimizer = build_optimizer(model, cfg)
        start_epoch = 0
        if loss_path.exists():
            loss_path.unlink()

    steps = cfg.steps_per_epoch or max(1, math.ceil(len(train) / cfg.batch_size))
    header_written = loss_path.exists()
    first_epoch_loss = math.nan
    final_epoch_loss = math.nan
    epoch = start_epoch
    with loss_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        for epoch in range(start_epoch, cfg.max_epoch):
            lr = lr_schedule(epoch, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr
            id_rng = np.random.default_rng(derive_seed(cfg.seed, "sample", epoch))
            epoch_total = 0.0
            for step in range(steps):
                indices, labels = sample_batch(train, cfg.pk, id_rng)
                batch = build_batch(train, indices, aug_cfg, cfg, epoch, step)
                batch = tuple(t.to(device) if t is not None else None for t in batch)
                label_t = torch.as_tensor(labels, dtype=torch.long, device=device)
                report = train_step(model, optimizer, batch, label_t, cfg)
                scalars = report.scalars()
                epoch_total += scalars["total"]
                if not header_written:
                    writer.writerow(["step", "epoch", "lr", "l_cls", "l_metric",
                                     "total", *[k for k in scalars
                                                if k.startswith(("ce_", "tri_"))]])
                    header_written = True
                writer.writerow([epoch * steps + step, epoch, f"{lr:.6g}",
                                 f"{scalars['l_cls']:.6f}", f"{scalars['l_metric']:.6f}",
                                 f"{scalars['total']:.6f}",
                                 *[f"{v:.6f}" for k, v in scalars.items()
                                   if k.startswith(("ce_", "tri_"))]])
            fh.flush()
            mean_loss = epoch_total / steps
            if epoch == 0:
                first_epoch_loss = mean_loss
            final_epoch_loss = mean_loss
            if log_every and (epoch + 1) % log_every == 0:
                print(f"epoch {epoch + 1}/{cfg.max_epoch} lr={lr:.5f} "
                      f"loss={mean_loss:.4f}")

            if val is not None and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
                result = evaluate_model(model, val[0], val[1], aug_cfg,
                                        device=cfg.device)
                if best_map is None or result.mean_ap > best_map:
                    best_map = result.mean_ap
                    best_epoch = epoch
                    save_checkpoint(best_path, model, optimizer, epoch + 1, cfg,
                                    backbone_cfg, aug_cfg,
                                    {"best_map": best_map, "best_epoch": best_epoch})
            stopping = stop_after_epoch is not None and epoch + 1 >= stop_after_epoch
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.max_epoch \
                    or stopping:
                save_checkpoint(last_path, model, optimizer, epoch + 1, cfg,
                                backbone_cfg, aug_cfg,
                                {"best_map": best_map, "best_epoch": best_epoch})
            if stopping:
                break
    return FitResult(
        checkpoint=last_path,
        best_checkpoint=best_path if best_path.exists() else None,
        epochs_run=epoch + 1 - start_epoch if cfg.max_epoch > start_epoch else 0,
        first_epoch_loss=first_epoch_loss,
        final_epoch_loss=final_epoch_loss,
        best_val_map=best_map,
    )
