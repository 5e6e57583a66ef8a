"""Shared fixtures for the test suite.

Two scales are used throughout:

* "tiny": 64x32 images, a one-block encoder and a handful of identities.
  Fast enough for unit tests and CLI round trips (a full fit takes a couple
  of seconds).
* "desk": 128x64 images, 20 training identities, a two-block encoder.  One
  desk-scale run is trained once per session and reused by the end-to-end
  checks in test_acceptance.py.
"""

import dataclasses
import time

import pytest
import torch

from pade.augment import AugmentConfig
from pade.backbone import BackboneConfig
from pade.data import ReIDSplits, SyntheticSpec, generate_synthetic, write_dataset
from pade.trainer import TrainConfig, fit, model_from_checkpoint


def tiny_synthetic_spec(**overrides) -> SyntheticSpec:
    base = dict(
        num_ids=6,
        images_per_id=4,
        image_size=(64, 32),
        num_test_ids=4,
        query_per_id=2,
        gallery_per_id=2,
        num_cameras=2,
        seed=3,
    )
    base.update(overrides)
    return SyntheticSpec(**base)


def tiny_augment_config(**overrides) -> AugmentConfig:
    base = dict(train_size=(64, 32), pad=4)
    base.update(overrides)
    return AugmentConfig(**base)


def tiny_backbone_config(**overrides) -> BackboneConfig:
    base = dict(patch_size=16, embed_dim=32, depth=1, heads=4,
                train_size=(64, 32), n_locals=2)
    base.update(overrides)
    return BackboneConfig(**base)


def tiny_train_config(**overrides) -> TrainConfig:
    base = dict(lr=0.01, lr_decay_epochs=(2,), max_epoch=3, batch_size=8,
                pk=(4, 2), steps_per_epoch=4, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


# Desk-scale setup shared by the end-to-end tests.  The synthetic world has
# 20 training identities arranged as 10 twin pairs: each pair shares colours
# and layout and differs only in which side carries the torso sash and the
# darker trouser leg, so orientation actually matters for telling people
# apart.  Queries are heavily occluded, the gallery is mostly clean.
DESK_SPEC = dict(
    num_ids=20,
    images_per_id=12,
    image_size=(128, 64),
    num_test_ids=10,
    query_per_id=10,
    gallery_per_id=10,
    num_cameras=4,
    occluder_strength=0.95,
    occlusion_prob={"train": 0.1, "query": 0.9, "gallery": 0.1},
    seed=23,
)
DESK_AUG = dict(train_size=(128, 64), pad=8)
DESK_BACKBONE = dict(patch_size=16, embed_dim=64, depth=2, heads=4,
                     train_size=(128, 64), n_locals=8)
DESK_TRAIN = dict(lr=0.008, lr_decay_epochs=(20,), max_epoch=30,
                  batch_size=32, pk=(8, 4), steps_per_epoch=20, seed=7)


@pytest.fixture(scope="session")
def tiny_splits() -> ReIDSplits:
    return generate_synthetic(tiny_synthetic_spec())


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory, tiny_splits):
    """Tiny dataset written to disk in the name-encoded layout."""
    root = tmp_path_factory.mktemp("tiny_data")
    write_dataset(tiny_splits, root)
    return root


@pytest.fixture(scope="session")
def tiny_run(tmp_path_factory, tiny_splits):
    """A short tiny-scale training run; several tests only need *some*
    trained checkpoint with matching configs, not a good one."""
    out = tmp_path_factory.mktemp("tiny_run")
    cfg = tiny_train_config()
    result = fit(tiny_splits.train, cfg, tiny_backbone_config(),
                 tiny_augment_config(), out)
    return {
        "out": out,
        "result": result,
        "train_cfg": cfg,
        "backbone_cfg": tiny_backbone_config(),
        "aug_cfg": tiny_augment_config(),
    }


@dataclasses.dataclass
class DeskRun:
    splits: ReIDSplits
    aug_cfg: AugmentConfig
    backbone_cfg: BackboneConfig
    train_cfg: TrainConfig
    result: object
    model: torch.nn.Module
    out: object
    train_seconds: float


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> DeskRun:
    """Train the full model (both branches + enhancement) at desk scale.

    Used by the end-to-end loss/retrieval check and by the occlusion sweep,
    which both evaluate the same checkpoint.
    """
    splits = generate_synthetic(SyntheticSpec(**DESK_SPEC))
    aug_cfg = AugmentConfig(**DESK_AUG)
    backbone_cfg = BackboneConfig(**DESK_BACKBONE)
    train_cfg = TrainConfig(**DESK_TRAIN)
    out = tmp_path_factory.mktemp("desk_run")
    start = time.perf_counter()
    result = fit(splits.train, train_cfg, backbone_cfg, aug_cfg, out)
    elapsed = time.perf_counter() - start
    model = model_from_checkpoint(result.checkpoint)
    model.eval()
    return DeskRun(splits=splits, aug_cfg=aug_cfg, backbone_cfg=backbone_cfg,
                   train_cfg=train_cfg, result=result, model=model, out=out,
                   train_seconds=elapsed)
