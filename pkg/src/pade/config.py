"""Run configuration: one TOML file with a section per module, strict
validation (unknown sections or keys are errors), dotted-path overrides for
CLI flags, and helpers to serialize the fully-resolved config into every run
directory together with a content hash of the checkpoint it used.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .augment import AugmentConfig
from .backbone import BackboneConfig
from .data import SyntheticSpec
from .errors import ConfigError
from .trainer import TrainConfig

OBJECTIVE_KEYS = ("margin", "label_smoothing")


@dataclass
class EvalConfig:
    metric: str = "euclidean"
    max_rank: int = 10
    batch_size: int = 64

    def validate(self) -> None:
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"metric must be 'euclidean' or 'cosine', "
                              f"got {self.metric!r}")
        if self.max_rank < 1 or self.batch_size < 1:
            raise ConfigError("max_rank and batch_size must be >= 1")


@dataclass
class RunConfig:
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def validate(self) -> None:
        self.augment.validate()
        self.backbone.validate()
        self.trainer.validate()
        self.eval.validate()
        self.synthetic.validate()
        if self.backbone.train_size != self.augment.train_size:
            raise ConfigError(
                f"backbone.train_size {self.backbone.train_size} does not match "
                f"augment.train_size {self.augment.train_size}")


_SECTION_TYPES = {
    "augment": AugmentConfig,
    "backbone": BackboneConfig,
    "trainer": TrainConfig,
    "eval": EvalConfig,
    "synthetic": SyntheticSpec,
    "objective": None,  # margin / label_smoothing, folded into the trainer config
}


def _coerce(value: Any, target_default: Any) -> Any:
    """TOML arrays -> tuples (nested too); ints promote to float where the
    default is a float. Dict values (e.g. per-split probabilities) stay dicts."""
    if isinstance(value, list):
        return tuple(_coerce(v, None) for v in value)
    if isinstance(value, bool):
        return value
    if isinstance(value, int) and isinstance(target_default, float):
        return float(value)
    return value


def _build_section(cls: type, table: dict[str, Any], section: str) -> Any:
    valid = {f.name: f for f in fields(cls)}
    kwargs: dict[str, Any] = {}
    defaults = cls()
    for key, value in table.items():
        if key not in valid:
            raise ConfigError(f"unknown key '{key}' in [{section}] "
                              f"(valid: {sorted(valid)})")
        kwargs[key] = _coerce(value, getattr(defaults, key))
    return dataclasses.replace(defaults, **kwargs)


def parse_config(raw: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a parsed TOML document."""
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)} "
                          f"(valid: {sorted(_SECTION_TYPES)})")
    for name, table in raw.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level entry '{name}' must be a section/table")

    objective = raw.get("objective", {})
    for key in objective:
        if key not in OBJECTIVE_KEYS:
            raise ConfigError(f"unknown key '{key}' in [objective] "
                              f"(valid: {sorted(OBJECTIVE_KEYS)})")
    trainer_table = dict(raw.get("trainer", {}))
    for key, value in objective.items():
        if key in trainer_table:
            raise ConfigError(f"'{key}' given in both [objective] and [trainer]")
        trainer_table[key] = value

    augment = _build_section(AugmentConfig, raw.get("augment", {}), "augment")
    backbone_table = dict(raw.get("backbone", {}))
    if "train_size" not in backbone_table:
        backbone_table["train_size"] = list(augment.train_size)
    cfg = RunConfig(
        augment=augment,
        backbone=_build_section(BackboneConfig, backbone_table, "backbone"),
        trainer=_build_section(TrainConfig, trainer_table, "trainer"),
        eval=_build_section(EvalConfig, raw.get("eval", {}), "eval"),
        synthetic=_build_section(SyntheticSpec, raw.get("synthetic", {}), "synthetic"),
    )
    cfg.validate()
    return cfg


def load_config(path: str | Path | None = None,
                overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a TOML config file (or pure defaults) and apply dotted overrides
    like ``{"trainer.seed": 7}``. Overrides win over file values."""
    raw: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            with path.open("rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override '{dotted}' must look like 'section.key'")
        raw.setdefault(section, {})[key] = value
    return parse_config(raw)


def resolved_dict(cfg: RunConfig) -> dict[str, Any]:
    return {name: dataclasses.asdict(getattr(cfg, name))
            for name in ("augment", "backbone", "trainer", "eval", "synthetic")}


def git_blob_hash(path: str | Path) -> str:
    """Content hash of a file the way ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def write_resolved(cfg: RunConfig, out_dir: str | Path,
                   checkpoint: str | Path | None = None,
                   extra: dict[str, Any] | None = None) -> Path:
    """Write the fully-resolved config (plus checkpoint content hash if one
    was used) as ``config.json`` in the run directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload: dict[str, Any] = {"config": resolved_dict(cfg)}
    if checkpoint is not None:
        payload["checkpoint"] = {"path": str(checkpoint),
                                 "content_hash": git_blob_hash(checkpoint)}
    if extra:
        payload.update(extra)
    path = out_dir / "config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
