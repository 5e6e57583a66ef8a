"""Dataset layer: directory loading for standard Re-ID layouts plus a
procedural synthetic-identity generator for desk-scale end-to-end runs.

Synthetic identities are colored geometric figures (head / torso / legs with
an identity-specific palette) rendered with per-image pose and lighting
jitter. Occluders are gray rectangles, ellipses, or edge bands, so "occluded"
queries genuinely hide body regions. Everything is driven by derived seeds
and fully reproducible.
"""

from __future__ import annotations

import colorsys
import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .augment import derive_seed
from .errors import DataError

_NAME_RE = re.compile(r"^(\d+)_c(\d+)\D")
_IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp"}
_GOLDEN = 0.618033988749895


@dataclass
class DatasetItem:
    pid: int
    camid: int
    image: np.ndarray | None = None  # uint8 HxWx3 for in-memory datasets
    path: Path | None = None
    label: int | None = None  # contiguous training label
    occluded: bool = False


@dataclass
class ReIDDataset:
    split: str
    items: list[DatasetItem]

    def __post_init__(self) -> None:
        self._cache: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.items)

    @property
    def pids(self) -> list[int]:
        return [item.pid for item in self.items]

    @property
    def num_ids(self) -> int:
        return len({item.pid for item in self.items})

    def load_image(self, idx: int) -> np.ndarray:
        item = self.items[idx]
        if item.image is not None:
            return item.image
        if idx not in self._cache:
            with Image.open(item.path) as im:
                self._cache[idx] = np.asarray(im.convert("RGB"), dtype=np.uint8)
        return self._cache[idx]


@dataclass
class ReIDSplits:
    train: ReIDDataset
    query: ReIDDataset
    gallery: ReIDDataset
    skip_report: list[str] = field(default_factory=list)


@dataclass
class SyntheticSpec:
    num_ids: int = 20
    images_per_id: int = 8
    image_size: tuple[int, int] = (128, 64)  # (h, w)
    num_test_ids: int = 6
    query_per_id: int = 4
    gallery_per_id: int = 4
    num_cameras: int = 4
    occluder_bank: tuple[str, ...] = ("rectangle", "ellipse", "band")
    occluder_strength: float = 1.0  # scales occluder coverage
    occlusion_prob: dict[str, float] = field(
        default_factory=lambda: {"train": 0.1, "query": 0.9, "gallery": 0.1})
    seed: int = 0

    def validate(self) -> None:
        if self.num_ids < 1 or self.images_per_id < 1:
            raise DataError("num_ids and images_per_id must be >= 1")
        if self.num_test_ids < 1 or self.query_per_id < 1 or self.gallery_per_id < 1:
            raise DataError("test split sizes must be >= 1")
        if self.image_size[0] < 16 or self.image_size[1] < 8:
            raise DataError(f"image_size too small: {self.image_size}")
        if self.num_cameras < 2:
            raise DataError("need >= 2 cameras for cross-camera evaluation")
        known = {"rectangle", "ellipse", "band"}
        if not self.occluder_bank or not set(self.occluder_bank) <= known:
            raise DataError(f"occluder_bank must be a non-empty subset of {known}")
        if not 0.0 < self.occluder_strength <= 2.0:
            raise DataError(
                f"occluder_strength must be in (0, 2], got {self.occluder_strength}")
        for split, p in self.occlusion_prob.items():
            if split not in ("train", "query", "gallery") or not 0.0 <= p <= 1.0:
                raise DataError(f"bad occlusion_prob entry: {split}={p}")


def parse_reid_name(name: str) -> tuple[int, int] | None:
    """`0002_c3_0001.jpg` -> (pid 2, cam 3); None if the name does not parse."""
    m = _NAME_RE.match(name)
    if m is None:
        return None
    return int(m.group(1)), int(m.group(2))


def load_directory(root: str | Path) -> ReIDSplits:
    """Load train/query/gallery subdirectories with Market-style filenames.

    Files that do not parse are collected in the skip report rather than
    failing the load. Training labels are remapped to contiguous ids.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    datasets: dict[str, ReIDDataset] = {}
    skip_report: list[str] = []
    for split in ("train", "query", "gallery"):
        split_dir = root / split
        if not split_dir.is_dir():
            raise DataError(f"missing split directory {split_dir}")
        items: list[DatasetItem] = []
        for path in sorted(split_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in _IMAGE_EXTS:
                skip_report.append(f"{split}/{path.name}")
                continue
            parsed = parse_reid_name(path.name)
            if parsed is None:
                skip_report.append(f"{split}/{path.name}")
                continue
            pid, camid = parsed
            items.append(DatasetItem(pid=pid, camid=camid, path=path))
        if not items:
            raise DataError(f"split '{split}' at {split_dir} contains no usable images")
        datasets[split] = ReIDDataset(split=split, items=items)
    label_of = {pid: i for i, pid in enumerate(sorted({it.pid for it in datasets["train"].items}))}
    for item in datasets["train"].items:
        item.label = label_of[item.pid]
    missing = sorted({it.pid for it in datasets["query"].items}
                     - {it.pid for it in datasets["gallery"].items})
    if missing:
        raise DataError(f"query identities missing from gallery: {missing}")
    return ReIDSplits(train=datasets["train"], query=datasets["query"],
                      gallery=datasets["gallery"], skip_report=skip_report)


def _hsv(h: float, s: float, v: float) -> np.ndarray:
    return np.asarray(colorsys.hsv_to_rgb(h % 1.0, s, v), dtype=np.float32)


def _identity_params(spec: SyntheticSpec, pid: int) -> dict:
    """Identity appearance: colors plus body-layout proportions.

    Identities come in look-alike pairs: ids 2k and 2k+1 share colors and
    body layout and differ only in which side a bright sash is worn on.
    Orientation is therefore genuinely informative, the way bags and
    asymmetric clothing are for real pedestrians, and pipelines that flip
    images cannot separate the two members of a pair.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "identity", pid // 2))
    hue_offset = np.random.default_rng(derive_seed(spec.seed, "hue-offset")).uniform()
    torso_hue = (hue_offset + (pid // 2) * _GOLDEN) % 1.0
    leg_hue = (torso_hue + 0.33 + rng.uniform(-0.1, 0.1)) % 1.0
    torso_top = rng.uniform(0.20, 0.30)
    torso_bot = torso_top + rng.uniform(0.24, 0.36)
    return {
        "torso": _hsv(torso_hue, rng.uniform(0.75, 1.0), rng.uniform(0.75, 0.95)),
        "legs": _hsv(leg_hue, rng.uniform(0.7, 1.0), rng.uniform(0.6, 0.9)),
        "stripe": _hsv(torso_hue + 0.5, 0.9, 0.9) if rng.uniform() < 0.6 else None,
        "stripe_pos": rng.uniform(0.25, 0.75),   # relative position inside the torso
        "stripe_halfwidth": rng.uniform(0.02, 0.06),
        "skin": np.asarray([0.92, 0.77, 0.62], dtype=np.float32) * rng.uniform(0.92, 1.0),
        "body_w": rng.uniform(0.42, 0.58),
        "torso_top": torso_top,
        "torso_bot": torso_bot,
        "legs_bot": rng.uniform(0.88, 0.96),
        "head_r": rng.uniform(0.06, 0.11),
        "gap_frac": rng.uniform(0.12, 0.30),
        "sash": _hsv((torso_hue + 0.18 + rng.uniform(-0.05, 0.05)) % 1.0, 0.95, 0.95),
        "sash_side": 1 if pid % 2 == 0 else -1,
        "sash_width": rng.uniform(0.18, 0.28),
        "sash_offset": rng.uniform(0.55, 0.85),
        "leg_dim": rng.uniform(0.55, 0.7),
    }


def _paint_occluder(img: np.ndarray, rng: np.random.Generator,
                    bank: tuple[str, ...], strength: float = 1.0) -> None:
    h, w, _ = img.shape
    kind = bank[int(rng.integers(0, len(bank)))]
    shade = rng.uniform(0.35, 0.65)
    if kind == "rectangle":
        frac = min(rng.uniform(0.20, 0.45) * strength, 0.8)
        aspect = rng.uniform(0.5, 2.0)
        oh = min(h - 1, int(round(np.sqrt(frac * h * w * aspect))))
        ow = min(w - 1, int(round(np.sqrt(frac * h * w / aspect))))
        top = int(rng.integers(0, h - oh + 1))
        left = int(rng.integers(0, w - ow + 1))
        region = img[top:top + oh, left:left + ow]
        region[:] = shade
        region += rng.normal(0.0, 0.015, region.shape).astype(np.float32)
    elif kind == "ellipse":
        scale = min(np.sqrt(strength), 1.6)
        cy = rng.uniform(0.25, 0.75) * h
        cx = rng.uniform(0.25, 0.75) * w
        ry = rng.uniform(0.22, 0.38) * h * scale
        rx = rng.uniform(0.28, 0.48) * w * scale
        yy, xx = np.mgrid[0:h, 0:w]
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[mask] = shade
        img[mask] += rng.normal(0.0, 0.015, (int(mask.sum()), 3)).astype(np.float32)
    else:  # band: person partially out of view / blocked from one side
        side = ("bottom", "left", "right")[int(rng.integers(0, 3))]
        frac = min(rng.uniform(0.25, 0.45) * strength, 0.8)
        if side == "bottom":
            region = img[int(h * (1 - frac)):]
        elif side == "left":
            region = img[:, :int(w * frac)]
        else:
            region = img[:, int(w * (1 - frac)):]
        region[:] = shade
        region += rng.normal(0.0, 0.015, region.shape).astype(np.float32)


def render_person(spec: SyntheticSpec, pid: int, split: str, index: int,
                  occluded: bool) -> np.ndarray:
    """Render one synthetic person image as uint8 HxWx3.

    Per-image jitter covers lighting, horizontal AND vertical shift, body
    scale, and small color wobble, so images of one identity are not
    pixel-aligned and part features must tolerate misalignment.
    """
    h, w = spec.image_size
    ident = _identity_params(spec, pid)
    rng = np.random.default_rng(derive_seed(spec.seed, "image", split, pid, index))
    brightness = rng.uniform(0.85, 1.15)
    dx = int(round(rng.uniform(-0.06, 0.06) * w))
    dy = rng.uniform(-0.05, 0.05)
    scale_y = rng.uniform(0.92, 1.08)
    body_w = int(round(ident["body_w"] * rng.uniform(0.92, 1.08) * w))
    cx = w // 2 + dx

    def row(frac: float) -> int:
        return int(np.clip(round((frac * scale_y + dy) * h), 0, h))

    def wobble(color: np.ndarray) -> np.ndarray:
        return np.clip(color + rng.normal(0.0, 0.03, 3).astype(np.float32), 0.0, 1.0)

    img = np.full((h, w, 3), rng.uniform(0.78, 0.88), dtype=np.float32)
    img += rng.normal(0.0, 0.01, img.shape).astype(np.float32)

    left = max(0, cx - body_w // 2)
    right = min(w, cx + body_w // 2)
    torso_top = row(ident["torso_top"])
    torso_bot = row(ident["torso_bot"])
    legs_bot = row(ident["legs_bot"])
    img[torso_top:torso_bot, left:right] = wobble(ident["torso"])
    if ident["stripe"] is not None:
        mid = row(ident["torso_top"]
                  + ident["stripe_pos"] * (ident["torso_bot"] - ident["torso_top"]))
        band = max(1, int(ident["stripe_halfwidth"] * h))
        img[max(torso_top, mid - band):min(torso_bot, mid + band), left:right] = \
            wobble(ident["stripe"])
    # One-sided vertical sash, the primary cue separating look-alike id pairs.
    sash_w = max(1, int(round((right - left) * ident["sash_width"])))
    sash_cx = cx + int(round(ident["sash_side"] * ident["sash_offset"] * (body_w // 2)))
    s_left = max(left, sash_cx - sash_w // 2)
    s_right = min(right, sash_cx + (sash_w + 1) // 2)
    if s_right > s_left:
        img[torso_top:torso_bot, s_left:s_right] = wobble(ident["sash"])
    img[torso_bot:legs_bot, left:right] = wobble(ident["legs"])
    gap_w = max(1, int(round((right - left) * ident["gap_frac"])))
    img[torso_bot:legs_bot, cx - gap_w // 2:cx + (gap_w + 1) // 2] = 0.82
    # Darker trouser leg on the sash side: a second orientation cue placed at
    # the bottom of the figure, so one occluder rarely hides both.
    if ident["sash_side"] > 0:
        leg_cols = slice(cx + (gap_w + 1) // 2, right)
    else:
        leg_cols = slice(left, cx - gap_w // 2)
    img[torso_bot:legs_bot, leg_cols] *= ident["leg_dim"]

    head_r = ident["head_r"] * h
    cy_head = row(max(ident["torso_top"] - 0.11, 0.04)) + head_r * 0.1
    yy, xx = np.mgrid[0:h, 0:w]
    head_mask = (yy - cy_head) ** 2 + (xx - cx) ** 2 <= head_r ** 2
    img[head_mask] = wobble(ident["skin"])

    if occluded:
        occ_rng = np.random.default_rng(derive_seed(spec.seed, "occluder", split, pid, index))
        _paint_occluder(img, occ_rng, spec.occluder_bank, spec.occluder_strength)

    img *= brightness
    img += rng.normal(0.0, rng.uniform(0.01, 0.02), img.shape).astype(np.float32)
    return (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)


def generate_synthetic(spec: SyntheticSpec) -> ReIDSplits:
    """Three in-memory splits; test identities are disjoint from training."""
    spec.validate()

    def make_split(split: str, pids: list[int], per_id: int) -> ReIDDataset:
        occ_p = spec.occlusion_prob.get(split, 0.0)
        items = []
        for pid in pids:
            for k in range(per_id):
                occ_rng = np.random.default_rng(
                    derive_seed(spec.seed, "occ-flag", split, pid, k))
                occluded = bool(occ_rng.uniform() < occ_p)
                items.append(DatasetItem(
                    pid=pid,
                    camid=k % spec.num_cameras,
                    image=render_person(spec, pid, split, k, occluded),
                    label=pid if split == "train" else None,
                    occluded=occluded,
                ))
        return ReIDDataset(split=split, items=items)

    train_pids = list(range(spec.num_ids))
    test_pids = list(range(spec.num_ids, spec.num_ids + spec.num_test_ids))
    return ReIDSplits(
        train=make_split("train", train_pids, spec.images_per_id),
        query=make_split("query", test_pids, spec.query_per_id),
        gallery=make_split("gallery", test_pids, spec.gallery_per_id),
    )


def write_dataset(splits: ReIDSplits, out_dir: str | Path) -> Path:
    """Write splits as PNG files plus a manifest CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "id", "cam", "occluded"])
        for split_name in ("train", "query", "gallery"):
            dataset: ReIDDataset = getattr(splits, split_name)
            split_dir = out_dir / split_name
            split_dir.mkdir(exist_ok=True)
            for i, item in enumerate(dataset.items):
                rel = f"{split_name}/{item.pid:04d}_c{item.camid}_{i:04d}.png"
                Image.fromarray(dataset.load_image(i)).save(out_dir / rel)
                writer.writerow([rel, item.pid, item.camid, int(item.occluded)])
    return manifest
