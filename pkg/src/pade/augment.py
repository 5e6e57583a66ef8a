"""Parallel augmentation: one source image in, a (base, erased, cropped) triplet out.

Every pipeline here is a pure function of (image, config, seed): the base
pipeline is a deterministic resize + normalize, the erasing pipeline adds
exactly one filled rectangle, and the cropping pipeline takes one random
resized crop of the padded image. Horizontal flipping is deliberately absent
so the three branches keep a consistent orientation. A serial single-image
pipeline is also provided as the conventional-augmentation baseline for
ablations.

Images are HxWx3 arrays, either uint8 in [0, 255] or float in [0, 1].
Pipeline outputs are float32 arrays of shape (3, train_h, train_w) in
normalized space.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import AugmentError

MAX_SAMPLE_ATTEMPTS = 10


def derive_seed(parent: int, *tags: Any) -> int:
    """Derive a child seed from a parent seed and a tag tuple.

    Stable across processes and platforms (unlike the builtin ``hash``).
    """
    h = hashlib.blake2b(digest_size=8)
    for part in (parent, *tags):
        h.update(repr(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big")


@dataclass
class AugmentConfig:
    train_size: tuple[int, int] = (256, 128)  # (h, w)
    pad: int = 30
    erase_prob: float = 1.0
    erase_area_range: tuple[float, float] = (0.02, 0.4)
    erase_aspect_range: tuple[float, float] = (0.3, 3.33)  # h/w of the erased box
    erase_fill: tuple[float, float, float] = (0.0, 0.0, 0.0)  # post-normalization
    crop_scale_range: tuple[float, float] = (0.5, 1.0)  # area fraction of padded image
    crop_aspect_range: tuple[float, float] = (0.75, 4.0 / 3.0)  # w/h of the crop box
    norm_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    seed: int = 0

    def validate(self) -> None:
        h, w = self.train_size
        if h <= 0 or w <= 0:
            raise AugmentError(f"train_size must be positive, got {self.train_size}")
        if self.pad < 0:
            raise AugmentError(f"pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.erase_prob <= 1.0:
            raise AugmentError(f"erase_prob must be in [0, 1], got {self.erase_prob}")
        for name in ("erase_area_range", "erase_aspect_range",
                     "crop_scale_range", "crop_aspect_range"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi):
                raise AugmentError(f"{name} must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.erase_area_range[1] > 1.0:
            raise AugmentError("erase_area_range upper bound cannot exceed 1")
        if any(s <= 0 for s in self.norm_std):
            raise AugmentError(f"norm_std entries must be positive, got {self.norm_std}")


@dataclass
class ImageTriplet:
    """Outputs of the parallel augmentation for one source image."""

    base: np.ndarray
    erased: np.ndarray
    cropped: np.ndarray
    source_id: int | None = None
    rng_trace: dict[str, Any] = field(default_factory=dict)


def _require_rgb(src: np.ndarray) -> np.ndarray:
    if not isinstance(src, np.ndarray) or src.ndim != 3 or src.shape[2] != 3:
        raise AugmentError(
            "expected an HxWx3 image array, got "
            f"{getattr(src, 'shape', type(src).__name__)}"
        )
    return src


def to_unit_chw(src: np.ndarray) -> np.ndarray:
    """HxWx3 uint8 or [0, 1] float image -> float32 (3, H, W) in [0, 1]."""
    src = _require_rgb(src)
    arr = src.astype(np.float32)
    if src.dtype == np.uint8:
        arr /= 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) float image with half-pixel sample centers."""
    c, in_h, in_w = img.shape
    if (in_h, in_w) == (out_h, out_w):
        return np.ascontiguousarray(img, dtype=np.float32)
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    fy = (ys - y0).astype(np.float32)[None, :, None]
    fx = (xs - x0).astype(np.float32)[None, None, :]
    img = np.asarray(img, dtype=np.float32)
    top = img[:, y0][:, :, x0] * (1.0 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1.0 - fx) + img[:, y1][:, :, x1] * fx
    return np.ascontiguousarray(top * (1.0 - fy) + bot * fy)


def normalize(img: np.ndarray, mean: tuple[float, ...], std: tuple[float, ...]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float32)[:, None, None]
    s = np.asarray(std, dtype=np.float32)[:, None, None]
    return (img - m) / s


def denormalize_to_uint8(img: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Invert normalization for previews: (3, H, W) float -> HxWx3 uint8."""
    m = np.asarray(cfg.norm_mean, dtype=np.float32)[:, None, None]
    s = np.asarray(cfg.norm_std, dtype=np.float32)[:, None, None]
    arr = np.clip(img * s + m, 0.0, 1.0)
    return (arr * 255.0).round().astype(np.uint8).transpose(1, 2, 0)


def base_augment(src: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Deterministic resize + normalize; no stochastic op is ever applied."""
    cfg.validate()
    img = to_unit_chw(src)
    th, tw = cfg.train_size
    img = resize_bilinear(img, th, tw)
    return normalize(img, cfg.norm_mean, cfg.norm_std)


def _sample_erase_rect(
    rng: np.random.Generator,
    height: int,
    width: int,
    area_range: tuple[float, float],
    aspect_range: tuple[float, float],
) -> tuple[tuple[int, int, int, int] | None, int]:
    """Rejection-sample an erase rectangle (top, left, h, w).

    A candidate is accepted only if it fits strictly inside the image and its
    realized area fraction (after integer rounding) still lies in
    ``area_range``. Returns (None, attempts) if every attempt failed.
    """
    lo, hi = area_range
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    area = height * width
    for attempt in range(1, MAX_SAMPLE_ATTEMPTS + 1):
        frac = rng.uniform(lo, hi)
        aspect = math.exp(rng.uniform(log_lo, log_hi))  # h/w
        rh = int(round(math.sqrt(frac * area * aspect)))
        rw = int(round(math.sqrt(frac * area / aspect)))
        if not (0 < rh < height and 0 < rw < width):
            continue
        if not (lo <= rh * rw / area <= hi):
            continue
        top = int(rng.integers(0, height - rh + 1))
        left = int(rng.integers(0, width - rw + 1))
        return (top, left, rh, rw), attempt
    return None, MAX_SAMPLE_ATTEMPTS


def _erase_into(img: np.ndarray, rect: tuple[int, int, int, int],
                fill: tuple[float, float, float]) -> None:
    top, left, rh, rw = rect
    for ch in range(3):
        img[ch, top:top + rh, left:left + rw] = fill[ch]


def erasing_augment(src: np.ndarray, cfg: AugmentConfig, seed: int,
                    trace: dict[str, Any] | None = None) -> np.ndarray:
    """Base pipeline plus one filled rectangle, in normalized space.

    Falls back to the un-erased image (recorded in ``trace``) if no valid
    rectangle is found within the attempt budget.
    """
    out = base_augment(src, cfg)
    rng = np.random.default_rng(seed)
    info: dict[str, Any] = {"applied": False, "rect": None, "fallback": False, "attempts": 0}
    if cfg.erase_prob > 0.0 and rng.uniform() < cfg.erase_prob:
        th, tw = cfg.train_size
        rect, attempts = _sample_erase_rect(
            rng, th, tw, cfg.erase_area_range, cfg.erase_aspect_range)
        info["attempts"] = attempts
        if rect is None:
            info["fallback"] = True
        else:
            _erase_into(out, rect, cfg.erase_fill)
            info["applied"] = True
            info["rect"] = rect
    if trace is not None:
        trace["erase"] = info
    return out


def erase_tensor(img: np.ndarray, cfg: AugmentConfig, seed: int) -> tuple[np.ndarray, bool]:
    """Apply one erase rectangle to an already-augmented (3, H, W) tensor.

    Used where erasing is stacked on top of another pipeline's output (e.g.
    the occlusion sweep, which erases the cropped view). Returns a copy and
    whether a rectangle was actually applied.
    """
    out = np.array(img, dtype=np.float32)
    rng = np.random.default_rng(seed)
    rect, _ = _sample_erase_rect(
        rng, out.shape[1], out.shape[2], cfg.erase_area_range, cfg.erase_aspect_range)
    if rect is None:
        return out, False
    _erase_into(out, rect, cfg.erase_fill)
    return out, True


def _sample_crop_rect(
    rng: np.random.Generator,
    height: int,
    width: int,
    scale_range: tuple[float, float],
    aspect_range: tuple[float, float],
) -> tuple[tuple[int, int, int, int], int, bool]:
    """Sample a resized-crop window (top, left, h, w); aspect is w/h.

    Falls back to a center crop at the nearest valid aspect when every
    attempt fails; the final flag reports whether the fallback was used.
    """
    area = height * width
    log_lo, log_hi = math.log(aspect_range[0]), math.log(aspect_range[1])
    for attempt in range(1, MAX_SAMPLE_ATTEMPTS + 1):
        target = rng.uniform(*scale_range) * area
        aspect = math.exp(rng.uniform(log_lo, log_hi))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= width and 0 < ch <= height:
            top = int(rng.integers(0, height - ch + 1))
            left = int(rng.integers(0, width - cw + 1))
            return (top, left, ch, cw), attempt, False
    in_ratio = width / height
    if in_ratio < aspect_range[0]:
        cw = width
        ch = int(round(cw / aspect_range[0]))
    elif in_ratio > aspect_range[1]:
        ch = height
        cw = int(round(ch * aspect_range[1]))
    else:
        cw, ch = width, height
    top = (height - ch) // 2
    left = (width - cw) // 2
    return (top, left, ch, cw), MAX_SAMPLE_ATTEMPTS, True


def cropping_augment(src: np.ndarray, cfg: AugmentConfig, seed: int,
                     trace: dict[str, Any] | None = None) -> np.ndarray:
    """Resize, zero-pad, normalize, then take one random resized crop."""
    cfg.validate()
    img = to_unit_chw(src)
    th, tw = cfg.train_size
    img = resize_bilinear(img, th, tw)
    if cfg.pad > 0:
        p = cfg.pad
        img = np.pad(img, ((0, 0), (p, p), (p, p)))  # zero fill, pre-normalization
    img = normalize(img, cfg.norm_mean, cfg.norm_std)
    rng = np.random.default_rng(seed)
    rect, attempts, fallback = _sample_crop_rect(
        rng, img.shape[1], img.shape[2], cfg.crop_scale_range, cfg.crop_aspect_range)
    top, left, ch, cw = rect
    out = resize_bilinear(img[:, top:top + ch, left:left + cw], th, tw)
    if trace is not None:
        trace["crop"] = {"rect": rect, "attempts": attempts, "fallback": fallback}
    return out


def parallel_augment(src: np.ndarray, cfg: AugmentConfig, seed: int,
                     source_id: int | None = None) -> ImageTriplet:
    """Run the three pipelines independently on the same source image.

    Child seeds for the stochastic pipelines are split from ``seed`` via
    ``derive_seed(seed, "erase")`` and ``derive_seed(seed, "crop")`` so each
    branch is reproducible in isolation.
    """
    erase_seed = derive_seed(seed, "erase")
    crop_seed = derive_seed(seed, "crop")
    trace: dict[str, Any] = {"seed": seed, "erase_seed": erase_seed, "crop_seed": crop_seed}
    base = base_augment(src, cfg)
    erased = erasing_augment(src, cfg, erase_seed, trace)
    cropped = cropping_augment(src, cfg, crop_seed, trace)
    return ImageTriplet(base=base, erased=erased, cropped=cropped,
                        source_id=source_id, rng_trace=trace)


def serial_augment(src: np.ndarray, cfg: AugmentConfig, seed: int,
                   erase_prob: float = 0.5,
                   trace: dict[str, Any] | None = None) -> np.ndarray:
    """Conventional single-image pipeline used as the ablation baseline.

    Resize, random horizontal flip, zero-pad, random fixed-size crop back to
    train size, normalize, then random erasing with probability
    ``erase_prob``. This is the usual serial composition for re-id training;
    note that the triplet pipelines above deliberately avoid the flip so the
    three views of one image keep the same orientation.
    """
    cfg.validate()
    img = to_unit_chw(src)
    th, tw = cfg.train_size
    img = resize_bilinear(img, th, tw)
    rng = np.random.default_rng(seed)
    flipped = bool(rng.uniform() < 0.5)
    if flipped:
        img = np.ascontiguousarray(img[:, :, ::-1])
    if cfg.pad > 0:
        p = cfg.pad
        img = np.pad(img, ((0, 0), (p, p), (p, p)))
        top = int(rng.integers(0, 2 * p + 1))
        left = int(rng.integers(0, 2 * p + 1))
        img = np.ascontiguousarray(img[:, top:top + th, left:left + tw])
    img = normalize(img, cfg.norm_mean, cfg.norm_std)
    info: dict[str, Any] = {"applied": False, "rect": None, "fallback": False,
                            "attempts": 0, "flipped": flipped}
    if erase_prob > 0.0 and rng.uniform() < erase_prob:
        rect, attempts = _sample_erase_rect(
            rng, th, tw, cfg.erase_area_range, cfg.erase_aspect_range)
        info["attempts"] = attempts
        if rect is None:
            info["fallback"] = True
        else:
            _erase_into(img, rect, cfg.erase_fill)
            info["applied"] = True
            info["rect"] = rect
    if trace is not None:
        trace["serial"] = info
    return img
