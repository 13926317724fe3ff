"""Seeded image augmentation pipeline.

Images are float64 arrays of shape (H, W, 3) with values in [0, 1] before
normalization. Conventions pinned here:

* Bilinear resampling uses the half-pixel (align-corners-false) mapping
  ``src = (dst + 0.5) * in/out - 0.5`` with edge clamping, written in lerp
  form so constant images are preserved exactly.
* Rotation resamples bilinearly around the image center; positive angles
  rotate content clockwise as displayed (row 0 on top). Samples falling
  outside the source image use fill value 0, as does zoom-out padding.
* Zoom rescales by a linear factor drawn from ``zoom_range`` and then
  center-crops or center-pads back to the input size.
* Test mode applies only resize, a deterministic CENTER crop, and
  normalization; train mode applies the full seven-step sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np

from .autodiff import Rng, Tensor
from .errors import ConfigError, ShapeError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
FILL_VALUE = 0.0


@dataclass
class AugmentConfig:
    resize_to: Tuple[int, int] = (256, 256)
    rotation_range_deg: Tuple[float, float] = (-40.0, 40.0)
    zoom_range: Tuple[float, float] = (0.8, 1.2)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    crop_to: Tuple[int, int] = (224, 224)
    normalize_mean: Tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: Tuple[float, float, float] = IMAGENET_STD
    mode: str = "train"

    def __post_init__(self):
        if self.mode not in ("train", "test"):
            raise ConfigError(f"augment mode must be 'train' or 'test', got {self.mode!r}")
        if self.crop_to[0] > self.resize_to[0] or self.crop_to[1] > self.resize_to[1]:
            raise ConfigError(f"crop_to {self.crop_to} exceeds resize_to {self.resize_to}")
        if min(self.zoom_range) <= 0:
            raise ConfigError(f"zoom_range must be positive, got {self.zoom_range}")
        if not (0.0 <= self.hflip_prob <= 1.0 and 0.0 <= self.vflip_prob <= 1.0):
            raise ConfigError("flip probabilities must lie in [0, 1]")
        if any(s <= 0 for s in self.normalize_std):
            raise ConfigError(f"normalize_std entries must be > 0, got {self.normalize_std}")


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"expected a non-empty (H, W, 3) image, got shape {img.shape}")
    return img


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with half-pixel bilinear sampling (align-corners-false)."""
    img = _check_image(img)
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"resize target must be >= 1, got ({out_h}, {out_w})")
    in_h, in_w = img.shape[:2]
    src_y = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0.0, in_h - 1.0)
    src_x = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0.0, in_w - 1.0)
    y0 = np.floor(src_y).astype(np.intp)
    x0 = np.floor(src_x).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (src_y - y0)[:, None, None]
    wx = (src_x - x0)[None, :, None]
    top = img[y0[:, None], x0[None, :]]
    top = top + wx * (img[y0[:, None], x1[None, :]] - top)
    bot = img[y1[:, None], x0[None, :]]
    bot = bot + wx * (img[y1[:, None], x1[None, :]] - bot)
    return top + wy * (bot - top)


def rotate(img: np.ndarray, angle_deg: float) -> np.ndarray:
    """Rotate around the image center with bilinear resampling, fill 0.

    Positive angles turn the content clockwise as displayed; the sampling
    range is symmetric so the training distribution does not depend on the
    sign convention.
    """
    img = _check_image(img)
    if angle_deg == 0.0:
        return img.copy()
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(angle_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    src_x = cx + cos_t * xx + sin_t * yy
    src_y = cy - sin_t * xx + cos_t * yy
    return _sample_bilinear_fill(img, src_y, src_x)


def _sample_bilinear_fill(img: np.ndarray, src_y: np.ndarray, src_x: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    inside = (src_y >= 0) & (src_y <= h - 1) & (src_x >= 0) & (src_x <= w - 1)
    ys = np.clip(src_y, 0, h - 1)
    xs = np.clip(src_x, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[..., None]
    wx = (xs - x0)[..., None]
    top = img[y0, x0]
    top = top + wx * (img[y0, x1] - top)
    bot = img[y1, x0]
    bot = bot + wx * (img[y1, x1] - bot)
    out = top + wy * (bot - top)
    out[~inside] = FILL_VALUE
    return out


def center_fit(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Center-crop or center-pad (fill 0) each axis to the requested size."""
    img = _check_image(img)
    h, w = img.shape[:2]
    out = np.full((out_h, out_w, 3), FILL_VALUE, dtype=np.float64)
    src_top = max(0, (h - out_h) // 2)
    src_left = max(0, (w - out_w) // 2)
    dst_top = max(0, (out_h - h) // 2)
    dst_left = max(0, (out_w - w) // 2)
    ch = min(h, out_h)
    cw = min(w, out_w)
    out[dst_top:dst_top + ch, dst_left:dst_left + cw] = \
        img[src_top:src_top + ch, src_left:src_left + cw]
    return out


def zoom(img: np.ndarray, scale: float) -> np.ndarray:
    """Rescale by a linear factor, then center-crop/pad back to the input size."""
    img = _check_image(img)
    if scale <= 0:
        raise ConfigError(f"zoom scale must be positive, got {scale}")
    h, w = img.shape[:2]
    if scale == 1.0:
        return img.copy()
    new_h = max(1, int(round(h * scale)))
    new_w = max(1, int(round(w * scale)))
    return center_fit(resize_bilinear(img, new_h, new_w), h, w)


def flip_h(img: np.ndarray) -> np.ndarray:
    return _check_image(img)[:, ::-1].copy()


def flip_v(img: np.ndarray) -> np.ndarray:
    return _check_image(img)[::-1].copy()


def crop(img: np.ndarray, top: int, left: int, crop_h: int, crop_w: int) -> np.ndarray:
    img = _check_image(img)
    h, w = img.shape[:2]
    if crop_h > h or crop_w > w:
        raise ShapeError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    if not (0 <= top <= h - crop_h and 0 <= left <= w - crop_w):
        raise ShapeError(f"crop offset ({top}, {left}) out of range for image {h}x{w}")
    return img[top:top + crop_h, left:left + crop_w].copy()


def random_rotate(img: np.ndarray, config: AugmentConfig, rng: Rng) -> np.ndarray:
    lo, hi = config.rotation_range_deg
    return rotate(img, rng.uniform(lo, hi))


def random_zoom(img: np.ndarray, config: AugmentConfig, rng: Rng) -> np.ndarray:
    lo, hi = config.zoom_range
    return zoom(img, rng.uniform(lo, hi))


def random_flip_h(img: np.ndarray, config: AugmentConfig, rng: Rng) -> np.ndarray:
    return flip_h(img) if rng.random() < config.hflip_prob else _check_image(img).copy()


def random_flip_v(img: np.ndarray, config: AugmentConfig, rng: Rng) -> np.ndarray:
    return flip_v(img) if rng.random() < config.vflip_prob else _check_image(img).copy()


def random_crop(img: np.ndarray, config: AugmentConfig, rng: Rng) -> np.ndarray:
    img = _check_image(img)
    ch, cw = config.crop_to
    h, w = img.shape[:2]
    if ch > h or cw > w:
        raise ShapeError(f"crop {config.crop_to} larger than image {(h, w)}")
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    return crop(img, top, left, ch, cw)


def center_crop(img: np.ndarray, crop_h: int, crop_w: int) -> np.ndarray:
    img = _check_image(img)
    h, w = img.shape[:2]
    if crop_h > h or crop_w > w:
        raise ShapeError(f"crop {crop_h}x{crop_w} larger than image {h}x{w}")
    return crop(img, (h - crop_h) // 2, (w - crop_w) // 2, crop_h, crop_w)


def normalize(img: np.ndarray, mean, std) -> np.ndarray:
    img = _check_image(img)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ConfigError(f"normalize std must be > 0, got {std.tolist()}")
    return (img - mean) / std


def denormalize(img: np.ndarray, mean, std) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) * np.asarray(std) + np.asarray(mean)


def pipeline(img: np.ndarray, config: AugmentConfig, rng: Rng) -> Tensor:
    """Run the full augmentation sequence and emit a (3, crop_h, crop_w) tensor.

    Train mode draws, in pinned order: rotation angle, zoom scale, both flip
    coins, then the crop offsets. Test mode ignores the rng entirely (the
    crop is deterministic center).
    """
    img = _check_image(img)
    out = resize_bilinear(img, *config.resize_to)
    if config.mode == "train":
        out = random_rotate(out, config, rng)
        out = random_zoom(out, config, rng)
        out = random_flip_h(out, config, rng)
        out = random_flip_v(out, config, rng)
        out = random_crop(out, config, rng)
    else:
        out = center_crop(out, *config.crop_to)
    out = np.clip(out, 0.0, 1.0)
    out = normalize(out, config.normalize_mean, config.normalize_std)
    return Tensor(out.transpose(2, 0, 1))
