"""Stochastic augmentation of primary images and privileged count vectors.

Randomness always comes from an explicit :class:`numpy.random.Generator`, so
a seed plus a call order fully determines the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import cv2
import numpy as np

from .losses import ContractError

RngStream = np.random.Generator


def make_rng(seed: int) -> RngStream:
    return np.random.default_rng(seed)


def _check_prob(name: str, p: float) -> None:
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"{name} must lie in [0, 1], got {p}")


def _check_range(name: str, lo_hi, lower: float = 0.0) -> None:
    lo, hi = lo_hi
    if not lower <= lo <= hi <= 1.0:
        raise ContractError(f"{name} must satisfy {lower} <= lo <= hi <= 1, got {lo_hi}")


@dataclass(frozen=True)
class ImageAugmentConfig:
    flip_prob: float = 1.0
    crop_prob: float = 1.0
    crop_scale_range: tuple[float, float] = (0.75, 1.0)
    gaussian_noise_prob: float = 0.3
    gaussian_noise_std: float = 0.05
    rotation_prob: float = 0.4
    # False: multiples of 90 degrees; True: any angle with reflect padding.
    rotation_arbitrary: bool = False
    solarize_prob: float = 0.3
    solarize_threshold: float = 0.5
    color_jitter_prob: float = 1.0
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "crop_scale_range", tuple(self.crop_scale_range))
        for name in ("flip_prob", "crop_prob", "gaussian_noise_prob", "rotation_prob", "solarize_prob", "color_jitter_prob"):
            _check_prob(name, getattr(self, name))
        lo, _ = self.crop_scale_range
        if lo <= 0:
            raise ContractError("crop_scale_range must lie in (0, 1]")
        _check_range("crop_scale_range", self.crop_scale_range)
        if self.gaussian_noise_std < 0:
            raise ContractError("gaussian_noise_std must be nonnegative")

    @classmethod
    def disabled(cls) -> "ImageAugmentConfig":
        return cls(
            flip_prob=0.0,
            crop_prob=0.0,
            crop_scale_range=(1.0, 1.0),
            gaussian_noise_prob=0.0,
            rotation_prob=0.0,
            solarize_prob=0.0,
            color_jitter_prob=0.0,
        )

    @classmethod
    def geometric_only(cls) -> "ImageAugmentConfig":
        """Flip, crop and rotation only; used for mask-valued inputs."""
        return replace(cls(), gaussian_noise_prob=0.0, solarize_prob=0.0, color_jitter_prob=0.0)


@dataclass(frozen=True)
class GeneAugmentConfig:
    mask_prob_range: tuple[float, float] = (0.0, 0.2)
    shuffle_prob_range: tuple[float, float] = (0.0, 0.1)
    noise_std: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "mask_prob_range", tuple(self.mask_prob_range))
        object.__setattr__(self, "shuffle_prob_range", tuple(self.shuffle_prob_range))
        _check_range("mask_prob_range", self.mask_prob_range)
        _check_range("shuffle_prob_range", self.shuffle_prob_range)
        if self.noise_std < 0:
            raise ContractError("noise_std must be nonnegative")


def crop_side(size: int, scale: float) -> int:
    """Side length of a square-area crop covering ``scale`` of the image area."""
    return max(1, int(math.floor(size * math.sqrt(scale))))


def identity_eval_transform(x):
    return x


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    out = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
    return out.reshape(h, w, -1) if out.ndim == 2 else out


def _rotate(img: np.ndarray, cfg: ImageAugmentConfig, rng: RngStream) -> np.ndarray:
    h, w, _ = img.shape
    if cfg.rotation_arbitrary:
        angle = rng.uniform(0.0, 360.0)
        m = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, 1.0)
        out = cv2.warpAffine(img, m, (w, h), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
        return out.reshape(h, w, -1) if out.ndim == 2 else out
    k = int(rng.integers(1, 4)) if h == w else 2
    return np.ascontiguousarray(np.rot90(img, k, axes=(0, 1)))


def _jitter(img: np.ndarray, cfg: ImageAugmentConfig, rng: RngStream) -> np.ndarray:
    out = img + rng.uniform(-cfg.brightness, cfg.brightness)
    mean = out.mean()
    out = (out - mean) * rng.uniform(1 - cfg.contrast, 1 + cfg.contrast) + mean
    if img.shape[2] == 3:
        grey = out.mean(axis=2, keepdims=True)
        out = grey + (out - grey) * rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
        if cfg.hue > 0:
            hsv = cv2.cvtColor(np.clip(out, 0, 1).astype(np.float32), cv2.COLOR_RGB2HSV)
            hsv[..., 0] = (hsv[..., 0] + 360.0 * rng.uniform(-cfg.hue, cfg.hue)) % 360.0
            out = cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)
    return out


def augment_image(img: np.ndarray, cfg: ImageAugmentConfig, rng: RngStream) -> np.ndarray:
    """Augment one ``[H, W, C]`` image with values in ``[0, 1]``.

    Transforms run in a fixed order (flip, crop-resize, noise, rotation,
    solarize, colour jitter), each gated by its own probability. The result
    has the input's shape and dtype and is clipped to ``[0, 1]``.
    """
    img = np.asarray(img)
    if img.ndim != 3:
        raise ContractError(f"expected an [H, W, C] image, got shape {img.shape}")
    h, w, _ = img.shape
    if h < 8 or w < 8:
        raise ContractError("images must be at least 8x8")
    if img.min() < -1e-6 or img.max() > 1 + 1e-6:
        raise ContractError("image values must be normalised to [0, 1]")
    dtype = img.dtype
    work = np.float64 if dtype == np.float64 else np.float32
    out = img.astype(work, copy=True)

    if rng.random() < cfg.flip_prob:
        if rng.random() < 0.5:
            out = out[:, ::-1]
        if rng.random() < 0.5:
            out = out[::-1]
        out = np.ascontiguousarray(out)
    if rng.random() < cfg.crop_prob:
        scale = rng.uniform(*cfg.crop_scale_range)
        ch, cw = crop_side(h, scale), crop_side(w, scale)
        if (ch, cw) != (h, w):
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            out = _resize(out[top : top + ch, left : left + cw], h, w)
    if rng.random() < cfg.gaussian_noise_prob:
        out = out + rng.normal(0.0, cfg.gaussian_noise_std, size=out.shape).astype(work)
    if rng.random() < cfg.rotation_prob:
        out = _rotate(out, cfg, rng)
    if rng.random() < cfg.solarize_prob:
        out = np.where(out > cfg.solarize_threshold, 1.0 - out, out)
    if rng.random() < cfg.color_jitter_prob:
        out = _jitter(out, cfg, rng)
    return np.clip(out, 0.0, 1.0).astype(dtype, copy=False)


def augment_counts(counts: np.ndarray, cfg: GeneAugmentConfig, rng: RngStream) -> np.ndarray:
    """Mask, partially shuffle, then add Gaussian noise to one count vector."""
    counts = np.asarray(counts)
    if not np.all(np.isfinite(counts)):
        raise ContractError("count vector has non-finite entries")
    out = counts.astype(np.float64, copy=True)
    g = out.shape[0]
    p_mask = rng.uniform(*cfg.mask_prob_range)
    p_shuf = rng.uniform(*cfg.shuffle_prob_range)
    out[rng.random(g) < p_mask] = 0.0
    sel = np.flatnonzero(rng.random(g) < p_shuf)
    out[sel] = out[rng.permutation(sel)]
    if cfg.noise_std > 0:
        out += rng.normal(0.0, cfg.noise_std, size=g)
    return out.astype(counts.dtype if counts.dtype.kind == "f" else np.float64, copy=False)


def augment_batch(batch: np.ndarray, cfg: ImageAugmentConfig | GeneAugmentConfig | None, rng: RngStream) -> np.ndarray:
    """Augment every item of a batch independently; ``cfg=None`` is the identity."""
    if cfg is None:
        return batch
    fn = augment_counts if isinstance(cfg, GeneAugmentConfig) else augment_image
    return np.stack([fn(item, cfg, rng) for item in batch])
