"""Training-time augmentation, input normalisation and test-time flips.

Images are (H, W, 3) uint8 arrays; masks are (H, W) integer arrays. Only the
flips touch the mask.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from skimage.color import hsv2rgb, rgb2hsv


@dataclass
class AugmentationConfig:
    preset: str = "none"
    apply_probability: float = 0.5
    noise_mean: float = 0.0
    noise_var: tuple = (0.0, 0.0)
    rgb_shift: int = 0
    hue_shift: tuple = (0.0, 0.0)
    sat_shift: tuple = (0.0, 0.0)
    val_shift: tuple = (0.0, 0.0)
    # hue values are multiplied by this before being applied as degrees
    hue_scale: float = 1.0
    brightness: tuple = (0.0, 0.0)
    contrast: tuple = (1.0, 1.0)

    def __post_init__(self):
        for name in ("noise_var", "hue_shift", "sat_shift", "val_shift", "brightness", "contrast"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: min {lo} > max {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")

    @classmethod
    def from_preset(cls, preset: str) -> "AugmentationConfig":
        try:
            return cls(**PRESETS[preset])
        except KeyError:
            raise ValueError(f"unknown augmentation preset {preset!r}; expected none, low or high") from None


# Brightness is in 8-bit units, contrast a multiplicative factor; the
# remaining values follow the low/high settings of the original experiments.
PRESETS = {
    "none": dict(preset="none", apply_probability=0.0),
    "low": dict(
        preset="low",
        noise_var=(0.4, 0.6),
        rgb_shift=5,
        hue_shift=(-2, 2),
        sat_shift=(-3, 3),
        val_shift=(-2, 2),
        brightness=(-51.0, 51.0),
        contrast=(0.8, 1.2),
    ),
    "high": dict(
        preset="high",
        noise_var=(1.0, 1.0),
        rgb_shift=15,
        hue_shift=(-20, 20),
        sat_shift=(-30, 30),
        val_shift=(-20, 20),
        brightness=(-51.0, 51.0),
        contrast=(0.8, 1.2),
    ),
}


def _check_pair(image: np.ndarray, mask: Optional[np.ndarray]) -> None:
    if mask is not None and image.shape[:2] != mask.shape[:2]:
        raise ValueError(f"image extents {image.shape[:2]} != mask extents {mask.shape[:2]}")


def _to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def hflip(image, mask=None):
    _check_pair(image, mask)
    return image[:, ::-1].copy(), None if mask is None else mask[:, ::-1].copy()


def vflip(image, mask=None):
    _check_pair(image, mask)
    return image[::-1].copy(), None if mask is None else mask[::-1].copy()


def gauss_noise(image: np.ndarray, mean: float, var, rng: np.random.Generator) -> np.ndarray:
    """Add N(mean, var) noise in 8-bit units; ``var`` is a value or a (lo, hi) range."""
    lo, hi = (var, var) if np.isscalar(var) else var
    v = rng.uniform(lo, hi) if hi > lo else lo
    if v == 0 and mean == 0:
        return image.copy()
    noise = rng.normal(mean, np.sqrt(v), size=image.shape)
    return _to_uint8(image.astype(np.float64) + noise)


def shift_rgb(image: np.ndarray, shift) -> np.ndarray:
    return _to_uint8(image.astype(np.float64) + np.asarray(shift, dtype=np.float64))


def rgb_shift(image: np.ndarray, max_shift: int, rng: np.random.Generator) -> np.ndarray:
    shift = rng.integers(-max_shift, max_shift + 1, size=3)
    return shift_rgb(image, shift)


def adjust_brightness_contrast(image: np.ndarray, brightness: float, contrast: float) -> np.ndarray:
    return _to_uint8(contrast * (image.astype(np.float64) - 128.0) + 128.0 + brightness)


def brightness_contrast(image: np.ndarray, brightness_range, contrast_range, rng: np.random.Generator) -> np.ndarray:
    b = rng.uniform(*brightness_range)
    c = rng.uniform(*contrast_range)
    return adjust_brightness_contrast(image, b, c)


def shift_hsv(image: np.ndarray, hue: float, sat: float, val: float) -> np.ndarray:
    """Shift hue (degrees, wrapping) and saturation/value (8-bit units, clamped)."""
    hsv = rgb2hsv(image)
    hsv[..., 0] = np.mod(hsv[..., 0] + hue / 360.0, 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] + sat / 255.0, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] + val / 255.0, 0.0, 1.0)
    return _to_uint8(hsv2rgb(hsv) * 255.0)


def hsv_shift(image: np.ndarray, hue_range, sat_range, val_range, rng: np.random.Generator, hue_scale: float = 1.0) -> np.ndarray:
    h = rng.uniform(*hue_range) * hue_scale
    s = rng.uniform(*sat_range)
    v = rng.uniform(*val_range)
    return shift_hsv(image, h, s, v)


TRANSFORM_ORDER = ("hflip", "vflip", "gauss_noise", "brightness_contrast", "rgb_shift", "hsv_shift")


def apply_pipeline(image, mask, config: AugmentationConfig, seed, return_gates: bool = False):
    """Run each transform in TRANSFORM_ORDER behind an independent coin flip.

    ``seed`` is anything accepted by ``numpy.random.default_rng`` (an int or a
    sequence such as ``(run_seed, epoch, index)``).
    """
    _check_pair(image, mask)
    rng = np.random.default_rng(seed)
    gates = rng.random(len(TRANSFORM_ORDER)) < config.apply_probability
    if config.preset == "none" or not gates.any():
        return (image, mask, gates) if return_gates else (image, mask)
    c = config
    for name, fire in zip(TRANSFORM_ORDER, gates):
        if not fire:
            continue
        if name == "hflip":
            image, mask = hflip(image, mask)
        elif name == "vflip":
            image, mask = vflip(image, mask)
        elif name == "gauss_noise":
            image = gauss_noise(image, c.noise_mean, c.noise_var, rng)
        elif name == "brightness_contrast":
            image = brightness_contrast(image, c.brightness, c.contrast, rng)
        elif name == "rgb_shift":
            image = rgb_shift(image, c.rgb_shift, rng)
        else:
            image = hsv_shift(image, c.hue_shift, c.sat_shift, c.val_shift, rng, c.hue_scale)
    return (image, mask, gates) if return_gates else (image, mask)


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


@dataclass
class NormalizationStats:
    mean: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list = field(default_factory=lambda: [0.25, 0.25, 0.25])
    source: str = "dataset"

    def __post_init__(self):
        self.mean = [float(m) for m in self.mean]
        self.std = [float(s) for s in self.std]
        if len(self.mean) != len(self.std):
            raise ValueError("mean and std lengths differ")
        if any(not s > 0 for s in self.std):
            raise ValueError(f"normalisation std must be positive per channel, got {self.std}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "NormalizationStats":
        return cls(**json.loads(Path(path).read_text()))


IMAGENET_STATS = NormalizationStats([0.485, 0.456, 0.406], [0.229, 0.224, 0.225], source="imagenet")


def dataset_stats(images) -> NormalizationStats:
    """Per-channel mean/std in [0, 1] units over an iterable of uint8 images."""
    total = None
    total_sq = None
    count = 0
    for img in images:
        x = img.reshape(-1, img.shape[-1]).astype(np.float64) / 255.0
        total = x.sum(axis=0) if total is None else total + x.sum(axis=0)
        total_sq = (x * x).sum(axis=0) if total_sq is None else total_sq + (x * x).sum(axis=0)
        count += x.shape[0]
    if count == 0:
        raise ValueError("dataset_stats: no images")
    mean = total / count
    std = np.sqrt(np.maximum(total_sq / count - mean**2, 0.0))
    if np.any(std < 1e-8):
        raise ValueError(f"dataset_stats: degenerate (constant) channel, std = {std.tolist()}")
    return NormalizationStats(mean.tolist(), std.tolist(), source="dataset")


def normalize(image: np.ndarray, stats: NormalizationStats, dtype=np.float32) -> np.ndarray:
    """(H, W, C) uint8 -> (C, H, W) float array of (x/255 - mean)/std."""
    x = image.astype(np.float64) / 255.0
    x = (x - np.asarray(stats.mean)) / np.asarray(stats.std)
    return np.ascontiguousarray(x.transpose(2, 0, 1)).astype(dtype)


def denormalize(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Inverse of :func:`normalize`, returning (H, W, C) floats in 8-bit units."""
    x = x.transpose(1, 2, 0).astype(np.float64)
    return (x * np.asarray(stats.std) + np.asarray(stats.mean)) * 255.0


def tta_predict(image: np.ndarray, model: Callable[[np.ndarray], np.ndarray], stats: NormalizationStats, tta: bool = True, dtype=np.float32) -> np.ndarray:
    """Average softmax maps over identity, horizontal and vertical flips.

    ``model`` maps a normalised (N, C, H, W) batch to logits. Returns (K, H, W)
    class probabilities.
    """
    views = [image]
    if tta:
        views += [image[:, ::-1], image[::-1]]
    batch = np.stack([normalize(v, stats, dtype) for v in views])
    logits = np.asarray(model(batch), dtype=np.float64)
    logits = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    out = probs[0].copy()
    if tta:
        out += probs[1][:, :, ::-1]
        out += probs[2][:, ::-1, :]
        out /= 3.0
    return out
