"""Post-hoc image degradations for robustness stress tests.

All functions take and return (N, 3, R, R) float arrays in [-1, 1]. JPEG is a
real codec round-trip through Pillow; nothing here is differentiable.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .data import denormalize_u8, normalize_u8
from .interference import gaussian_blur

KINDS = ("jpeg", "noise", "blur", "brightness", "contrast")
DEFAULT_GRIDS = {
    "jpeg": (95, 75, 50, 35, 20),
    "noise": (2, 5, 10, 15, 25),  # sigma on the 8-bit scale
    "blur": (3, 5, 7, 9, 11),  # kernel size
    "brightness": (1.05, 1.10, 1.15, 1.20, 1.30),
    "contrast": (1.05, 1.10, 1.15, 1.20, 1.30),
}


@dataclass(frozen=True)
class DegradationSpec:
    kind: str
    grid: tuple

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown degradation {self.kind!r}; valid: {KINDS}")
        if not self.grid:
            raise ValueError(f"empty grid for {self.kind}")


def default_specs() -> list[DegradationSpec]:
    return [DegradationSpec(k, DEFAULT_GRIDS[k]) for k in KINDS]


def _unit(x):
    return (np.asarray(x, np.float64) + 1) / 2


def _back(x01):
    return (np.clip(x01, 0, 1) * 2 - 1).astype(np.float32)


def jpeg(images: np.ndarray, quality: int) -> np.ndarray:
    out = []
    for img in images:
        buf = io.BytesIO()
        Image.fromarray(denormalize_u8(img).transpose(1, 2, 0)).save(buf, format="JPEG", quality=int(quality))
        buf.seek(0)
        with Image.open(buf) as im:
            out.append(normalize_u8(np.asarray(im.convert("RGB"))).transpose(2, 0, 1))
    return np.stack(out).astype(np.float32) if out else images.copy()


def gaussian_noise(images: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Additive noise; ``sigma`` is on the 8-bit scale and applied as sigma/255 on [0, 1]."""
    return _back(_unit(images) + rng.normal(0.0, sigma / 255.0, size=images.shape))


def blur_sigma(k: int) -> float:
    # OpenCV's default sigma for a given odd kernel size
    return 0.3 * ((k - 1) * 0.5 - 1) + 0.8


def blur(images: np.ndarray, k: int) -> np.ndarray:
    if len(images) == 0:
        return images.copy()
    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float64))
    return gaussian_blur(x, blur_sigma(int(k)), size=int(k)).numpy().astype(np.float32)


def brightness(images: np.ndarray, factor: float) -> np.ndarray:
    return _back(_unit(images) * factor)


def contrast(images: np.ndarray, factor: float) -> np.ndarray:
    """Scale around each image's mean luminance (Pillow's ImageEnhance convention)."""
    x = _unit(images)
    lum = (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).mean(axis=(1, 2))[:, None, None, None]
    return _back((x - lum) * factor + lum)


def degrade(images: np.ndarray, kind: str, value, seed: int = 0) -> np.ndarray:
    if kind == "jpeg":
        return jpeg(images, value)
    if kind == "noise":
        return gaussian_noise(images, value, np.random.default_rng([seed, int(value * 1000), 0xD1]))
    if kind == "blur":
        return blur(images, value)
    if kind == "brightness":
        return brightness(images, value)
    if kind == "contrast":
        return contrast(images, value)
    raise ValueError(f"unknown degradation {kind!r}; valid: {KINDS}")
