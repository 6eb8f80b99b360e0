"""Stochastic differentiable image transforms used inside the training forward pass.

One concrete transform is sampled per iteration and applied to the whole
batch. Transforms compose in a fixed order: crop, rotation, flip, resize, blur.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

ORDER = ("crop", "rotation", "flip", "resize", "blur")


@dataclass(frozen=True)
class InterferenceSpec:
    enabled: tuple[str, ...] = ORDER
    crop_keep: tuple[float, float] = (0.85, 1.0)
    rotation_deg: tuple[float, float] = (-10.0, 10.0)
    resize_factor: tuple[float, float] = (0.5, 1.0)
    blur_sigma: tuple[float, float] = (0.3, 1.5)
    prob: dict[str, float] = field(default_factory=lambda: {k: 0.5 for k in ORDER})

    def __post_init__(self):
        unknown = set(self.enabled) - set(ORDER)
        if unknown:
            raise ValueError(f"unknown transform(s) {sorted(unknown)}; valid: {ORDER}")
        lo, hi = self.crop_keep
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop keep-ratio range must lie in (0, 1], got {self.crop_keep}")
        if not -180 <= self.rotation_deg[0] <= self.rotation_deg[1] <= 180:
            raise ValueError(f"bad rotation range {self.rotation_deg}")
        if not 0 < self.resize_factor[0] <= self.resize_factor[1] <= 1:
            raise ValueError(f"resize factor range must lie in (0, 1], got {self.resize_factor}")
        if not 0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"blur sigma must be positive, got {self.blur_sigma}")
        for k, p in self.prob.items():
            if not 0 <= p <= 1:
                raise ValueError(f"probability for {k} must lie in [0, 1], got {p}")

    @classmethod
    def disabled(cls) -> "InterferenceSpec":
        return cls(enabled=())


@dataclass(frozen=True)
class ConcreteTransform:
    ops: tuple[tuple[str, tuple[float, ...]], ...] = ()

    @property
    def is_identity(self) -> bool:
        return not self.ops

    def describe(self) -> str:
        return ";".join(f"{name}({','.join(f'{v:.4g}' for v in args)})" for name, args in self.ops) or "identity"


def sample_transform(spec: InterferenceSpec, rng: np.random.Generator) -> ConcreteTransform:
    """Draw one transform. Every op consumes the same draws whether or not it fires,
    so enabling one transform never shifts another's random stream."""
    ops = []
    for name in ORDER:
        fire = rng.random() < spec.prob.get(name, 0.5)
        a, b, c = rng.random(3)
        if name not in spec.enabled or not fire:
            continue
        if name == "crop":
            keep = spec.crop_keep[0] + a * (spec.crop_keep[1] - spec.crop_keep[0])
            slack = 1.0 - keep
            ops.append((name, (keep, slack * (2 * b - 1), slack * (2 * c - 1))))
        elif name == "rotation":
            ops.append((name, (spec.rotation_deg[0] + a * (spec.rotation_deg[1] - spec.rotation_deg[0]),)))
        elif name == "flip":
            ops.append((name, ()))
        elif name == "resize":
            ops.append((name, (spec.resize_factor[0] + a * (spec.resize_factor[1] - spec.resize_factor[0]),)))
        elif name == "blur":
            ops.append((name, (spec.blur_sigma[0] + a * (spec.blur_sigma[1] - spec.blur_sigma[0]),)))
    return ConcreteTransform(tuple(ops))


def _affine(x: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    theta = theta.to(x.dtype).expand(x.shape[0], 2, 3)
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def gaussian_kernel1d(sigma: float, dtype=torch.float32, size: int | None = None) -> torch.Tensor:
    if size is None:
        size = 2 * int(math.ceil(3 * sigma)) + 1
    t = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x: torch.Tensor, sigma: float, size: int | None = None) -> torch.Tensor:
    k = gaussian_kernel1d(sigma, x.dtype, size)
    n = k.numel()
    pad = n // 2
    while pad >= x.shape[-1]:  # reflect padding must stay inside the image
        n -= 2
        k = gaussian_kernel1d(sigma, x.dtype, n)
        pad = n // 2
    c = x.shape[1]
    x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    return F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)


def apply(t: ConcreteTransform, image: torch.Tensor) -> torch.Tensor:
    """Apply ``t`` to (3, R, R) or (B, 3, R, R); output keeps the input shape."""
    if t.is_identity:
        return image
    single = image.dim() == 3
    x = image.unsqueeze(0) if single else image
    r = x.shape[-1]
    for name, args in t.ops:
        if name == "crop":
            keep, ox, oy = args
            theta = torch.tensor([[[keep, 0.0, ox], [0.0, keep, oy]]])
            x = _affine(x, theta)
        elif name == "rotation":
            a = math.radians(args[0])
            theta = torch.tensor([[[math.cos(a), -math.sin(a), 0.0], [math.sin(a), math.cos(a), 0.0]]])
            x = _affine(x, theta)
        elif name == "flip":
            x = x.flip(-1)
        elif name == "resize":
            small = max(1, int(round(r * args[0])))
            if small != r:
                x = F.interpolate(x, size=(small, small), mode="bilinear", align_corners=False)
                x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False)
        elif name == "blur":
            x = gaussian_blur(x, args[0])
    return x[0] if single else x


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-iteration stream; depends only on (seed, step) so resumed runs replay exactly."""
    return np.random.default_rng([seed, step, 0x1A7E])
