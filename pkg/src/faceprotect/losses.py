"""Training objectives and the least-squares patch critic."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

LOSS_TERMS = ("adv", "pixel", "lpips", "deviate")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float, record: dict | None = None):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term
        self.record = record or {}


@dataclass(frozen=True)
class LossWeights:
    adv: float = 0.2
    pixel: float = 0.5
    lpips: float = 1.0
    deviate: float = 0.15

    def __post_init__(self):
        for k in LOSS_TERMS:
            v = getattr(self, k)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {k} must be finite and non-negative, got {v}")


class PatchDiscriminator(nn.Module):
    """Four stride-2 conv stages then a 1-channel raw score map (no sigmoid)."""

    def __init__(self, channels: tuple[int, ...] = (32, 64, 128, 256)):
        super().__init__()
        layers, c_in = [], 3
        for c in channels:
            layers += [nn.Conv2d(c_in, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c_in = c
        layers.append(nn.Conv2d(c_in, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


def loss_deviate(src_emb: torch.Tensor, prot_emb: torch.Tensor) -> torch.Tensor:
    """Mean cosine similarity between source and protected embeddings (minimized)."""
    if src_emb.shape[-1] != prot_emb.shape[-1]:
        raise ValueError("embedding dimensions differ")
    ns, npr = src_emb.norm(dim=-1), prot_emb.norm(dim=-1)
    if bool((ns == 0).any()) or bool((npr == 0).any()):
        raise ValueError("zero-norm embedding")
    return ((src_emb * prot_emb).sum(-1) / (ns * npr)).mean()


def loss_pixel(src: torch.Tensor, prot: torch.Tensor) -> torch.Tensor:
    if src.shape != prot.shape:
        raise ValueError(f"shape mismatch {tuple(src.shape)} vs {tuple(prot.shape)}")
    return ((src - prot) ** 2).mean()


def loss_perceptual(src_feats: list[torch.Tensor], prot_feats: list[torch.Tensor]) -> torch.Tensor:
    """Per-layer mean squared feature distance, averaged over layers."""
    if len(src_feats) != len(prot_feats) or not src_feats:
        raise ValueError(f"mismatched feature sets: {len(src_feats)} vs {len(prot_feats)}")
    return sum(((a - b) ** 2).mean() for a, b in zip(src_feats, prot_feats)) / len(src_feats)


def lsgan_generator(scores: torch.Tensor) -> torch.Tensor:
    return ((scores - 1) ** 2).mean()


def lsgan_discriminator(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return ((real_scores - 1) ** 2).mean() + (fake_scores ** 2).mean()


def loss_adv_generator(disc: nn.Module, prot: torch.Tensor) -> torch.Tensor:
    return lsgan_generator(disc(prot))


def loss_discriminator(disc: nn.Module, src: torch.Tensor, prot: torch.Tensor) -> torch.Tensor:
    return lsgan_discriminator(disc(src), disc(prot))


def loss_total(parts: dict[str, torch.Tensor | float], w: LossWeights = LossWeights()):
    values = {k: float(parts[k].detach()) if torch.is_tensor(parts[k]) else float(parts[k]) for k in LOSS_TERMS}
    for k, v in values.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(k, v, values)
    return (w.adv * parts["adv"] + w.pixel * parts["pixel"]
            + w.lpips * parts["lpips"] + w.deviate * parts["deviate"])
