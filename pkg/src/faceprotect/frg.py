"""Reconstruction generator: a reduced Swin-UNet with identity fusion at the bottleneck.

Spatial plan for an R x R input::

    stem (R) -> down+block (R/2) -> down+block (R/4, bottleneck)
    bottleneck + broadcast(w4 relu(w3 e)) -> up (R/2) + skip -> up (R) + skip
    -> window-attention refinement (R) -> conv (+ atanh(input)) -> tanh
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


# keeps atanh finite for inputs at exactly +-1; tanh(atanh(c)) rounds back to 8-bit 255
RESIDUAL_CLIP = 0.999


@dataclass(frozen=True)
class FrgConfig:
    d_f: int = 128
    stem_channels: int = 16
    channels: tuple[int, int] = (32, 64)
    window: int = 4
    heads: int = 2
    mlp_ratio: float = 2.0
    id_hidden: int | None = None  # defaults to d_f
    input_residual: bool = True  # add atanh(input) before the output tanh

    @property
    def bottleneck_channels(self) -> int:
        return self.channels[-1]


class WindowAttentionBlock(nn.Module):
    """Single Swin-style block: pre-norm window attention and MLP, both residual.

    No shifted windows; with one block per stage there is nothing to alternate with.
    """

    def __init__(self, dim: int, window: int = 4, heads: int = 2, mlp_ratio: float = 2.0):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.window, self.heads = dim, window, heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        # relative position bias, one table entry per (dy, dx) offset
        self.rel_bias = nn.Parameter(torch.zeros(heads, (2 * window - 1) ** 2))

    def _rel_index(self, ws: int) -> torch.Tensor:
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = coords[:, :, None] - coords[:, None, :] + self.window - 1
        return rel[0] * (2 * self.window - 1) + rel[1]

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C) -> windows of ws*ws tokens; maps smaller than the window use one window
        b, h, w, c = x.shape
        ws = min(self.window, h, w)
        x = x.view(b, h // ws, ws, w // ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)
        qkv = self.qkv(x).view(x.shape[0], ws * ws, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (c // self.heads) ** -0.5
        attn = attn + self.rel_bias[:, self._rel_index(ws)]
        out = (attn.softmax(dim=-1) @ v).transpose(1, 2).reshape(-1, ws * ws, c)
        out = self.proj(out)
        out = out.view(b, h // ws, w // ws, ws, ws, c).permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
        return out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        ws = min(self.window, x.shape[-2], x.shape[-1])
        if x.shape[-1] % ws or x.shape[-2] % ws:
            raise ValueError(f"feature map {tuple(x.shape[-2:])} not divisible by window {ws}")
        t = x.permute(0, 2, 3, 1)
        t = t + self._attend(self.norm1(t))
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


class IdentityFusion(nn.Module):
    """Adds ``w4 relu(w3 e)`` to every spatial position of a feature map."""

    def __init__(self, d_f: int, hidden: int, channels: int):
        super().__init__()
        self.d_f = d_f
        self.w3 = nn.Linear(d_f, hidden, bias=False)
        self.w4 = nn.Linear(hidden, channels, bias=False)

    def project(self, emb: torch.Tensor) -> torch.Tensor:
        if emb.shape[-1] != self.d_f:
            raise ValueError(f"embedding has {emb.shape[-1]} dims, fusion expects {self.d_f}")
        return self.w4(F.relu(self.w3(emb)))

    def forward(self, b: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        f = self.project(emb)
        if f.shape[-1] != b.shape[1]:
            raise ValueError(f"projected identity has {f.shape[-1]} channels, feature map has {b.shape[1]}")
        return b + f[..., :, None, None]


class FaceReviveGenerator(nn.Module):
    def __init__(self, cfg: FrgConfig = FrgConfig()):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stem_channels
        c1, c2 = cfg.channels
        hid = cfg.id_hidden or cfg.d_f
        act = nn.LeakyReLU(0.2)
        self.stem = nn.Sequential(nn.Conv2d(3, c0, 3, padding=1), act)
        self.down1 = nn.Sequential(nn.Conv2d(c0, c1, 4, stride=2, padding=1), act)
        self.block1 = WindowAttentionBlock(c1, cfg.window, cfg.heads, cfg.mlp_ratio)
        self.down2 = nn.Sequential(nn.Conv2d(c1, c2, 4, stride=2, padding=1), act)
        self.block2 = WindowAttentionBlock(c2, cfg.window, cfg.heads, cfg.mlp_ratio)
        self.fusion = IdentityFusion(cfg.d_f, hid, c2)
        self.up1 = nn.Sequential(nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1), act)
        self.fuse1 = nn.Conv2d(2 * c1, c1, 1)
        self.up2 = nn.Sequential(nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1), act)
        self.fuse2 = nn.Conv2d(2 * c0, c0, 1)
        self.refine = WindowAttentionBlock(c0, cfg.window, cfg.heads, cfg.mlp_ratio)
        self.out = nn.Conv2d(c0, 3, 3, padding=1)
        if cfg.input_residual:
            # start as the identity map; training learns the residual
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def encode(self, image: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Return the bottleneck and the pre-downsample input of each encoder stage."""
        r = image.shape[-1]
        if image.shape[-2] != r or r % 4:
            raise ValueError(f"image side must be square and divisible by 4, got {tuple(image.shape[-2:])}")
        s0 = self.stem(image)
        s1 = self.block1(self.down1(s0))
        b = self.block2(self.down2(s1))
        return b, [s0, s1]

    def fuse_identity(self, b: torch.Tensor, pert: torch.Tensor) -> torch.Tensor:
        return self.fusion(b, pert)

    def decode(self, fused: torch.Tensor, skips: list[torch.Tensor],
               base: torch.Tensor | None = None) -> torch.Tensor:
        """``base`` is the input image when the generator predicts a residual in
        pre-tanh space; it is required iff ``cfg.input_residual``."""
        if (base is None) == self.cfg.input_residual:
            raise ValueError("base image required exactly when input_residual is set")
        s0, s1 = skips
        x = self.up1(fused)
        if x.shape[-2:] != s1.shape[-2:]:
            raise ValueError(f"skip {tuple(s1.shape[-2:])} does not match decoder {tuple(x.shape[-2:])}")
        x = self.fuse1(torch.cat([x, s1], dim=1))
        x = self.up2(x)
        if x.shape[-2:] != s0.shape[-2:]:
            raise ValueError(f"skip {tuple(s0.shape[-2:])} does not match decoder {tuple(x.shape[-2:])}")
        x = self.fuse2(torch.cat([x, s0], dim=1))
        x = self.refine(x)
        x = self.out(x)
        if base is not None:
            x = x + torch.atanh(base.clamp(-RESIDUAL_CLIP, RESIDUAL_CLIP))
        return torch.tanh(x)

    def forward(self, image: torch.Tensor, pert: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        if single:
            image, pert = image.unsqueeze(0), pert.unsqueeze(0)
        b, skips = self.encode(image)
        out = self.decode(self.fuse_identity(b, pert), skips, image if self.cfg.input_residual else None)
        return out[0] if single else out


def revive(frg: FaceReviveGenerator, image: torch.Tensor, pert: torch.Tensor) -> torch.Tensor:
    return frg(image, pert)


def encode(frg: FaceReviveGenerator, image: torch.Tensor):
    return frg.encode(image)


def fuse_identity(frg: FaceReviveGenerator, b: torch.Tensor, pert: torch.Tensor) -> torch.Tensor:
    return frg.fuse_identity(b, pert)


def decode(frg: FaceReviveGenerator, fused: torch.Tensor, skips: list[torch.Tensor],
           base: torch.Tensor | None = None) -> torch.Tensor:
    return frg.decode(fused, skips, base)
