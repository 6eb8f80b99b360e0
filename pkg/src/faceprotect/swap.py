"""Minimal identity-injection face swapper used to probe the protection.

The target image goes through a small conv encoder; the *embedding* of the
source (never its pixels) is broadcast-added at the bottleneck, and variant
"deep" adds it again after the first upsampling stage.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .extractor import IdentityExtractor, embed_array
from .frg import IdentityFusion

log = logging.getLogger(__name__)

VARIANTS = ("shallow", "deep")


class SwapTrainingError(RuntimeError):
    def __init__(self, message: str, achieved: dict):
        super().__init__(f"{message}: {achieved}")
        self.achieved = achieved


def _res(c: int) -> nn.Module:
    return nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.2), nn.Conv2d(c, c, 3, padding=1))


class SwapModel(nn.Module):
    def __init__(self, d_f: int = 128, variant: str = "shallow", channels: tuple[int, int] = (32, 64)):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"unknown swap variant {variant!r}; choose from {VARIANTS}")
        c1, c2 = channels
        self.variant, self.d_f, self.channels = variant, d_f, channels
        act = nn.LeakyReLU(0.2)
        self.enc = nn.Sequential(nn.Conv2d(3, c1, 4, 2, 1), act, nn.Conv2d(c1, c2, 4, 2, 1), act)
        self.mid = _res(c2)
        self.fuse_b = IdentityFusion(d_f, d_f, c2)
        self.up1 = nn.Sequential(nn.ConvTranspose2d(c2, c1, 4, 2, 1), act)
        self.fuse_u = IdentityFusion(d_f, d_f, c1) if variant == "deep" else None
        self.up2 = nn.Sequential(nn.ConvTranspose2d(c1, c1, 4, 2, 1), act, nn.Conv2d(c1, 3, 3, padding=1))
        self.trained = False

    def forward(self, src_emb: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        h = self.enc(target)
        h = F.leaky_relu(h + self.mid(self.fuse_b(h, src_emb)), 0.2)
        h = self.up1(h)
        if self.fuse_u is not None:
            h = self.fuse_u(h, src_emb)
        return torch.tanh(self.up2(h))


def swap(model: SwapModel, extractor: IdentityExtractor, source: torch.Tensor,
         target: torch.Tensor) -> torch.Tensor:
    """Swap the identity of ``source`` onto ``target``; only ``extract(source)`` is consumed."""
    if not model.trained:
        raise RuntimeError("swap model is untrained")
    single = source.dim() == 3
    if single:
        source, target = source.unsqueeze(0), target.unsqueeze(0)
    out = model(extractor(source), target)
    return out[0] if single else out


@torch.no_grad()
def swap_array(model: SwapModel, extractor: IdentityExtractor, sources: np.ndarray,
               targets: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(sources), batch_size):
        out.append(swap(model, extractor, torch.from_numpy(sources[i:i + batch_size]),
                        torch.from_numpy(targets[i:i + batch_size])).numpy())
    return np.concatenate(out)


def pair_targets(n_sources: int, n_targets: int, seed: int) -> np.ndarray:
    """Deterministic target index for each source."""
    return np.random.default_rng([seed, 0x5A9]).integers(0, n_targets, size=n_sources)


def transfer_report(model: SwapModel, extractor: IdentityExtractor, sources: np.ndarray,
                    targets: np.ndarray) -> dict:
    out = swap_array(model, extractor, sources, targets)
    e_out, e_src = embed_array(extractor, out), embed_array(extractor, sources)
    e_tgt = embed_array(extractor, targets)
    return {
        "id_transfer": float((e_out * e_src).sum(1).mean()),
        "cos_to_target": float((e_out * e_tgt).sum(1).mean()),
        "mse_to_target": float(((out - targets) ** 2).mean()),
        "mse_to_source": float(((out - sources) ** 2).mean()),
    }


def train_swap(images: np.ndarray, extractor: IdentityExtractor, epochs: int = 15, seed: int = 0,
               variant: str = "shallow", batch_size: int = 16, lr: float = 1e-3,
               w_rec: float = 1.0, w_id: float = 1.0, w_struct: float = 0.1,
               heldout: tuple[np.ndarray, np.ndarray] | None = None,
               min_transfer: float = 0.7) -> SwapModel:
    """Fit a proxy swapper with self-swap reconstruction, identity consistency and
    target-structure losses. ``heldout`` is (sources, targets) for the transfer check."""
    if not extractor.frozen:
        raise ValueError("extractor must be frozen")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = SwapModel(extractor.d_f, variant)
    x_all = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    with torch.no_grad():
        e_all = torch.from_numpy(embed_array(extractor, images).astype(np.float32))
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.5, 0.999))
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            x, e = x_all[idx], e_all[idx]
            shuf = torch.roll(torch.arange(len(idx)), 1)
            rec = F.mse_loss(model(e, x), x)
            cross = model(e[shuf], x)
            ident = 1 - F.cosine_similarity(extractor(cross), e[shuf], dim=1).mean()
            struct = F.mse_loss(cross, x)
            loss = w_rec * rec + w_id * ident + w_struct * struct
            opt.zero_grad()
            loss.backward()
            opt.step()
        log.debug("swap %s epoch %d rec %.4f id %.4f", variant, epoch, rec.item(), ident.item())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.trained = True
    if heldout is not None:
        achieved = transfer_report(model, extractor, *heldout)
        log.info("swap %s: %s", variant, achieved)
        if achieved["id_transfer"] < min_transfer:
            raise SwapTrainingError(f"swap proxy {variant} failed to transfer identity", achieved)
    return model


def save_swap(model: SwapModel) -> bytes:
    meta = {"variant": model.variant, "d_f": model.d_f, "channels": list(model.channels)}
    return ckpt.pack("swap", meta, ckpt.module_tensors("model", model))


def load_swap(blob: bytes) -> SwapModel:
    meta, tensors = ckpt.unpack(blob, "swap")
    model = SwapModel(meta["d_f"], meta["variant"], tuple(meta["channels"]))
    ckpt.load_module(model, "model", tensors)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.trained = True
    return model
