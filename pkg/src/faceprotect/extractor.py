"""Frozen identity-embedding networks.

A small convolutional trunk is trained with an additive-cosine-margin softmax
over the training identities, then the classification head is dropped and
every parameter is frozen. Gradients still flow to the *input* image, which
the protector relies on.
"""
from __future__ import annotations

import logging

import numpy as np
import torch

from . import checkpoint as ckpt
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

BACKENDS = {
    # name: (stage channels, kernel size)
    "base": ((16, 32, 64, 128), 3),
    "alt": ((24, 48, 64, 96), 5),
}
# stage1 only: deeper stages encode identity and would oppose the deviate objective
DEFAULT_TAPS = ("stage1",)


class ExtractorTrainingError(RuntimeError):
    def __init__(self, message: str, intra: float, inter: float):
        super().__init__(f"{message} (intra={intra:.3f}, inter={inter:.3f}, margin={intra - inter:.3f})")
        self.intra = intra
        self.inter = inter


class Blur(nn.Module):
    """Fixed 3x3 binomial low-pass (anti-aliasing ahead of a strided conv)."""

    def __init__(self, channels: int):
        super().__init__()
        k = torch.tensor([1.0, 2.0, 1.0])
        k = (k[:, None] * k[None, :]) / 16
        self.register_buffer("kernel", k.expand(channels, 1, 3, 3).clone())
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.pad(x, (1, 1, 1, 1), mode="reflect")
        return F.conv2d(x, self.kernel.to(x.dtype), groups=self.channels)


class IdentityExtractor(nn.Module):
    """Four stride-2 conv stages, global average pooling, linear head to ``d_f``.

    With ``antialias`` each strided conv is preceded by a binomial blur, which
    keeps the recognizer from keying on pixel-grid-aligned patterns.
    """

    def __init__(self, backend: str = "base", d_f: int = 128, resolution: int = 64,
                 taps: tuple[str, ...] = DEFAULT_TAPS, resize: bool = True, antialias: bool = True):
        super().__init__()
        if backend not in BACKENDS:
            raise ValueError(f"unknown extractor backend {backend!r}; choose from {sorted(BACKENDS)}")
        chans, k = BACKENDS[backend]
        self.backend_id = backend
        self.d_f = d_f
        self.resolution = resolution
        self.resize = resize
        self.antialias = antialias
        stages, c_in = [], 3
        for c in chans:
            stages.append(nn.Sequential(
                Blur(c_in) if antialias else nn.Identity(),
                nn.Conv2d(c_in, c, k, stride=2, padding=k // 2, bias=False),
                nn.BatchNorm2d(c),
                nn.LeakyReLU(0.1),
                nn.Conv2d(c, c, 3, padding=1, bias=False),
                nn.BatchNorm2d(c),
                nn.LeakyReLU(0.1),
            ))
            c_in = c
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(c_in, d_f)
        self.feature_dim = c_in
        self.stage_names = tuple(f"stage{i + 1}" for i in range(len(stages)))
        unknown = [t for t in taps if t not in self.stage_names]
        if unknown:
            raise ValueError(f"unknown tap point(s) {unknown}; valid: {self.stage_names}")
        self.taps = tuple(taps)
        self.frozen = False

    def _prepare(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            if not self.resize:
                raise ValueError(f"extractor expects {self.resolution}px input, got {tuple(x.shape[-2:])}")
            x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bilinear", align_corners=False)
        return x

    def trunk(self, x: torch.Tensor) -> dict[str, torch.Tensor]:
        x = self._prepare(x)
        out = {}
        for name, stage in zip(self.stage_names, self.stages):
            x = stage(x)
            out[name] = x
        return out

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        x = self._prepare(x)
        for stage in self.stages:
            x = stage(x)
        return x.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.head(self.penultimate(x)), dim=1, eps=1e-12)

    def trunk_features(self, x: torch.Tensor, normalize: bool = False,
                       taps: tuple[str, ...] | None = None) -> list[torch.Tensor]:
        """Feature maps at the tap points (``taps`` or the configured ones), shallowest first.

        With ``normalize`` each spatial position's channel vector is scaled to
        unit length, as LPIPS does before differencing.
        """
        taps = self.taps if taps is None else tuple(taps)
        unknown = [t for t in taps if t not in self.stage_names]
        if unknown or not taps:
            raise ValueError(f"bad tap point(s) {list(taps)}; valid: {self.stage_names}")
        feats = self.trunk(x)
        out = [feats[t] for t in taps]
        if normalize:
            out = [f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + 1e-10) for f in out]
        return out

    def freeze(self) -> "IdentityExtractor":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def train(self, mode: bool = True):
        # a frozen extractor stays in eval mode so BatchNorm statistics never move
        return super().train(mode and not getattr(self, "frozen", False))

    def metadata(self) -> dict:
        return {"backend_id": self.backend_id, "d_f": self.d_f, "resolution": self.resolution,
                "taps": list(self.taps), "resize": self.resize,
                "antialias": self.antialias}


def extract(extractor: IdentityExtractor, image: torch.Tensor) -> torch.Tensor:
    """Unit-norm embedding(s); accepts (3, R, R) or (B, 3, R, R)."""
    single = image.dim() == 3
    emb = extractor(image)
    return emb[0] if single else emb


def trunk_features(extractor: IdentityExtractor, image: torch.Tensor, normalize: bool = False,
                   taps: tuple[str, ...] | None = None) -> list[torch.Tensor]:
    return extractor.trunk_features(image, normalize, taps)


@torch.no_grad()
def embed_array(extractor: IdentityExtractor, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(extractor(torch.from_numpy(images[i:i + batch_size])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, extractor.d_f))


@torch.no_grad()
def penultimate_array(extractor: IdentityExtractor, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        out.append(extractor.penultimate(torch.from_numpy(images[i:i + batch_size])).double().numpy())
    return np.concatenate(out)


def separation(emb: np.ndarray, labels: list[str]) -> tuple[float, float]:
    """Mean intra-identity and inter-identity cosine over all distinct pairs."""
    sims = emb @ emb.T
    lab = np.asarray(labels)
    same = lab[:, None] == lab[None, :]
    off = ~np.eye(len(lab), dtype=bool)
    intra = sims[same & off]
    inter = sims[~same]
    return float(intra.mean()) if intra.size else 1.0, float(inter.mean()) if inter.size else 0.0


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    # random translation up to 4px and horizontal flips: cheap nuisance beyond the data's own
    b = x.shape[0]
    flip = torch.rand(b, generator=gen) < 0.5
    x = torch.where(flip[:, None, None, None], x.flip(-1), x)
    dx, dy = (int(v) for v in torch.randint(-4, 5, (2,), generator=gen))
    x = F.pad(x, (4, 4, 4, 4), mode="replicate")
    r = x.shape[-1] - 8
    return x[..., 4 + dy:4 + dy + r, 4 + dx:4 + dx + r]


def train_extractor(images: np.ndarray, labels: list[str], d_f: int = 128, epochs: int = 60,
                    seed: int = 0, backend: str = "base", batch_size: int = 32, lr: float = 2e-3,
                    scale: float = 16.0, margin: float = 0.2, min_margin: float = 0.3,
                    heldout: tuple[np.ndarray, list[str]] | None = None,
                    augment: bool = True) -> IdentityExtractor:
    """Train then freeze an extractor on labeled images.

    The separation check (mean intra-identity cosine at least ``min_margin``
    above mean inter-identity cosine) runs on ``heldout`` when given, else on
    the training images; failing it raises ExtractorTrainingError.
    """
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ValueError("train_extractor needs at least 2 identities")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    model = IdentityExtractor(backend, d_f, images.shape[-1])
    weight = nn.Parameter(torch.randn(len(classes), d_f) * 0.01)
    y_all = torch.tensor([classes.index(lab) for lab in labels])
    x_all = torch.from_numpy(images)
    opt = torch.optim.Adam(list(model.parameters()) + [weight], lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, max(epochs, 1) * ((len(x_all) + batch_size - 1) // batch_size))
    model.train()
    for epoch in range(epochs):
        perm = torch.randperm(len(x_all), generator=gen)
        total = 0.0
        for i in range(0, len(perm), batch_size):
            idx = perm[i:i + batch_size]
            x, y = (_augment(x_all[idx], gen) if augment else x_all[idx]), y_all[idx]
            cos = model(x) @ F.normalize(weight, dim=1).T
            logits = scale * (cos - margin * F.one_hot(y, len(classes)))
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        log.debug("extractor epoch %d loss %.4f", epoch, total / len(x_all))
    model.freeze()
    ev_x, ev_y = heldout if heldout is not None else (images, labels)
    intra, inter = separation(embed_array(model, ev_x), ev_y)
    log.info("extractor %s: intra %.3f inter %.3f", backend, intra, inter)
    if intra - inter < min_margin:
        raise ExtractorTrainingError("extractor failed to separate identities", intra, inter)
    return model


def save_extractor(model: IdentityExtractor) -> bytes:
    return ckpt.pack("extractor", model.metadata(), ckpt.module_tensors("model", model))


def load_extractor(blob: bytes) -> IdentityExtractor:
    meta, tensors = ckpt.unpack(blob, "extractor")
    model = IdentityExtractor(meta["backend_id"], meta["d_f"], meta["resolution"], tuple(meta["taps"]),
                              meta["resize"], meta["antialias"])
    ckpt.load_module(model, "model", tensors)
    return model.freeze()
