"""Image-quality metrics on [-1, 1] CHW images.

PSNR and SSIM are computed after rescaling to [0, 1] (peak 1). The Frechet
distance here is over the identity extractor's pooled features, so it is a
feature-space analogue of FID, not an Inception FID.
"""
from __future__ import annotations

import numpy as np
import torch

from .extractor import IdentityExtractor, penultimate_array
from .losses import loss_perceptual

PSNR_CAP = 99.0


def to_unit(x: np.ndarray) -> np.ndarray:
    return (np.asarray(x, dtype=np.float64) + 1.0) / 2.0


def psnr(a: np.ndarray, b: np.ndarray, cap: float = PSNR_CAP) -> np.ndarray:
    """Per-image PSNR in dB for (N, C, H, W) or a single (C, H, W) pair."""
    a, b = to_unit(a), to_unit(b)
    axes = tuple(range(a.ndim - 3, a.ndim))
    mse = ((a - b) ** 2).mean(axis=axes)
    with np.errstate(divide="ignore"):
        val = np.where(mse > 0, -10.0 * np.log10(np.where(mse > 0, mse, 1.0)), cap)
    return np.minimum(val, cap)


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (t / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    n = len(g)
    h = sum(g[i] * x[..., i:x.shape[-2] - n + 1 + i, :] for i in range(n))
    return sum(g[i] * h[..., :, i:x.shape[-1] - n + 1 + i] for i in range(n))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> np.ndarray:
    """Per-image SSIM (Gaussian window, valid region, channel mean) on the [0, 1] scale."""
    if np.ndim(a) == 3:
        return ssim(np.asarray(a)[None], np.asarray(b)[None], window, sigma, k1, k2)[0]
    a, b = to_unit(a), to_unit(b)
    g = _gauss_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return (num / den).mean(axis=(1, 2, 3))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples).

    The trace of sqrt(S_a S_b) is taken as the trace of sqrt(A S_b A) with
    A = sqrt(S_a), a symmetric PSD matrix; tiny negative eigenvalues clip to 0.
    """
    fa, fb = np.asarray(feats_a, np.float64), np.asarray(feats_b, np.float64)
    mu_a, mu_b = fa.mean(0), fb.mean(0)
    s_a = np.atleast_2d(np.cov(fa, rowvar=False))
    s_b = np.atleast_2d(np.cov(fb, rowvar=False))
    w, v = np.linalg.eigh(s_a)
    root_a = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    m = root_a @ s_b @ root_a
    ev = np.linalg.eigvalsh((m + m.T) / 2)
    tr_covmean = np.sqrt(np.clip(ev, 0, None)).sum()
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(s_a) + np.trace(s_b) - 2 * tr_covmean)


@torch.no_grad()
def perceptual_distance(extractor: IdentityExtractor, a: np.ndarray, b: np.ndarray,
                        batch_size: int = 64) -> np.ndarray:
    """Per-image perceptual distance using the training-time perceptual loss."""
    out = []
    for i in range(0, len(a), batch_size):
        xa = torch.from_numpy(np.ascontiguousarray(a[i:i + batch_size], dtype=np.float32))
        xb = torch.from_numpy(np.ascontiguousarray(b[i:i + batch_size], dtype=np.float32))
        fa, fb = extractor.trunk_features(xa), extractor.trunk_features(xb)
        for j in range(len(xa)):
            out.append(float(loss_perceptual([f[j] for f in fa], [f[j] for f in fb])))
    return np.asarray(out)


def quality_summary(extractor: IdentityExtractor, originals: np.ndarray, protecteds: np.ndarray) -> dict:
    if originals.shape != protecteds.shape:
        raise ValueError(f"paired sets differ: {originals.shape} vs {protecteds.shape}")
    return {
        "psnr": float(psnr(originals, protecteds).mean()),
        "ssim": float(ssim(originals, protecteds).mean()),
        "perceptual": float(perceptual_distance(extractor, originals, protecteds).mean()),
        "frechet_feature": frechet_distance(penultimate_array(extractor, originals),
                                            penultimate_array(extractor, protecteds)),
    }
