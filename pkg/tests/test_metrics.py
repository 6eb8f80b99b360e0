import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceprotect.metrics import PSNR_CAP, frechet_distance, perceptual_distance, psnr, quality_summary, ssim


def _ssim_reference(a, b):
    """Direct per-window loop over the same Gaussian window (valid region)."""
    a, b = (a + 1) / 2, (b + 1) / 2
    t = np.arange(11) - 5
    g = np.exp(-0.5 * (t / 1.5) ** 2)
    w = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    vals = []
    for ch in range(a.shape[0]):
        for i in range(a.shape[1] - 10):
            for j in range(a.shape[2] - 10):
                pa, pb = a[ch, i:i + 11, j:j + 11], b[ch, i:i + 11, j:j + 11]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va, vb = (w * pa * pa).sum() - ma ** 2, (w * pb * pb).sum() - mb ** 2
                cov = (w * pa * pb).sum() - ma * mb
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return np.mean(vals)


def test_psnr_closed_forms(rng):
    a = rng.uniform(-1, 0.7, (2, 3, 8, 8))
    np.testing.assert_allclose(psnr(a, a + 0.2), 20.0, atol=1e-9)  # +0.1 on the [0, 1] scale
    assert psnr(a, a)[0] == PSNR_CAP
    assert psnr(a[0], a[0] + 0.02) == pytest.approx(40.0)


def test_ssim_matches_window_loop(rng):
    a = rng.uniform(-1, 1, (3, 14, 14))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), -1, 1)
    assert ssim(a, b) == pytest.approx(_ssim_reference(a, b), abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_frechet_closed_forms(rng):
    x = rng.normal(size=(500, 4))
    assert frechet_distance(x, x) == pytest.approx(0.0, abs=1e-8)
    shifted = x + np.array([3.0, 0, 0, 0])
    assert frechet_distance(x, shifted) == pytest.approx(9.0, abs=1e-8)
    # 1-D Gaussians: (m1 - m2)^2 + (s1 - s2)^2
    a = rng.normal(size=(2000, 1))
    b = 2.0 * a + 1.0
    assert frechet_distance(a, b) == pytest.approx((a.mean() + 1.0) ** 2 + np.var(a, ddof=1), rel=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_metric_ranges(seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-1, 1, (2, 3, 12, 12)), r.uniform(-1, 1, (2, 3, 12, 12))
    assert np.all(ssim(a, b) <= 1 + 1e-12)
    assert np.all(psnr(a, b) > 0)
    f = r.normal(size=(30, 3))
    assert frechet_distance(f, r.normal(size=(30, 3))) >= -1e-9


def test_quality_summary(tiny_extractor, rng):
    a = rng.uniform(-1, 1, (4, 3, 16, 16)).astype(np.float32)
    q = quality_summary(tiny_extractor, a, a)
    assert q["psnr"] == PSNR_CAP and q["ssim"] == pytest.approx(1.0)
    assert q["perceptual"] == 0 and abs(q["frechet_feature"]) < 1e-6
    assert np.all(perceptual_distance(tiny_extractor, a, -a) > 0)
    with pytest.raises(ValueError, match="differ"):
        quality_summary(tiny_extractor, a, a[:2])
