import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from faceprotect.fpm import FeaturePerturbation, compute_delta, perturb


def _manual(m, e):
    h = np.maximum(m.w1.detach().numpy() @ e + m.b1.detach().numpy(), 0)
    return np.tanh(m.w2.detach().numpy() @ h + m.b2.detach().numpy())


def test_delta_matches_numpy_formula():
    torch.manual_seed(1)
    m = FeaturePerturbation(6, 5)
    with torch.no_grad():
        m.b1.normal_()
        m.b2.normal_()
    e = torch.randn(4, 6)
    got = compute_delta(m, e).detach().numpy()
    want = np.stack([_manual(m, x) for x in e.numpy()])
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-6)


def test_perturbed_is_unnormalized_shift():
    m = FeaturePerturbation(8)
    e = torch.nn.functional.normalize(torch.randn(3, 8), dim=1)
    out = perturb(m, e, 0.1)
    np.testing.assert_allclose((out - e).detach().numpy(), (0.1 * m.delta(e)).detach().numpy(), atol=1e-7)


def test_alpha_zero_is_identity():
    m = FeaturePerturbation(8)
    e = torch.randn(2, 8)
    assert torch.equal(m(e, 0.0), e)


def test_default_hidden_width():
    assert FeaturePerturbation(8).d_h == 16


def test_errors():
    m = FeaturePerturbation(8)
    with pytest.raises(ValueError, match="dims"):
        m(torch.randn(2, 7))
    with pytest.raises(ValueError, match="non-negative"):
        m(torch.randn(2, 8), -0.1)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(0.0, 2.0), scale=st.floats(0.1, 100.0))
def test_bound_holds_for_any_weights(seed, alpha, scale):
    alpha = float(np.float32(alpha))  # representable in the tensor dtype
    g = torch.Generator().manual_seed(seed)
    m = FeaturePerturbation(8, 8)
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.randn(p.shape, generator=g) * scale)
    e = torch.randn(16, 8, generator=g)
    assert (alpha * compute_delta(m, e)).abs().max().item() <= alpha
    # the difference also carries one float32 rounding of the addition
    slack = 2 * np.spacing(np.float32(e.abs().max().item() + alpha))
    assert (perturb(m, e, alpha) - e).abs().max().item() <= alpha + slack
