import numpy as np
import pytest
import torch

from faceprotect.extractor import IdentityExtractor


def central_diff_check(f, tensors, eps=1e-5, coords=None, directions=0, seed=0):
    """Worst relative error between autograd and central differences of scalar ``f``.

    ``tensors`` are float64 leaves read by ``f``. Per tensor, the checked
    coordinates (all, or ``coords`` sampled ones) are compared norm-wise,
    ||a - n|| / max(||a||, ||n||); each of ``directions`` random directional
    derivatives is compared as |a - n| / max(|a|, |n|).
    """
    gen = torch.Generator().manual_seed(seed)
    for t in tensors:
        t.grad = None
    f().backward()
    grads = [t.grad.clone() for t in tensors]
    worst = 0.0

    def fd(t, v):
        with torch.no_grad():
            orig = t.clone()
            t.add_(eps * v)
            hi = f().item()
            t.copy_(orig - eps * v)
            lo = f().item()
            t.copy_(orig)
        return (hi - lo) / (2 * eps)

    def rel(a, n):
        a, n = np.asarray(a, float), np.asarray(n, float)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        return 0.0 if scale == 0 else float(np.linalg.norm(a - n) / scale)

    for t, g in zip(tensors, grads):
        n = t.numel()
        idx = range(n) if coords is None or coords >= n else torch.randperm(n, generator=gen)[:coords].tolist()
        a_vals, n_vals = [], []
        for i in idx:
            v = torch.zeros_like(t)
            v.view(-1)[i] = 1.0
            a_vals.append(g.view(-1)[i].item())
            n_vals.append(fd(t, v))
        worst = max(worst, rel(a_vals, n_vals))
        for _ in range(directions):
            v = torch.randn(t.shape, generator=gen, dtype=t.dtype)
            worst = max(worst, rel([(g * v).sum().item()], [fd(t, v)]))
    return worst


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def tiny_extractor():
    """Untrained but frozen extractor on 16 px inputs; deterministic weights."""
    torch.manual_seed(0)
    return IdentityExtractor("base", d_f=8, resolution=16).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
