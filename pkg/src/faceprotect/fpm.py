"""Feature perturbation module: a bounded, learned shift of the identity embedding."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

DEFAULT_ALPHA = 0.05


class FeaturePerturbation(nn.Module):
    """``delta = tanh(w2 relu(w1 e + b1) + b2)``; ``perturbed = e + alpha * delta``.

    The perturbed embedding is deliberately left unnormalized.
    """

    def __init__(self, d_f: int = 128, d_h: int | None = None):
        super().__init__()
        self.d_f = d_f
        self.d_h = d_h if d_h is not None else 2 * d_f
        self.w1 = nn.Parameter(torch.empty(self.d_h, d_f))
        self.b1 = nn.Parameter(torch.zeros(self.d_h))
        self.w2 = nn.Parameter(torch.empty(d_f, self.d_h))
        self.b2 = nn.Parameter(torch.zeros(d_f))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        with torch.no_grad():
            self.w1.uniform_(-1 / math.sqrt(self.d_f), 1 / math.sqrt(self.d_f))
            self.w2.uniform_(-1 / math.sqrt(self.d_h), 1 / math.sqrt(self.d_h))
            self.b1.zero_()
            self.b2.zero_()

    def delta(self, src: torch.Tensor) -> torch.Tensor:
        if src.shape[-1] != self.d_f:
            raise ValueError(f"embedding has {src.shape[-1]} dims, module expects {self.d_f}")
        return torch.tanh(F.linear(F.relu(F.linear(src, self.w1, self.b1)), self.w2, self.b2))

    def forward(self, src: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
        if alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {alpha}")
        if alpha == 0:
            return src
        return src + alpha * self.delta(src)


def compute_delta(params: FeaturePerturbation, src: torch.Tensor) -> torch.Tensor:
    return params.delta(src)


def perturb(params: FeaturePerturbation, src: torch.Tensor, alpha: float = DEFAULT_ALPHA) -> torch.Tensor:
    return params(src, alpha)
