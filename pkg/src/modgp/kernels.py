"""Squared-exponential kernel with automatic relevance determination."""
from __future__ import annotations

import math

import torch
from torch import nn

from .tensor import DimensionMismatch


class SeArdKernel(nn.Module):
    """``k(x, x') = variance * exp(-0.5 * sum_k (x_k - x'_k)^2 / lengthscale_k^2)``.

    Lengthscales and variance are stored as logs so they stay positive under
    unconstrained optimization.
    """

    def __init__(self, input_dim: int, lengthscale: float = 1.0, variance: float = 1.0):
        super().__init__()
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.input_dim = int(input_dim)
        self.log_lengthscales = nn.Parameter(torch.full((self.input_dim,), math.log(lengthscale)))
        self.log_variance = nn.Parameter(torch.tensor(math.log(variance)))

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    def _check(self, A: torch.Tensor) -> None:
        if A.dim() != 2 or A.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (n, {self.input_dim}) inputs, got {tuple(A.shape)}")

    def gram(self, A: torch.Tensor, B: torch.Tensor | None = None) -> torch.Tensor:
        self._check(A)
        B = A if B is None else B
        self._check(B)
        a = A / self.lengthscales
        b = B / self.lengthscales
        sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
        if B is A:
            # exact zeros on the diagonal, symmetric result
            sq = 0.5 * (sq + sq.T)
            sq = sq - torch.diag_embed(torch.diagonal(sq))
        return self.variance * torch.exp(-0.5 * sq.clamp_min(0.0))

    def gram_diag(self, A: torch.Tensor) -> torch.Tensor:
        self._check(A)
        return self.variance.expand(A.shape[0]).clone()

    def forward(self, A, B=None):
        return self.gram(A, B)


def gram(kernel: SeArdKernel, A, B) -> torch.Tensor:
    return kernel.gram(A, B)


def gram_diag(kernel: SeArdKernel, A) -> torch.Tensor:
    return kernel.gram_diag(A)
