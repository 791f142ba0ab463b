"""Rectifier MLPs with Gaussian output heads, used for the latent-input model."""
from __future__ import annotations

import math

import torch
from torch import nn
from torch.nn import functional as F

from .tensor import DimensionMismatch


class MlpFunction(nn.Module):
    """ReLU trunk followed by a linear mean head and a variance head.

    ``positivity`` selects the variance transform: ``"softplus"`` gives
    ``softplus(z)``; ``"scaled-sigmoid"`` gives ``scale * sigmoid(z)`` where the
    scale is passed at call time.
    """

    def __init__(
        self, in_dim: int, out_dim: int, hidden=(100, 100, 100), positivity: str = "softplus",
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if positivity not in ("softplus", "scaled-sigmoid"):
            raise ValueError(f"unknown positivity transform {positivity!r}")
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.widths = [self.in_dim, *map(int, hidden)]
        self.positivity = positivity
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(self.widths[:-1], self.widths[1:]))
        self.mean_head = nn.Linear(self.widths[-1], self.out_dim)
        self.var_head = nn.Linear(self.widths[-1], self.out_dim)
        if generator is not None:
            self.reset_parameters(generator)

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator) -> None:
        """Redraw every weight and bias from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``, the
        ``nn.Linear`` default, using ``generator`` instead of the global RNG."""
        for layer in [*self.layers, self.mean_head, self.var_head]:
            bound = 1.0 / math.sqrt(layer.in_features)
            for p in (layer.weight, layer.bias):
                p.copy_((torch.rand(p.shape, generator=generator, dtype=p.dtype) * 2 - 1) * bound)

    def trunk(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"expected last dim {self.in_dim}, got {x.shape[-1]}")
        for layer in self.layers:
            x = F.relu(layer(x))
        return x

    def forward(self, x: torch.Tensor, scale: torch.Tensor | None = None):
        z = self.trunk(x)
        mean = self.mean_head(z)
        pre = self.var_head(z)
        if self.positivity == "softplus":
            var = F.softplus(pre) + 1e-8
        else:
            if scale is None:
                raise ValueError("scaled-sigmoid head needs a scale")
            var = scale * torch.sigmoid(pre)
        return mean, var

    def zero_(self) -> "MlpFunction":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


def gaussian_head(net: MlpFunction, x: torch.Tensor, scale=None):
    return net(x, scale)


def softplus_inverse(v: float) -> float:
    return v + math.log(-math.expm1(-v))
