"""Float64 tensor helpers: jittered Cholesky, gradients and seeded sampling.

Everything here is a thin layer over :mod:`torch`; models only touch torch
through these helpers and the standard ``torch`` namespace.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

torch.set_default_dtype(torch.float64)

DEFAULT_JITTER = 1e-6
JITTER_CAP = 1e-2
LOG_2PI = math.log(2.0 * math.pi)


class NotPositiveDefinite(RuntimeError):
    """Cholesky failed even after escalating the jitter to its cap."""


class UntrackedInput(ValueError):
    """An input passed to :func:`grad` did not take part in the graph."""


class DimensionMismatch(ValueError):
    pass


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def cholesky(A: torch.Tensor, jitter: float = DEFAULT_JITTER, cap: float = JITTER_CAP) -> torch.Tensor:
    """Lower Cholesky factor of ``A + jitter * I``.

    On failure the jitter is multiplied by 10 and the factorization retried
    until ``cap`` is exceeded. A zero jitter escalates from ``DEFAULT_JITTER``.
    """
    if A.shape[-1] != A.shape[-2]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {tuple(A.shape)}")
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    current = float(jitter)
    while True:
        L, info = torch.linalg.cholesky_ex(A + current * eye if current > 0 else A)
        if not bool(torch.any(info != 0)) and bool(torch.all(torch.isfinite(L))):
            return L
        current = DEFAULT_JITTER if current == 0 else current * 10.0
        if current > cap:
            raise NotPositiveDefinite(f"matrix not positive definite with jitter up to {cap:g}")


def tri_solve(L: torch.Tensor, B: torch.Tensor, upper: bool = False) -> torch.Tensor:
    """Solve ``L X = B`` (or ``L^T X = B`` when ``upper``) for lower-triangular ``L``."""
    if upper:
        return torch.linalg.solve_triangular(L.transpose(-1, -2), B, upper=True)
    return torch.linalg.solve_triangular(L, B, upper=False)


def cho_solve(L: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    return torch.cholesky_solve(B, L)


def grad(output: torch.Tensor, inputs: list[torch.Tensor]) -> list[torch.Tensor]:
    """Gradient of a scalar ``output`` with respect to each tensor in ``inputs``.

    The graph is retained so repeated calls return identical results.
    """
    if output.numel() != 1:
        raise ValueError(f"grad needs a scalar output, got shape {tuple(output.shape)}")
    grads = torch.autograd.grad(output.reshape(()), inputs, retain_graph=True, allow_unused=True)
    for i, g in enumerate(grads):
        if g is None:
            raise UntrackedInput(f"input {i} did not participate in the graph")
    return list(grads)


@dataclass
class RngState:
    """Seeded random stream. Same seed plus same call sequence gives the same draws."""

    seed: int
    position: int = 0
    _gen: torch.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self._gen = torch.Generator().manual_seed(int(self.seed) % (2**63))

    @property
    def generator(self) -> torch.Generator:
        return self._gen

    def spawn(self, index: int) -> "RngState":
        """Independent child stream derived from ``(seed, index)``."""
        state = np.random.SeedSequence([int(self.seed), int(index)]).generate_state(2, dtype=np.uint32)
        return RngState(int(state[0]) << 31 | int(state[1]) >> 1)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> torch.Tensor:
        self.position += 1
        return low + (high - low) * torch.rand(tuple(shape), generator=self._gen)


def sample_std_normal(rng: RngState, shape) -> torch.Tensor:
    rng.position += 1
    return torch.randn(tuple(shape), generator=rng.generator)


def sample_gumbel(rng: RngState, shape) -> torch.Tensor:
    """Standard Gumbel draws as ``-log(-log(u))`` with ``u`` uniform in (0, 1)."""
    tiny = torch.finfo(torch.float64).tiny
    u = rng.uniform(shape).clamp(min=tiny, max=1.0 - 1e-16)
    return -torch.log(-torch.log(u))


def log_normal_pdf(x: torch.Tensor, mean: torch.Tensor, var: torch.Tensor) -> torch.Tensor:
    return -0.5 * (LOG_2PI + torch.log(var) + (x - mean) ** 2 / var)


def log_mean_exp(x: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """``log(mean(exp(x)))`` along ``dim`` with max subtraction."""
    return torch.logsumexp(x, dim=dim) - math.log(x.shape[dim])


def gaussian_kl_diag(mq, vq, mp, vp) -> torch.Tensor:
    """Elementwise KL[N(mq, vq) || N(mp, vp)] for diagonal Gaussians."""
    return 0.5 * (torch.log(vp) - torch.log(vq) + (vq + (mq - mp) ** 2) / vp - 1.0)
