"""Sparse variational GP pieces shared by every model.

An :class:`InducingBlock` holds inducing inputs ``Z`` and the variational
Gaussian ``q(u) = N(m, S)`` in the unwhitened parameterization, with ``S``
stored through its Cholesky factor (log-diagonal, free lower triangle).
With ``whiten=True`` the stored pair is ``(v, L_v)`` and
``m = mu0 + L v``, ``S = L L_v L_v^T L^T`` with ``L = chol(K_mm)``: the same
distribution in coordinates that stay well conditioned when ``K_mm`` is not.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import torch
from torch import nn

from .kernels import SeArdKernel
from .tensor import DEFAULT_JITTER, LOG_2PI, RngState, cholesky, sample_std_normal, tri_solve


@dataclass
class GaussianMarginals:
    mean: torch.Tensor
    variance: torch.Tensor
    covariance: torch.Tensor | None = None


class InducingBlock(nn.Module):
    def __init__(
        self,
        Z,
        kernel: SeArdKernel | None = None,
        prior_mean: float | None = None,
        learn_prior_mean: bool = False,
        s_scale: float = 0.1,
        jitter: float = DEFAULT_JITTER,
        num_data: int | None = None,
        whiten: bool = False,
    ):
        super().__init__()
        Z = torch.as_tensor(Z, dtype=torch.float64)
        if Z.dim() != 2 or Z.shape[0] < 1:
            raise ValueError("Z must be a non-empty (M, d) array")
        if num_data is not None and Z.shape[0] > num_data:
            warnings.warn(f"{Z.shape[0]} inducing points for {num_data} data points", stacklevel=2)
        self.jitter = jitter
        self.whiten = bool(whiten)
        self.kernel = kernel if kernel is not None else SeArdKernel(Z.shape[1])
        self.Z = nn.Parameter(Z.clone())
        M = Z.shape[0]
        mu0 = 0.0 if prior_mean is None else float(prior_mean)
        if learn_prior_mean:
            self.prior_mean = nn.Parameter(torch.tensor(mu0))
        else:
            self.register_buffer("prior_mean", torch.tensor(mu0))
        self.q_mu = nn.Parameter(torch.zeros(M) if self.whiten else torch.full((M,), mu0))
        with torch.no_grad():
            if self.whiten:
                L = s_scale * torch.eye(M)
            else:
                L = cholesky(self.kernel.gram(self.Z), jitter) * s_scale
        self.q_sqrt_log_diag = nn.Parameter(torch.log(torch.diagonal(L)).clone())
        self.q_sqrt_lower = nn.Parameter(torch.tril(L, -1).clone())

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Z.shape[1]

    def q_sqrt(self) -> torch.Tensor:
        return torch.tril(self.q_sqrt_lower, -1) + torch.diag_embed(torch.exp(self.q_sqrt_log_diag))

    def set_q_sqrt(self, L) -> None:
        L = torch.as_tensor(L, dtype=torch.float64)
        with torch.no_grad():
            self.q_sqrt_log_diag.copy_(torch.log(torch.diagonal(L)))
            self.q_sqrt_lower.copy_(torch.tril(L, -1))

    def Kmm_cholesky(self) -> torch.Tensor:
        return cholesky(self.kernel.gram(self.Z), self.jitter)

    def u_mean(self) -> torch.Tensor:
        """Mean ``m`` of ``q(u)`` in function-value coordinates."""
        if self.whiten:
            return self.Kmm_cholesky() @ self.q_mu + self.prior_mean
        return self.q_mu

    def u_sqrt(self) -> torch.Tensor:
        """A square-root factor of ``S`` in function-value coordinates."""
        if self.whiten:
            return self.Kmm_cholesky() @ self.q_sqrt()
        return self.q_sqrt()


def marginals(block: InducingBlock, X: torch.Tensor, want_full: bool = False) -> GaussianMarginals:
    """Mean and (co)variance of ``q(f)`` at ``X``.

    mean = K_nm K_mm^-1 (m - mu0) + mu0
    cov  = K_nn - K_nm K_mm^-1 (K_mm - S) K_mm^-1 K_mn
    """
    L = block.Kmm_cholesky()
    Kmn = block.kernel.gram(block.Z, X)
    A = tri_solve(L, Kmn)  # L^-1 K_mn
    mu0 = block.prior_mean
    if block.whiten:
        mean = A.T @ block.q_mu + mu0
        C = block.q_sqrt().T @ A
    else:
        B = tri_solve(L, A, upper=True)  # K_mm^-1 K_mn
        mean = B.T @ (block.q_mu - mu0) + mu0
        C = block.q_sqrt().T @ B  # L_S^T K_mm^-1 K_mn
    if want_full:
        cov = block.kernel.gram(X) - A.T @ A + C.T @ C
        return GaussianMarginals(mean, torch.diagonal(cov).clone(), cov)
    var = block.kernel.gram_diag(X) - (A * A).sum(0) + (C * C).sum(0)
    return GaussianMarginals(mean, var.clamp_min(1e-12))


def kl_to_prior(block: InducingBlock) -> torch.Tensor:
    """KL[N(m, S) || N(mu0 * 1, K_mm)] in closed form."""
    Ls = block.q_sqrt()
    M = block.num_inducing
    if block.whiten:
        return 0.5 * ((Ls**2).sum() + (block.q_mu**2).sum() - M - 2.0 * block.q_sqrt_log_diag.sum())
    L = block.Kmm_cholesky()
    diff = (block.q_mu - block.prior_mean)[:, None]
    alpha = tri_solve(L, diff)
    trace = (tri_solve(L, Ls) ** 2).sum()
    logdet_k = 2.0 * torch.log(torch.diagonal(L)).sum()
    logdet_s = 2.0 * block.q_sqrt_log_diag.sum()
    return 0.5 * (trace + (alpha**2).sum() - M + logdet_k - logdet_s)


class NoiseParam(nn.Module):
    """Gaussian observation noise variance stored as ``floor + exp(log_value)``."""

    def __init__(self, variance: float = 1.0, floor: float = 0.0):
        super().__init__()
        self.floor = float(floor)
        self.log_variance = nn.Parameter(torch.tensor(math.log(max(variance - floor, 1e-300))))

    @property
    def variance(self) -> torch.Tensor:
        return self.floor + torch.exp(self.log_variance)


def gaussian_expected_loglik(y, mean, var, noise_var) -> torch.Tensor:
    """Per-point ``E_{N(f|mean,var)}[log N(y | f, noise_var)]``."""
    return -0.5 * (LOG_2PI + torch.log(noise_var) + ((y - mean) ** 2 + var) / noise_var)


def svgp_expected_loglik(block, noise: NoiseParam, X, y, n_total: int | None = None) -> torch.Tensor:
    n_total = X.shape[0] if n_total is None else n_total
    q = marginals(block, X)
    return n_total / X.shape[0] * gaussian_expected_loglik(y, q.mean, q.variance, noise.variance).sum()


def svgp_elbo(block, noise: NoiseParam, X, y, n_total: int | None = None) -> torch.Tensor:
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if n_total is not None and n_total < X.shape[0]:
        raise ValueError("n_total smaller than the batch")
    return svgp_expected_loglik(block, noise, X, y, n_total) - kl_to_prior(block)


def svgp_predict(block, noise: NoiseParam, Xs) -> GaussianMarginals:
    q = marginals(block, Xs)
    return GaussianMarginals(q.mean, q.variance + noise.variance)


class SvgpModel(nn.Module):
    """Homoscedastic sparse variational GP regression, the baseline model."""

    kind = "svgp"

    def __init__(self, Z, noise_variance: float = 1.0, jitter: float = DEFAULT_JITTER, num_data=None, whiten=False):
        super().__init__()
        self.block = InducingBlock(Z, jitter=jitter, num_data=num_data, whiten=whiten)
        self.noise = NoiseParam(noise_variance)

    def elbo(self, X, y, n_total=None, rng: RngState | None = None) -> torch.Tensor:
        return svgp_elbo(self.block, self.noise, X, y, n_total)

    def predict(self, Xs) -> GaussianMarginals:
        return svgp_predict(self.block, self.noise, Xs)

    @torch.no_grad()
    def predict_samples(self, Xs, samples_per_point: int, rng: RngState):
        q = marginals(self.block, Xs)
        eps_f = sample_std_normal(rng, (Xs.shape[0], samples_per_point))
        eps_y = sample_std_normal(rng, (Xs.shape[0], samples_per_point))
        f = q.mean[:, None] + q.variance.sqrt()[:, None] * eps_f
        y = f + self.noise.variance.sqrt() * eps_y
        return y, f
