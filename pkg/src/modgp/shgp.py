"""Heteroscedastic sparse GP: ``y = exp(w(x)) f(x) + eps``, ``eps ~ N(0, c exp(2 w(x)))``."""
from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .svgp import GaussianMarginals, InducingBlock, kl_to_prior, marginals
from .tensor import DEFAULT_JITTER, LOG_2PI, RngState, sample_std_normal


class ShgpModel(nn.Module):
    kind = "shgp"

    def __init__(
        self, Z, c: float = 1.0, w_prior_mean: float = 0.0, jitter: float = DEFAULT_JITTER, num_data=None, whiten=False
    ):
        super().__init__()
        self.f_block = InducingBlock(Z, jitter=jitter, num_data=num_data, whiten=whiten)
        self.w_block = InducingBlock(Z, prior_mean=w_prior_mean, learn_prior_mean=True, jitter=jitter, whiten=whiten)
        self.log_c = nn.Parameter(torch.tensor(math.log(c)))

    @property
    def c(self) -> torch.Tensor:
        return torch.exp(self.log_c)

    def elbo(self, X, y, n_total=None, rng: RngState | None = None) -> torch.Tensor:
        return shgp_elbo(self, X, y, n_total)

    def latent_marginals(self, X) -> tuple[GaussianMarginals, GaussianMarginals]:
        return marginals(self.f_block, X), marginals(self.w_block, X)

    @torch.no_grad()
    def noise_std(self, X) -> torch.Tensor:
        """Posterior-mean noise standard deviation ``sqrt(c) * exp(mu_w)``."""
        qw = marginals(self.w_block, X)
        return self.c.sqrt() * torch.exp(qw.mean)

    def predict(self, Xs, gh_points: int = 20):
        return shgp_predict(self, Xs, gh_points)

    @torch.no_grad()
    def predict_samples(self, Xs, samples_per_point: int, rng: RngState):
        qf, qw = self.latent_marginals(Xs)
        n, S = Xs.shape[0], samples_per_point
        w = qw.mean[:, None] + qw.variance.sqrt()[:, None] * sample_std_normal(rng, (n, S))
        scale = torch.exp(w)
        f = qf.mean[:, None] + qf.variance.sqrt()[:, None] * sample_std_normal(rng, (n, S))
        y = scale * f + scale * self.c.sqrt() * sample_std_normal(rng, (n, S))
        return y, scale * f


def expected_loglik_terms(y, f_mean, f_var, w_mean, w_var, c) -> torch.Tensor:
    """Per-point ``E[log N(y | e^w f, c e^{2w})]`` for independent Gaussian ``f`` and ``w``.

    Uses ``E[e^{-2w}] = exp(2 var - 2 mean)`` and ``E[e^{-w}] = exp(var / 2 - mean)``.
    """
    c = torch.as_tensor(c)
    r1 = torch.exp(2.0 * w_var - 2.0 * w_mean)
    r2 = torch.exp(0.5 * w_var - w_mean)
    quad = r1 * y**2 - 2.0 * y * r2 * f_mean + f_mean**2 + f_var
    return -0.5 * (LOG_2PI + torch.log(c)) - 0.5 * (2.0 * w_mean + quad / c)


def shgp_expected_loglik(model: ShgpModel, X, y, n_total=None) -> torch.Tensor:
    """Closed-form ``E_{q(w)q(f)}[log p(y | f, w)]`` scaled by ``N / |B|``."""
    n_total = X.shape[0] if n_total is None else n_total
    qf, qw = model.latent_marginals(X)
    per_point = expected_loglik_terms(y, qf.mean, qf.variance, qw.mean, qw.variance, model.c)
    return n_total / X.shape[0] * per_point.sum()


def shgp_elbo(model: ShgpModel, X, y, n_total=None) -> torch.Tensor:
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    return shgp_expected_loglik(model, X, y, n_total) - kl_to_prior(model.f_block) - kl_to_prior(model.w_block)


class ShgpPredictive:
    """Gauss-Hermite mixture approximation of ``p(y* | y)`` at a set of test inputs.

    Node ``j`` at test point ``i`` contributes a Gaussian with mean
    ``mu_f * exp(w_ij)`` and variance ``exp(2 w_ij) (nu_f + c)``.
    """

    def __init__(self, f_mean, f_var, w_mean, w_var, c, gh_points):
        nodes, weights = np.polynomial.hermite_e.hermegauss(gh_points)
        weights = weights / weights.sum()
        self.weights = weights
        self.w_nodes = w_mean[:, None] + np.sqrt(w_var)[:, None] * nodes[None, :]
        scale = np.exp(self.w_nodes)
        self.means = f_mean[:, None] * scale
        self.vars = scale**2 * (f_var[:, None] + c)
        self.f_mean, self.f_var, self.w_mean, self.w_var, self.c = f_mean, f_var, w_mean, w_var, c

    def logpdf(self, y) -> np.ndarray:
        """Log density; ``y`` has shape (n,) or (n, k)."""
        y = np.asarray(y, dtype=float)
        yy = y[..., None]
        means = self.means if y.ndim == 1 else self.means[:, None, :]
        var = self.vars if y.ndim == 1 else self.vars[:, None, :]
        comp = -0.5 * (np.log(2 * np.pi * var) + (yy - means) ** 2 / var) + np.log(self.weights)
        m = comp.max(-1, keepdims=True)
        return (m + np.log(np.exp(comp - m).sum(-1, keepdims=True)))[..., 0]

    def pdf(self, y) -> np.ndarray:
        return np.exp(self.logpdf(y))

    @property
    def mean(self) -> np.ndarray:
        return (self.means * self.weights).sum(-1)

    def sample(self, samples_per_point: int, rng: RngState) -> np.ndarray:
        n = self.means.shape[0]
        w = self.w_mean[:, None] + np.sqrt(self.w_var)[:, None] * sample_std_normal(rng, (n, samples_per_point)).numpy()
        scale = np.exp(w)
        std = scale * np.sqrt(self.f_var[:, None] + self.c)
        return self.f_mean[:, None] * scale + std * sample_std_normal(rng, (n, samples_per_point)).numpy()


@torch.no_grad()
def shgp_predict(model: ShgpModel, Xs, gh_points: int = 20) -> ShgpPredictive:
    if gh_points < 1:
        raise ValueError("gh_points must be >= 1")
    qf, qw = model.latent_marginals(Xs)
    return ShgpPredictive(
        qf.mean.numpy(), qf.variance.numpy(), qw.mean.numpy(), qw.variance.numpy(), float(model.c), gh_points
    )
