"""Latent-input sparse GP with an amortized stochastic encoder.

Each point gets a latent input ``w ~ q(w | x, y)`` (prior ``p(w | x)``), an
encoded location ``h ~ q(h | x, w)`` (prior ``p(h | w) = N(phi(x, w), nu0 I)``)
and the GP lives on ``h``. Three bounds are provided: the hybrid bound, the
importance-weighted bound with the hybrid encoder prior, and the plain
variational bound.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .nn import MlpFunction
from .svgp import InducingBlock, NoiseParam, gaussian_expected_loglik, kl_to_prior, marginals
from .tensor import DEFAULT_JITTER, RngState, gaussian_kl_diag, log_mean_exp, log_normal_pdf, sample_std_normal

NOISE_FLOOR = 1e-6


class UnsupportedDimension(ValueError):
    pass


def phi(x: torch.Tensor, w: torch.Tensor, d_h: int) -> torch.Tensor:
    """``[x, w]`` zero-padded to width ``d_h``; batched over leading dims."""
    d = x.shape[-1] + w.shape[-1]
    if d_h < d:
        raise UnsupportedDimension(f"d_h={d_h} < d_x + d_w = {d}; dimensionality reduction is not supported")
    xw = torch.cat([x.expand(*w.shape[:-1], x.shape[-1]), w], -1)
    if d_h == d:
        return xw
    return torch.cat([xw, xw.new_zeros(*xw.shape[:-1], d_h - d)], -1)


@dataclass
class LatentBatchDraw:
    w: torch.Tensor  # (S, B, d_w)
    h: torch.Tensor  # (S, B, d_h)
    log_pw: torch.Tensor  # (S, B)
    log_qw: torch.Tensor  # (S, B)
    kl_w: torch.Tensor  # (B,)  analytic KL[q(w_i) || p(w_i)]
    log_ph: torch.Tensor  # (S, B)
    log_qh: torch.Tensor  # (S, B)
    kl_h: torch.Tensor  # (S, B) analytic KL[q(h_i | w_i^s) || p(h_i | w_i^s)]
    loglik: torch.Tensor  # (S, B) per-point expected log-likelihood at h
    scale: float  # N / |B|

    @property
    def num_samples(self) -> int:
        return self.w.shape[0]

    def partial_bounds(self) -> torch.Tensor:
        return self.scale * self.loglik.sum(-1)

    def log_w_ratio(self) -> torch.Tensor:
        return self.scale * (self.log_pw - self.log_qw).sum(-1)

    def log_h_ratio(self) -> torch.Tensor:
        return self.scale * (self.log_ph - self.log_qh).sum(-1)

    def h_kl(self) -> torch.Tensor:
        return self.scale * self.kl_h.sum(-1)

    def permute(self, order) -> "LatentBatchDraw":
        order = torch.as_tensor(order)
        fields = {k: getattr(self, k)[order] for k in ("w", "h", "log_pw", "log_qw", "log_ph", "log_qh", "kl_h", "loglik")}
        return LatentBatchDraw(kl_w=self.kl_w, scale=self.scale, **fields)


class SlgpModel(nn.Module):
    kind = "slgp"

    def __init__(
        self,
        Z,
        d_x: int,
        d_w: int = 1,
        d_h: int | None = None,
        beta: float = 0.01,
        num_samples: int = 10,
        hidden=(100, 100, 100),
        nu0: float = 0.01,
        noise_variance: float = 1.0,
        bound: str = "hybrid",
        predict_encoder: str = "posterior",
        jitter: float = DEFAULT_JITTER,
        num_data=None,
        whiten: bool = False,
        seed: int | None = None,
    ):
        super().__init__()
        d_h = d_x + d_w if d_h is None else d_h
        if d_h < d_x + d_w:
            raise UnsupportedDimension("d_h must be at least d_x + d_w")
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        if bound not in BOUNDS:
            raise ValueError(f"unknown bound {bound!r}")
        if predict_encoder not in ("posterior", "prior"):
            raise ValueError("predict_encoder must be 'posterior' or 'prior'")
        Z = torch.as_tensor(Z, dtype=torch.float64)
        if Z.shape[1] != d_h:
            raise ValueError(f"inducing inputs must have {d_h} columns")
        self.d_x, self.d_w, self.d_h = int(d_x), int(d_w), int(d_h)
        self.beta = float(beta)
        self.num_samples = int(num_samples)
        self.bound = bound
        self.predict_encoder = predict_encoder
        self.block = InducingBlock(Z, jitter=jitter, num_data=num_data, whiten=whiten)
        self.noise = NoiseParam(noise_variance, floor=NOISE_FLOOR)
        gen = None if seed is None else RngState(seed).generator
        self.prior_net = MlpFunction(d_x, d_w, hidden, "softplus", gen)
        self.posterior_net = MlpFunction(d_x + 1, d_w, hidden, "softplus", gen)
        self.encoder = MlpFunction(d_x + d_w, d_h, hidden, "scaled-sigmoid", gen)
        self.log_nu0 = nn.Parameter(torch.tensor(math.log(nu0)))

    @property
    def nu0(self) -> torch.Tensor:
        return torch.exp(self.log_nu0)

    def encode(self, X, w):
        """Mean/variance of ``q(h | x, w)`` and the prior mean ``phi(x, w)``."""
        xw = torch.cat([X.expand(*w.shape[:-1], X.shape[-1]), w], -1)
        mu_h, var_h = self.encoder(xw, self.nu0)
        return mu_h, var_h, phi(X, w, self.d_h)

    def expected_loglik(self, h, y) -> torch.Tensor:
        """Per-point ``E_q(f|h)[log N(y | f, nu_eps)]`` for ``h`` of shape (..., B, d_h)."""
        lead = h.shape[:-1]
        q = marginals(self.block, h.reshape(-1, self.d_h))
        return gaussian_expected_loglik(
            y.expand(lead), q.mean.reshape(lead), q.variance.reshape(lead), self.noise.variance
        )

    def elbo(self, X, y, n_total=None, rng: RngState | None = None) -> torch.Tensor:
        return BOUNDS[self.bound](self, X, y, n_total, rng)

    @torch.no_grad()
    def predict_samples(self, Xs, samples_per_point: int, rng: RngState):
        return slgp_predict(self, Xs, samples_per_point, rng)


def draw_latents(model: SlgpModel, X, y, n_total=None, rng: RngState | None = None, num_samples=None) -> LatentBatchDraw:
    """Reparameterized draws of ``w`` and ``h`` with their log-density ledger."""
    S = model.num_samples if num_samples is None else num_samples
    B = X.shape[0]
    n_total = B if n_total is None else n_total
    mu_p, var_p = model.prior_net(X)
    mu_q, var_q = model.posterior_net(torch.cat([X, y[:, None]], -1))
    w = mu_q + var_q.sqrt() * sample_std_normal(rng, (S, B, model.d_w))
    log_pw = log_normal_pdf(w, mu_p, var_p).sum(-1)
    log_qw = log_normal_pdf(w, mu_q, var_q).sum(-1)
    kl_w = gaussian_kl_diag(mu_q, var_q, mu_p, var_p).sum(-1)
    mu_h, var_h, prior_h = model.encode(X, w)
    h = mu_h + var_h.sqrt() * sample_std_normal(rng, (S, B, model.d_h))
    nu0 = model.nu0
    log_ph = log_normal_pdf(h, prior_h, nu0).sum(-1)
    log_qh = log_normal_pdf(h, mu_h, var_h).sum(-1)
    kl_h = gaussian_kl_diag(mu_h, var_h, prior_h, nu0).sum(-1)
    loglik = model.expected_loglik(h, y)
    return LatentBatchDraw(w, h, log_pw, log_qw, kl_w, log_ph, log_qh, kl_h, loglik, n_total / B)


def slgp_partial_bound(model: SlgpModel, X, y, h, n_total=None) -> torch.Tensor:
    """``N/|B|``-scaled analytic expected log-likelihood of the GP evaluated at inputs ``h``."""
    n_total = X.shape[0] if n_total is None else n_total
    return n_total / X.shape[0] * model.expected_loglik(h, y).sum(-1)


def hybrid_from_draw(model: SlgpModel, d: LatentBatchDraw) -> torch.Tensor:
    inner = log_mean_exp(d.partial_bounds() + d.log_w_ratio(), 0)
    return inner - model.beta * d.h_kl().mean() - kl_to_prior(model.block)


def iwvi_from_draw(model: SlgpModel, d: LatentBatchDraw) -> torch.Tensor:
    log_weights = d.partial_bounds() + d.log_w_ratio() + model.beta * d.log_h_ratio()
    return log_mean_exp(log_weights, 0) - kl_to_prior(model.block)


def vi_from_draw(model: SlgpModel, d: LatentBatchDraw) -> torch.Tensor:
    per_sample = d.partial_bounds() - model.beta * d.h_kl()
    return per_sample.mean() - d.scale * d.kl_w.sum() - kl_to_prior(model.block)


def slgp_elbo_hybrid(model, X, y, n_total=None, rng=None, num_samples=None) -> torch.Tensor:
    return hybrid_from_draw(model, draw_latents(model, X, y, n_total, rng, num_samples))


def slgp_elbo_iwvi(model, X, y, n_total=None, rng=None, num_samples=None) -> torch.Tensor:
    return iwvi_from_draw(model, draw_latents(model, X, y, n_total, rng, num_samples))


def slgp_elbo_vi(model, X, y, n_total=None, rng=None, num_samples=1) -> torch.Tensor:
    return vi_from_draw(model, draw_latents(model, X, y, n_total, rng, num_samples))


BOUNDS = {"hybrid": slgp_elbo_hybrid, "iwvi": slgp_elbo_iwvi, "vi": slgp_elbo_vi}


@torch.no_grad()
def slgp_predict(model: SlgpModel, Xs, samples_per_point: int, rng: RngState):
    """Samples of ``y*`` and ``f*`` obtained by pushing prior draws of ``w*`` through the model.

    ``h*`` comes from the learned encoder ``q(h | x*, w*)`` unless
    ``model.predict_encoder == "prior"``, in which case ``N(phi(x*, w*), nu0 I)``.
    """
    if samples_per_point < 1:
        raise ValueError("samples_per_point must be >= 1")
    n, S = Xs.shape[0], samples_per_point
    mu_p, var_p = model.prior_net(Xs)
    w = mu_p + var_p.sqrt() * sample_std_normal(rng, (S, n, model.d_w))
    mu_h, var_h, prior_h = model.encode(Xs, w)
    if model.predict_encoder == "prior":
        mu_h, var_h = prior_h, model.nu0.expand_as(prior_h)
    h = mu_h + var_h.sqrt() * sample_std_normal(rng, (S, n, model.d_h))
    q = marginals(model.block, h.reshape(-1, model.d_h))
    f = q.mean + q.variance.sqrt() * sample_std_normal(rng, q.mean.shape)
    y = f + model.noise.variance.sqrt() * sample_std_normal(rng, f.shape)
    return y.reshape(S, n).T.contiguous(), f.reshape(S, n).T.contiguous()
