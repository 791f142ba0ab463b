"""Mixture of ``T`` sparse GP experts with GP-distributed assignment logits.

Training maximizes ``E_q(A)[log E_p(W|A)[exp(L_W)]] - KL terms`` where the
inner expectation over assignments uses Concrete (Gumbel-softmax) samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .svgp import InducingBlock, gaussian_expected_loglik, kl_to_prior, marginals
from .tensor import DEFAULT_JITTER, RngState, log_mean_exp, sample_gumbel, sample_std_normal


@dataclass
class AssignmentSample:
    weights: torch.Tensor  # (..., |B|, T), rows on the simplex


def concrete_sample(logits: torch.Tensor, temperature: float, rng: RngState, num_samples: int | None = None):
    """Relaxed one-hot draws ``softmax((logits + g) / temperature)``, ``g`` Gumbel."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    shape = tuple(logits.shape) if num_samples is None else (num_samples, *logits.shape)
    g = sample_gumbel(rng, shape)
    return AssignmentSample(torch.softmax((logits + g) / temperature, dim=-1))


class SmgpModel(nn.Module):
    kind = "smgp"

    def __init__(
        self,
        Z,
        num_experts: int = 4,
        temperature: float = 0.01,
        mc_samples: int = 10,
        noise_variance: float = 1.0,
        jitter: float = DEFAULT_JITTER,
        num_data=None,
        expert_Z=None,
        whiten: bool = False,
    ):
        super().__init__()
        if num_experts < 1:
            raise ValueError("need at least one expert")
        if temperature <= 0 or mc_samples < 1:
            raise ValueError("temperature must be positive and mc_samples >= 1")
        expert_Z = [Z] * num_experts if expert_Z is None else expert_Z
        self.experts = nn.ModuleList(
            [InducingBlock(z, jitter=jitter, num_data=num_data, whiten=whiten) for z in expert_Z]
        )
        self.assignments = nn.ModuleList([InducingBlock(Z, jitter=jitter, whiten=whiten) for _ in range(num_experts)])
        self.log_noise = nn.Parameter(torch.full((num_experts,), float(torch.log(torch.tensor(noise_variance)))))
        self.temperature = float(temperature)
        self.mc_samples = int(mc_samples)

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    @property
    def noise_variances(self) -> torch.Tensor:
        return torch.exp(self.log_noise)

    def expert_logliks(self, X, y) -> torch.Tensor:
        """(|B|, T) matrix of analytic per-point expected log-likelihoods under each expert."""
        cols = []
        for t, block in enumerate(self.experts):
            q = marginals(block, X)
            cols.append(gaussian_expected_loglik(y, q.mean, q.variance, self.noise_variances[t]))
        return torch.stack(cols, dim=-1)

    def logit_marginals(self, X):
        qs = [marginals(block, X) for block in self.assignments]
        return torch.stack([q.mean for q in qs], -1), torch.stack([q.variance for q in qs], -1)

    def kl(self) -> torch.Tensor:
        return sum(kl_to_prior(b) for b in self.experts) + sum(kl_to_prior(b) for b in self.assignments)

    def elbo(self, X, y, n_total=None, rng: RngState | None = None) -> torch.Tensor:
        return smgp_elbo(self, X, y, n_total, rng)

    @torch.no_grad()
    def predict_samples(self, Xs, samples_per_point: int, rng: RngState):
        return smgp_predict(self, Xs, samples_per_point, rng)


def partial_bound(model: SmgpModel, W: AssignmentSample, X, y, n_total=None, loglik=None) -> torch.Tensor:
    """``N/|B| * sum_i sum_t w_it * E_q(f_t)[log N(y_i | f_it, nu_t)]``; leading sample dims kept."""
    n_total = X.shape[0] if n_total is None else n_total
    ell = model.expert_logliks(X, y) if loglik is None else loglik
    return n_total / X.shape[0] * (W.weights * ell).sum((-1, -2))


def smgp_inner_terms(model: SmgpModel, X, y, n_total, rng: RngState) -> torch.Tensor:
    """``mc_samples`` partial-bound values for one reparameterized draw of the logits."""
    B, T = X.shape[0], model.num_experts
    eps = sample_std_normal(rng, (B, T))
    gumbel = sample_gumbel(rng, (model.mc_samples, B, T))
    return inner_terms_from_noise(model, X, y, n_total, eps, gumbel)


def inner_terms_from_noise(model: SmgpModel, X, y, n_total, eps, gumbel) -> torch.Tensor:
    """Partial bounds given standard-normal logit noise (B, T) and Gumbel noise (S, B, T)."""
    mean, var = model.logit_marginals(X)
    a = mean + var.sqrt() * eps
    W = AssignmentSample(torch.softmax((a + gumbel) / model.temperature, dim=-1))
    return partial_bound(model, W, X, y, n_total, loglik=model.expert_logliks(X, y))


def smgp_elbo(model: SmgpModel, X, y, n_total=None, rng: RngState | None = None) -> torch.Tensor:
    if rng is None:
        raise ValueError("smgp_elbo needs an RngState")
    values = smgp_inner_terms(model, X, y, n_total, rng)
    return log_mean_exp(values, 0) - model.kl()


def smgp_vi_elbo(model: SmgpModel, X, y, n_total=None, rng: RngState | None = None) -> torch.Tensor:
    """Jensen-inner counterpart: mean of the partial bounds instead of their log-mean-exp."""
    values = smgp_inner_terms(model, X, y, n_total, rng)
    return values.mean() - model.kl()


@torch.no_grad()
def smgp_predict(model: SmgpModel, Xs, samples_per_point: int, rng: RngState):
    """Sample logits, a hard expert per sample, that expert's f and its noise."""
    if samples_per_point < 1:
        raise ValueError("samples_per_point must be >= 1")
    n, S, T = Xs.shape[0], samples_per_point, model.num_experts
    a_mean, a_var = model.logit_marginals(Xs)
    a = a_mean[:, None, :] + a_var.sqrt()[:, None, :] * sample_std_normal(rng, (n, S, T))
    probs = torch.softmax(a, -1)
    choice = torch.multinomial(probs.reshape(-1, T), 1, generator=rng.generator).reshape(n, S)
    rng.position += 1
    qs = [marginals(b, Xs) for b in model.experts]
    f_mean = torch.stack([q.mean for q in qs], -1)
    f_std = torch.stack([q.variance for q in qs], -1).sqrt()
    mu = torch.gather(f_mean, 1, choice)
    sd = torch.gather(f_std, 1, choice)
    f = mu + sd * sample_std_normal(rng, (n, S))
    y = f + model.noise_variances[choice].sqrt() * sample_std_normal(rng, (n, S))
    return y, f
