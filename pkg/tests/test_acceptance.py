"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The lines are also collected and shown in the pytest terminal summary under
"acceptance criteria". Criteria 4 to 7 train models at full toy or UCI scale
and dominate the runtime (about two hours on one CPU core).
"""
import gc
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from sklearn.cluster import KMeans
from sklearn.metrics import silhouette_score

from modgp.cli import run_split
from modgp.data import gen_toy, heteroscedastic_noise_std, load_csv, standardize
from modgp.data import test_grid as input_grid
from modgp.evalkit import kde_nll, run_summary
from modgp.shgp import ShgpModel, shgp_elbo, shgp_expected_loglik
from modgp.slgp import SlgpModel, slgp_elbo_hybrid, slgp_elbo_iwvi, slgp_elbo_vi
from modgp.smgp import SmgpModel, concrete_sample, inner_terms_from_noise, smgp_elbo, smgp_vi_elbo
from modgp.svgp import InducingBlock, NoiseParam, marginals, svgp_elbo
from modgp.tensor import LOG_2PI, RngState, log_mean_exp, sample_gumbel, sample_std_normal
from modgp.training import TrainConfig, adam_train, build_model

import conftest
from conftest import gradient_rel_error

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def report(number, passed, detail):
    line = f"ACCEPTANCE {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}"
    conftest.ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def randomize_block(block, rng, scale=0.5):
    M = block.num_inducing
    with torch.no_grad():
        block.kernel.log_lengthscales.copy_(torch.tensor(rng.normal(0, 0.3, block.input_dim)))
        block.kernel.log_variance.fill_(rng.normal(0, 0.3))
        block.q_mu.copy_(torch.tensor(rng.normal(0, scale, M)))
        block.q_sqrt_log_diag.copy_(torch.tensor(rng.normal(-1.0, 0.3, M)))
        block.q_sqrt_lower.copy_(torch.tril(torch.tensor(rng.normal(0, 0.2, (M, M))), -1))


def toy_config(**overrides):
    settings = dict(lr=0.005, iterations=10000, num_inducing=50, num_experts=4, mc_samples=10,
                    num_samples=10, beta=0.01, d_w=1, hidden=(100, 100, 100))
    settings.update(overrides)
    return TrainConfig(**settings)


def train(kind, ds, cfg):
    model = build_model(kind, ds.X, cfg)
    adam_train(model, ds.X, ds.y, cfg)
    return model


# 1 ---------------------------------------------------------------------------


def test_criterion_01_shgp_closed_form_vs_monte_carlo():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    S = 10**6
    for case in range(20):
        N, M = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        model = ShgpModel(rng.uniform(-2, 2, (M, 1)), c=float(rng.uniform(0.2, 2.0)), w_prior_mean=rng.normal(0, 0.3),
                          whiten=True)
        randomize_block(model.f_block, rng, 1.0)
        randomize_block(model.w_block, rng, 0.5)
        X = torch.tensor(rng.uniform(-2, 2, (N, 1)))
        y = torch.tensor(rng.normal(0, 1.5, N))
        draws = RngState(case)
        with torch.no_grad():
            analytic = shgp_expected_loglik(model, X, y).item()
            qf = marginals(model.f_block, X, want_full=True)
            qw = marginals(model.w_block, X, want_full=True)
            jitter = 1e-12 * torch.eye(N)
            f = qf.mean + sample_std_normal(draws, (S, N)) @ torch.linalg.cholesky(qf.covariance + jitter).T
            w = qw.mean + sample_std_normal(draws, (S, N)) @ torch.linalg.cholesky(qw.covariance + jitter).T
            c = model.c
            logp = (-0.5 * (LOG_2PI + torch.log(c) + 2 * w) - 0.5 * (y - torch.exp(w) * f) ** 2 / (c * torch.exp(2 * w)))
            per_draw = logp.sum(1)
        se = per_draw.std().item() / math.sqrt(S)
        worst = max(worst, abs(per_draw.mean().item() - analytic) / se)
    elapsed = time.perf_counter() - start
    ok = worst <= 3.0 and elapsed < 120
    report(1, ok, f"SHGP closed form vs 1e6-sample MC on 20 models: worst |diff| = {worst:.2f} SE (<= 3), {elapsed:.0f}s")
    assert ok


# 2 ---------------------------------------------------------------------------


def exact_log_marginal(kernel, noise_var, X, y):
    K = kernel.gram(X) + noise_var * torch.eye(X.shape[0])
    L = torch.linalg.cholesky(K)
    a = torch.cholesky_solve(y[:, None], L)
    return (-0.5 * (y[:, None] * a).sum() - torch.log(torch.diagonal(L)).sum() - 0.5 * len(y) * LOG_2PI).item()


def test_criterion_02_bound_ordering():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    gaps = []
    with torch.no_grad():
        for _ in range(50):
            N, M, d = int(rng.integers(1, 21)), int(rng.integers(1, 8)), int(rng.integers(1, 3))
            block = InducingBlock(rng.uniform(-2, 2, (M, d)), whiten=bool(rng.integers(2)))
            randomize_block(block, rng, 1.0)
            nv = float(rng.uniform(0.05, 1.0))
            X = torch.tensor(rng.uniform(-2, 2, (N, d)))
            y = torch.tensor(rng.standard_normal(N))
            gaps.append(exact_log_marginal(block.kernel, nv, X, y) - svgp_elbo(block, NoiseParam(nv), X, y).item())
    part_a = min(gaps) >= -1e-9

    slgp = SlgpModel(rng.standard_normal((5, 2)), 1, 1, beta=1.0, hidden=(20, 20), noise_variance=0.2, seed=3)
    Xs = torch.tensor(rng.uniform(-1, 1, (8, 1)))
    ys = torch.tensor(rng.standard_normal(8))
    with torch.no_grad():
        s1 = np.mean([slgp_elbo_iwvi(slgp, Xs, ys, 8, RngState(s), num_samples=1).item() for s in range(100)])
        s10 = np.mean([slgp_elbo_iwvi(slgp, Xs, ys, 8, RngState(s), num_samples=10).item() for s in range(100)])
    part_b = s10 >= s1

    smgp = SmgpModel(rng.uniform(-1.5, 1.5, (3, 1)), num_experts=3, mc_samples=10)
    for b in [*smgp.experts, *smgp.assignments]:
        randomize_block(b, rng, 1.0)
    Xm = torch.tensor(rng.uniform(-2, 2, (6, 1)))
    ym = torch.tensor(rng.standard_normal(6))
    with torch.no_grad():
        lme = np.array([smgp_elbo(smgp, Xm, ym, 6, RngState(s)).item() for s in range(100)])
        vi = np.array([smgp_vi_elbo(smgp, Xm, ym, 6, RngState(s)).item() for s in range(100)])
    part_c = bool(np.all(lme >= vi - 1e-12))
    elapsed = time.perf_counter() - start
    ok = part_a and part_b and part_c and elapsed < 300
    report(2, ok, f"(a) min(exact - svgp_elbo) = {min(gaps):.3g} over 50 problems; "
                  f"(b) IWVI S=10 {s10:.3f} vs S=1 {s1:.3f}; (c) lme >= VI on {int((lme >= vi - 1e-12).sum())}/100 "
                  f"paired draws (mean gap {np.mean(lme - vi):.3f}); {elapsed:.0f}s")
    assert ok


# 3 ---------------------------------------------------------------------------


def test_criterion_03_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    errors = {}

    def check(name, fn, params):
        errors[name] = max(errors.get(name, 0.0), gradient_rel_error(fn, params))

    for trial in range(3):
        whiten = bool(trial % 2)
        N = 5
        X = torch.tensor(rng.uniform(-2, 2, (N, 1)))
        y = torch.tensor(rng.standard_normal(N))

        block = InducingBlock(rng.uniform(-2, 2, (3, 1)), whiten=whiten)
        randomize_block(block, rng)
        noise = NoiseParam(0.3)
        check("svgp", lambda: svgp_elbo(block, noise, X, y, 20), [*block.parameters(), *noise.parameters()])

        shgp = ShgpModel(rng.uniform(-2, 2, (3, 1)), whiten=whiten)
        randomize_block(shgp.f_block, rng)
        randomize_block(shgp.w_block, rng)
        check("shgp", lambda: shgp_elbo(shgp, X, y, 20), list(shgp.parameters()))

        smgp = SmgpModel(rng.uniform(-2, 2, (2, 1)), num_experts=2, mc_samples=5, whiten=whiten)
        for b in [*smgp.experts, *smgp.assignments]:
            randomize_block(b, rng)
        r = RngState(trial)
        eps, gum = sample_std_normal(r, (N, 2)), sample_gumbel(r, (5, N, 2))

        def smgp_frozen():
            return log_mean_exp(inner_terms_from_noise(smgp, X, y, 20, eps, gum), 0) - smgp.kl()

        check("smgp", smgp_frozen, list(smgp.parameters()))

        slgp = SlgpModel(rng.standard_normal((3, 2)), 1, 1, beta=0.5, num_samples=3, hidden=(4,), seed=trial,
                         noise_variance=0.3, whiten=whiten)
        randomize_block(slgp.block, rng)
        for name, bound in (("slgp-hybrid", slgp_elbo_hybrid), ("slgp-iwvi", slgp_elbo_iwvi), ("slgp-vi", slgp_elbo_vi)):
            check(name, lambda: bound(slgp, X, y, 20, RngState(7 + trial)), list(slgp.parameters()))
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    ok = worst <= 1e-4 and elapsed < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    report(3, ok, f"max relative FD error {worst:.1e} (<= 1e-4; Concrete temperature 0.01): {detail}; {elapsed:.0f}s")
    assert ok


# 4 ---------------------------------------------------------------------------


def full_elbo(model, ds):
    with torch.no_grad():
        return model.elbo(torch.tensor(ds.X), torch.tensor(ds.y), len(ds.y), RngState(0)).item()


@pytest.mark.slow
def test_criterion_04_heteroscedastic_toy():
    start = time.perf_counter()
    raw = gen_toy("heteroscedastic", seed=0)
    ds = standardize(raw)
    rec = ds.standardization
    grid = input_grid(raw, 500)
    # two restarts; the objective, not the oracle, picks the one kept
    fits = [train("shgp", ds, toy_config(lengthscale=ls)) for ls in (1.0, 0.2)]
    elbos = [full_elbo(m, ds) for m in fits]
    shgp = fits[int(np.argmax(elbos))]
    learned = shgp.noise_std(torch.tensor(rec.transform_x(grid))).numpy()
    r = float(np.corrcoef(learned, heteroscedastic_noise_std(grid[:, 0]))[0, 1])
    slgp = train("slgp", ds, toy_config())
    nu_eps = slgp.noise.variance.item()
    elapsed = time.perf_counter() - start
    ok = r >= 0.9 and nu_eps <= 0.05 and elapsed < 900
    report(4, ok, f"SHGP noise-std Pearson r = {r:.3f} (>= 0.9; kept restart with ELBO {max(elbos):.1f} "
                  f"over {min(elbos):.1f}); SLGP nu_eps = {nu_eps:.4f} (<= 0.05); {elapsed:.0f}s")
    assert ok


# 5 ---------------------------------------------------------------------------


def branch_silhouette(samples):
    values = samples.reshape(-1, 1)
    labels = KMeans(2, n_init=5, random_state=0).fit_predict(values)
    return float(silhouette_score(values, labels)), labels


@pytest.mark.slow
def test_criterion_05_step_toy_bimodal():
    start = time.perf_counter()
    raw = gen_toy("step", seed=0)
    ds = standardize(raw)
    rec = ds.standardization
    smgp = train("smgp", ds, toy_config())
    near = np.linspace(0.48, 0.52, 21)[:, None]
    ys, _ = smgp.predict_samples(torch.tensor(rec.transform_x(near)), 200, RngState(1))
    ys = rec.inverse_y(ys.numpy())
    score, labels = branch_silhouette(ys)
    lo = ys.reshape(-1)[labels == labels[np.argmin(ys)]].mean()
    hi = ys.reshape(-1)[labels != labels[np.argmin(ys)]].mean()
    elapsed = time.perf_counter() - start
    ok = score >= 0.6 and elapsed < 600
    report(5, ok, f"SMGP (T=4) samples on x in [0.48, 0.52]: silhouette {score:.3f} (>= 0.6), branches at "
                  f"{lo:.2f} / {hi:.2f}; {elapsed:.0f}s")
    assert ok


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_06_moon_slgp_beats_svgp():
    nll = {"slgp": [], "svgp": []}
    for seed in range(3):
        raw = gen_toy("moon", seed=seed)
        test = gen_toy("moon", seed=100 + seed)
        ds = standardize(raw)
        rec = ds.standardization
        Xs = torch.tensor(rec.transform_x(test.X))
        for kind in nll:
            model = train(kind, ds, toy_config(seed=seed))
            ys, _ = model.predict_samples(Xs, 200, RngState(seed))
            nll[kind].append(kde_nll(ys.numpy(), rec.transform_y(test.y)).mean)
    gap = np.mean(nll["svgp"]) - np.mean(nll["slgp"])
    ok = gap >= 0.5
    report(6, ok, f"moon test NLL over 3 seeds: SLGP {np.mean(nll['slgp']):.3f}, SVGP {np.mean(nll['svgp']):.3f}, "
                  f"gap {gap:.3f} (>= 0.5)")
    assert ok


# 7 ---------------------------------------------------------------------------

UCI_TARGETS = [
    ("energy", "shgp", 1.0762, 0.3),
    ("energy", "slgp", 0.6821, 0.5),
    ("wine-red", "slgp", 0.6663, 0.4),
    ("concrete", "shgp", 2.9706, 0.3),
]


def uci_benchmark(name, kind, splits=10):
    raw = load_csv(DATA_DIR / f"{name}.csv")
    cfg = TrainConfig(lr=0.005, batch_size=512, iterations=20000, num_inducing=100, beta=1.0, num_samples=10)
    results = [run_split(kind, raw, cfg, i, 200) for i in range(splits)]
    return run_summary([r[2] for r in results])  # reference values are in original units


@pytest.mark.slow
def test_criterion_07_uci_reproduction():
    start = time.perf_counter()
    parts, ok = [], True
    baselines = {}
    for name, kind, target, tol in UCI_TARGETS:
        if not (DATA_DIR / f"{name}.csv").exists():
            parts.append(f"{name}/{kind}: dataset not available offline")
            ok = False
            continue
        mean, sd = uci_benchmark(name, kind)
        if name not in baselines:
            baselines[name] = uci_benchmark(name, "svgp")[0]
        hit = abs(mean - target) <= tol
        beats = mean < baselines[name] if name in ("energy", "concrete") else True
        ok &= hit and beats
        parts.append(f"{name}/{kind} {mean:.4f}+-{sd:.4f} vs {target} (+-{tol}) {'ok' if hit else 'miss'}, "
                     f"SVGP {baselines[name]:.4f} {'beaten' if beats else 'not beaten'}")
    report(7, ok, "; ".join(parts) + f"; {time.perf_counter() - start:.0f}s")
    assert ok


# 8 ---------------------------------------------------------------------------


def test_criterion_08_concrete_relaxation():
    rng = RngState(808)
    logits = torch.zeros(4, dtype=torch.float64)
    n = 10**4
    w = concrete_sample(logits.expand(n, 4), 0.01, rng).weights
    frac_hard = (w.max(-1).values >= 0.999).double().mean().item()

    skewed = torch.tensor([1.0, 0.0, -0.5, -2.0], dtype=torch.float64)
    ws = concrete_sample(skewed.expand(n, 4), 0.01, rng).weights
    freq = torch.bincount(ws.argmax(-1), minlength=4).double() / n
    p = torch.softmax(skewed, 0)
    z = ((freq - p).abs() / (p * (1 - p) / n).sqrt()).max().item()
    ok = frac_hard >= 0.99 and z <= 3.0
    report(8, ok, f"lambda=0.01, T=4: max component >= 0.999 in {100 * frac_hard:.2f}% of 1e4 draws (>= 99%; "
                  f"the Gumbel gap caps this near 95% for equal logits); argmax frequency max |z| = {z:.2f} (<= 3)")
    assert ok


# 9 ---------------------------------------------------------------------------


def enumerate_moments(model, X, y, a):
    """Exact ``log E[exp(L)]`` and ``log E[exp(2L)]`` over every hard assignment of the batch."""
    import itertools

    ell = model.expert_logliks(X, y)
    logp = torch.log_softmax(a, -1)
    rows = torch.arange(X.shape[0])
    log_prob, value = [], []
    for z in itertools.product(range(ell.shape[1]), repeat=X.shape[0]):
        z = torch.tensor(z)
        log_prob.append(logp[rows, z].sum())
        value.append(ell[rows, z].sum())
    log_prob, value = torch.stack(log_prob), torch.stack(value)
    return torch.logsumexp(log_prob + value, 0).item(), torch.logsumexp(log_prob + 2 * value, 0).item()


def test_criterion_09_mixture_enumeration_oracle():
    rng = np.random.default_rng(909)
    worst = 0.0
    S = 10**4
    with torch.no_grad():
        for case in range(20):
            model = SmgpModel(rng.uniform(-1.5, 1.5, (2, 1)), num_experts=2, mc_samples=S, whiten=True)
            for b in [*model.experts, *model.assignments]:
                randomize_block(b, rng, 1.0)
            model.log_noise.copy_(torch.tensor(rng.normal(-1.0, 0.3, 2)))
            X = torch.tensor(rng.uniform(-2, 2, (3, 1)))
            y = torch.tensor(rng.standard_normal(3))
            r = RngState(case)
            eps, gum = sample_std_normal(r, (3, 2)), sample_gumbel(r, (S, 3, 2))
            mean, var = model.logit_marginals(X)
            a = mean + var.sqrt() * eps
            values = inner_terms_from_noise(model, X, y, 3, eps, gum)
            estimate = log_mean_exp(values, 0).item()
            first, second = enumerate_moments(model, X, y, a)
            # delta-method SE of the log of a mean, from the exact moments
            se = math.sqrt(math.expm1(second - 2 * first) / S)
            worst = max(worst, abs(estimate - first) / se)
    ok = worst <= 3.0
    report(9, ok, f"N=3, T=2 enumeration vs Concrete MC (S=1e4) on 20 instances: worst |diff| = {worst:.2f} SE (<= 3)")
    assert ok


# 10 --------------------------------------------------------------------------


def timing_data(N, d=4, seed=1):
    # spread-out inputs keep K_mm well conditioned, so no jitter retries skew the timing
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, d))
    return X, np.sin(X.sum(1)) + 0.1 * rng.standard_normal(N)


def step_ms(kind, X, y, cfg, iterations=150, warmup=20):
    run_cfg = TrainConfig.from_dict({**cfg.to_dict(), "iterations": iterations + warmup})
    model = build_model(kind, X, cfg)
    # as timeit does: collection pauses depend on whatever else the process holds
    gc.collect()
    gc.disable()
    try:
        trace = adam_train(model, X, y, run_cfg)
    finally:
        gc.enable()
    return float(np.median(np.diff([t[2] for t in trace])[warmup - 1 :]))


def interleaved_ms(runs, repeats=5):
    """Best-of-``repeats`` median step time per run. Each round visits every run
    once, so slow phases of the machine hit all settings alike."""
    best = [math.inf] * len(runs)
    for _ in range(repeats):
        for i, (kind, X, y, cfg) in enumerate(runs):
            best[i] = min(best[i], step_ms(kind, X, y, cfg))
    return best


def test_criterion_10_complexity_contract():
    base = TrainConfig(batch_size=512, num_inducing=100, mc_samples=10, num_samples=10, hidden=(100, 100, 100))
    sizes = (10**3, 10**4, 10**5)
    data = {N: timing_data(N) for N in sizes}
    flat = {}
    for kind in ("svgp", "shgp", "smgp", "slgp"):
        times = interleaved_ms([(kind, *data[N], base) for N in sizes])
        flat[kind] = (times, max(times) / min(times))
    Ts = np.array([2, 4, 8])
    t_T = np.array(interleaved_ms(
        [("smgp", *data[10**4], TrainConfig.from_dict({**base.to_dict(), "num_experts": int(T)})) for T in Ts]
    ))
    slope, intercept = np.polyfit(Ts, t_T, 1)
    pred = slope * Ts + intercept
    r2 = 1 - ((t_T - pred) ** 2).sum() / ((t_T - t_T.mean()) ** 2).sum()
    ok = all(ratio <= 1.25 for _, ratio in flat.values()) and r2 >= 0.95
    detail = ", ".join(f"{k} {'/'.join(f'{t:.1f}' for t in ts)} ms (max/min {ratio:.2f})" for k, (ts, ratio) in flat.items())
    report(10, ok, f"N in 1e3/1e4/1e5 (4-D inputs), |B|=512, M=100: {detail} (<= 1.25); SMGP T=2/4/8: "
                   f"{'/'.join(f'{t:.1f}' for t in t_T)} ms, linear R^2 = {r2:.3f} (>= 0.95)")
    assert ok
