import numpy as np
import pytest
import torch

import modgp  # noqa: F401  (float64 default)


def flat_params(params):
    return torch.cat([p.detach().reshape(-1) for p in params])


def fd_gradient(fn, params, step=1e-5):
    """Central finite differences of scalar ``fn()`` w.r.t. every entry of ``params``."""
    out = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(fn())
                flat[i] = orig - step
                down = float(fn())
                flat[i] = orig
                gflat[i] = (up - down) / (2 * step)
            out.append(g)
    return torch.cat([g.reshape(-1) for g in out])


def autodiff_gradient(fn, params):
    value = fn()
    grads = torch.autograd.grad(value, params, allow_unused=True)
    return torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1) for p, g in zip(params, grads)])


def gradient_rel_error(fn, params, step=1e-5):
    ad = autodiff_gradient(fn, params)
    fd = fd_gradient(fn, params, step)
    return float(torch.linalg.norm(ad - fd) / torch.linalg.norm(fd).clamp_min(1e-12))


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


def random_spd(rng, n, cond=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    eig = np.linspace(1.0, cond, n)
    return (Q * eig) @ Q.T


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
