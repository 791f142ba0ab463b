"""Model construction from a config, the Adam training loop, and checkpoints."""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .data import Standardization, kmeans_init
from .kernels import SeArdKernel
from .shgp import ShgpModel
from .slgp import SlgpModel
from .smgp import SmgpModel
from .svgp import SvgpModel
from .tensor import RngState

CHECKPOINT_FORMAT = 1
MODEL_KINDS = ("svgp", "shgp", "smgp", "slgp")


class NonFiniteLoss(FloatingPointError):
    """Training produced a NaN/Inf objective; the model holds the last good parameters."""

    def __init__(self, iteration: int, trace):
        super().__init__(f"non-finite ELBO at iteration {iteration}")
        self.iteration = iteration
        self.trace = trace


@dataclass
class TrainConfig:
    lr: float = 0.005
    batch_size: int = 512
    iterations: int = 20000
    seed: int = 0
    num_inducing: int = 100
    num_experts: int = 4
    temperature: float = 0.01
    mc_samples: int = 10
    beta: float = 1.0
    d_w: int = 1
    d_h: int | None = None
    num_samples: int = 10
    gh_points: int = 20
    bound: str = "hybrid"
    hidden: tuple = (100, 100, 100)
    predict_encoder: str = "posterior"
    whiten: bool = True
    lengthscale: float = 1.0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.iterations < 0 or self.num_inducing < 1:
            raise ValueError("batch_size, iterations and num_inducing must be positive")
        if self.lengthscale <= 0:
            raise ValueError("lengthscale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_model(kind: str, X, cfg: TrainConfig):
    """Fresh model for standardized inputs ``X`` with k-means inducing inputs."""
    model = _fresh_model(kind, X, cfg)
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, SeArdKernel):
                mod.log_lengthscales.fill_(math.log(cfg.lengthscale))
    return model


def _fresh_model(kind: str, X, cfg: TrainConfig):
    X = np.asarray(X, dtype=float)
    N, d_x = X.shape
    M = min(cfg.num_inducing, N)
    Z = kmeans_init(X, M, cfg.seed)
    if kind == "svgp":
        return SvgpModel(Z, num_data=N, whiten=cfg.whiten)
    if kind == "shgp":
        return ShgpModel(Z, num_data=N, whiten=cfg.whiten)
    if kind == "smgp":
        return SmgpModel(Z, cfg.num_experts, cfg.temperature, cfg.mc_samples, num_data=N, whiten=cfg.whiten)
    if kind == "slgp":
        d_h = d_x + cfg.d_w if cfg.d_h is None else cfg.d_h
        extra = np.random.default_rng(cfg.seed + 1).standard_normal((M, d_h - d_x))
        return SlgpModel(
            np.hstack([Z, extra]), d_x, cfg.d_w, d_h, cfg.beta, cfg.num_samples, cfg.hidden,
            bound=cfg.bound, predict_encoder=cfg.predict_encoder, num_data=N, whiten=cfg.whiten,
            seed=cfg.seed,
        )
    raise ValueError(f"unknown model kind {kind!r}")


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def adam_train(model, X, y, cfg: TrainConfig, callbacks=(), rng: RngState | None = None):
    """Maximize the model's ELBO with Adam over shuffled minibatches.

    Returns a list of ``(iteration, elbo, wall_ms)``. Each callback is called as
    ``cb(iteration, elbo, model)`` after every step.
    """
    X = torch.as_tensor(np.asarray(X, dtype=float))
    y = torch.as_tensor(np.asarray(y, dtype=float)).reshape(-1)
    N = X.shape[0]
    B = min(cfg.batch_size, N)
    rng = RngState(cfg.seed) if rng is None else rng
    order_rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    perm, cursor = order_rng.permutation(N), 0
    trace = []
    last_good = _snapshot(model)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        if cursor + B > N:
            perm, cursor = order_rng.permutation(N), 0
        idx = torch.as_tensor(perm[cursor : cursor + B])
        cursor += B
        opt.zero_grad()
        elbo = model.elbo(X[idx], y[idx], N, rng)
        value = float(elbo.detach())
        if not np.isfinite(value):
            model.load_state_dict(last_good)
            raise NonFiniteLoss(it, trace)
        last_good = _snapshot(model)
        (-elbo).backward()
        opt.step()
        trace.append((it, value, (time.perf_counter() - start) * 1e3))
        for cb in callbacks:
            cb(it, value, model)
    return trace


def _is_whitened(model) -> bool:
    return any(m.whiten for m in model.modules() if hasattr(m, "whiten"))


def model_args(model) -> dict:
    args = {"whiten": _is_whitened(model)}
    if model.kind == "smgp":
        return {**args, "num_experts": model.num_experts, "temperature": model.temperature, "mc_samples": model.mc_samples}
    if model.kind == "slgp":
        return {**args, 
            "d_x": model.d_x, "d_w": model.d_w, "d_h": model.d_h, "beta": model.beta,
            "num_samples": model.num_samples, "hidden": model.prior_net.widths[1:], "bound": model.bound,
            "predict_encoder": model.predict_encoder,
        }
    return args


def _model_from_state(kind: str, args: dict, state: dict):
    whiten = args.get("whiten", False)
    if kind == "svgp":
        return SvgpModel(state["block.Z"], whiten=whiten)
    if kind == "shgp":
        return ShgpModel(state["f_block.Z"], whiten=whiten)
    if kind == "smgp":
        T = args["num_experts"]
        return SmgpModel(
            state["assignments.0.Z"], T, args["temperature"], args["mc_samples"],
            expert_Z=[state[f"experts.{t}.Z"] for t in range(T)], whiten=whiten,
        )
    if kind == "slgp":
        return SlgpModel(state["block.Z"], **args)
    raise ValueError(f"unknown model kind {kind!r}")


def save_checkpoint(path, model, cfg: TrainConfig | None = None, standardization: Standardization | None = None,
                    extra: dict | None = None) -> dict:
    """Write a JSON checkpoint; float values are stored with round-trip precision."""
    params = {
        name: {"shape": list(t.shape), "values": [float(v) for v in t.detach().reshape(-1).tolist()]}
        for name, t in model.state_dict().items()
    }
    doc = {
        "format": CHECKPOINT_FORMAT,
        "kind": model.kind,
        "model_args": model_args(model),
        "config": None if cfg is None else cfg.to_dict(),
        "seed": None if cfg is None else cfg.seed,
        "standardization": None if standardization is None else standardization.to_dict(),
        "params": params,
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(doc, indent=1))
    return doc


def load_checkpoint(path):
    """Returns ``(model, config, standardization, document)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    state = {
        k: torch.tensor(v["values"], dtype=torch.float64).reshape(v["shape"]) for k, v in doc["params"].items()
    }
    model = _model_from_state(doc["kind"], doc["model_args"], state)
    model.load_state_dict(state)
    cfg = None if doc.get("config") is None else TrainConfig.from_dict(doc["config"])
    rec = None if doc.get("standardization") is None else Standardization.from_dict(doc["standardization"])
    return model, cfg, rec, doc
