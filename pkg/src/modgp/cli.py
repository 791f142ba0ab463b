"""Command-line entry point: ``modgp {gen-toy,train,predict,evaluate,benchmark,replay}``.

Every command writes a ``<command>.manifest.json`` next to its outputs. The
manifest records the fully resolved argument list, so ``modgp replay`` can
re-run it. Each artifact starts with the run's config hash.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (
    TOY_SIZES,
    Dataset,
    ParseError,
    gen_toy,
    load_csv,
    load_features,
    standardize,
    test_grid,
    train_test_split,
)
from .evalkit import PredictiveSampleSet, emit_plotdata, kde_nll, run_summary
from .tensor import RngState
from .training import (
    MODEL_KINDS,
    NonFiniteLoss,
    TrainConfig,
    adam_train,
    build_model,
    config_hash,
    load_checkpoint,
    save_checkpoint,
)

OUTPUT_ENV = "MODGP_OUTPUT_DIR"
TOY_MARKER = "modgp-toy"
TOY_DEFAULTS = {"num_inducing": 50, "iterations": 10000}
CSV_DEFAULTS = {"num_inducing": 100, "iterations": 20000}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_out() -> str:
    return os.environ.get(OUTPUT_ENV, "modgp-out")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _is_toy(path) -> bool:
    with open(path) as fh:
        return TOY_MARKER in fh.readline()


def _hidden(text: str) -> tuple:
    try:
        widths = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("hidden widths must be positive")
    return widths


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--target", default=None, help="target column (default: last)")
    p.add_argument("--m", type=int, default=None, help="inducing points (toy 50, CSV 100)")
    p.add_argument("--iters", type=int, default=None, help="Adam iterations (toy 10000, CSV 20000)")
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--batch", type=int, default=None, help="minibatch size (default min(512, N))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--experts", type=int, default=4, help="SMGP experts T")
    p.add_argument("--temperature", type=float, default=0.01, help="Concrete temperature")
    p.add_argument("--mc-samples", type=int, default=10, help="SMGP assignment draws")
    p.add_argument("--beta", type=float, default=1.0, help="SLGP hybrid prior weight")
    p.add_argument("--d-w", type=int, default=1)
    p.add_argument("--d-h", type=int, default=None)
    p.add_argument("--samples", type=int, default=10, help="SLGP importance samples")
    p.add_argument("--bound", default="hybrid", choices=["hybrid", "iwvi", "vi"])
    p.add_argument("--hidden", type=_hidden, default=(100, 100, 100), help="MLP widths, e.g. 100,100,100")
    p.add_argument("--gh-points", type=int, default=20)
    p.add_argument("--predict-encoder", default="posterior", choices=["posterior", "prior"])
    p.add_argument("--no-whiten", action="store_true", help="optimize q(u) in unwhitened coordinates")
    p.add_argument("--lengthscale", type=float, default=1.0, help="initial kernel lengthscale")


def build_parser() -> Parser:
    parser = Parser(prog="modgp", description="Scalable modulated Gaussian process experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-toy", help="write a toy dataset CSV")
    p.add_argument("--case", required=True, choices=sorted(TOY_SIZES))
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1, help="moon noise level")
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="fit a model on a whole CSV file")
    _add_train_flags(p)
    p.add_argument("--out", default=None)

    p = sub.add_parser("predict", help="draw predictive samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="CSV whose feature columns are the test inputs")
    src.add_argument("--grid", type=int, help="evenly spaced 1-D grid over the training range")
    p.add_argument("--num-samples", type=int, default=200, help="draws per test point")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plotdata", action="store_true", help="also write plot-data CSVs (1-D inputs)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("evaluate", help="KDE negative log likelihood of predictive samples")
    p.add_argument("--samples", required=True, help="directory written by predict")
    p.add_argument("--data", required=True, help="CSV holding the true targets")
    p.add_argument("--target", default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("benchmark", help="repeated 90/10 splits for one model and dataset")
    _add_train_flags(p)
    p.add_argument("--splits", type=int, default=10)
    p.add_argument("--workers", type=int, default=1, help="splits trained concurrently in threads")
    p.add_argument("--num-samples", type=int, default=200, help="predictive draws per test point")
    p.add_argument("--out", default=None)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="override the recorded output directory")
    return parser


def train_config(args, toy: bool, n_train: int) -> TrainConfig:
    defaults = TOY_DEFAULTS if toy else CSV_DEFAULTS
    return TrainConfig(
        lr=args.lr,
        batch_size=min(512, n_train) if args.batch is None else args.batch,
        iterations=defaults["iterations"] if args.iters is None else args.iters,
        seed=args.seed,
        num_inducing=defaults["num_inducing"] if args.m is None else args.m,
        num_experts=args.experts,
        temperature=args.temperature,
        mc_samples=args.mc_samples,
        beta=args.beta,
        d_w=args.d_w,
        d_h=args.d_h,
        num_samples=args.samples,
        gh_points=args.gh_points,
        bound=args.bound,
        hidden=args.hidden,
        predict_encoder=args.predict_encoder,
        whiten=not args.no_whiten,
        lengthscale=args.lengthscale,
    )


def resolved_argv(command: str, values: dict) -> list[str]:
    """Flag list reproducing ``values``; ``None`` entries are dropped."""
    argv = [command]
    for key, v in values.items():
        if v is None or v is False:
            continue
        flag = "--" + key.replace("_", "-")
        if v is True:
            argv.append(flag)
        elif isinstance(v, (tuple, list)):
            argv += [flag, ",".join(str(x) for x in v)]
        else:
            argv += [flag, str(v)]
    return argv


def write_manifest(out: Path, command: str, values: dict, chash: str, inputs: dict, outputs: list,
                   extra: dict | None = None) -> Path:
    doc = {
        **(extra or {}),
        "tool": "modgp",
        "version": __version__,
        "command": command,
        "config_hash": chash,
        "argv": resolved_argv(command, values),
        "options": values,
        "inputs": inputs,
        "outputs": sorted(str(Path(p).relative_to(out)) for p in outputs),
    }
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


PATH_KEYS = ("data", "checkpoint", "samples", "out")


def _hash_of(command: str, values: dict, inputs: dict) -> str:
    """Hash of the options and input file contents; file locations do not count."""
    options = {k: v for k, v in values.items() if k not in PATH_KEYS}
    return config_hash({"command": command, "options": options, "inputs": inputs})


def _abs(path) -> str | None:
    return None if path is None else str(Path(path).resolve())


def _out_dir(args) -> Path:
    out = Path(args.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, chash: str, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _fmt(v: float) -> str:
    return repr(float(v))


def cmd_gen_toy(args) -> int:
    out = _out_dir(args)
    n = TOY_SIZES[args.case] if args.n is None else args.n
    if n < 1:
        raise UsageError("--n must be >= 1")
    values = {"case": args.case, "n": n, "seed": args.seed, "noise": args.noise, "out": _abs(out)}
    chash = _hash_of("gen-toy", values, {})
    ds = gen_toy(args.case, n, args.seed, args.noise)
    path = out / f"toy-{args.case}.csv"
    ds.to_csv(path, comment=f"{TOY_MARKER} case={args.case} config_hash={chash}")
    write_manifest(out, "gen-toy", values, chash, {}, [path])
    print(path)
    return 0


def _train_values(args, cfg: TrainConfig) -> dict:
    return {
        "model": args.model, "data": _abs(args.data), "target": args.target, "m": cfg.num_inducing,
        "iters": cfg.iterations, "lr": cfg.lr, "batch": cfg.batch_size, "seed": cfg.seed,
        "experts": cfg.num_experts, "temperature": cfg.temperature, "mc_samples": cfg.mc_samples,
        "beta": cfg.beta, "d_w": cfg.d_w, "d_h": cfg.d_h, "samples": cfg.num_samples, "bound": cfg.bound,
        "hidden": list(cfg.hidden), "gh_points": cfg.gh_points, "predict_encoder": cfg.predict_encoder,
        "no_whiten": not cfg.whiten, "lengthscale": cfg.lengthscale,
    }


def _check_config(cfg: TrainConfig, n: int) -> None:
    if cfg.batch_size > n:
        raise UsageError(f"--batch {cfg.batch_size} exceeds the {n} training rows")
    if cfg.num_inducing > n:
        raise UsageError(f"--m {cfg.num_inducing} exceeds the {n} training rows")


def _train_and_save(model, ds: Dataset, cfg: TrainConfig, out: Path, chash: str, prefix: str = ""):
    """Train, then write the loss trace and timing files. Returns (trace, written paths)."""
    written = []
    try:
        trace = adam_train(model, ds.X, ds.y, cfg)
        error = None
    except NonFiniteLoss as exc:
        trace, error = exc.trace, exc
    written.append(_write_rows(out / f"{prefix}loss_trace.csv", chash, ["iteration", "elbo"],
                               ([it, _fmt(v)] for it, v, _ in trace)))
    written.append(_write_rows(out / f"{prefix}timing.csv", chash, ["iteration", "wall_ms"],
                               ([it, f"{ms:.3f}"] for it, _, ms in trace)))
    if error is not None:
        raise error
    return trace, written


def cmd_train(args) -> int:
    out = _out_dir(args)
    raw = load_csv(args.data, args.target)
    cfg = train_config(args, _is_toy(args.data), len(raw))
    _check_config(cfg, len(raw))
    values = _train_values(args, cfg)
    inputs = {"data": _sha256(args.data)}
    chash = _hash_of("train", values, inputs)
    ds = standardize(raw)
    model = build_model(args.model, ds.X, cfg)
    written = []
    try:
        trace, written = _train_and_save(model, ds, cfg, out, chash)
    finally:
        ckpt = out / "checkpoint.json"
        extra = {"config_hash": chash, "data": _abs(args.data), "target": raw.target_name,
                 "features": raw.feature_names}
        save_checkpoint(ckpt, model, cfg, ds.standardization, extra)
        write_manifest(out, "train", {**values, "out": _abs(out)}, chash, inputs, [ckpt, *written])
    print(f"final elbo {trace[-1][1]:.4f}" if trace else "no iterations run")
    return 0


@torch.no_grad()
def draw_samples(model, X: np.ndarray, S: int, rng: RngState):
    y, f = model.predict_samples(torch.as_tensor(X, dtype=torch.float64), S, rng)
    return y.numpy(), f.numpy()


def _write_samples(path: Path, chash: str, X: np.ndarray, S: np.ndarray) -> Path:
    header = [f"x{j}" for j in range(X.shape[1])] + [f"s{k}" for k in range(S.shape[1])]
    return _write_rows(path, chash, header, ([_fmt(v) for v in (*xi, *si)] for xi, si in zip(X, S)))


def _read_samples(path: Path, d: int) -> tuple[np.ndarray, np.ndarray]:
    arr = np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
    return arr[:, :d], arr[:, d:]


def cmd_predict(args) -> int:
    out = _out_dir(args)
    if args.num_samples < 2:
        raise UsageError("--num-samples must be >= 2")
    model, cfg, rec, doc = load_checkpoint(args.checkpoint)
    if rec is None:
        raise UsageError("checkpoint carries no standardization record")
    inputs = {"checkpoint": _sha256(args.checkpoint)}
    train_ds = None
    if doc.get("data") and Path(doc["data"]).exists():
        train_ds = load_csv(doc["data"], doc.get("target"))
    if args.grid is not None:
        if train_ds is None or train_ds.dim != 1:
            raise UsageError("--grid needs the 1-D training CSV recorded in the checkpoint")
        X = test_grid(train_ds, args.grid)
    else:
        inputs["data"] = _sha256(args.data)
        features = doc.get("features") or [f"x{j}" for j in range(len(rec.x_mean))]
        X = load_features(args.data, features)
    values = {"checkpoint": _abs(args.checkpoint), "data": _abs(args.data), "grid": args.grid,
              "num_samples": args.num_samples, "seed": args.seed, "plotdata": args.plotdata}
    chash = _hash_of("predict", values, inputs)
    ys, fs = draw_samples(model, rec.transform_x(X), args.num_samples, RngState(args.seed))
    ss = PredictiveSampleSet(ys, fs, X, model.kind, args.seed, chash, standardized=True)
    ss = ss.destandardized(rec.y_mean, rec.y_std)
    written = [_write_samples(out / "samples.csv", chash, X, ss.samples),
               _write_samples(out / "f_samples.csv", chash, X, ss.f_samples)]
    (out / "standardization.json").write_text(json.dumps(rec.to_dict(), indent=2) + "\n")
    written.append(out / "standardization.json")
    if args.plotdata:
        if X.shape[1] != 1:
            raise UsageError("--plotdata needs 1-D inputs")
        written += emit_plotdata(ss, train_ds, out / "plot", _latent_traces(model, rec.transform_x(X)))
    write_manifest(out, "predict", {**values, "out": _abs(out)}, chash, inputs, written, {"model_kind": model.kind})
    print(out / "samples.csv")
    return 0


@torch.no_grad()
def _latent_traces(model, Xs: np.ndarray) -> dict | None:
    """Learned quantities worth plotting next to the samples, in standardized units."""
    Xt = torch.as_tensor(Xs, dtype=torch.float64)
    if model.kind == "shgp":
        _, qw = model.latent_marginals(Xt)
        sd = qw.variance.sqrt()
        return {"w_mean": qw.mean.numpy(), "w_lower": (qw.mean - 2 * sd).numpy(), "w_upper": (qw.mean + 2 * sd).numpy(),
                "noise_std": model.noise_std(Xt).numpy()}
    if model.kind == "smgp":
        mu, _ = model.logit_marginals(Xt)
        return {f"logit_{t}": mu[:, t].numpy() for t in range(mu.shape[1])}
    return None


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    sdir = Path(args.samples)
    manifest = json.loads((sdir / "predict.manifest.json").read_text())
    rec = json.loads((sdir / "standardization.json").read_text())
    truth = load_csv(args.data, args.target)
    X, S = _read_samples(sdir / "samples.csv", truth.dim)
    if S.shape[0] != len(truth):
        raise UsageError(f"{S.shape[0]} sample rows but {len(truth)} targets")
    if not np.allclose(X, truth.X):
        raise UsageError("sample inputs do not match the evaluation data")
    inputs = {"samples": _sha256(sdir / "samples.csv"), "data": _sha256(args.data)}
    values = {"samples": _abs(sdir), "data": _abs(args.data), "target": args.target}
    chash = _hash_of("evaluate", values, inputs)
    res = kde_nll(S, truth.y)
    shift = float(np.log(rec["y_std"]))
    row = [Path(args.data).stem, manifest["model_kind"], manifest["options"]["seed"],
           _fmt(res.mean - shift), _fmt(res.mean), int(res.fallback.sum())]
    path = _write_rows(out / "nll_report.csv", chash,
                       ["dataset", "model", "seed", "mean_nll", "mean_nll_original_units", "fallback_points"], [row])
    write_manifest(out, "evaluate", {**values, "out": _abs(out)}, chash, inputs, [path])
    print(f"mean NLL (standardized units) {res.mean - shift:.4f}")
    return 0


def run_split(kind: str, raw: Dataset, cfg: TrainConfig, split: int, num_samples: int):
    """One benchmark split.

    Returns ``(split seed, test NLL in standardized units, test NLL in original units, trace)``.
    """
    child = RngState(cfg.seed).spawn(split)
    train_raw, test_raw = train_test_split(raw, child.seed)
    train = standardize(train_raw)
    rec = train.standardization
    split_cfg = TrainConfig.from_dict({**cfg.to_dict(), "seed": child.seed})
    model = build_model(kind, train.X, split_cfg)
    trace = adam_train(model, train.X, train.y, split_cfg, rng=child.spawn(0))
    ys, _ = draw_samples(model, rec.transform_x(test_raw.X), num_samples, child.spawn(1))
    nll = kde_nll(ys, rec.transform_y(test_raw.y)).mean
    return child.seed, nll, nll + float(np.log(rec.y_std)), trace


def cmd_benchmark(args) -> int:
    out = _out_dir(args)
    raw = load_csv(args.data, args.target)
    if args.splits < 1 or args.workers < 1:
        raise UsageError("--splits and --workers must be >= 1")
    n_train = len(train_test_split(raw, 0)[0])
    cfg = train_config(args, _is_toy(args.data), n_train)
    _check_config(cfg, n_train)
    values = {**_train_values(args, cfg), "splits": args.splits, "num_samples": args.num_samples}
    inputs = {"data": _sha256(args.data)}
    chash = _hash_of("benchmark", values, inputs)
    start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        futures = [pool.submit(run_split, args.model, raw, cfg, i, args.num_samples) for i in range(args.splits)]
        results = [f.result() for f in futures]
    name = Path(args.data).stem
    rows = [[name, args.model, i, seed, _fmt(nll), _fmt(orig)] for i, (seed, nll, orig, _) in enumerate(results)]
    mean, sd = run_summary([r[1] for r in results])
    mean_o, sd_o = run_summary([r[2] for r in results])
    written = [_write_rows(out / "nll_report.csv", chash,
                           ["dataset", "model", "split", "seed", "mean_nll", "mean_nll_original_units"], rows)]
    written.append(_write_rows(
        out / "summary.csv", chash,
        ["dataset", "model", "splits", "mean_nll", "std_nll", "mean_nll_original_units", "std_nll_original_units"],
        [[name, args.model, args.splits, _fmt(mean), _fmt(sd), _fmt(mean_o), _fmt(sd_o)]],
    ))
    written.append(_write_rows(out / "loss_traces.csv", chash, ["split", "iteration", "elbo"],
                               ([i, it, _fmt(v)] for i, (*_, tr) in enumerate(results) for it, v, _ in tr)))
    (out / "timing.txt").write_text(f"config_hash={chash}\nwall_seconds={time.perf_counter() - start:.1f}\n")
    written.append(out / "timing.txt")
    values["workers"] = args.workers
    write_manifest(out, "benchmark", {**values, "out": _abs(out)}, chash, inputs, written)
    print(f"{name} {args.model}: NLL {mean:.4f} +- {sd:.4f} (original units {mean_o:.4f} +- {sd_o:.4f}) "
          f"over {args.splits} splits")
    return 0


def cmd_replay(args) -> int:
    doc = json.loads(Path(args.manifest).read_text())
    argv = list(doc["argv"])
    if args.out is not None:
        if "--out" in argv:
            i = argv.index("--out")
            del argv[i : i + 2]
        argv += ["--out", args.out]
    return main(argv)


COMMANDS = {
    "gen-toy": cmd_gen_toy,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "replay": cmd_replay,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"modgp: error: {exc}", file=sys.stderr)
        return 1
    except (ParseError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"modgp: error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLoss as exc:
        print(f"modgp: numerical abort: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
