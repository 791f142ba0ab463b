"""Sample-based evaluation: KDE negative log likelihood, run summaries, plot data."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ZeroBandwidth(ArithmeticError):
    pass


@dataclass
class PredictiveSampleSet:
    """Predictive draws, one row per test point (``samples`` is N* x S_pred)."""

    samples: np.ndarray
    f_samples: np.ndarray | None = None
    X: np.ndarray | None = None
    model_kind: str = ""
    seed: int = 0
    config_hash: str = ""
    standardized: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] < 2:
            raise ValueError("need an (N*, S_pred) sample matrix with S_pred >= 2")

    @property
    def num_points(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def destandardized(self, y_mean: float, y_std: float) -> "PredictiveSampleSet":
        if not self.standardized:
            raise ValueError("samples are already in original units")
        f = None if self.f_samples is None else self.f_samples * y_std + y_mean
        return PredictiveSampleSet(
            self.samples * y_std + y_mean, f, self.X, self.model_kind, self.seed, self.config_hash, False, dict(self.meta)
        )


def silverman_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Row-wise ``0.9 * min(std, IQR / 1.34) * n^(-1/5)``; falls back to std or IQR if one is zero."""
    s = np.atleast_2d(samples)
    n = s.shape[1]
    sd = s.std(axis=1, ddof=1)
    q75, q25 = np.percentile(s, [75, 25], axis=1)
    iqr = (q75 - q25) / 1.34
    spread = np.where((sd > 0) & (iqr > 0), np.minimum(sd, iqr), np.maximum(sd, iqr))
    return 0.9 * spread * n ** (-0.2)


@dataclass
class NllResult:
    per_point: np.ndarray
    bandwidth: np.ndarray
    fallback: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.per_point.mean())


def kde_nll(samples, y_true) -> NllResult:
    """Per-point negative log density of ``y_true`` under a Gaussian KDE of the samples.

    Rows whose samples are all identical use ``h = 1e-3 * (1 + |mean|)`` and are
    flagged in ``fallback``.
    """
    if isinstance(samples, PredictiveSampleSet):
        samples = samples.samples
    s = np.asarray(samples, dtype=float)
    y = np.asarray(y_true, dtype=float).reshape(-1)
    if s.ndim != 2 or s.shape[0] != y.shape[0]:
        raise ValueError("samples must be (N*, S) with one row per target")
    h = silverman_bandwidth(s)
    fallback = ~(h > 0)
    h = np.where(fallback, 1e-3 * (1.0 + np.abs(s.mean(1))), h)
    z = (y[:, None] - s) / h[:, None]
    log_k = -0.5 * z**2 - np.log(h)[:, None] - 0.5 * math.log(2 * math.pi)
    m = log_k.max(1, keepdims=True)
    log_d = m[:, 0] + np.log(np.exp(log_k - m).mean(1))
    return NllResult(-log_d, h, fallback)


def run_summary(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single run)."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("need at least one run")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


PLOT_COLUMNS = {
    "y_samples.csv": "x: test input (original units); y_sample: one draw from p(y*|y)",
    "f_samples.csv": "x: test input (original units); f_sample: one draw from p(f*|y)",
    "train.csv": "x: training input; y: training output (original units)",
    "trace.csv": "x: test input; columns: learned quantities named in the header",
}


def _write_pairs(path: Path, X, S, value_name, config_hash):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["x", value_name])
        for xi, row in zip(X, S):
            for v in row:
                w.writerow([repr(float(xi)), repr(float(v))])


def emit_plotdata(samples: PredictiveSampleSet, dataset, path, traces: dict | None = None) -> list[Path]:
    """Write sample clouds, training data and optional learned traces as CSV files under ``path``.

    A ``README.txt`` sidecar documents the columns of every file.
    """
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    if samples.X is None:
        raise ValueError("sample set carries no test inputs")
    x = np.asarray(samples.X, dtype=float)[:, 0]
    written = [out / "y_samples.csv"]
    _write_pairs(written[0], x, samples.samples, "y_sample", samples.config_hash)
    if samples.f_samples is not None:
        written.append(out / "f_samples.csv")
        _write_pairs(written[-1], x, samples.f_samples, "f_sample", samples.config_hash)
    if dataset is not None:
        written.append(out / "train.csv")
        with open(written[-1], "w", newline="") as fh:
            fh.write(f"# config_hash={samples.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["x", "y"])
            for xi, yi in zip(dataset.X[:, 0], dataset.y):
                w.writerow([repr(float(xi)), repr(float(yi))])
    if traces:
        written.append(out / "trace.csv")
        names = list(traces)
        with open(written[-1], "w", newline="") as fh:
            fh.write(f"# config_hash={samples.config_hash}\n")
            w = csv.writer(fh)
            w.writerow(["x", *names])
            for i, xi in enumerate(x):
                w.writerow([repr(float(xi))] + [repr(float(traces[k][i])) for k in names])
    with open(out / "README.txt", "w") as fh:
        fh.write(f"config_hash={samples.config_hash}\n")
        for p in written:
            fh.write(f"{p.name}: {PLOT_COLUMNS[p.name]}\n")
    return written


def read_pairs(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2)
