"""Datasets: toy generators, CSV loading, standardization and splits."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    pass


class NonNumericColumn(ParseError):
    pass


@dataclass
class Standardization:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "y_mean": float(self.y_mean),
            "y_std": float(self.y_std),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Standardization":
        return cls(np.asarray(d["x_mean"], float), np.asarray(d["x_std"], float), float(d["y_mean"]), float(d["y_std"]))

    def transform_x(self, X):
        return (np.asarray(X, float) - self.x_mean) / self.x_std

    def transform_y(self, y):
        return (np.asarray(y, float) - self.y_mean) / self.y_std

    def inverse_x(self, X):
        return np.asarray(X, float) * self.x_std + self.x_mean

    def inverse_y(self, y):
        return np.asarray(y, float) * self.y_std + self.y_mean


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    target_name: str = "y"
    standardization: Standardization | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.shape[0] or self.X.shape[0] < 1:
            raise ValueError("X and y must have the same, positive number of rows")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("dataset contains missing or non-finite values")
        if not self.feature_names:
            self.feature_names = [f"x{i}" for i in range(self.X.shape[1])]

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, X=self.X[idx], y=self.y[idx])

    def to_csv(self, path, comment: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow([*self.feature_names, self.target_name])
            for xi, yi in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])


TOY_SIZES = {"heteroscedastic": 1000, "step": 500, "moon": 200}


def heteroscedastic_mean(x):
    return np.cos(5 * x) * np.exp(-0.5 * x)


def heteroscedastic_noise_std(x):
    return 0.25 * np.abs(np.cos(6 * x + 1)) * np.exp(-x)


def gen_toy(case: str, n: int | None = None, seed: int = 0, noise: float = 0.1) -> Dataset:
    """Toy regression data.

    * ``heteroscedastic``: x ~ U[-2, 2], y = cos(5x) e^{-x/2} + 0.25 cos(6x+1) e^{-x} eps
    * ``step``: x ~ U[0, 1], y = 0 below x = 0.5 and 1 above, plus N(0, 1e-4) noise
    * ``moon``: first and second coordinates of the two-moons generator as x and y
    """
    if case not in TOY_SIZES:
        raise ValueError(f"unknown toy case {case!r}")
    n = TOY_SIZES[case] if n is None else n
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if case == "heteroscedastic":
        x = rng.uniform(-2.0, 2.0, n)
        y = heteroscedastic_mean(x) + 0.25 * np.cos(6 * x + 1) * np.exp(-x) * rng.standard_normal(n)
    elif case == "step":
        x = rng.uniform(0.0, 1.0, n)
        y = (x >= 0.5).astype(float) + 1e-2 * rng.standard_normal(n)
    elif case == "moon":
        from sklearn.datasets import make_moons

        pts, _ = make_moons(n_samples=n, noise=noise, random_state=int(seed) % 2**32)
        x, y = pts[:, 0], pts[:, 1]
    return Dataset(x[:, None], y, ["x"], "y")


def test_grid(ds: Dataset, n: int = 500) -> np.ndarray:
    """Evenly spaced 1-D inputs spanning the training range."""
    return np.linspace(ds.X[:, 0].min(), ds.X[:, 0].max(), n)[:, None]


def read_table(path, delimiter: str = ",") -> tuple[list[str], np.ndarray]:
    """Header and values of a rectangular numeric CSV; ``#`` lines are skipped."""
    path = Path(path)
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines, delimiter=delimiter))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                data[r - 2, c] = float(cell)
            except ValueError:
                raise NonNumericColumn(f"{path}: row {r}, column {c + 1} ({header[c]!r}): {cell!r}") from None
    if data.shape[0] == 0:
        raise ParseError(f"{path}: no data rows")
    if not np.all(np.isfinite(data)):
        raise ParseError(f"{path}: missing or non-finite values")
    return header, data


def load_csv(path, target: str | None = None, delimiter: str = ",") -> Dataset:
    """Read a numeric CSV with a header row; ``target`` defaults to the last column."""
    header, data = read_table(path, delimiter)
    target = header[-1] if target is None else target
    if target not in header:
        raise ParseError(f"{path}: no column named {target!r}")
    t = header.index(target)
    keep = [i for i in range(len(header)) if i != t]
    return Dataset(data[:, keep], data[:, t], [header[i] for i in keep], target)


def load_features(path, names: list[str], delimiter: str = ",") -> np.ndarray:
    """The named columns of a CSV, in the given order."""
    header, data = read_table(path, delimiter)
    missing = [n for n in names if n not in header]
    if missing:
        raise ParseError(f"{path}: missing feature columns {missing}")
    return data[:, [header.index(n) for n in names]]


def _safe_std(a) -> np.ndarray:
    s = np.std(a, axis=0)
    return np.where(s > 0, s, 1.0)


def fit_standardization(ds: Dataset) -> Standardization:
    """Per-column mean and population std; constant columns keep std 1."""
    return Standardization(ds.X.mean(0), _safe_std(ds.X), float(ds.y.mean()), float(_safe_std(ds.y)))


def standardize(ds: Dataset, record: Standardization | None = None) -> Dataset:
    record = fit_standardization(ds) if record is None else record
    return replace(ds, X=record.transform_x(ds.X), y=record.transform_y(ds.y), standardization=record)


def destandardize(ds: Dataset) -> Dataset:
    rec = ds.standardization
    if rec is None:
        return ds
    return replace(ds, X=rec.inverse_x(ds.X), y=rec.inverse_y(ds.y), standardization=None)


def train_test_split(ds: Dataset, seed: int, test_fraction: float = 0.1) -> tuple[Dataset, Dataset]:
    """Shuffled split; the test set gets ``floor(test_fraction * N)`` rows, at least one."""
    n = len(ds)
    n_test = max(1, math.floor(test_fraction * n + 1e-9)) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])


def kmeans_init(X, M: int, seed: int = 0) -> np.ndarray:
    """k-means++ seeded Lloyd iterations (at most 50); returns the centroids."""
    from sklearn.cluster import KMeans

    X = np.asarray(X, dtype=float)
    if M > X.shape[0]:
        raise ValueError(f"M={M} exceeds the number of points {X.shape[0]}")
    if M == X.shape[0]:
        return X.copy()
    km = KMeans(n_clusters=M, init="k-means++", n_init=1, max_iter=50, random_state=int(seed) % 2**32)
    return km.fit(X).cluster_centers_
