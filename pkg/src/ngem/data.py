"""Synthetic generators, CSV ingestion, and seeded batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ngem.errors import ConfigError, IngestError

TWO_GAUSSIAN_MEANS = np.array([[-2.0, -2.0], [2.0, 2.0]])
TWO_GAUSSIAN_STD = 0.5
SINUSOID_NOISE_VAR = 0.1


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: np.ndarray = None
    y_std: np.ndarray = None
    ground_truth: dict = None
    columns: tuple = field(default=None)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2 or self.y.ndim != 2 or len(self.x) != len(self.y):
            raise IngestError(f"inconsistent shapes x={self.x.shape} y={self.y.shape}")

    def __len__(self):
        return len(self.x)

    @property
    def normalized(self) -> bool:
        return self.x_mean is not None

    def subset(self, idx) -> "Dataset":
        return replace(self, x=self.x[idx], y=self.y[idx])

    def denormalize(self) -> "Dataset":
        if not self.normalized:
            return self
        return replace(self, x=self.x * self.x_std + self.x_mean,
                       y=self.y * self.y_std + self.y_mean,
                       x_mean=None, x_std=None, y_mean=None, y_std=None)


def zscore(ds: Dataset) -> Dataset:
    """Per-column z-scores; constant columns keep unit scale."""
    def stats(a):
        mu, sd = a.mean(axis=0), a.std(axis=0)
        return mu, np.where(sd > 0, sd, 1.0)
    xm, xs = stats(ds.x)
    ym, ys = stats(ds.y)
    return replace(ds, x=(ds.x - xm) / xs, y=(ds.y - ym) / ys,
                   x_mean=xm, x_std=xs, y_mean=ym, y_std=ys)


def gen_two_gaussians(n_per_mode: int, seed: int) -> Dataset:
    """Two well-separated isotropic Gaussians in R^2 with a constant dummy feature."""
    if n_per_mode < 1:
        raise ConfigError("n_per_mode must be >= 1")
    rng = np.random.default_rng(seed)
    y = np.concatenate([
        mu + TWO_GAUSSIAN_STD * rng.standard_normal((n_per_mode, 2)) for mu in TWO_GAUSSIAN_MEANS
    ])
    truth = {
        "weights": np.array([0.5, 0.5]),
        "means": TWO_GAUSSIAN_MEANS.copy(),
        "scales": np.full((2, 2), TWO_GAUSSIAN_STD),
    }
    return Dataset(np.ones((2 * n_per_mode, 1)), y, ground_truth=truth)


def gen_two_sinusoids(n_per_mode: int, seed: int) -> Dataset:
    """y = pi sin(x) + noise or pi sin(x + pi) + noise, x ~ U(0, 4 pi).

    ``2 * n_per_mode`` points; each picks its branch with a fair coin.
    """
    if n_per_mode < 1:
        raise ConfigError("n_per_mode must be >= 1")
    rng = np.random.default_rng(seed)
    n = 2 * n_per_mode
    x = rng.uniform(0.0, 4.0 * np.pi, size=n)
    phase = np.pi * rng.integers(0, 2, size=n)
    noise = np.sqrt(SINUSOID_NOISE_VAR) * rng.standard_normal(n)
    y = np.pi * np.sin(x + phase) + noise
    return Dataset(x[:, None], y[:, None])


def load_csv(path, target_columns, normalize: bool = False) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{path}: no such file")
    if isinstance(target_columns, str):
        target_columns = [c.strip() for c in target_columns.split(",") if c.strip()]
    with path.open(newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                col = next(i for i, c in enumerate(row) if not _is_float(c))
                raise IngestError(
                    f"{path}:{lineno}: non-numeric value {row[col]!r} in column {header[col]!r}"
                ) from None
    missing = [c for c in target_columns if c not in header]
    if missing or not target_columns:
        raise IngestError(f"{path}: unknown target column(s) {missing or target_columns}")
    if not rows:
        raise IngestError(f"{path}: no data rows")
    table = np.array(rows)
    if not np.all(np.isfinite(table)):
        raise IngestError(f"{path}: non-finite values")
    t_idx = [header.index(c) for c in target_columns]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    ds = Dataset(table[:, f_idx], table[:, t_idx],
                 columns=(tuple(header[i] for i in f_idx), tuple(target_columns)))
    return zscore(ds) if normalize else ds


def _is_float(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def export_csv(ds: Dataset, path) -> None:
    if ds.columns is not None:
        x_names, y_names = ds.columns
    else:
        x_names = [f"x{i}" for i in range(ds.x.shape[1])]
        y_names = [f"y{i}" for i in range(ds.y.shape[1])]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(x_names) + list(y_names))
        for xr, yr in zip(ds.x, ds.y):
            w.writerow([repr(float(v)) for v in np.concatenate([xr, yr])])


class BatchStream:
    """Shuffled mini-batches over a training split; epoch ``e`` uses seed + e."""

    def __init__(self, ds: Dataset, batch_size: int, seed: int):
        self.ds = ds
        self.batch_size = batch_size
        self.seed = seed

    def __len__(self):
        return -(-len(self.ds) // self.batch_size)

    def epoch(self, e: int):
        order = np.random.default_rng(self.seed + e).permutation(len(self.ds))
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.ds.x[idx], self.ds.y[idx]

    def __iter__(self):
        return self.epoch(1)


def split_and_batch(ds: Dataset, train_frac: float, batch_size: int, seed: int):
    """Seeded train/test split; returns ``(BatchStream, test Dataset)``."""
    if not 0.0 < train_frac <= 1.0:
        raise ConfigError(f"train_frac must be in (0, 1], got {train_frac}")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_train = int(round(train_frac * len(ds)))
    if n_train == 0:
        raise ConfigError("training split is empty")
    train, test = ds.subset(order[:n_train]), ds.subset(order[n_train:])
    return BatchStream(train, batch_size, seed), test
