"""Tabular data loading, train/test splitting and synthetic fixtures."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .ensemble import EnsembleModel
from .errors import ConfigError, DataError
from .nn import DenseLayer, IDENTITY, Mlp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: tuple
    target_names: tuple
    mean: np.ndarray | None = None
    std: np.ndarray | None = None
    indices: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def standardize(self, mean, std) -> "Dataset":
        return replace(self, X=(self.X - mean) / std, mean=np.asarray(mean), std=np.asarray(std))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return replace(self, X=self.X[idx], y=self.y[idx], indices=idx)


def load_csv(path, target_columns: Sequence[str] | str | None = None,
             delimiter: str | None = None) -> Dataset:
    """Read a numeric CSV with a header row.

    ``target_columns`` defaults to the last column.  The delimiter is sniffed
    among ``,;\\t`` when not given (the UCI wine files use ``;``).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        raise DataError(f"{path}: file is empty")
    if delimiter is None:
        try:
            delimiter = csv.Sniffer().sniff(text.splitlines()[0], delimiters=",;\t").delimiter
        except csv.Error:
            delimiter = ","
    reader = csv.reader(text.splitlines(), delimiter=delimiter)
    header = [h.strip().strip('"') for h in next(reader)]
    if isinstance(target_columns, str):
        target_columns = [target_columns]
    targets = list(target_columns) if target_columns else [header[-1]]
    missing = [t for t in targets if t not in header]
    if missing:
        raise DataError(f"{path}: target column(s) {missing} not in header {header}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
        values = []
        for col, cell in zip(header, row):
            try:
                v = float(cell)
            except ValueError:
                raise DataError(f"{path}:{lineno}: column {col!r} has non-numeric value {cell!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: column {col!r} is not finite")
            values.append(v)
        rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    t_idx = [header.index(t) for t in targets]
    f_idx = [i for i in range(len(header)) if i not in t_idx]
    return Dataset(table[:, f_idx], table[:, t_idx],
                   tuple(header[i] for i in f_idx), tuple(targets))


def write_csv(ds: Dataset, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*ds.feature_names, *ds.target_names])
        for xr, yr in zip(ds.X, ds.y):
            w.writerow([repr(float(v)) for v in (*xr, *yr)])
    return path


def split_standardize(ds: Dataset, train_fraction: float = 0.75, seed: int = 0,
                      train_idx=None, test_idx=None) -> tuple[Dataset, Dataset]:
    """Shuffle, split and standardize with statistics of the training part only.

    Explicit ``train_idx``/``test_idx`` override the random split (for data
    that ships with a predefined split).  Constant columns keep std 1.
    """
    if train_idx is None:
        if not 0.0 < train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        perm = np.random.default_rng(seed).permutation(ds.n)
        n_train = int(round(train_fraction * ds.n))
        train_idx, test_idx = np.sort(perm[:n_train]), np.sort(perm[n_train:])
    else:
        train_idx = np.asarray(train_idx, dtype=int)
        if test_idx is None:
            test_idx = np.setdiff1d(np.arange(ds.n), train_idx)
        test_idx = np.asarray(test_idx, dtype=int)
    if len(train_idx) < 2 or len(test_idx) < 2:
        raise ConfigError("both splits need at least 2 rows")
    train, test = ds.subset(train_idx), ds.subset(test_idx)
    mean = train.X.mean(axis=0)
    std = train.X.std(axis=0)
    flat = std == 0
    if np.any(flat):
        warnings.warn(f"constant feature(s) {[ds.feature_names[i] for i in np.flatnonzero(flat)]}; "
                      "using std = 1")
        std = np.where(flat, 1.0, std)
    return train.standardize(mean, std), test.standardize(mean, std)


def split_sidecar(train: Dataset, test: Dataset, seed: int) -> dict:
    return {
        "seed": seed,
        "feature_names": list(train.feature_names),
        "target_names": list(train.target_names),
        "mean": train.mean.tolist(),
        "std": train.std.tolist(),
        "train_indices": train.indices.tolist(),
        "test_indices": test.indices.tolist(),
    }


def save_sidecar(doc: dict, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def apply_sidecar(ds: Dataset, doc: dict) -> tuple[Dataset, Dataset]:
    """Rebuild the standardized train/test splits recorded in ``doc``."""
    mean, std = np.array(doc["mean"]), np.array(doc["std"])
    if mean.shape[0] != ds.d:
        raise DataError(f"sidecar has {mean.shape[0]} features, data has {ds.d}")
    train = ds.subset(doc["train_indices"]).standardize(mean, std)
    test = ds.subset(doc["test_indices"]).standardize(mean, std)
    return train, test


# --------------------------------------------------------------------------
# affine quadruple map
# --------------------------------------------------------------------------

_OFFSETS = np.array([1.0, 1.0, 2.0, 2.0])
_SIGNS = np.array([-1.0, 1.0, -1.0, 1.0])


def quadruple(X) -> np.ndarray:
    """``x -> (1 - x, 1 + x, 2 - x, 2 + x)`` per feature, interleaved."""
    X = np.asarray(X, dtype=np.float64)
    out = _OFFSETS + _SIGNS * X[..., None]
    return out.reshape(*X.shape[:-1], X.shape[-1] * 4)


def unquadruple(Q) -> np.ndarray:
    Q = np.asarray(Q, dtype=np.float64)
    q = Q.reshape(*Q.shape[:-1], Q.shape[-1] // 4, 4)
    return (q[..., 1] - q[..., 0]) / 2.0


def affine_quadruple_map(ds: Dataset) -> Dataset:
    """Expand each feature into four affine copies so none is zero everywhere.

    LRP gives zero relevance to zero-valued inputs; at least one of the four
    copies is non-zero for any value.
    """
    names = tuple(f"{n}{suffix}" for n in ds.feature_names
                  for suffix in ("[1-x]", "[1+x]", "[2-x]", "[2+x]"))
    return replace(ds, X=quadruple(ds.X), feature_names=names, mean=None, std=None)


# --------------------------------------------------------------------------
# synthetic fixtures
# --------------------------------------------------------------------------

def linear_ensemble(weights) -> EnsembleModel:
    """Ensemble of single-layer bias-free linear models, one per weight row."""
    W = np.asarray(weights, dtype=np.float64)
    members = [Mlp((DenseLayer(w[None, :], np.zeros(1), IDENTITY),)) for w in W]
    return EnsembleModel(members)


def synth_linear_ensemble(d: int, M: int, weight_seed: int = 0) -> tuple[EnsembleModel, np.ndarray]:
    """Random linear ensemble and the 1/M covariance of its weight vectors."""
    if d < 2 or M < 2:
        raise ConfigError("need d >= 2 and M >= 2")
    W = np.random.default_rng(weight_seed).normal(size=(M, d))
    centered = W - W.mean(axis=0)
    return linear_ensemble(W), centered.T @ centered / M


def make_regression(n: int = 2000, d: int = 8, noise: float = 0.1,
                    seed: int = 0) -> Dataset:
    """Nonlinear tabular regression task with correlated, skewed inputs.

    A few features carry signal (through products and a threshold), the
    rest are nuisance columns; heavy-tailed inputs give the test set points
    far from the bulk of the training data, where ensembles disagree.
    """
    if d < 4:
        raise ConfigError("make_regression needs d >= 4")
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n, d))
    mix = np.eye(d) + 0.3 * rng.standard_normal((d, d)) * (rng.random((d, d)) < 0.3)
    X = latent @ mix.T
    X[:, 1] = np.exp(0.6 * X[:, 1])
    X[:, 3] = rng.standard_t(4, size=n)
    y = (np.sin(X[:, 0]) * X[:, 1]
         + 0.5 * X[:, 2] ** 2
         + np.where(X[:, 3] > 0, X[:, 3], 0.2 * X[:, 3])
         + 0.3 * X[:, 0] * X[:, 2]
         + noise * rng.standard_normal(n))
    names = tuple(f"x{i}" for i in range(d))
    return Dataset(X, y[:, None], names, ("y",))
