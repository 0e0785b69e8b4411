"""Dataset ingestion, standardization, and train/test splitting."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .rng import substream


@dataclass(frozen=True)
class Dataset:
    """Feature matrix and targets plus the stored standardization transform.

    The transform parameters map stored values back to original units:
    ``original = value * std + mean``. A freshly loaded dataset carries the
    identity transform (means 0, stds 1).
    """

    features: np.ndarray
    targets: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0

    def __post_init__(self):
        features = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
        targets = np.ascontiguousarray(np.asarray(self.targets, dtype=np.float64)).ravel()
        if features.ndim != 2:
            raise ValidationError("features must be a 2-d array")
        n, d = features.shape
        if n < 1 or d < 1:
            raise ValidationError("need at least one row and one feature column")
        if targets.shape[0] != n:
            raise ValidationError("targets length does not match feature rows")
        if not np.all(np.isfinite(features)) or not np.all(np.isfinite(targets)):
            raise ValidationError("non-finite values are not accepted")
        means = np.broadcast_to(np.asarray(self.feature_means, dtype=np.float64), (d,)).copy()
        stds = np.broadcast_to(np.asarray(self.feature_stds, dtype=np.float64), (d,)).copy()
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "feature_means", means)
        object.__setattr__(self, "feature_stds", stds)
        object.__setattr__(self, "target_mean", float(self.target_mean))
        object.__setattr__(self, "target_std", float(self.target_std))

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]

    @classmethod
    def from_arrays(cls, features, targets):
        """Wrap raw arrays with the identity transform."""
        features = np.asarray(features, dtype=np.float64)
        return cls(features, targets, np.zeros(features.shape[1]), np.ones(features.shape[1]))

    def subset(self, indices):
        """Row subset carrying the same transform parameters."""
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(
            self.features[indices],
            self.targets[indices],
            self.feature_means,
            self.feature_stds,
            self.target_mean,
            self.target_std,
        )


def _try_float(token):
    try:
        return float(token)
    except ValueError:
        return None


def load_csv(path, target_column=-1):
    """Load a comma-separated file into an (un-standardized) Dataset.

    The file may carry a single header line; it is detected by any
    non-numeric token in the first row. ``target_column`` is a column index
    or, when a header is present, a column name. Row numbers in error
    messages are 1-based file line numbers.
    """
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    if not rows:
        raise ParseError(f"{path}: empty file")

    header = None
    first = rows[0]
    if any(_try_float(tok) is None for tok in first):
        header = [tok.strip() for tok in first]
        data_rows = rows[1:]
        first_line = 2
    else:
        data_rows = rows
        first_line = 1
    if not data_rows:
        raise ParseError(f"{path}: no data rows")

    arity = len(data_rows[0])
    if arity < 2:
        raise ParseError(f"{path}: row {first_line}: need at least two columns")

    if isinstance(target_column, str):
        if header is None:
            raise ParseError(f"{path}: named target column requires a header line")
        try:
            target_idx = header.index(target_column)
        except ValueError:
            raise ParseError(f"{path}: no column named {target_column!r}") from None
    else:
        target_idx = int(target_column)
        if target_idx < 0:
            target_idx += arity
        if not 0 <= target_idx < arity:
            raise ParseError(f"{path}: target column {target_column} out of range")

    values = np.empty((len(data_rows), arity), dtype=np.float64)
    for i, row in enumerate(data_rows):
        line = first_line + i
        if len(row) != arity:
            raise ParseError(f"{path}: row {line}: expected {arity} fields, got {len(row)}")
        for j, tok in enumerate(row):
            val = _try_float(tok)
            if val is None:
                raise ParseError(f"{path}: row {line}: cannot parse {tok!r}")
            values[i, j] = val
        if not np.all(np.isfinite(values[i])):
            raise ValidationError(f"{path}: row {line}: non-finite value rejected")

    mask = np.ones(arity, dtype=bool)
    mask[target_idx] = False
    return Dataset.from_arrays(values[:, mask], values[:, target_idx])


def _fit_standardizer(features, targets):
    """Per-column mean and sample std (ddof=1); degenerate stds forced to 1."""
    n = features.shape[0]
    means = features.mean(axis=0)
    if n >= 2:
        stds = features.std(axis=0, ddof=1)
        tstd = float(targets.std(ddof=1))
    else:
        stds = np.zeros(features.shape[1])
        tstd = 0.0
    stds = np.where(stds > 0.0, stds, 1.0)
    tstd = tstd if tstd > 0.0 else 1.0
    return means, stds, float(targets.mean()), tstd


def _apply_standardizer(ds, means, stds, tmean, tstd):
    # Compose with the transform already stored so inversion always reaches
    # original units.
    return Dataset(
        (ds.features - means) / stds,
        (ds.targets - tmean) / tstd,
        ds.feature_means + means * ds.feature_stds,
        ds.feature_stds * stds,
        ds.target_mean + tmean * ds.target_std,
        ds.target_std * tstd,
    )


def standardize(ds):
    """Z-score features (per column) and targets; store the inverse transform."""
    means, stds, tmean, tstd = _fit_standardizer(ds.features, ds.targets)
    return _apply_standardizer(ds, means, stds, tmean, tstd)


def unstandardize_targets(ds, values):
    """Map target-space values back to original units."""
    return np.asarray(values, dtype=np.float64) * ds.target_std + ds.target_mean


def train_test_split(ds, test_fraction, seed):
    """Deterministic split; standardization fitted on train, applied to both.

    The test part gets ``max(1, floor(n * test_fraction))`` rows.
    """
    if not 0.0 < float(test_fraction) < 1.0:
        raise ConfigError("test_fraction must lie strictly between 0 and 1")
    n = ds.n
    n_test = max(1, math.floor(n * float(test_fraction)))
    if n - n_test < 1:
        raise ConfigError("split leaves an empty train part")
    perm = substream(seed, "split").permutation(n)
    test_idx = np.sort(perm[:n_test])
    train_idx = np.sort(perm[n_test:])
    train = ds.subset(train_idx)
    test = ds.subset(test_idx)
    means, stds, tmean, tstd = _fit_standardizer(train.features, train.targets)
    return (
        _apply_standardizer(train, means, stds, tmean, tstd),
        _apply_standardizer(test, means, stds, tmean, tstd),
    )
