"""Class-conditional Gaussian with shared covariance, Mahalanobis scoring.

The covariance is the maximum-likelihood pooled estimate over class-centered
samples, regularized by a trace-relative ridge, and held as its Cholesky
factor. Scores are squared Mahalanobis distances (monotone-equivalent to the
distance itself for every ranking metric, and cheaper), minimized over class
means; higher = more OOD.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .checkpoint import read_checkpoint, write_checkpoint
from .datamodel import FeatureSet
from .errors import DataError, FormatError, NumericError, ShapeError

DEFAULT_REG = 1e-6
_EPS_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianModel:
    """Per-class means plus one shared, Cholesky-factored covariance."""

    means: np.ndarray          # (K, d)
    chol: np.ndarray           # (d, d) lower triangular
    class_labels: np.ndarray   # (K,) original label values, ascending
    class_counts: np.ndarray   # (K,)
    reg_epsilon: float
    dim: int

    def save(self, path: str | Path) -> None:
        write_checkpoint(
            path,
            kind="gaussian-model",
            meta={"reg_epsilon": self.reg_epsilon, "dim": self.dim},
            tensors={
                "means": self.means,
                "chol": self.chol,
                "class_labels": self.class_labels.astype(np.int64),
                "class_counts": self.class_counts.astype(np.int64),
            },
        )

    @classmethod
    def load(cls, path: str | Path) -> "GaussianModel":
        kind, meta, tensors = read_checkpoint(path)
        if kind != "gaussian-model":
            raise FormatError(f"{path}: checkpoint kind {kind!r} is not a gaussian model")
        return cls(
            means=tensors["means"],
            chol=tensors["chol"],
            class_labels=tensors["class_labels"].astype(np.int64),
            class_counts=tensors["class_counts"].astype(np.int64),
            reg_epsilon=float(meta["reg_epsilon"]),
            dim=int(meta["dim"]),
        )


def fit_gaussian(fs: FeatureSet, reg: float = DEFAULT_REG, standardize: bool = False) -> GaussianModel:
    """Fit per-class means and the shared covariance of a labeled FeatureSet.

    ``standardize=True`` rescales each feature column to unit variance before
    fitting (off by default).
    """
    if fs.labels is None:
        raise DataError("fit_gaussian requires a labeled FeatureSet")
    if reg <= 0:
        raise DataError(f"regularizer must be > 0, got {reg}")
    feats = fs.features.astype(np.float64)
    if standardize:
        scale = feats.std(axis=0)
        scale[scale == 0.0] = 1.0
        feats = feats / scale
    labels = fs.labels
    classes = np.unique(labels)
    n, d = feats.shape
    means = np.empty((classes.size, d))
    counts = np.empty(classes.size, dtype=np.int64)
    centered = np.empty_like(feats)
    for i, c in enumerate(classes):
        members = feats[labels == c]
        if members.shape[0] < 2:
            raise DataError(f"class {int(c)} has {members.shape[0]} samples; need at least 2")
        means[i] = members.mean(axis=0)
        counts[i] = members.shape[0]
        centered[labels == c] = members - means[i]
    sigma = centered.T @ centered / n
    eps = max(reg * float(np.trace(sigma)) / d, _EPS_FLOOR)
    try:
        chol = np.linalg.cholesky(sigma + eps * np.eye(d))
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"covariance not positive definite even after regularization: {exc}") from exc
    return GaussianModel(
        means=means,
        chol=chol,
        class_labels=classes.astype(np.int64),
        class_counts=counts,
        reg_epsilon=eps,
        dim=d,
    )


def _check_vectors(m: GaussianModel, f: np.ndarray) -> np.ndarray:
    arr = np.asarray(f, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != m.dim:
        raise ShapeError(f"expected vectors of dimension {m.dim}, got shape {np.shape(f)}")
    if not np.all(np.isfinite(arr)):
        raise DataError("feature vectors contain non-finite values")
    return arr


def class_distances(m: GaussianModel, f) -> np.ndarray:
    """Squared Mahalanobis distance to every class mean.

    Shape (K,) for a single vector, (n, K) for a batch. Uses triangular
    solves against the stored Cholesky factor; the covariance is never
    inverted explicitly.
    """
    arr = _check_vectors(m, f)
    n = arr.shape[0]
    out = np.empty((n, m.means.shape[0]))
    for i, mu in enumerate(m.means):
        diff = (arr - mu).T  # (d, n)
        z = solve_triangular(m.chol, diff, lower=True)
        out[:, i] = np.sum(z * z, axis=0)
    return out[0] if np.asarray(f).ndim == 1 else out


def mahalanobis_score(m: GaussianModel, f) -> float:
    """Minimum squared Mahalanobis distance over classes; higher = more OOD."""
    return float(class_distances(m, f).min())


def mahalanobis_score_batch(m: GaussianModel, feats: np.ndarray) -> np.ndarray:
    return class_distances(m, feats).min(axis=1)


def predict_class(m: GaussianModel, f) -> int:
    """Label of the nearest class mean; ties break toward the lowest label."""
    return int(m.class_labels[int(np.argmin(class_distances(m, f)))])


def predict_class_batch(m: GaussianModel, feats: np.ndarray) -> np.ndarray:
    return m.class_labels[np.argmin(class_distances(m, feats), axis=1)]
