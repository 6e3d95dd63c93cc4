"""Logit-based OOD metrics plus the batch scoring front end.

Every metric returns scores in one orientation, higher = more OOD, so a
single AUROC code path serves all of them. Metrics whose natural value is
"higher = more confident" (max-softmax, gradient norm) are negated here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import FeatureSet, atomic_write_bytes
from .errors import ConfigError, DataError, FormatError, NumericError
from .gaussian import GaussianModel, mahalanobis_score_batch

METRICS = ("msp", "entropy", "energy", "gradnorm", "mahalanobis")


@dataclass(frozen=True)
class ScoreVector:
    """Per-sample OOD scores tagged with the metric that produced them."""

    values: np.ndarray
    metric: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if not np.all(np.isfinite(values)):
            raise NumericError("scores contain non-finite values")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        object.__setattr__(self, "values", values)

    def to_csv(self) -> str:
        lines = ["index,score"]
        lines += [f"{i},{float(v)!r}" for i, v in enumerate(self.values)]
        return "\n".join(lines) + "\n"

    def save_csv(self, path) -> None:
        atomic_write_bytes(path, self.to_csv().encode("utf-8"))

    def to_json_dict(self) -> dict:
        """JSON-ready form, e.g. for embedding in an EvalReport's extra."""
        return {
            "metric": self.metric,
            "params": dict(self.params),
            "values": [float(v) for v in self.values],
        }


def load_scores_csv(path) -> np.ndarray:
    """Read an ``index,score`` CSV back into a score vector."""
    from pathlib import Path

    text = Path(path).read_text()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].strip() != "index,score":
        raise FormatError(f"{path}: expected an 'index,score' header")
    values = []
    for ln in lines[1:]:
        try:
            _, score = ln.split(",")
            values.append(float(score))
        except ValueError as exc:
            raise FormatError(f"{path}: bad row {ln!r}") from exc
    if not values:
        raise DataError(f"{path}: no scores")
    return np.asarray(values, dtype=np.float64)


def _check_logits(logits) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericError("logits contain non-finite values")
    return arr


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Max-stabilized softmax along the last axis."""
    arr = _check_logits(logits)
    shifted = np.exp(arr - arr.max(axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


def msp_score(logits) -> float:
    """Negated maximum softmax probability."""
    arr = _check_logits(logits)
    if arr.shape[-1] < 2:
        raise DataError("msp needs at least 2 classes")
    return float(-softmax(arr).max())


def entropy_score(logits) -> float:
    """Shannon entropy of the softmax distribution (natural log)."""
    logp = _log_softmax(_check_logits(logits))
    p = np.exp(logp)
    return float(-np.sum(np.where(p > 0.0, p * logp, 0.0)))


def energy_score(logits, temperature: float = 1.0) -> float:
    """Free energy -T log sum exp(logits / T), computed stabilized."""
    arr = _check_logits(logits)
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    z = arr / temperature
    peak = z.max()
    return float(-temperature * (peak + np.log(np.exp(z - peak).sum())))


def gradnorm_score(feature, head_weights, head_bias, temperature: float = 1.0) -> float:
    """Negated L1 gradient norm of uniform-target cross-entropy w.r.t. the head.

    For logits z = W f + b and p = softmax(z / T), the gradient of
    CE(uniform, p) with respect to W has L1 norm ||f||_1 * ||p - u||_1 / T,
    so the score reduces to a closed form. Confident heads produce large
    gradients, hence the negation.
    """
    f = np.asarray(feature, dtype=np.float64)
    w = np.asarray(head_weights, dtype=np.float64)
    b = np.asarray(head_bias, dtype=np.float64)
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
        raise NumericError("gradnorm inputs contain non-finite values")
    k = w.shape[0]
    p = softmax((w @ f + b) / temperature)
    raw = np.abs(f).sum() * np.abs(p - 1.0 / k).sum() / temperature
    return float(-raw)


def _batch_logit_scores(logits: np.ndarray, metric: str, temperature: float) -> np.ndarray:
    if metric == "msp":
        return -softmax(logits).max(axis=-1)
    if metric == "entropy":
        logp = _log_softmax(logits)
        p = np.exp(logp)
        return -np.sum(np.where(p > 0.0, p * logp, 0.0), axis=-1)
    if metric == "energy":
        z = logits / temperature
        peak = z.max(axis=-1, keepdims=True)
        return (-temperature * (peak[:, 0] + np.log(np.exp(z - peak).sum(axis=-1))))
    raise ConfigError(f"metric {metric!r} is not logit-based")


def score_batch(
    inputs,
    metric: str,
    temperature: float = 1.0,
    gaussian: GaussianModel | None = None,
    head_weights: np.ndarray | None = None,
    head_bias: np.ndarray | None = None,
) -> ScoreVector:
    """Apply one metric to every row of a logit matrix or FeatureSet.

    ``msp``/``entropy``/``energy`` take a (n, K) logit matrix (or a
    FeatureSet holding logits). ``mahalanobis`` takes a FeatureSet plus a
    fitted GaussianModel; ``gradnorm`` takes a FeatureSet plus the
    classifier head weights and bias.
    """
    if metric not in METRICS:
        raise ConfigError(f"unknown metric {metric!r}; expected one of {METRICS}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    matrix = inputs.features if isinstance(inputs, FeatureSet) else np.asarray(inputs, dtype=np.float64)
    if matrix.ndim != 2:
        raise DataError(f"expected a 2-D input matrix, got shape {matrix.shape}")
    if not np.all(np.isfinite(matrix)):
        raise NumericError("inputs contain non-finite values")

    params: dict = {}
    if metric == "mahalanobis":
        if gaussian is None:
            raise ConfigError("mahalanobis scoring requires a fitted GaussianModel")
        values = mahalanobis_score_batch(gaussian, matrix)
    elif metric == "gradnorm":
        if head_weights is None or head_bias is None:
            raise ConfigError("gradnorm scoring requires classifier head weights and bias")
        w = np.asarray(head_weights, dtype=np.float64)
        b = np.asarray(head_bias, dtype=np.float64)
        k = w.shape[0]
        p = softmax((matrix @ w.T + b) / temperature)
        values = -(np.abs(matrix).sum(axis=1) * np.abs(p - 1.0 / k).sum(axis=1) / temperature)
        params["temperature"] = temperature
    else:
        if metric == "msp" and matrix.shape[1] < 2:
            raise DataError("msp needs at least 2 classes")
        values = _batch_logit_scores(matrix, metric, temperature)
        if metric == "energy":
            params["temperature"] = temperature
    return ScoreVector(values=values, metric=metric, params=params)
