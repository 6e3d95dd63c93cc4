"""Classifier fine-tuning on top of the pretrained encoder.

Covers the two supervised pipeline stages (intermediate fine-tuning on a
broader corpus, then fine-tuning on the ID set), the one-class variant, and
pooled feature extraction. Targets are label-smoothed:

    y_smooth[i] = (1 - alpha) * onehot[i] + alpha / K

With alpha > 0 the smoothed target has positive entropy, so the loss stays
strictly positive even at 100% training accuracy; that residual signal is
what makes one-class fine-tuning (all samples share one label) update the
model at all. alpha = 0 in one-class mode is therefore rejected.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import FeatureSet, ImageDataset
from .errors import ConfigError, DataError, NumericError, ShapeError
from .mim import (
    ModelDims,
    ToyMimModel,
    TrainResult,
    _batch_patchify,
    _classify_loss_and_grad_batch,
    _encode,
    _sgd_step,
    _zero_grads,
    attach_cls_head,
)

FINETUNE_MODES = ("multi_class", "one_class", "intermediate")
FEATURE_LAYERS = ("pooled_final", "pooled_prelogit")


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float
    class_count: int

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.class_count < 2:
            raise ConfigError(f"class_count must be >= 2, got {self.class_count}")


def smooth_labels(one_hot_class: int, cfg: SmoothingConfig) -> np.ndarray:
    """Smoothed probability vector for one class index."""
    k = cfg.class_count
    if not (0 <= one_hot_class < k):
        raise ConfigError(f"class index {one_hot_class} out of range for {k} classes")
    out = np.full(k, cfg.alpha / k)
    out[one_hot_class] = (1.0 - cfg.alpha) + cfg.alpha / k
    return out


def cross_entropy(logits, target) -> float:
    """-sum(target * log softmax(logits)), max-stabilized."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if z.shape != t.shape or z.ndim != 1:
        raise ShapeError(f"logits {z.shape} and target {t.shape} must be equal-length vectors")
    if not np.all(np.isfinite(z)):
        raise NumericError("logits contain non-finite values")
    if abs(t.sum() - 1.0) > 1e-9 or np.any(t < 0):
        raise DataError("target must be a probability vector summing to 1")
    shifted = z - z.max()
    logp = shifted - math.log(np.exp(shifted).sum())
    return float(-(t * logp).sum())


@dataclass(frozen=True)
class FinetuneConfig:
    mode: str = "multi_class"
    target_class: int = 0
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.mode not in FINETUNE_MODES:
            raise ConfigError(f"unknown fine-tune mode {self.mode!r}; expected {FINETUNE_MODES}")

    def as_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def _assigned_labels(data: ImageDataset, cfg: FinetuneConfig, k: int) -> np.ndarray:
    if cfg.mode == "one_class":
        if not (0 <= cfg.target_class < k):
            raise ConfigError(
                f"target_class {cfg.target_class} out of range for a {k}-way head"
            )
        return np.full(len(data), cfg.target_class, dtype=np.int64)
    if int(data.labels.max()) >= k:
        raise ConfigError(
            f"dataset labels reach {int(data.labels.max())} but the head is only {k}-way"
        )
    return data.labels.astype(np.int64)


def _model_tokens(model: ToyMimModel, data: ImageDataset) -> np.ndarray:
    h, w, c = data.image_shape
    p = model.dims.patch
    if h % p or w % p:
        raise ShapeError(f"images of {h}x{w} are not divisible by patch size {p}")
    tokens = _batch_patchify(data.images.astype(model.dtype), p)
    if tokens.shape[1] != model.dims.tokens or tokens.shape[2] != model.dims.token_dim:
        raise ShapeError(
            f"dataset geometry {tokens.shape[1:]} does not match model "
            f"({model.dims.tokens}, {model.dims.token_dim})"
        )
    return tokens


def finetune_classifier(
    model: ToyMimModel,
    data: ImageDataset,
    cfg: FinetuneConfig,
    smoothing: SmoothingConfig,
) -> TrainResult:
    """SGD with momentum on smoothed-label cross-entropy.

    Attaches a fresh classifier head when the model has none. Returns a new
    model; the input model is left untouched. The per-epoch trace holds
    (mean loss, accuracy) pairs.
    """
    if cfg.mode == "one_class" and smoothing.alpha == 0.0:
        raise ConfigError(
            "one-class fine-tuning with alpha = 0 has a degenerate loss; use alpha > 0"
        )
    k = smoothing.class_count
    if not model.has_cls_head:
        model = attach_cls_head(model, k, cfg.seed)
    elif model.dims.classes != k:
        raise ConfigError(
            f"model head is {model.dims.classes}-way but smoothing expects {k} classes"
        )
    tokens_all = _model_tokens(model, data)
    labels = _assigned_labels(data, cfg, k)
    smoothing_rows = np.stack([smooth_labels(c, SmoothingConfig(smoothing.alpha, k)) for c in range(k)])
    targets_all = smoothing_rows[labels]

    params = {key: v.copy() for key, v in model.params.items()}
    velocity = _zero_grads(params)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    n = tokens_all.shape[0]
    epoch_losses, epoch_accuracy = [], []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        losses, correct = [], 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, acc, grads = _classify_loss_and_grad_batch(
                params, model.dims, tokens_all[batch], targets_all[batch], True
            )
            if not math.isfinite(loss):
                raise NumericError(f"fine-tune loss diverged at step {step}")
            _sgd_step(params, grads, velocity, cfg.learning_rate, cfg.momentum)
            losses.append(loss)
            correct += acc * batch.size
            step += 1
        epoch_losses.append(float(np.mean(losses)))
        epoch_accuracy.append(float(correct / n))
    return TrainResult(
        model=model.with_params(params),
        epoch_losses=tuple(epoch_losses),
        epoch_accuracy=tuple(epoch_accuracy),
    )


def classify_logits(model: ToyMimModel, data: ImageDataset, batch_size: int = 64) -> np.ndarray:
    """Classifier-head logits for every image, no masking."""
    if not model.has_cls_head:
        raise ConfigError("model has no classifier head")
    tokens_all = _model_tokens(model, data)
    out = []
    for start in range(0, tokens_all.shape[0], batch_size):
        latent, _ = _encode(model.params, model.dims, tokens_all[start : start + batch_size], None)
        pooled = latent.mean(axis=1)
        out.append(pooled @ model.params["cls_head.w"] + model.params["cls_head.b"])
    logits = np.concatenate(out, axis=0)
    if not np.all(np.isfinite(logits)):
        raise NumericError("classifier produced non-finite logits")
    return logits


def classifier_head(model: ToyMimModel) -> tuple[np.ndarray, np.ndarray]:
    """(K, D) weight matrix and (K,) bias in ``logits = W f + b`` orientation."""
    if not model.has_cls_head:
        raise ConfigError("model has no classifier head")
    return model.params["cls_head.w"].T.copy(), model.params["cls_head.b"].copy()


def extract_features(
    model: ToyMimModel, data: ImageDataset, layer: str = "pooled_final", batch_size: int = 64
) -> FeatureSet:
    """Mean-pooled final-block token vectors, one row per image, no masking.

    ``pooled_prelogit`` is an alias of ``pooled_final`` in this encoder:
    there is no post-block normalization, so the pooled representation and
    the classifier input coincide.
    """
    if layer not in FEATURE_LAYERS:
        raise ConfigError(f"unknown feature layer {layer!r}; expected one of {FEATURE_LAYERS}")
    tokens_all = _model_tokens(model, data)
    rows = []
    for start in range(0, tokens_all.shape[0], batch_size):
        latent, _ = _encode(model.params, model.dims, tokens_all[start : start + batch_size], None)
        rows.append(latent.mean(axis=1))
    feats = np.concatenate(rows, axis=0)
    if not np.all(np.isfinite(feats)):
        raise NumericError("encoder produced non-finite features")
    return FeatureSet(features=feats, labels=data.labels.copy(), source=f"toy-mim/{layer}")
