"""Masked-image-modeling pretext at desk scale.

A small pre-normalization patch transformer (multi-head self-attention +
4x-wide feed-forward, residual connections) with a hand-written backward
pass verified against central finite differences. Reconstruction targets
are raw pixels by default; a k-means codebook turns the task into discrete
token classification instead.

Masked positions are replaced by a learned mask token *before* the blocks,
so the pixels of masked patches can never influence any output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import erf

from .checkpoint import read_checkpoint, write_checkpoint
from .datamodel import ImageDataset
from .errors import ConfigError, DataError, FormatError, NumericError, ShapeError

LAYERNORM_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# patches and masks


@dataclass(frozen=True)
class PatchSequence:
    """Raw patch vectors of one image, row-major over the patch grid."""

    tokens: np.ndarray            # (T, P*P*C)
    grid: tuple[int, int]         # (rows, cols)
    patch: int
    channels: int

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]


def patchify(image: np.ndarray, patch: int) -> PatchSequence:
    """Split an H x W x C image into non-overlapping P x P patches."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ShapeError(f"expected an (h, w, c) image, got shape {np.shape(image)}")
    h, w, c = img.shape
    if patch < 1 or h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible into {patch}x{patch} patches")
    tokens = _batch_patchify(img[None], patch)[0]
    return PatchSequence(tokens=tokens, grid=(h // patch, w // patch), patch=patch, channels=c)


def unpatchify(ps: PatchSequence) -> np.ndarray:
    """Inverse of :func:`patchify`; exact for any valid PatchSequence."""
    rows, cols = ps.grid
    p, c = ps.patch, ps.channels
    x = ps.tokens.reshape(rows, cols, p, p, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(rows * p, cols * p, c)


def _batch_patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(n, h, w, c) -> (n, T, P*P*C), token order row-major over the grid."""
    n, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(n, gh, patch, gw, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, gh * gw, patch * patch * c)


@dataclass(frozen=True)
class MaskSpec:
    """Strictly increasing masked-token indices and the ratio they realize."""

    masked_indices: np.ndarray
    ratio: float

    def __post_init__(self):
        idx = np.asarray(self.masked_indices, dtype=np.int64)
        if idx.ndim != 1 or idx.size == 0:
            raise ConfigError("mask must select at least one token")
        if np.any(np.diff(idx) <= 0):
            raise ConfigError("masked indices must be strictly increasing")
        if idx[0] < 0:
            raise ConfigError("masked indices must be non-negative")
        object.__setattr__(self, "masked_indices", idx)

    def as_bool(self, token_count: int) -> np.ndarray:
        if self.masked_indices[-1] >= token_count:
            raise ShapeError(
                f"mask index {int(self.masked_indices[-1])} out of range for {token_count} tokens"
            )
        flags = np.zeros(token_count, dtype=bool)
        flags[self.masked_indices] = True
        return flags


def _draw_mask_indices(token_count: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    n_masked = math.ceil(ratio * token_count)
    picked = rng.choice(token_count, size=n_masked, replace=False)
    return np.sort(picked)


def sample_mask(token_count: int, ratio: float, seed: int) -> MaskSpec:
    """Uniformly draw ceil(ratio * T) distinct token indices, seeded."""
    if token_count < 1:
        raise ConfigError("token count must be positive")
    if not (0.0 < ratio <= 1.0) or math.ceil(ratio * token_count) < 1:
        raise ConfigError(f"mask ratio {ratio} yields no masked tokens")
    rng = np.random.Generator(np.random.PCG64(seed))
    return MaskSpec(masked_indices=_draw_mask_indices(token_count, ratio, rng), ratio=ratio)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ModelDims:
    d_model: int
    depth: int
    heads: int
    tokens: int
    patch: int
    channels: int
    classes: int | None = None
    recon_dim: int | None = None

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.recon_dim is None:
            object.__setattr__(self, "recon_dim", self.token_dim)

    @property
    def token_dim(self) -> int:
        return self.patch * self.patch * self.channels


@dataclass(frozen=True)
class ToyMimModel:
    """Parameter set of the toy encoder plus reconstruction/classifier heads.

    Immutable by convention: training and head attachment return new
    instances, never mutate an existing one.
    """

    params: dict[str, np.ndarray]
    dims: ModelDims

    @property
    def dtype(self) -> np.dtype:
        return self.params["patch_embed.w"].dtype

    @property
    def has_cls_head(self) -> bool:
        return "cls_head.w" in self.params

    def with_params(self, params: dict[str, np.ndarray]) -> "ToyMimModel":
        return replace(self, params=params)

    def astype(self, dtype) -> "ToyMimModel":
        return self.with_params({k: v.astype(dtype) for k, v in self.params.items()})

    def save(self, path: str | Path) -> None:
        meta = {
            "d_model": self.dims.d_model,
            "depth": self.dims.depth,
            "heads": self.dims.heads,
            "tokens": self.dims.tokens,
            "patch": self.dims.patch,
            "channels": self.dims.channels,
            "classes": self.dims.classes,
            "recon_dim": self.dims.recon_dim,
        }
        write_checkpoint(path, kind="toy-mim-model", meta=meta, tensors=self.params)

    @classmethod
    def load(cls, path: str | Path) -> "ToyMimModel":
        kind, meta, tensors = read_checkpoint(path)
        if kind != "toy-mim-model":
            raise FormatError(f"{path}: checkpoint kind {kind!r} is not a toy MIM model")
        dims = ModelDims(
            d_model=int(meta["d_model"]),
            depth=int(meta["depth"]),
            heads=int(meta["heads"]),
            tokens=int(meta["tokens"]),
            patch=int(meta["patch"]),
            channels=int(meta["channels"]),
            classes=None if meta["classes"] is None else int(meta["classes"]),
            recon_dim=int(meta["recon_dim"]),
        )
        return cls(params=tensors, dims=dims)


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out)).astype(dtype)


def init_model(dims: ModelDims, seed: int, dtype=np.float32) -> ToyMimModel:
    """Seeded initialization: Xavier-uniform weights, zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    d, f = dims.d_model, 4 * dims.d_model
    p: dict[str, np.ndarray] = {}
    p["patch_embed.w"] = _xavier(rng, dims.token_dim, d, dtype)
    p["patch_embed.b"] = np.zeros(d, dtype=dtype)
    p["pos_embed"] = rng.uniform(-0.02, 0.02, size=(dims.tokens, d)).astype(dtype)
    p["mask_token"] = rng.uniform(-0.02, 0.02, size=d).astype(dtype)
    for i in range(dims.depth):
        pre = f"blocks.{i}."
        p[pre + "ln1.g"] = np.ones(d, dtype=dtype)
        p[pre + "ln1.b"] = np.zeros(d, dtype=dtype)
        for proj in ("wq", "wk", "wv", "wo"):
            p[pre + "attn." + proj] = _xavier(rng, d, d, dtype)
        # no key bias: softmax is invariant to it, so it could never train
        for bias in ("bq", "bv", "bo"):
            p[pre + "attn." + bias] = np.zeros(d, dtype=dtype)
        p[pre + "ln2.g"] = np.ones(d, dtype=dtype)
        p[pre + "ln2.b"] = np.zeros(d, dtype=dtype)
        p[pre + "ffn.w1"] = _xavier(rng, d, f, dtype)
        p[pre + "ffn.b1"] = np.zeros(f, dtype=dtype)
        p[pre + "ffn.w2"] = _xavier(rng, f, d, dtype)
        p[pre + "ffn.b2"] = np.zeros(d, dtype=dtype)
    p["recon_head.w"] = _xavier(rng, d, dims.recon_dim, dtype)
    p["recon_head.b"] = np.zeros(dims.recon_dim, dtype=dtype)
    if dims.classes is not None:
        p["cls_head.w"] = _xavier(rng, d, dims.classes, dtype)
        p["cls_head.b"] = np.zeros(dims.classes, dtype=dtype)
    return ToyMimModel(params=p, dims=dims)


def attach_cls_head(model: ToyMimModel, classes: int, seed: int) -> ToyMimModel:
    """Return a copy of ``model`` with a freshly initialized classifier head."""
    if classes < 2:
        raise ConfigError(f"classifier head needs at least 2 classes, got {classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    dtype = model.dtype
    params = dict(model.params)
    params["cls_head.w"] = _xavier(rng, model.dims.d_model, classes, dtype)
    params["cls_head.b"] = np.zeros(classes, dtype=dtype)
    return ToyMimModel(params=params, dims=replace(model.dims, classes=classes))


# ---------------------------------------------------------------------------
# forward / backward


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi
    dout = phi + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return out, dout


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + LAYERNORM_EPS)
    xhat = (x - mu) * istd
    return g * xhat + b, (xhat, istd)


def _layernorm_backward(dy, g, cache):
    xhat, istd = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    dx = istd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _encode(params: dict, dims: ModelDims, tokens: np.ndarray, mask_bool: np.ndarray | None):
    """Batched encoder forward. Returns (output, cache) with everything the
    backward pass needs."""
    heads = dims.heads
    scale = 1.0 / math.sqrt(dims.d_model // heads)
    emb = tokens @ params["patch_embed.w"] + params["patch_embed.b"]
    if mask_bool is not None:
        emb = np.where(mask_bool[:, :, None], params["mask_token"], emb)
    x = emb + params["pos_embed"]
    blocks = []
    for i in range(dims.depth):
        pre = f"blocks.{i}."
        n1, ln1_cache = _layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = _split_heads(n1 @ params[pre + "attn.wq"] + params[pre + "attn.bq"], heads)
        k = _split_heads(n1 @ params[pre + "attn.wk"], heads)
        v = _split_heads(n1 @ params[pre + "attn.wv"] + params[pre + "attn.bv"], heads)
        att = _softmax_last(q @ k.transpose(0, 1, 3, 2) * scale)
        ctx = _merge_heads(att @ v)
        proj = ctx @ params[pre + "attn.wo"] + params[pre + "attn.bo"]
        x_attn = x + proj
        n2, ln2_cache = _layernorm(x_attn, params[pre + "ln2.g"], params[pre + "ln2.b"])
        h1 = n2 @ params[pre + "ffn.w1"] + params[pre + "ffn.b1"]
        act, dact = _gelu(h1)
        x_out = x_attn + act @ params[pre + "ffn.w2"] + params[pre + "ffn.b2"]
        blocks.append(
            {"x_in": x, "n1": n1, "ln1": ln1_cache, "q": q, "k": k, "v": v, "att": att,
             "ctx": ctx, "x_attn": x_attn, "n2": n2, "ln2": ln2_cache, "act": act, "dact": dact}
        )
        x = x_out
    cache = {"tokens": tokens, "mask": mask_bool, "blocks": blocks, "scale": scale}
    return x, cache


def _linear_backward(x, w, dy):
    dw = np.einsum("bti,bto->io", x, dy)
    db = dy.sum(axis=(0, 1))
    dx = dy @ w.T
    return dx, dw, db


def _encode_backward(params: dict, dims: ModelDims, cache: dict, dout: np.ndarray, grads: dict):
    """Accumulate parameter gradients of the encoder into ``grads``."""
    scale = cache["scale"]
    dx = dout
    for i in reversed(range(dims.depth)):
        pre = f"blocks.{i}."
        blk = cache["blocks"][i]
        # feed-forward branch
        dact = dx @ params[pre + "ffn.w2"].T
        grads[pre + "ffn.w2"] += np.einsum("btf,btd->fd", blk["act"], dx)
        grads[pre + "ffn.b2"] += dx.sum(axis=(0, 1))
        dh1 = dact * blk["dact"]
        dn2, dw1, db1 = _linear_backward(blk["n2"], params[pre + "ffn.w1"], dh1)
        grads[pre + "ffn.w1"] += dw1
        grads[pre + "ffn.b1"] += db1
        dx_attn, dg2, db2 = _layernorm_backward(dn2, params[pre + "ln2.g"], blk["ln2"])
        grads[pre + "ln2.g"] += dg2
        grads[pre + "ln2.b"] += db2
        dx_attn = dx_attn + dx  # residual
        # attention branch
        dctx, dwo, dbo = _linear_backward(blk["ctx"], params[pre + "attn.wo"], dx_attn)
        grads[pre + "attn.wo"] += dwo
        grads[pre + "attn.bo"] += dbo
        dheads = _split_heads(dctx, dims.heads)
        datt = dheads @ blk["v"].transpose(0, 1, 3, 2)
        dv = blk["att"].transpose(0, 1, 3, 2) @ dheads
        ds = blk["att"] * (datt - (datt * blk["att"]).sum(axis=-1, keepdims=True))
        dq = ds @ blk["k"] * scale
        dk = ds.transpose(0, 1, 3, 2) @ blk["q"] * scale
        dn1 = np.zeros_like(blk["n1"])
        for dmat, wname, bname in ((dq, "wq", "bq"), (dk, "wk", None), (dv, "wv", "bv")):
            merged = _merge_heads(dmat)
            dn1_part, dw, db = _linear_backward(blk["n1"], params[pre + "attn." + wname], merged)
            grads[pre + "attn." + wname] += dw
            if bname is not None:
                grads[pre + "attn." + bname] += db
            dn1 += dn1_part
        dx_in, dg1, db1_ = _layernorm_backward(dn1, params[pre + "ln1.g"], blk["ln1"])
        grads[pre + "ln1.g"] += dg1
        grads[pre + "ln1.b"] += db1_
        dx = dx_in + dx_attn  # residual
    # embeddings
    grads["pos_embed"] += dx.sum(axis=0)
    mask_bool = cache["mask"]
    if mask_bool is not None:
        grads["mask_token"] += dx[mask_bool].sum(axis=0)
        demb = np.where(mask_bool[:, :, None], 0.0, dx)
    else:
        demb = dx
    grads["patch_embed.w"] += np.einsum("bti,btd->id", cache["tokens"], demb)
    grads["patch_embed.b"] += demb.sum(axis=(0, 1))


def _zero_grads(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def _check_geometry(model: ToyMimModel, patches: PatchSequence) -> None:
    if patches.token_count != model.dims.tokens:
        raise ShapeError(
            f"patch sequence has {patches.token_count} tokens, model expects {model.dims.tokens}"
        )
    if patches.tokens.shape[1] != model.dims.token_dim:
        raise ShapeError(
            f"token dimension {patches.tokens.shape[1]} does not match model "
            f"patch geometry {model.dims.token_dim}"
        )


def forward_encoder(
    model: ToyMimModel, patches: PatchSequence, mask: MaskSpec | None = None
) -> np.ndarray:
    """Encode one patch sequence; returns the (T, D) latent matrix."""
    _check_geometry(model, patches)
    tokens = patches.tokens.astype(model.dtype)[None]
    mask_bool = None if mask is None else mask.as_bool(patches.token_count)[None]
    out, _ = _encode(model.params, model.dims, tokens, mask_bool)
    if not np.all(np.isfinite(out)):
        raise NumericError("encoder produced non-finite activations")
    return out[0]


# ---------------------------------------------------------------------------
# codebook


@dataclass(frozen=True)
class Codebook:
    """k-means centroids over raw patch vectors, used as discrete targets."""

    centroids: np.ndarray
    quantization_trace: tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise ConfigError("centroids must be a non-empty matrix")
        if not np.all(np.isfinite(c)):
            raise NumericError("centroids contain non-finite values")
        object.__setattr__(self, "centroids", c)

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    def assign(self, vectors: np.ndarray) -> np.ndarray:
        """Nearest-centroid index per row, ties toward the lowest index."""
        v = np.asarray(vectors, dtype=np.float64)
        d2 = ((v[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def build_codebook(patch_vectors, size: int, iters: int = 25, seed: int = 0) -> Codebook:
    """Lloyd k-means from seeded farthest-point initialization.

    Total quantization error is non-increasing across iterations; empty
    clusters keep their previous centroid.
    """
    vectors = np.asarray(patch_vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise DataError("patch vectors must form a non-empty matrix")
    if size < 1:
        raise ConfigError(f"codebook size must be positive, got {size}")
    if np.unique(vectors, axis=0).shape[0] < size:
        raise DataError(f"need at least {size} distinct patch vectors")
    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = np.empty((size, vectors.shape[1]))
    centroids[0] = vectors[rng.integers(vectors.shape[0])]
    d2 = ((vectors - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, size):
        centroids[i] = vectors[int(np.argmax(d2))]
        d2 = np.minimum(d2, ((vectors - centroids[i]) ** 2).sum(axis=1))
    trace = []
    for _ in range(iters):
        dist = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(dist, axis=1)
        trace.append(float(dist[np.arange(vectors.shape[0]), labels].sum()))
        new_centroids = centroids.copy()
        for c in range(size):
            members = vectors[labels == c]
            if members.shape[0]:
                new_centroids[c] = members.mean(axis=0)
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    return Codebook(centroids=centroids, quantization_trace=tuple(trace))


# ---------------------------------------------------------------------------
# losses


def _mim_loss_and_grad_batch(
    params: dict,
    dims: ModelDims,
    tokens: np.ndarray,
    mask_bool: np.ndarray,
    target_mode: str,
    codebook: Codebook | None,
    want_grads: bool,
):
    # divergence shows up as inf/nan and is raised as NumericError below,
    # so the intermediate overflow warnings are pure noise
    with np.errstate(over="ignore", invalid="ignore"):
        return _mim_loss_grad_inner(params, dims, tokens, mask_bool, target_mode, codebook, want_grads)


def _mim_loss_grad_inner(params, dims, tokens, mask_bool, target_mode, codebook, want_grads):
    out, cache = _encode(params, dims, tokens, mask_bool)
    pred = out @ params["recon_head.w"] + params["recon_head.b"]
    n_masked = int(mask_bool.sum())
    if target_mode == "pixel":
        resid = np.where(mask_bool[:, :, None], pred - tokens, 0.0)
        denom = n_masked * dims.recon_dim
        loss = float((resid * resid).sum() / denom)
        dpred = 2.0 * resid / denom
    else:
        logits = pred  # (B, T, K_cb)
        flat = logits[mask_bool]  # (n_masked, K_cb)
        targets = codebook.assign(tokens[mask_bool])
        shifted = flat - flat.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-logp[np.arange(n_masked), targets].mean())
        dflat = np.exp(logp)
        dflat[np.arange(n_masked), targets] -= 1.0
        dflat /= n_masked
        dpred = np.zeros_like(pred)
        dpred[mask_bool] = dflat
    if not math.isfinite(loss):
        raise NumericError("reconstruction loss is non-finite")
    if not want_grads:
        return loss, None
    grads = _zero_grads(params)
    dout, dw, db = _linear_backward(out, params["recon_head.w"], dpred.astype(out.dtype))
    grads["recon_head.w"] += dw
    grads["recon_head.b"] += db
    _encode_backward(params, dims, cache, dout, grads)
    return loss, grads


def _validate_mim_inputs(model, patches, mask, target_mode, codebook):
    _check_geometry(model, patches)
    if target_mode not in ("pixel", "codebook"):
        raise ConfigError(f"unknown reconstruction target mode {target_mode!r}")
    if target_mode == "codebook":
        if codebook is None:
            raise ConfigError("codebook mode requires a codebook")
        if model.dims.recon_dim != codebook.size:
            raise ShapeError(
                f"reconstruction head is {model.dims.recon_dim}-dimensional but the "
                f"codebook holds {codebook.size} centroids"
            )
    elif codebook is not None:
        raise ConfigError("pixel mode does not take a codebook")
    if target_mode == "pixel" and model.dims.recon_dim != model.dims.token_dim:
        raise ShapeError(
            f"pixel targets need a {model.dims.token_dim}-dimensional reconstruction head, "
            f"got {model.dims.recon_dim}"
        )
    if mask is None:
        raise ConfigError("reconstruction loss needs a non-empty mask")


def mim_loss(
    model: ToyMimModel,
    patches: PatchSequence,
    mask: MaskSpec,
    target_mode: str = "pixel",
    codebook: Codebook | None = None,
) -> float:
    """Reconstruction loss over masked positions only.

    Pixel mode: mean squared error between head outputs and raw patch
    vectors. Codebook mode: cross-entropy against each masked patch's
    nearest-centroid index.
    """
    _validate_mim_inputs(model, patches, mask, target_mode, codebook)
    tokens = patches.tokens.astype(model.dtype)[None]
    mask_bool = mask.as_bool(patches.token_count)[None]
    loss, _ = _mim_loss_and_grad_batch(
        model.params, model.dims, tokens, mask_bool, target_mode, codebook, want_grads=False
    )
    return loss


def mim_loss_and_grad(
    model: ToyMimModel,
    patches: PatchSequence,
    mask: MaskSpec,
    target_mode: str = "pixel",
    codebook: Codebook | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus analytic parameter gradients, for training and checking."""
    _validate_mim_inputs(model, patches, mask, target_mode, codebook)
    tokens = patches.tokens.astype(model.dtype)[None]
    mask_bool = mask.as_bool(patches.token_count)[None]
    return _mim_loss_and_grad_batch(
        model.params, model.dims, tokens, mask_bool, target_mode, codebook, want_grads=True
    )


def _classify_loss_and_grad_batch(
    params: dict, dims: ModelDims, tokens: np.ndarray, targets: np.ndarray, want_grads: bool
):
    """Cross-entropy of the classifier head on mean-pooled encoder output.

    ``targets`` is a (B, K) matrix of probability vectors.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _classify_loss_grad_inner(params, dims, tokens, targets, want_grads)


def _classify_loss_grad_inner(params, dims, tokens, targets, want_grads):
    out, cache = _encode(params, dims, tokens, None)
    pooled = out.mean(axis=1)  # (B, D)
    logits = pooled @ params["cls_head.w"] + params["cls_head.b"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    b = tokens.shape[0]
    loss = float(-(targets * logp).sum() / b)
    if not math.isfinite(loss):
        raise NumericError("classification loss is non-finite")
    accuracy = float((logits.argmax(axis=1) == targets.argmax(axis=1)).mean())
    if not want_grads:
        return loss, accuracy, None
    dlogits = (np.exp(logp) - targets) / b
    grads = _zero_grads(params)
    grads["cls_head.w"] += pooled.T @ dlogits
    grads["cls_head.b"] += dlogits.sum(axis=0)
    dpooled = dlogits @ params["cls_head.w"].T
    dout = np.repeat(dpooled[:, None, :], dims.tokens, axis=1) / dims.tokens
    _encode_backward(params, dims, cache, dout.astype(out.dtype), grads)
    return loss, accuracy, grads


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Pretraining hyperparameters plus toy-encoder geometry."""

    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 0.01
    momentum: float = 0.9
    mask_ratio: float = 0.4
    target_mode: str = "pixel"
    codebook_size: int = 16
    codebook_iters: int = 25
    patch_size: int = 4
    d_model: int = 64
    depth: int = 2
    heads: int = 4
    dtype: str = "float32"

    def as_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


@dataclass(frozen=True)
class TrainResult:
    model: ToyMimModel
    epoch_losses: tuple[float, ...]
    epoch_accuracy: tuple[float, ...] | None = None
    codebook: Codebook | None = None


def _sgd_step(params: dict, grads: dict, velocity: dict, lr: float, momentum: float) -> None:
    for name, g in grads.items():
        velocity[name] = momentum * velocity[name] + g
        params[name] -= (lr * velocity[name]).astype(params[name].dtype)


def train_mim(data: ImageDataset, config: TrainConfig, seed: int) -> TrainResult:
    """Minibatch SGD with momentum on the reconstruction loss.

    Every sample gets a fresh mask each epoch. Fully deterministic given
    (data, config, seed) on one platform.
    """
    h, w, c = data.image_shape
    if h % config.patch_size or w % config.patch_size:
        raise ShapeError(
            f"images of {h}x{w} are not divisible by patch size {config.patch_size}"
        )
    dtype = np.dtype(config.dtype)
    tokens_all = _batch_patchify(data.images.astype(dtype), config.patch_size)
    n, t, token_dim = tokens_all.shape

    codebook = None
    recon_dim = token_dim
    if config.target_mode == "codebook":
        codebook = build_codebook(
            tokens_all.reshape(n * t, token_dim).astype(np.float64),
            config.codebook_size,
            iters=config.codebook_iters,
            seed=seed,
        )
        recon_dim = codebook.size
    elif config.target_mode != "pixel":
        raise ConfigError(f"unknown reconstruction target mode {config.target_mode!r}")

    dims = ModelDims(
        d_model=config.d_model,
        depth=config.depth,
        heads=config.heads,
        tokens=t,
        patch=config.patch_size,
        channels=c,
        recon_dim=recon_dim,
    )
    model = init_model(dims, seed, dtype=dtype)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = _zero_grads(params)
    rng = np.random.Generator(np.random.PCG64(seed))
    n_masked = math.ceil(config.mask_ratio * t)
    if not (0.0 < config.mask_ratio <= 1.0) or n_masked < 1:
        raise ConfigError(f"mask ratio {config.mask_ratio} yields no masked tokens")

    epoch_losses = []
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            mask_bool = np.zeros((batch.size, t), dtype=bool)
            for row in range(batch.size):
                mask_bool[row, _draw_mask_indices(t, config.mask_ratio, rng)] = True
            loss, grads = _mim_loss_and_grad_batch(
                params, dims, tokens_all[batch], mask_bool, config.target_mode, codebook, True
            )
            if not math.isfinite(loss):
                raise NumericError(f"training loss diverged at step {step}")
            _sgd_step(params, grads, velocity, config.learning_rate, config.momentum)
            batch_losses.append(loss)
            step += 1
        epoch_losses.append(float(np.mean(batch_losses)))
    return TrainResult(
        model=ToyMimModel(params=params, dims=dims),
        epoch_losses=tuple(epoch_losses),
        codebook=codebook,
    )


# ---------------------------------------------------------------------------
# gradient checking


def gradient_check(
    model: ToyMimModel,
    loss_and_grad,
    epsilon: float = 1e-5,
    min_coords: int = 200,
    seed: int = 0,
) -> float:
    """Central finite differences against the analytic gradient.

    ``loss_and_grad(model) -> (loss, grads)``. A deterministic subsample of
    at least ``min_coords`` coordinates spanning every parameter tensor is
    checked; returns the maximum relative error
    |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if epsilon <= 0:
        raise ConfigError(f"epsilon must be > 0, got {epsilon}")
    _, grads = loss_and_grad(model)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"analytic gradient for {name!r} is non-finite")
    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(model.params)
    total = sum(model.params[n].size for n in names)
    worst = 0.0
    for name in names:
        size = model.params[name].size
        want = max(1, math.ceil(min_coords * size / total))
        picked = rng.choice(size, size=min(size, want), replace=False)
        for flat in np.sort(picked):
            params_plus = dict(model.params)
            params_minus = dict(model.params)
            base = model.params[name]
            bumped = base.copy().ravel()
            bumped[flat] += epsilon
            params_plus[name] = bumped.reshape(base.shape)
            bumped = base.copy().ravel()
            bumped[flat] -= epsilon
            params_minus[name] = bumped.reshape(base.shape)
            loss_plus, _ = loss_and_grad(model.with_params(params_plus))
            loss_minus, _ = loss_and_grad(model.with_params(params_minus))
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            analytic = float(grads[name].ravel()[flat])
            err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
            worst = max(worst, err)
    return worst
