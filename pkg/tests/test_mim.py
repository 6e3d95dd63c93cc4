import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mood.datamodel import generate_synthetic
from mood.errors import ConfigError, DataError, ShapeError
from mood.mim import (
    Codebook,
    MaskSpec,
    ModelDims,
    ToyMimModel,
    TrainConfig,
    build_codebook,
    forward_encoder,
    gradient_check,
    init_model,
    mim_loss,
    mim_loss_and_grad,
    patchify,
    sample_mask,
    train_mim,
    unpatchify,
)


def test_patchify_row_major_example():
    img = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    ps = patchify(img, 2)
    assert ps.token_count == 4
    np.testing.assert_array_equal(ps.tokens[0], [0, 1, 4, 5])
    np.testing.assert_array_equal(ps.tokens[1], [2, 3, 6, 7])
    np.testing.assert_array_equal(ps.tokens[2], [8, 9, 12, 13])


def test_patchify_shape_arithmetic():
    ps = patchify(np.zeros((8, 8, 1)), 4)
    assert ps.token_count == 4
    assert ps.tokens.shape == (4, 16)


@settings(max_examples=30, deadline=None)
@given(
    gh=st.integers(1, 4),
    gw=st.integers(1, 4),
    patch=st.integers(1, 3),
    channels=st.integers(1, 3),
    seed=st.integers(0, 2**32 - 1),
)
def test_patchify_bijection(gh, gw, patch, channels, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    img = rng.uniform(size=(gh * patch, gw * patch, channels))
    back = unpatchify(patchify(img, patch))
    np.testing.assert_array_equal(back, img)


def test_patchify_rejects_bad_geometry():
    with pytest.raises(ShapeError):
        patchify(np.zeros((5, 4, 1)), 2)


def test_sample_mask_cardinality():
    spec = sample_mask(10, 0.4, 0)
    assert spec.masked_indices.size == 4
    assert np.all(np.diff(spec.masked_indices) > 0)
    assert spec.masked_indices.min() >= 0 and spec.masked_indices.max() < 10


def test_sample_mask_full():
    spec = sample_mask(10, 1.0, 3)
    np.testing.assert_array_equal(spec.masked_indices, np.arange(10))


def test_sample_mask_deterministic():
    a = sample_mask(12, 0.5, 99)
    b = sample_mask(12, 0.5, 99)
    np.testing.assert_array_equal(a.masked_indices, b.masked_indices)


def test_sample_mask_rejects_bad_ratio():
    with pytest.raises(ConfigError):
        sample_mask(10, 0.0, 0)
    with pytest.raises(ConfigError):
        sample_mask(10, 1.5, 0)


def test_sample_mask_frequency_quick():
    # 20k draws: binomial std for p=0.4 is ~0.0035, so +-0.02 is generous
    hits = np.zeros(10)
    draws = 20_000
    for i in range(draws):
        hits[sample_mask(10, 0.4, i).masked_indices] += 1
    np.testing.assert_allclose(hits / draws, 0.4, atol=0.02)


def _tiny_model(depth=1, dtype=np.float64, classes=None, recon_dim=None, seed=5):
    dims = ModelDims(
        d_model=8, depth=depth, heads=2, tokens=4, patch=2, channels=1,
        classes=classes, recon_dim=recon_dim,
    )
    return init_model(dims, seed=seed, dtype=dtype)


def _random_patches(seed=0, dtype=np.float64):
    rng = np.random.Generator(np.random.PCG64(seed))
    return patchify(rng.uniform(size=(4, 4, 1)).astype(dtype), 2)


def test_forward_shape():
    model = _tiny_model()
    out = forward_encoder(model, _random_patches())
    assert out.shape == (4, 8)
    assert np.all(np.isfinite(out))


def test_forward_mask_independence_bit_exact():
    model = _tiny_model(depth=2)
    rng = np.random.Generator(np.random.PCG64(1))
    for trial in range(10):
        img = rng.uniform(size=(4, 4, 1))
        mask = sample_mask(4, 0.5, trial)
        base = forward_encoder(model, patchify(img, 2), mask)
        perturbed = img.copy()
        ps = patchify(img, 2)
        altered_tokens = ps.tokens.copy()
        altered_tokens[mask.masked_indices] = rng.uniform(size=(2, 4)) * 100
        altered = unpatchify(
            type(ps)(tokens=altered_tokens, grid=ps.grid, patch=2, channels=1)
        )
        out = forward_encoder(model, patchify(altered, 2), mask)
        np.testing.assert_array_equal(out, base)
        del perturbed


def test_forward_depth_zero_identity():
    model = _tiny_model(depth=0)
    ps = _random_patches()
    out = forward_encoder(model, ps)
    expected = ps.tokens @ model.params["patch_embed.w"] + model.params["patch_embed.b"]
    expected = expected + model.params["pos_embed"]
    np.testing.assert_allclose(out, expected, atol=1e-15)


def test_forward_geometry_mismatch():
    model = _tiny_model()
    with pytest.raises(ShapeError):
        forward_encoder(model, patchify(np.zeros((8, 8, 1)), 2))


def test_mim_loss_zero_residual():
    # constant patches, all-zero encoder path, reconstruction bias = target
    model = _tiny_model(depth=0)
    params = dict(model.params)
    params["patch_embed.w"] = np.zeros_like(params["patch_embed.w"])
    params["pos_embed"] = np.zeros_like(params["pos_embed"])
    params["mask_token"] = np.zeros_like(params["mask_token"])
    params["recon_head.w"] = np.zeros_like(params["recon_head.w"])
    params["recon_head.b"] = np.full(4, 0.7)
    model = model.with_params(params)
    img = np.full((4, 4, 1), 0.7)
    loss = mim_loss(model, patchify(img, 2), sample_mask(4, 0.5, 0))
    assert loss == 0.0


def test_mim_loss_ignores_unmasked_predictions():
    # depth 0: no token mixing, so a positional embedding change at an
    # unmasked index moves only that position's prediction
    model = _tiny_model(depth=0)
    ps = _random_patches(seed=3)
    mask = MaskSpec(masked_indices=np.array([1, 3]), ratio=0.5)
    base = mim_loss(model, ps, mask)
    params = dict(model.params)
    pos = params["pos_embed"].copy()
    pos[0] += 10.0  # index 0 is unmasked
    params["pos_embed"] = pos
    assert mim_loss(model.with_params(params), ps, mask) == base
    params = dict(model.params)
    pos = params["pos_embed"].copy()
    pos[1] += 10.0  # index 1 is masked
    params["pos_embed"] = pos
    assert mim_loss(model.with_params(params), ps, mask) != base


def test_mim_loss_codebook_uniform_logits():
    model = _tiny_model(depth=0, recon_dim=8)
    params = dict(model.params)
    params["recon_head.w"] = np.zeros_like(params["recon_head.w"])
    model = model.with_params(params)
    codebook = Codebook(centroids=np.arange(32, dtype=np.float64).reshape(8, 4))
    loss = mim_loss(
        model, _random_patches(), sample_mask(4, 0.5, 1), "codebook", codebook
    )
    assert loss == pytest.approx(math.log(8), rel=1e-12)


def test_mim_loss_validates_modes():
    model = _tiny_model()
    ps = _random_patches()
    mask = sample_mask(4, 0.5, 0)
    with pytest.raises(ConfigError):
        mim_loss(model, ps, mask, "codebook", None)
    with pytest.raises(ConfigError):
        mim_loss(model, ps, None)
    with pytest.raises(ShapeError):
        cb = Codebook(centroids=np.zeros((8, 4)) + np.arange(8)[:, None])
        mim_loss(model, ps, mask, "codebook", cb)  # recon head is 4-dim, not 8


def test_codebook_two_cluster_oracle():
    rng = np.random.Generator(np.random.PCG64(0))
    a = rng.normal(loc=0.0, scale=0.01, size=(40, 3))
    b = rng.normal(loc=5.0, scale=0.01, size=(40, 3))
    cb = build_codebook(np.concatenate([a, b]), size=2, iters=30, seed=1)
    means = sorted([a.mean(axis=0), b.mean(axis=0)], key=lambda m: m[0])
    got = sorted(cb.centroids.tolist(), key=lambda m: m[0])
    np.testing.assert_allclose(got[0], means[0], atol=0.01)
    np.testing.assert_allclose(got[1], means[1], atol=0.01)


def test_codebook_k1_is_global_mean():
    rng = np.random.Generator(np.random.PCG64(2))
    v = rng.normal(size=(25, 4))
    cb = build_codebook(v, size=1, iters=5, seed=0)
    np.testing.assert_allclose(cb.centroids[0], v.mean(axis=0), atol=1e-12)


def test_codebook_quantization_error_monotone():
    rng = np.random.Generator(np.random.PCG64(3))
    v = rng.normal(size=(120, 5))
    cb = build_codebook(v, size=7, iters=40, seed=4)
    trace = cb.quantization_trace
    assert len(trace) >= 2
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_codebook_rejects_too_few_distinct_vectors():
    v = np.tile(np.array([[1.0, 2.0], [3.0, 4.0]]), (5, 1))
    with pytest.raises(DataError):
        build_codebook(v, size=3)


def test_codebook_deterministic():
    rng = np.random.Generator(np.random.PCG64(5))
    v = rng.normal(size=(60, 3))
    c1 = build_codebook(v, size=4, seed=7)
    c2 = build_codebook(v, size=4, seed=7)
    np.testing.assert_array_equal(c1.centroids, c2.centroids)


def test_gradient_check_pixel_mim():
    model = _tiny_model(depth=1, dtype=np.float64)
    ps = _random_patches(seed=11)
    mask = sample_mask(4, 0.5, 2)
    err = gradient_check(model, lambda m: mim_loss_and_grad(m, ps, mask), epsilon=1e-5)
    assert err < 1e-4


def test_gradient_check_codebook_mim():
    model = _tiny_model(depth=1, dtype=np.float64, recon_dim=6)
    rng = np.random.Generator(np.random.PCG64(8))
    codebook = Codebook(centroids=rng.normal(size=(6, 4)))
    ps = _random_patches(seed=12)
    mask = sample_mask(4, 0.5, 3)
    err = gradient_check(
        model, lambda m: mim_loss_and_grad(m, ps, mask, "codebook", codebook), epsilon=1e-5
    )
    assert err < 1e-4


def test_gradient_check_constant_thunk():
    model = _tiny_model(dtype=np.float64)

    def thunk(m):
        return 1.25, {k: np.zeros_like(v) for k, v in m.params.items()}

    assert gradient_check(model, thunk, epsilon=1e-5) == 0.0


def test_gradient_check_quadratic_closed_form():
    model = _tiny_model(dtype=np.float64)

    def thunk(m):
        loss = 0.5 * sum(float((v * v).sum()) for v in m.params.values())
        return loss, {k: v.copy() for k, v in m.params.items()}

    assert gradient_check(model, thunk, epsilon=1e-5) < 1e-6


def test_train_mim_loss_halves():
    data = generate_synthetic(2, 32, 8, 1, False, 3)
    config = TrainConfig(epochs=30)
    result = train_mim(data, config, seed=3)
    assert result.epoch_losses[-1] < 0.5 * result.epoch_losses[0]


def test_train_mim_deterministic():
    data = generate_synthetic(2, 8, 8, 1, False, 4)
    config = TrainConfig(epochs=2)
    r1 = train_mim(data, config, seed=9)
    r2 = train_mim(data, config, seed=9)
    assert r1.epoch_losses == r2.epoch_losses
    for name in r1.model.params:
        np.testing.assert_array_equal(r1.model.params[name], r2.model.params[name])


def test_train_mim_zero_learning_rate_keeps_params():
    data = generate_synthetic(2, 8, 8, 1, False, 4)
    config = TrainConfig(epochs=3, learning_rate=0.0)
    result = train_mim(data, config, seed=11)
    reference = init_model(result.model.dims, seed=11, dtype=np.float32)
    for name in reference.params:
        np.testing.assert_array_equal(result.model.params[name], reference.params[name])


def test_model_checkpoint_round_trip(tmp_path):
    model = _tiny_model(classes=3, dtype=np.float32)
    path = tmp_path / "model.ckpt"
    model.save(path)
    back = ToyMimModel.load(path)
    assert back.dims == model.dims
    assert set(back.params) == set(model.params)
    for name in model.params:
        np.testing.assert_array_equal(back.params[name], model.params[name])
        assert back.params[name].dtype == model.params[name].dtype
