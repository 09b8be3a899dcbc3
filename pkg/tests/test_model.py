import numpy as np
import pytest

from app.core import tensor as T
from app.core.errors import ConfigurationError, GeometryError
from app.core.model import (
    ASTParams,
    embed,
    encode,
    encoder_block,
    forward,
    init_params,
    logits_batch,
    param_shapes,
    predict_scores,
    resize_for_config,
    resize_positional,
)
from app.core.patchify import extract_patches
from app.core.schemas import ASTConfig, PatchGrid
from app.core.tensor import Tape, Tensor, float64_mode
from app.core.vit_adapt import adapt_checkpoint, synth_vit_checkpoint


def _random_params(config, std=0.3, seed=0):
    r = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arrays[name] = 1.0 + r.normal(0.0, 0.1, shape)
        else:
            arrays[name] = r.normal(0.0, std, shape)
    return ASTParams.from_arrays(arrays, requires_grad=True)


def test_param_shapes_and_count(tiny_config):
    params = init_params(tiny_config, 0)
    assert params["pos_embed"].shape == (11, 8)
    assert params["patch_proj.w"].shape == (8, 64)
    assert params["head.w"].shape == (3, 8)
    assert list(params) == list(param_shapes(tiny_config))
    params.validate(tiny_config)


def test_init_is_deterministic_per_seed(tiny_config):
    a, b = init_params(tiny_config, 3), init_params(tiny_config, 3)
    for name in a:
        np.testing.assert_array_equal(a[name].data, b[name].data)


def test_truncated_init_stays_within_two_std(tiny_config):
    params = init_params(tiny_config, 0)
    assert np.abs(params["patch_proj.w"].data).max() <= 0.04 + 1e-7


def test_validate_reports_shape_mismatch(tiny_config):
    params = init_params(tiny_config, 0)
    other = tiny_config.model_copy(update={"num_classes": 5})
    with pytest.raises(ConfigurationError, match="head.w"):
        params.validate(other)


def test_forward_shapes(tiny_config, rng):
    params = init_params(tiny_config, 0)
    spec = rng.normal(size=(40, 16)).astype(np.float32)
    out = forward(spec, params, tiny_config)
    assert out.shape == (3,)
    assert np.all((out.data > 0) & (out.data < 1))


def test_embed_rejects_wrong_sequence_length(tiny_config, rng):
    params = init_params(tiny_config, 0)
    with pytest.raises(ConfigurationError):
        embed(rng.normal(size=(7, 64)), params)


def test_single_label_predictions_are_distributions(tiny_config, rng):
    config = tiny_config.model_copy(update={"multi_label": False})
    params = init_params(config, 0)
    scores = predict_scores(rng.normal(size=(4, 40, 16)).astype(np.float32), params, config)
    np.testing.assert_allclose(scores.sum(axis=1), 1.0, rtol=1e-5)


def test_attention_rows_sum_to_one(tiny_config, rng):
    params = init_params(tiny_config, 0)
    sink = []
    logits_batch(rng.normal(size=(2, 40, 16)), params, tiny_config, attention_sink=sink)
    assert len(sink) == tiny_config.depth
    for attn in sink:
        assert attn.shape == (2, 2, 11, 11)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, rtol=1e-5)


def test_full_model_gradient_matches_finite_differences(tiny_config):
    """Every parameter of a 2-block model, float64, central differences."""
    h = 1e-5
    with float64_mode():
        params = _random_params(tiny_config)
        r = np.random.default_rng(5)
        batch = r.normal(size=(2, 40, 16))
        targets = Tensor(r.integers(0, 2, size=(2, 3)).astype(np.float64))

        def loss_of(p):
            return T.binary_cross_entropy(T.sigmoid(logits_batch(batch, p, tiny_config)), targets)

        names = list(params)
        with Tape() as tape:
            loss = loss_of(params)
            grads = tape.gradients(loss, [params[n] for n in names])

        worst = 0.0
        for name, g in zip(names, grads):
            data = params[name].data
            for idx in np.ndindex(data.shape):
                orig = data[idx]
                data[idx] = orig + h
                up = loss_of(params).item()
                data[idx] = orig - h
                down = loss_of(params).item()
                data[idx] = orig
                numeric = (up - down) / (2 * h)
                analytic = g.data[idx]
                rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4)
                worst = max(worst, rel)
    assert worst <= 1e-3


def test_patch_permutation_leaves_cls_output_unchanged(tiny_config, rng):
    """Without patch positions the encoder is permutation-equivariant, so [CLS] is invariant."""
    params = init_params(tiny_config, 1)
    params["pos_embed"].data[1:] = 0.0
    patches = extract_patches(rng.normal(size=(40, 16)).astype(np.float32), tiny_config.grid)

    def cls_scores(p):
        x = encode(embed(p, params), params, tiny_config)
        return T.linear(x[0:1], params["head.w"], params["head.b"]).data

    base = cls_scores(patches)
    for _ in range(5):
        perm = rng.permutation(len(patches))
        np.testing.assert_allclose(cls_scores(patches[perm]), base, atol=1e-5)


class TestVariableLength:
    """One adapted parameter set serves 128, 512 and 1024 frames."""

    @pytest.fixture
    def adapted(self):
        config = ASTConfig(embed_dim=8, depth=1, heads=2, mlp_ratio=2, grid=PatchGrid.square(16, 0),
                           num_classes=3, target_frames=1024)
        src = synth_vit_checkpoint(embed_dim=8, depth=1, heads=2, grid=24, patch=16, n_special=2,
                                   mlp_ratio=2, num_classes=5, seed=0)
        params, _ = adapt_checkpoint(src, config, "bilinear", rng=0)
        return config, params

    @pytest.mark.parametrize("frames, n_patches", [(128, 64), (512, 256), (1024, 512)])
    def test_resized_model_runs(self, adapted, frames, n_patches, rng):
        config, params = adapted
        target = config.model_copy(update={"target_frames": frames})
        resized = resize_for_config(params, config, target)
        assert target.num_patches == n_patches
        assert resized["pos_embed"].shape == (n_patches + 1, 8)
        np.testing.assert_array_equal(resized["pos_embed"].data[0], params["pos_embed"].data[0])
        out = predict_scores(rng.normal(size=(1, frames, 128)).astype(np.float32), resized, target)
        assert out.shape == (1, 3)
        assert np.all(np.isfinite(out))

    def test_same_grid_is_identity(self, adapted):
        config, params = adapted
        assert resize_positional(params, (8, 64), (8, 64)) is params

    def test_wrong_source_grid_rejected(self, adapted):
        _, params = adapted
        with pytest.raises(GeometryError):
            resize_positional(params, (8, 32), (8, 8))

    def test_patch_shape_change_rejected(self, adapted):
        config, params = adapted
        other = config.model_copy(update={"grid": PatchGrid.square(32, 0)})
        with pytest.raises(ConfigurationError):
            resize_for_config(params, config, other)


class TestBuildingBlocks:
    def test_zero_patches_and_cls_give_positions(self, tiny_config, rng):
        params = init_params(tiny_config, 0)
        params["patch_proj.b"].data[:] = 0.0
        params["cls"].data[:] = 0.0
        out = embed(np.zeros((10, 64), dtype=np.float32), params)
        np.testing.assert_array_equal(out.data, params["pos_embed"].data)

    def test_identity_projection_passes_patches_through(self, rng):
        config = ASTConfig(embed_dim=4, depth=0, heads=1, grid=PatchGrid.square(2, 0),
                           num_classes=1, target_frames=4, n_mels=4)
        arrays = {name: np.zeros(shape, dtype=np.float32) for name, shape in param_shapes(config).items()}
        arrays["patch_proj.w"] = np.eye(4, dtype=np.float32)
        params = ASTParams.from_arrays(arrays)
        patches = rng.normal(size=(4, 4)).astype(np.float32)
        np.testing.assert_allclose(embed(patches, params).data[1:], patches, atol=1e-7)

    def test_zero_weight_block_is_identity(self, tiny_config, rng):
        zeros = {name: Tensor(np.zeros(shape, dtype=np.float32))
                 for name, shape in param_shapes(tiny_config).items()}
        block = ASTParams(zeros).block(0)
        x = Tensor(rng.normal(size=(11, 8)).astype(np.float32))
        np.testing.assert_array_equal(encoder_block(x, block, heads=2).data, x.data)

    def test_zero_head_scores_one_half(self, tiny_config, rng):
        params = init_params(tiny_config, 0)
        params["head.w"].data[:] = 0.0
        out = forward(rng.normal(size=(40, 16)).astype(np.float32), params, tiny_config)
        np.testing.assert_array_equal(out.data, np.full(3, 0.5, dtype=np.float32))

    def test_forward_is_pure(self, tiny_config, rng):
        params = init_params(tiny_config, 0)
        spec = rng.normal(size=(40, 16)).astype(np.float32)
        np.testing.assert_array_equal(forward(spec, params, tiny_config).data,
                                      forward(spec.copy(), params, tiny_config).data)

    def test_shrinking_time_axis_row_count(self):
        config = ASTConfig(embed_dim=8, depth=1, heads=2, mlp_ratio=2, num_classes=2)
        params = init_params(config, 0)
        resized = resize_positional(params, (12, 101), (12, 51))
        assert resized["pos_embed"].shape == (12 * 51 + 1, 8)

    def test_constant_positions_survive_resize(self, tiny_config):
        params = init_params(tiny_config, 0)
        params["pos_embed"].data[:] = 0.25
        resized = resize_positional(params, (2, 5), (2, 9))
        assert np.all(resized["pos_embed"].data == np.float32(0.25))
