import numpy as np
import pytest

from fedvit.errors import ConfigError, DomainMixingError, ShapeError
from fedvit.model import (
    EncryptedParamsError,
    GradientUpdate,
    ModelConfig,
    ModelParams,
    Sample,
    apply_sgd,
    batch_gradient,
    embed,
    evaluate_accuracy,
    forward_loss,
    init_params,
    mean_records,
    patchify,
    predict,
    sample_gradient,
)
from fedvit.numerics import Rng
from tests.conftest import random_sample, zero_params


def scaled(params: ModelParams, factor: float) -> ModelParams:
    return params.with_tensors(
        {name: m * factor for name, m in params.tensors().items()}
    )


def perturbed(params: ModelParams, name: str, index, delta: float):
    values = np.array(getattr(params, name))
    values[index] += delta
    return params.with_tensors({name: values})


def embed_loops(patches: np.ndarray, params: ModelParams) -> np.ndarray:
    n, length = patches.shape
    dim = params.e_pat.shape[1]
    tokens = np.zeros((n + 1, dim))
    for d in range(dim):
        tokens[0, d] = params.x_class[0, d] + params.e_pos[0, d]
        for i in range(n):
            total = 0.0
            for k in range(length):
                total += patches[i, k] * params.e_pat[k, d]
            tokens[i + 1, d] = total + params.e_pos[i + 1, d]
    return tokens


@pytest.mark.unit
class TestModelConfig:
    def test_defaults(self, default_cfg):
        assert default_cfg.num_patches == 16
        assert default_cfg.patch_dim == 192
        assert default_cfg.num_tokens == 17
        assert default_cfg.flat_dim == 17 * 32
        assert default_cfg.image_shape == (32, 32, 3)

    def test_shapes_in_wire_order(self, small_cfg):
        assert list(small_cfg.shapes()) == list(ModelParams.TENSOR_FIELDS)
        assert small_cfg.shapes()["e_pat"] == (48, 8)
        assert small_cfg.shapes()["head_w1"] == (5 * 8, 16)

    @pytest.mark.parametrize(
        "changes, key",
        [
            ({"patch_size": 5}, "model.patch_size"),
            ({"num_classes": 1}, "model.num_classes"),
            ({"hidden_dim": 63}, "model.hidden_dim"),
            ({"embed_dim": 0}, "model.embed_dim"),
        ],
    )
    def test_invalid(self, changes, key):
        with pytest.raises(ConfigError) as exc:
            ModelConfig(**changes)
        assert exc.value.key == key


@pytest.mark.unit
class TestSample:
    def test_pixels_frozen(self, small_sample):
        assert not small_sample.pixels.flags.writeable

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            Sample(np.full((2, 2, 1), 1.5), 0)

    def test_wrong_rank(self):
        with pytest.raises(ShapeError):
            Sample(np.zeros((2, 2)), 0)


@pytest.mark.unit
class TestPatchify:
    def test_order(self, small_cfg):
        pixels = np.arange(8 * 8 * 3, dtype=np.float64).reshape(8, 8, 3)
        patches = patchify(pixels, small_cfg)
        assert patches.shape == (4, 48)
        # first patch, first row of pixels, channel fastest
        np.testing.assert_allclose(patches[0, :12], np.arange(12))
        # second patch starts four pixels to the right
        np.testing.assert_allclose(patches[1, :3], [12, 13, 14])
        # third patch starts four rows down
        np.testing.assert_allclose(patches[2, :3], [96, 97, 98])

    def test_wrong_shape(self, small_cfg):
        with pytest.raises(ShapeError):
            patchify(np.zeros((4, 4, 3)), small_cfg)


@pytest.mark.unit
class TestForward:
    def test_embed(self, small_cfg, small_params, small_sample):
        patches = patchify(small_sample, small_cfg)
        z0 = embed(patches, small_params)
        np.testing.assert_allclose(
            z0[0], small_params.x_class[0] + small_params.e_pos[0]
        )
        np.testing.assert_allclose(
            z0[1:], patches @ small_params.e_pat + small_params.e_pos[1:]
        )

    def test_embed_matches_loops(self, small_cfg, small_params, small_sample):
        patches = patchify(small_sample, small_cfg)
        np.testing.assert_allclose(
            embed(patches, small_params),
            embed_loops(patches, small_params),
            rtol=1e-12,
            atol=1e-12,
        )

    def test_embed_linear_in_patches(self, small_cfg, small_params):
        a = patchify(random_sample(small_cfg, 2), small_cfg)
        b = patchify(random_sample(small_cfg, 3), small_cfg)
        alpha, beta = 0.6, -1.3
        fixed = embed_loops(np.zeros_like(a), small_params)
        expected = (
            alpha * embed_loops(a, small_params)
            + beta * embed_loops(b, small_params)
            - (alpha + beta - 1) * fixed
        )
        np.testing.assert_allclose(
            embed(alpha * a + beta * b, small_params),
            expected,
            rtol=0,
            atol=1e-12,
        )

    def test_forward_is_deterministic(
        self, small_cfg, small_params, small_sample
    ):
        first, first_cache = forward_loss(
            small_sample, small_params, small_cfg
        )
        second, second_cache = forward_loss(
            small_sample, small_params, small_cfg
        )
        assert first == second
        assert first_cache.probs.tobytes() == second_cache.probs.tobytes()
        assert first_cache.z0.tobytes() == second_cache.z0.tobytes()

    def test_uniform_loss_at_zero(self, small_cfg, small_sample):
        loss, cache = forward_loss(
            small_sample, zero_params(small_cfg), small_cfg
        )
        assert loss == pytest.approx(np.log(3))
        np.testing.assert_allclose(cache.probs, np.full((1, 3), 1 / 3))

    def test_encrypted_params_rejected(self, small_cfg, small_sample):
        with pytest.raises(EncryptedParamsError):
            forward_loss(
                small_sample, zero_params(small_cfg, encrypted=True), small_cfg
            )

    def test_label_out_of_range(self, small_cfg, small_params):
        with pytest.raises(ValueError):
            forward_loss(
                random_sample(small_cfg, 1, label=3), small_params, small_cfg
            )


@pytest.mark.unit
class TestBackward:
    def test_finite_differences(self, small_cfg, small_params, small_sample):
        params = scaled(small_params, 10.0)
        grad = sample_gradient(small_sample, params, small_cfg)
        eps = 1e-5
        for name, grad_name in zip(
            ModelParams.TENSOR_FIELDS, GradientUpdate.TENSOR_FIELDS
        ):
            for index in np.ndindex(getattr(params, name).shape):
                up, _ = forward_loss(
                    small_sample,
                    perturbed(params, name, index, eps),
                    small_cfg,
                )
                down, _ = forward_loss(
                    small_sample,
                    perturbed(params, name, index, -eps),
                    small_cfg,
                )
                numeric = (up - down) / (2 * eps)
                analytic = getattr(grad, grad_name)[index]
                assert analytic == pytest.approx(numeric, rel=1e-6, abs=1e-8)

    def test_position_gradient_is_token_gradient(
        self, small_cfg, small_params, small_sample
    ):
        grad = sample_gradient(small_sample, small_params, small_cfg)
        patches = patchify(small_sample, small_cfg)
        np.testing.assert_allclose(grad.g_class, grad.g_pos[:1])
        np.testing.assert_allclose(
            grad.g_pat, patches.T @ grad.g_pos[1:], atol=1e-15
        )

    def test_batch_gradient_is_mean(self, small_cfg, small_params):
        samples = [random_sample(small_cfg, s, label=s % 3) for s in range(4)]
        batch = batch_gradient(samples, small_params, small_cfg)
        singles = [
            sample_gradient(s, small_params, small_cfg) for s in samples
        ]
        np.testing.assert_allclose(
            batch.g_head_w1,
            sum(g.g_head_w1 for g in singles) / 4,
            atol=1e-15,
        )
        assert batch.loss == pytest.approx(sum(g.loss for g in singles) / 4)

    def test_empty_batch(self, small_cfg, small_params):
        with pytest.raises(ValueError):
            batch_gradient([], small_params, small_cfg)


@pytest.mark.unit
class TestUpdates:
    def test_sgd_zero_lr(self, small_cfg, small_params, small_sample):
        grad = sample_gradient(small_sample, small_params, small_cfg)
        updated = apply_sgd(small_params, grad, 0.0)
        for name, value in updated.tensors().items():
            assert np.array_equal(value, getattr(small_params, name))

    def test_sgd_unit_lr(self, small_cfg, small_params, small_sample):
        grad = sample_gradient(small_sample, small_params, small_cfg)
        updated = apply_sgd(small_params, grad, 1.0)
        np.testing.assert_array_equal(
            updated.e_pat, small_params.e_pat - grad.g_pat
        )
        np.testing.assert_array_equal(
            updated.head_b2, small_params.head_b2 - grad.g_head_b2
        )

    def test_sgd_domain_mixing(self, small_cfg, small_params, small_sample):
        grad = sample_gradient(small_sample, small_params, small_cfg)
        with pytest.raises(DomainMixingError):
            apply_sgd(zero_params(small_cfg, encrypted=True), grad, 0.1)

    def test_mean_records(self, small_cfg):
        a = init_params(small_cfg, Rng(1, "model/init"))
        b = init_params(small_cfg, Rng(2, "model/init"))
        mean = mean_records([a, b])
        np.testing.assert_allclose(mean.e_pos, (a.e_pos + b.e_pos) / 2)
        assert not mean.encrypted

    def test_mean_records_domain_mixing(self, small_cfg):
        with pytest.raises(DomainMixingError):
            mean_records(
                [
                    zero_params(small_cfg),
                    zero_params(small_cfg, encrypted=True),
                ]
            )

    def test_mean_of_nothing(self):
        with pytest.raises(ValueError):
            mean_records([])

    def test_check_shapes(self, small_cfg, default_cfg):
        zero_params(small_cfg).check_shapes(small_cfg)
        with pytest.raises(ShapeError):
            zero_params(small_cfg).check_shapes(default_cfg)


@pytest.mark.unit
class TestPredict:
    def test_matches_single_forward(self, small_cfg, small_params):
        params = scaled(small_params, 10.0)
        samples = [random_sample(small_cfg, s) for s in range(6)]
        expected = [
            int(np.argmax(forward_loss(s, params, small_cfg)[1].probs))
            for s in samples
        ]
        assert predict(samples, params, small_cfg) == expected

    def test_accuracy(self, small_cfg, small_params):
        samples = [random_sample(small_cfg, s, label=0) for s in range(4)]
        predictions = predict(samples, small_params, small_cfg)
        expected = 100.0 * predictions.count(0) / 4
        assert evaluate_accuracy(samples, small_params, small_cfg) == expected

    def test_empty(self, small_cfg, small_params):
        assert predict([], small_params, small_cfg) == []
        with pytest.raises(ValueError):
            evaluate_accuracy([], small_params, small_cfg)
