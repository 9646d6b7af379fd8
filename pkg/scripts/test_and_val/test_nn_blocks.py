import numpy as np
import pytest

from conftest import philox, randomize_parameters
from models.autodiff import Tensor, backward, grad_check, grad_check_parameters, parameter
from models.nn_blocks import (
    AttentionMaskKind, BlockConfig, BlockParams, RopeConfig, RopeConfigError,
    RopeMode, _visibility, apply_rope, attention, rmsnorm, run_blocks, transformer_block,
)


def _block(width=8, heads=2, seed=0, qk_norm=False, dtype="F64"):
    cfg = BlockConfig(width, heads, mlp_ratio=2.0, qk_norm=qk_norm)
    return cfg, BlockParams(cfg, philox(seed), dtype)


class TestRmsNorm:
    def test_known_values(self):
        out = rmsnorm(Tensor(np.array([3.0, 4.0])), Tensor(np.ones(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [0.848528, 1.131371], atol=1e-6)

    def test_zero_input_with_eps(self):
        out = rmsnorm(Tensor(np.zeros(4)), Tensor(np.ones(4)), eps=1e-6)
        np.testing.assert_array_equal(out.data, np.zeros(4))

    def test_unit_rms_output(self, rng):
        x = Tensor(rng.standard_normal((5, 64)))
        out = rmsnorm(x, Tensor(np.ones(64))).data
        np.testing.assert_allclose(np.sqrt((out ** 2).mean(axis=-1)), 1.0, atol=1e-5)

    def test_per_head_normalization(self, rng):
        # query/key normalization runs on [B, heads, S, head_dim]
        q = Tensor(rng.standard_normal((2, 3, 4, 8)) * 5.0)
        out = rmsnorm(q, Tensor(np.ones((3, 1, 8)))).data
        np.testing.assert_allclose(np.sqrt((out ** 2).mean(axis=-1)), 1.0, atol=1e-5)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            rmsnorm(Tensor(np.ones(3)), Tensor(np.ones(3)), eps=-1.0)
        with pytest.raises(ValueError):
            rmsnorm(Tensor(np.ones((2, 0))), Tensor(np.ones(0)))


class TestRope:
    def test_position_zero_is_identity(self, rng):
        x = rng.standard_normal((1, 8))
        rope = RopeConfig(RopeMode.ONE_D, 8, np.array([0]))
        np.testing.assert_array_equal(apply_rope(Tensor(x), rope).data, x)

    @pytest.mark.parametrize("mode,positions", [
        (RopeMode.ONE_D, np.array([0, 3, 17, 250])),
        (RopeMode.TWO_D, np.array([[0, 0], [2, 5], [16, 31], [40, 7]])),
    ])
    def test_rotation_preserves_norm(self, rng, mode, positions):
        x = rng.standard_normal((4, 16))
        out = apply_rope(Tensor(x), RopeConfig(mode, 16, positions)).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), np.linalg.norm(x, axis=-1), rtol=1e-12)

    def test_1d_scores_depend_on_offset_only(self, rng):
        q, k = rng.standard_normal((2, 16))
        for p1, p2, shift in [(3, 7, 5), (0, 12, 40), (9, 2, 1)]:
            rope = RopeConfig(RopeMode.ONE_D, 16, np.array([p1, p2, p1 + shift, p2 + shift]))
            r = apply_rope(Tensor(np.stack([q, k, q, k])), rope).data
            assert abs(r[0] @ r[1] - r[2] @ r[3]) < 1e-9

    def test_2d_scores_depend_on_offset_only(self, rng):
        q, k = rng.standard_normal((2, 16))
        a, b = (2, 5), (4, 1)
        for dr, dc in [(3, 0), (0, 6), (7, 2)]:
            positions = np.array([a, b, (a[0] + dr, a[1] + dc), (b[0] + dr, b[1] + dc)])
            r = apply_rope(Tensor(np.stack([q, k, q, k])), RopeConfig(RopeMode.TWO_D, 16, positions)).data
            assert abs(r[0] @ r[1] - r[2] @ r[3]) < 1e-9

    def test_none_mode_leaves_slots_unrotated(self, rng):
        x = rng.standard_normal((3, 8))
        out = apply_rope(Tensor(x), RopeConfig(RopeMode.NONE, 8, np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_invalid_configs(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(RopeMode.ONE_D, 7, np.arange(3))
        with pytest.raises(RopeConfigError):
            RopeConfig(RopeMode.TWO_D, 6, np.zeros((3, 2)))
        with pytest.raises(RopeConfigError):
            apply_rope(Tensor(np.ones((5, 8))), RopeConfig(RopeMode.ONE_D, 8, np.arange(3)))


class TestAttention:
    def test_single_token_returns_value_projection(self, rng):
        cfg, params = _block()
        x = Tensor(rng.standard_normal((1, 1, 8)))
        for mask in AttentionMaskKind:
            out, weights = attention(x, params.attn, mask)
            expected = (x.data @ params.attn.wv.data) @ params.attn.wo.data
            np.testing.assert_allclose(out.data, expected, atol=1e-12)
            assert weights.data.shape == (1, 2, 1, 1)

    def test_identical_tokens_attend_uniformly(self, rng):
        cfg, params = _block()
        x = Tensor(np.tile(rng.standard_normal((1, 1, 8)), (1, 5, 1)))
        _, weights = attention(x, params.attn, AttentionMaskKind.BIDIRECTIONAL)
        np.testing.assert_allclose(weights.data, 1.0 / 5, atol=1e-6)

    def test_weights_are_distributions(self, rng):
        cfg, params = _block(qk_norm=True)
        x = Tensor(rng.standard_normal((2, 6, 8)))
        for mask in AttentionMaskKind:
            _, weights = attention(x, params.attn, mask, qk_norm=True)
            assert np.all(weights.data >= 0)
            np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_causal_weights_above_diagonal_are_zero(self, rng):
        cfg, params = _block()
        _, weights = attention(Tensor(rng.standard_normal((1, 6, 8))), params.attn, "causal")
        upper = np.triu(np.ones((6, 6), dtype=bool), k=1)
        assert np.all(weights.data[..., upper] == 0.0)

    def test_causal_visibility_with_cache_offset(self):
        table = _visibility(AttentionMaskKind.CAUSAL, 2, 5, 3)
        np.testing.assert_array_equal(table, [[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]])


class TestTransformerStack:
    def test_causal_prefix_is_bit_identical_under_future_changes(self):
        cfg, params = _block(width=16, heads=2, dtype="F32")
        blocks = [params, _block(width=16, heads=2, seed=1, dtype="F32")[1]]
        rng = philox(3)
        for _ in range(100):
            x = rng.standard_normal((1, 6, 16)).astype(np.float32)
            j = int(rng.integers(1, 6))
            perturbed = x.copy()
            perturbed[:, j:] = rng.standard_normal(perturbed[:, j:].shape)
            a = run_blocks(Tensor(x), blocks, "causal").data
            b = run_blocks(Tensor(perturbed), blocks, "causal").data
            assert np.array_equal(a[:, :j], b[:, :j])

    def test_causal_prefix_matches_truncated_run(self, rng):
        cfg, params = _block()
        x = rng.standard_normal((2, 7, 8))
        full = run_blocks(Tensor(x), [params], "causal").data
        head = run_blocks(Tensor(x[:, :4]), [params], "causal").data
        np.testing.assert_allclose(full[:, :4], head, atol=1e-6)

    def test_no_gradient_leaks_from_the_future(self, rng):
        cfg, params = _block()
        x = parameter(rng.standard_normal((1, 5, 8)))
        out = transformer_block(x, params, cfg, "causal")
        backward(out[:, 2].sum())
        assert np.all(x.grad[:, 3:] == 0.0)
        assert np.any(x.grad[:, :3] != 0.0)

    def test_zero_output_projections_give_identity(self, rng):
        cfg, params = _block()
        params.attn.wo.data = np.zeros_like(params.attn.wo.data)
        params.w_down.data = np.zeros_like(params.w_down.data)
        x = rng.standard_normal((2, 4, 8))
        np.testing.assert_array_equal(transformer_block(Tensor(x), params, cfg, "bidirectional").data, x)

    def test_block_input_gradient(self):
        cfg, params = _block()
        randomize_parameters(params.named("block"), seed=8)
        w = Tensor(philox(9).standard_normal((1, 3, 8)))
        point = philox(10).standard_normal((1, 3, 8))
        for mask in ("causal", "bidirectional"):
            assert grad_check(lambda x: (transformer_block(x, params, cfg, mask) * w).sum(), point) < 1e-4

    def test_block_parameter_gradients(self):
        cfg, params = _block(qk_norm=True)
        randomize_parameters(params.named("block"), seed=14)
        x = Tensor(philox(12).standard_normal((1, 3, 8)))
        w = Tensor(philox(13).standard_normal((1, 3, 8)))
        errors = grad_check_parameters(
            lambda: (transformer_block(x, params, cfg, "causal") * w).sum(), params.named("block")
        )
        assert max(errors.values()) < 1e-4

    def test_width_must_split_into_heads(self):
        with pytest.raises(ValueError):
            BlockConfig(10, 3)
