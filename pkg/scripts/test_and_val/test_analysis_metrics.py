import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import mean_squared_error

from models.analysis_metrics import (
    AnalysisError, asymmetry_from_weights, attention_asymmetry, causal_share, first_row_error,
    neighborhood_grid, reconstruct_batches, row_error_frame, split_row_errors,
)
from models.tokenizer import TokConfig, TokenizerModel


def _uniform_weights(S, heads=2):
    return np.full((1, heads, S, S), 1.0 / S)


def _left_neighbour_weights(H, W, offset=0):
    S = offset + H * W
    weights = np.zeros((1, 1, S, S))
    for q in range(S):
        col = (q - offset) % W
        key = q - 1 if q >= offset and col > 0 else q
        weights[0, 0, q, key] = 1.0
    return weights


class TestCausalShare:
    def test_symmetric_attention_gives_one_half(self):
        report = asymmetry_from_weights(_uniform_weights(25), 0, 5, 5, scope="interior")
        assert report.causal_share == 0.5
        np.testing.assert_allclose(report.grid, 1.0 / 9, atol=1e-12)

    def test_left_neighbour_attention_is_fully_causal(self):
        report = asymmetry_from_weights(_left_neighbour_weights(4, 4, offset=3), 3, 4, 4)
        assert report.causal_share == 1.0
        assert report.grid[1, 0] > 0 and report.grid[1, 2] == 0.0

    def test_empty_ring(self):
        grid = np.zeros((3, 3))
        grid[1, 1] = 1.0
        assert causal_share(grid) == 0.5

    def test_grid_too_small(self):
        with pytest.raises(AnalysisError):
            neighborhood_grid(_uniform_weights(4), 0, 2, 2)

    def test_weights_must_cover_grid(self):
        with pytest.raises(AnalysisError):
            neighborhood_grid(_uniform_weights(8), 0, 3, 3)

    def test_frame_layout(self):
        frame = asymmetry_from_weights(_uniform_weights(9), 0, 3, 3).to_frame()
        assert list(frame.columns) == ["dr", "dc", "mass", "causal_share"]
        assert len(frame) == 9
        assert frame["mass"].sum() == pytest.approx(1.0)


class TestDecoderAsymmetry:
    def _model(self, stage1_mask):
        cfg = TokConfig(image_h=12, image_w=12, codebook_size=8, d_c=4, width=16, heads=2,
                        enc_depth=1, dec_depth=1, dec2_depth=1, buffer_count=2, stage1_mask=stage1_mask)
        return TokenizerModel(cfg, seed=0)

    def test_causal_decoder_has_no_future_mass(self, rng):
        report = attention_asymmetry(self._model("causal"), rng.random((2, 12, 12, 3)), stage=1)
        assert report.causal_share == 1.0

    def test_bidirectional_decoders_report_a_share(self, rng):
        model = self._model("bidirectional")
        model.init_stage2()
        images = rng.random((2, 12, 12, 3))
        for stage in (1, 2):
            report = attention_asymmetry(model, images, stage=stage, layer_select=[0])
            assert 0.0 < report.causal_share < 1.0
            assert report.per_head.shape == (2, 3, 3)


class TestRowErrors:
    def test_identity_is_zero(self, rng):
        images = rng.random((3, 16, 16, 3))
        assert split_row_errors(images, images, 4) == (0.0, 0.0)

    def test_matches_independent_mse(self, rng):
        target = rng.random((2, 16, 16, 3))
        recon = target + rng.normal(0, 0.1, target.shape)
        row1, rest = split_row_errors(recon, target, 4)
        assert row1 == pytest.approx(mean_squared_error(target[:, :4].reshape(-1), recon[:, :4].reshape(-1)))
        assert rest == pytest.approx(mean_squared_error(target[:, 4:].reshape(-1), recon[:, 4:].reshape(-1)))

    def test_first_row_only_damage(self, rng):
        target = rng.random((1, 8, 8, 3))
        recon = target.copy()
        recon[:, :4] += 0.5
        row1, rest = split_row_errors(recon, target, 4)
        assert row1 == pytest.approx(0.25) and rest == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(AnalysisError):
            split_row_errors(np.zeros((1, 8, 8, 3)), np.zeros((1, 4, 8, 3)), 4)

    def test_frame_has_summary_row(self, rng):
        target = rng.random((3, 8, 8, 3))
        frame = row_error_frame(target + 0.1, target, 4)
        assert list(frame["image"]) == ["0", "1", "2", "mean"]
        assert frame.iloc[-1]["mse"] == pytest.approx(0.01)
        assert isinstance(frame, pd.DataFrame)

    def test_model_first_row_error(self, micro_tok_cfg, rng):
        model = TokenizerModel(micro_tok_cfg, seed=0)
        images = rng.random((3, 8, 8, 3))
        row1, rest = first_row_error(model, images)
        assert (row1, rest) == split_row_errors(reconstruct_batches(model, images, 1), images, micro_tok_cfg.f)
        assert row1 > 0 and rest > 0
