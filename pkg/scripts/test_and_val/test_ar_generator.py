import itertools

import numpy as np
import pytest
from sklearn.metrics import accuracy_score

from conftest import philox, randomize_parameters
from models.ar_generator import (
    ARConfig, ARModel, TokenBatch, TokenDataset, TokenDatasetError, TokenDatasetValidator,
    TokenSequence, ar_forward, ar_rope_layout, ar_train_step, build_token_dataset,
    evaluate_ar, read_token_dataset, sequence_log_prob, token_accuracy,
    token_coordinates, train_ar, write_token_dataset,
)
from models.autodiff import IndexRangeError, backward, cross_entropy, grad_check_parameters
from models.optim import OptimizerConfig
from models.tokenizer import TokConfig, TokenizerModel


def _tiny_cfg(**overrides):
    values = dict(vocab=4, classes=2, K=1, H=2, W=1, width=8, heads=2, depth=1, dtype="F64")
    values.update(overrides)
    return ARConfig(**values)


def _random_tokens(cfg, n, seed=0):
    rng = philox(seed)
    return rng.integers(0, cfg.vocab, (n, cfg.seq_len)), rng.integers(0, cfg.classes, n)


class TestLayout:
    def test_token_coordinates(self):
        cfg = ARConfig(vocab=4096, classes=1000, K=16, H=16, W=16, width=64, heads=4)
        coords = token_coordinates(cfg)
        assert coords[:16] == [(k,) for k in range(16)]
        assert coords[16] == (16, 16)
        assert coords[17] == (16, 17)
        assert coords[-1] == (31, 31)

    def test_rope_table_covers_every_input_slot(self, small_ar_cfg):
        assert len(ar_rope_layout(small_ar_cfg)) == small_ar_cfg.seq_len

    def test_prefix_free_layout(self):
        cfg = ARConfig(K=0, H=3, W=3, width=16, heads=2)
        assert cfg.seq_len == 9
        assert len(ar_rope_layout(cfg)) == 9

    def test_head_dim_must_support_2d_rotary(self):
        with pytest.raises(ValueError):
            ARConfig(width=24, heads=4)


class TestForward:
    def test_logits_shape_and_range_checks(self, small_ar_cfg):
        model = ARModel(small_ar_cfg, seed=0)
        tokens, classes = _random_tokens(small_ar_cfg, 3)
        assert ar_forward(tokens, classes, model).shape == (3, small_ar_cfg.seq_len, small_ar_cfg.vocab)
        with pytest.raises(IndexRangeError):
            ar_forward(np.full_like(tokens, small_ar_cfg.vocab), classes, model)
        with pytest.raises(IndexRangeError):
            ar_forward(tokens, classes + small_ar_cfg.classes + 1, model)
        with pytest.raises(IndexRangeError):
            ar_forward(tokens[:, :-1], classes, model)

    def test_row_i_ignores_tokens_from_i_on(self, small_ar_cfg):
        model = ARModel(small_ar_cfg, seed=1)
        tokens, classes = _random_tokens(small_ar_cfg, 1, seed=2)
        base = ar_forward(tokens, classes, model).data
        rng = philox(3)
        for j in range(small_ar_cfg.seq_len):
            changed = tokens.copy()
            changed[:, j:] = rng.integers(0, small_ar_cfg.vocab, changed[:, j:].shape)
            out = ar_forward(changed, classes, model).data
            assert np.array_equal(out[:, :j + 1], base[:, :j + 1])

    def test_null_class_is_accepted(self, small_ar_cfg):
        model = ARModel(small_ar_cfg)
        tokens, _ = _random_tokens(small_ar_cfg, 2)
        ar_forward(tokens, [small_ar_cfg.null_class_id] * 2, model)

    def test_probabilities_sum_to_one_over_all_sequences(self):
        cfg = _tiny_cfg()
        model = ARModel(cfg, seed=0)
        randomize_parameters(model.named_parameters(), seed=1, std=0.5)
        for class_id in range(cfg.classes):
            total = sum(
                np.exp(sequence_log_prob(TokenSequence(class_id, np.array(seq)), model))
                for seq in itertools.product(range(cfg.vocab), repeat=cfg.seq_len)
            )
            assert total == pytest.approx(1.0, abs=1e-6)


class TestTraining:
    def test_dropped_class_tokens_get_no_gradient(self):
        cfg = _tiny_cfg(drop_prob=1.0, classes=3)
        model = ARModel(cfg)
        tokens, classes = _random_tokens(cfg, 6)
        loss, _ = ar_train_step(TokenBatch(tokens, classes), model, philox(0))
        backward(loss)
        grad = model.cls_emb.grad
        assert np.all(grad[:cfg.classes] == 0.0)
        assert np.any(grad[cfg.null_class_id] != 0.0)

    def test_loss_gradients_match_finite_differences(self):
        cfg = _tiny_cfg(drop_prob=0.0)
        model = ARModel(cfg, seed=2)
        params = model.named_parameters()
        randomize_parameters(params, seed=3)
        tokens, classes = _random_tokens(cfg, 4, seed=4)
        errors = grad_check_parameters(lambda: cross_entropy(ar_forward(tokens, classes, model), tokens), params)
        assert max(errors.values()) < 1e-4

    def test_fixed_seed_is_reproducible(self, small_ar_cfg):
        tokens, classes = _random_tokens(small_ar_cfg, 12)
        data = TokenDataset(tokens, classes, small_ar_cfg.vocab, small_ar_cfg.classes)
        opt = OptimizerConfig(base_lr=1e-3, batch_size=4)
        _, a = train_ar(data, small_ar_cfg, 5, opt, seed=9, log_every=100)
        _, b = train_ar(data, small_ar_cfg, 5, opt, seed=9, log_every=100)
        assert a.equals(b)

    @pytest.mark.slow
    def test_memorizes_a_tiny_corpus(self, small_ar_cfg):
        tokens, classes = _random_tokens(small_ar_cfg, 4)
        data = TokenDataset(tokens, classes, small_ar_cfg.vocab, small_ar_cfg.classes)
        cfg = ARConfig(**{**small_ar_cfg.to_dict(), "drop_prob": 0.0})
        model, metrics = train_ar(data, cfg, 300, OptimizerConfig(base_lr=3e-3, batch_size=4), seed=0, log_every=100)
        assert metrics["loss"].tail(30).mean() < metrics["loss"].head(30).mean()
        assert evaluate_ar(model, data)["accuracy"] > 0.5


class TestAccuracy:
    def test_matches_independent_recount(self, small_ar_cfg):
        model = ARModel(small_ar_cfg)
        tokens, classes = _random_tokens(small_ar_cfg, 10)
        report = evaluate_ar(model, TokenDataset(tokens, classes, small_ar_cfg.vocab, small_ar_cfg.classes), 4)
        assert report["accuracy"] == accuracy_score(report["targets"].reshape(-1), report["predictions"].reshape(-1))

    def test_perfect_and_random_logits(self):
        rng = philox(6)
        targets = rng.integers(0, 64, (200, 50))
        perfect = np.zeros((200, 50, 64))
        np.put_along_axis(perfect, targets[..., None], 1e9, axis=-1)
        assert token_accuracy(perfect, targets) == 1.0
        random_acc = token_accuracy(rng.standard_normal((200, 50, 64)), targets)
        # 1/64 with a three-sigma band over 10k positions
        assert abs(random_acc - 1 / 64) < 3 * np.sqrt((1 / 64) * (63 / 64) / 10_000)


class TestTokenDataset:
    def test_file_layout_and_round_trip(self, tmp_path, small_ar_cfg):
        tokens, classes = _random_tokens(small_ar_cfg, 5)
        data = TokenDataset(tokens, classes, small_ar_cfg.vocab, small_ar_cfg.classes)
        path = tmp_path / "tokens.bin"
        write_token_dataset(data, path)
        raw = path.read_bytes()
        assert np.frombuffer(raw[:16], dtype="<u4").tolist() == [5, small_ar_cfg.seq_len, 16, 4]
        assert len(raw) == 16 + 5 * 2 * (small_ar_cfg.seq_len + 1)
        back = read_token_dataset(path)
        np.testing.assert_array_equal(back.tokens, tokens)
        np.testing.assert_array_equal(back.class_ids, classes)

    def test_truncated_file(self, tmp_path, small_ar_cfg):
        tokens, classes = _random_tokens(small_ar_cfg, 3)
        path = tmp_path / "tokens.bin"
        write_token_dataset(TokenDataset(tokens, classes, 16, 4), path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(TokenDatasetError):
            read_token_dataset(path)

    def test_validator_rejects_mismatched_model(self, small_ar_cfg):
        tokens, classes = _random_tokens(small_ar_cfg, 3)
        data = TokenDataset(tokens, classes, 16, 4)
        assert TokenDatasetValidator.validate(data, small_ar_cfg)
        with pytest.raises(TokenDatasetError):
            TokenDatasetValidator.validate(data, ARConfig(vocab=16, classes=4, K=2, H=2, W=2, width=16, heads=2))

    def test_built_from_the_tokenizer(self, tmp_path, micro_dataset):
        cfg = TokConfig(image_h=8, image_w=8, codebook_size=8, d_c=4, width=8, heads=2,
                        enc_depth=1, dec_depth=1)
        tokenizer = TokenizerModel(cfg, seed=0)
        path = tmp_path / "tokens_train.bin"
        built = build_token_dataset(tokenizer, micro_dataset, "train", path)
        assert built.tokens.shape == (micro_dataset.split_size("train"), cfg.seq_len)
        np.testing.assert_array_equal(built.class_ids, micro_dataset.labels("train"))
        cached = build_token_dataset(tokenizer, micro_dataset, "train", path)
        np.testing.assert_array_equal(cached.tokens, built.tokens)
