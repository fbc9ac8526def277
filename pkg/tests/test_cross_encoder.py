from collections import OrderedDict

import numpy as np
import pytest

from src.models.schemas import ModelConfig
from src.services import cross_encoder
from src.services.cross_encoder import CrossEncoderModel, ModelParams, ScoreBatch
from src.services.tokenizer import EncodedBatch, encode_batch, write_vocab
from src.utils.errors import CheckpointError, ModelInputError


@pytest.mark.parametrize("preset,expected", [
    ("tiny", 4_386_178),
    ("mini", 11_171_074),
    ("small", 28_764_674),
])
def test_preset_parameter_counts(preset, expected):
    assert cross_encoder.count_parameters(ModelConfig.preset(preset)) == expected


def test_count_matches_initialized_arrays(small_config, small_params):
    assert small_params.num_parameters == cross_encoder.count_parameters(small_config)


def test_pooler_can_be_dropped(small_config):
    without = small_config.model_copy(update={"pooler": False})
    d = small_config.d_model
    assert cross_encoder.count_parameters(small_config) - cross_encoder.count_parameters(without) == d * d + d


def test_zero_weights_score_one_half(small_config, vocab):
    zeros = OrderedDict((name, np.zeros(shape, dtype=np.float32))
                        for name, shape in cross_encoder.param_shapes(small_config).items())
    model = CrossEncoderModel(ModelParams(small_config, zeros), vocab)
    np.testing.assert_allclose(model.score("t1 t2", ["t3 t4", "t5"]), 0.5, atol=1e-12)


class TestForward:

    def test_padding_does_not_change_scores(self, small_model):
        short = "t30 t31 t5"
        alone = small_model.score("t30 t31", [short])
        padded = small_model.score("t30 t31", [short, " ".join(["t7"] * 40)])
        np.testing.assert_allclose(alone[0], padded[0], atol=1e-5)

    def test_batch_size_independence(self, small_params, vocab, synthetic):
        docs = [doc.text for doc in synthetic.corpus.documents[:9]]
        one = CrossEncoderModel(small_params, vocab, batch_size=1).score("t40 t41 t2", docs)
        eight = CrossEncoderModel(small_params, vocab, batch_size=8).score("t40 t41 t2", docs)
        np.testing.assert_allclose(one, eight, atol=1e-5)

    def test_attention_rows_sum_to_one(self, small_model):
        batch = small_model.encode("t1 t2", ["t3", "t4 t5 t6 t7"]).trimmed()
        sink = []
        cross_encoder.compute_logits(small_model._tensors, small_model.config, batch, attention_sink=sink)
        probs = sink[0]
        mask = batch.attention_mask.astype(bool)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-5)
        assert probs[0][:, :, ~mask[0]].max() < 1e-6

    def test_dropout_is_seeded(self, small_params, small_model):
        batch = small_model.encode("t1", ["t2 t3", "t4"]).trimmed()
        a = cross_encoder.forward(small_params, batch, train=True, seed=3)
        b = cross_encoder.forward(small_params, batch, train=True, seed=3)
        evaluation = cross_encoder.forward(small_params, batch)
        np.testing.assert_array_equal(a.s_plus, b.s_plus)
        assert not np.allclose(a.s_plus, evaluation.s_plus)

    def test_p_plus_is_stable_for_extreme_logits(self):
        scores = ScoreBatch(np.array([1000.0, -1000.0]), np.array([-1000.0, 1000.0]))
        p = scores.p_plus
        assert np.all(np.isfinite(p))
        assert np.all((p > 0.0) & (p < 1.0))
        assert p[0] > 0.999 and p[1] < 0.001

    def test_rejects_out_of_range_tokens(self, small_model):
        batch = small_model.encode("t1", ["t2"])
        bad = EncodedBatch(batch.token_ids.copy(), batch.segment_ids, batch.attention_mask)
        bad.token_ids[0, 1] = small_model.config.vocab_size
        with pytest.raises(ModelInputError, match="token id"):
            small_model.score_encoded(bad)

    def test_rejects_sequences_longer_than_position_table(self, small_model, vocab):
        long_batch = encode_batch([("t1", " ".join(["t2"] * 100))], vocab, max_len=80)
        with pytest.raises(ModelInputError, match="exceeds"):
            cross_encoder.compute_logits(small_model._tensors, small_model.config, long_batch)

    def test_vocab_larger_than_embedding_table(self, vocab):
        config = ModelConfig(n_layers=1, d_model=8, n_heads=2, vocab_size=10, max_len=16)
        with pytest.raises(ModelInputError, match="vocab"):
            CrossEncoderModel(cross_encoder.init_params(config, 0), vocab)

    def test_score_pairs_keeps_input_order(self, small_params, small_model, vocab):
        docs = ["t1 t2", "t50", "t3 t3 t3"]
        listed = cross_encoder.score_pairs(small_params, vocab, "t50 t1", docs, batch_size=2)
        np.testing.assert_allclose(listed, small_model.score("t50 t1", docs), atol=1e-6)


class TestCheckpoints:

    def test_round_trip(self, small_params, tmp_path):
        path = tmp_path / "checkpoint.bin"
        cross_encoder.save_checkpoint(small_params, path)
        loaded = cross_encoder.load_checkpoint(path)
        assert loaded.config == small_params.config
        assert list(loaded.arrays) == list(small_params.arrays)
        for name, array in small_params.arrays.items():
            np.testing.assert_array_equal(loaded.arrays[name], array)

    def test_truncated_payload(self, small_params, tmp_path):
        path = tmp_path / "checkpoint.bin"
        cross_encoder.save_checkpoint(small_params, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            cross_encoder.load_checkpoint(path)

    def test_trailing_bytes(self, small_params, tmp_path):
        path = tmp_path / "checkpoint.bin"
        cross_encoder.save_checkpoint(small_params, path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            cross_encoder.load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "checkpoint.bin"
        path.write_bytes(b"XXXX\x02\x00\x00\x00{}")
        with pytest.raises(CheckpointError, match="magic"):
            cross_encoder.load_checkpoint(path)

    def test_shape_mismatch_in_memory(self, small_config, small_params):
        arrays = OrderedDict(small_params.arrays)
        arrays["classifier.bias"] = np.zeros(3, dtype=np.float32)
        with pytest.raises(CheckpointError, match="classifier.bias"):
            ModelParams(small_config, arrays)

    def test_loaded_model_scores_identically(self, small_params, small_model, vocab, tmp_path):
        path = tmp_path / "checkpoint.bin"
        vocab_path = tmp_path / "vocab.txt"
        cross_encoder.save_checkpoint(small_params, path)
        write_vocab(vocab, vocab_path)
        restored = CrossEncoderModel.from_files(path, vocab_path, batch_size=4)
        assert restored.name == "checkpoint"
        np.testing.assert_array_equal(restored.score("t1", ["t2 t3"]), small_model.score("t1", ["t2 t3"]))
