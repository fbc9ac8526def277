import pytest

from src.models.schemas import ModelConfig
from src.services import bm25_index, corpus_io, cross_encoder, tokenizer


@pytest.fixture(scope="session")
def synthetic():
    return corpus_io.generate_synthetic(seed=7, n_docs=200, n_queries=12, vocab_size=60, relevant_per_query=2)


@pytest.fixture(scope="session")
def index(synthetic):
    return bm25_index.build_index(synthetic.corpus)


@pytest.fixture(scope="session")
def vocab(synthetic):
    return tokenizer.build_vocab(synthetic.terms)


@pytest.fixture(scope="session")
def small_config(vocab):
    return ModelConfig(n_layers=1, d_model=16, n_heads=2, vocab_size=vocab.vocab_size, max_len=64)


@pytest.fixture(scope="session")
def small_params(small_config):
    return cross_encoder.init_params(small_config, seed=0, std=0.2)


@pytest.fixture
def small_model(small_params, vocab):
    return cross_encoder.CrossEncoderModel(small_params, vocab, batch_size=4, name="small")
