"""Shared builders for small deterministic models used across test modules."""

import pytest

from plmkit.config import ModelConfig
from plmkit.tokenizer import Tokenizer, build_tokenizer

BASIC_WORDS = ["the", "quick", "red", "fox", "jumped", "over", "lazy", "dog",
               "a", "cat", "sat", "on", "mat"]


@pytest.fixture
def basic_tokenizer() -> Tokenizer:
    return Tokenizer(BASIC_WORDS)


def tiny_config(**overrides) -> ModelConfig:
    kwargs = dict(
        vocab_size=32,
        hidden_size=16,
        num_layers=2,
        num_heads=2,
        max_seq_len=24,
        dropout_p=0.0,
        architecture="encoder",
        seed=7,
    )
    kwargs.update(overrides)
    return ModelConfig(**kwargs)


@pytest.fixture
def sentiment_tokenizer() -> Tokenizer:
    from plmkit.synth import sentiment_vocabulary_corpus

    return build_tokenizer(
        sentiment_vocabulary_corpus() + ["It was . N/A"], max_vocab=300
    )
