"""
Fixtures.

The session fixtures build one small synthetic corpus, a tokenizer trained on
it and a teacher trained for a couple of epochs, shared by every test that
needs real data.
"""

# 3rd party
import pytest

# My stuff
import corpus
import synthetic
import tokenizer
from model import ModelConfig
from training import TrainConfig
from training import train_teacher

TOY_VOCAB = 300
TOY_SEQUENCE_LENGTH = 33


@pytest.fixture(scope="session")
def toy_lab(tmp_path_factory):
    """Synthetic corpus, suites and task files written once per session."""
    out_dir = tmp_path_factory.mktemp("lab")
    synthetic.write_desk_data(str(out_dir), seed=0, train_words=4000, test_words=1000, n_pairs=10, n_task_examples=16)
    return out_dir


@pytest.fixture(scope="session")
def toy_spec(toy_lab):
    """CorpusSpec of the synthetic train and test files."""
    return corpus.CorpusSpec(
        sources=corpus.sources_from_dir(str(toy_lab / "corpus" / "train")),
        test_sources=corpus.sources_from_dir(str(toy_lab / "corpus" / "test")),
    )


@pytest.fixture(scope="session")
def toy_split(toy_spec):
    """``(train text, validation text)``."""
    return corpus.load_and_split(toy_spec)


@pytest.fixture(scope="session")
def toy_test_text(toy_spec):
    return corpus.load_test_text(toy_spec)


@pytest.fixture(scope="session")
def toy_tokenizer(toy_split):
    return tokenizer.bpe_train(toy_split[0], TOY_VOCAB)


@pytest.fixture(scope="session")
def toy_data(toy_split, toy_tokenizer):
    """Packed train and validation windows."""
    return corpus.prepare_datasets(toy_split[0], toy_split[1], toy_tokenizer, TOY_SEQUENCE_LENGTH)


@pytest.fixture(scope="session")
def tiny_config(toy_tokenizer):
    """Two-layer model with grouped-query attention sized for the toy corpus."""
    return ModelConfig(
        vocab_size=toy_tokenizer.vocab_size,
        n_layers=2,
        n_heads=4,
        n_kv_heads=2,
        d_model=16,
        d_ff=32,
        max_seq_len=64,
    )


@pytest.fixture(scope="session")
def fast_train_config():
    return TrainConfig(max_learning_rate=1e-2, n_epochs=2, batch_size=16, weight_decay=0.01, warmup_steps=3, seed=1)


@pytest.fixture(scope="session")
def trained_teacher(toy_data, tiny_config, fast_train_config):
    """TrainResult of a teacher trained on the toy corpus."""
    return train_teacher(toy_data, tiny_config, fast_train_config)


@pytest.fixture
def write_config(tmp_path):
    """Write a yaml config in ``tmp_path`` and return its path."""

    def _write(text, name="config.yml"):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return str(path)

    return _write
