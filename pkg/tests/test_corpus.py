"""
Unit tests for the corpus module.
"""

# Standard Library
import json

# 3rd party
import numpy as np
import pytest

# My stuff
import corpus
import tokenizer


def make_documents(n_docs, kind="x"):
    return [corpus.Document(f"document number {i} " + "word " * (i % 7), kind) for i in range(n_docs)]


def test_split_is_a_partition():
    docs = make_documents(120)
    train, validation = corpus.split_train_validation(docs, (0.9, 0.1), seed=3)
    assert len(train) + len(validation) == len(docs)
    assert set(train).isdisjoint(validation)
    assert set(train) | set(validation) == set(docs)
    # train keeps the original order
    assert train == [doc for doc in docs if doc in set(train)]


def test_split_is_deterministic_and_seeded():
    docs = make_documents(200)
    first = corpus.split_train_validation(docs, (0.95, 0.05), seed=7)
    assert first == corpus.split_train_validation(docs, (0.95, 0.05), seed=7)
    blocks = {tuple(corpus.split_train_validation(docs, (0.95, 0.05), seed=seed)[1]) for seed in range(6)}
    assert len(blocks) > 1


def test_split_share_is_close_to_the_fraction():
    docs = make_documents(400)
    _, validation = corpus.split_train_validation(docs, (0.8, 0.2), seed=0)
    total = sum(len(doc.text) for doc in docs)
    share = sum(len(doc.text) for doc in validation) / total
    longest = max(len(doc.text) for doc in docs) / total
    assert abs(share - 0.2) <= longest


@pytest.mark.parametrize("fractions", [(0.5, 0.6), (1.0, 0.0), (0.9,), (-0.1, 1.1)])
def test_bad_fractions(fractions):
    with pytest.raises(corpus.CorpusError):
        corpus.split_train_validation(make_documents(10), fractions, seed=0)


def test_single_document_cannot_be_split():
    with pytest.raises(corpus.CorpusError):
        corpus.split_train_validation(make_documents(1), (0.9, 0.1), seed=0)


def test_read_documents(tmp_path):
    (tmp_path / "stories.txt").write_text("once upon a time\n\n\nthe end\n", encoding="utf-8")
    (tmp_path / "speech.txt").write_text("look at the dog !\r\n\r\nwhere is it ?", encoding="utf-8")
    sources = corpus.sources_from_dir(str(tmp_path))
    assert [kind for _, kind in sources] == ["speech", "stories"]
    docs = corpus.read_documents(sources)
    assert docs == [
        corpus.Document("look at the dog !", "speech"),
        corpus.Document("where is it ?", "speech"),
        corpus.Document("once upon a time", "stories"),
        corpus.Document("the end", "stories"),
    ]


def test_read_documents_errors(tmp_path):
    (tmp_path / "empty.txt").write_text("\n \n", encoding="utf-8")
    with pytest.raises(corpus.CorpusError):
        corpus.read_documents([(str(tmp_path / "empty.txt"), "empty")])
    with pytest.raises(corpus.CorpusError):
        corpus.read_documents([(str(tmp_path / "missing.txt"), "missing")])
    with pytest.raises(corpus.CorpusError):
        corpus.read_documents([])
    with pytest.raises(corpus.CorpusError):
        corpus.sources_from_dir(str(tmp_path / "nowhere"))


def test_corpus_spec_from_dict():
    spec = corpus.CorpusSpec.from_dict(
        {
            "sources": ["data/child_directed_speech.txt", {"path": "data/misc.txt", "kind": "subtitles"}],
            "split_fractions": [0.9, 0.1],
            "seed": 4,
        }
    )
    assert spec.sources == (("data/child_directed_speech.txt", "child_directed_speech"), ("data/misc.txt", "subtitles"))
    assert spec.split_fractions == (0.9, 0.1)
    assert spec.to_dict()["sources"][1] == {"path": "data/misc.txt", "kind": "subtitles"}
    assert spec.test_sources == ()


def test_split_manifest(tmp_path, toy_spec):
    path = str(tmp_path / "split.json")
    manifest = corpus.write_split_manifest(toy_spec, path)
    with open(path, encoding="utf-8") as file_pointer:
        assert json.load(file_pointer) == manifest
    assert manifest["seed"] == 0
    n_docs = len(corpus.read_documents(toy_spec.sources))
    assert manifest["documents"]["train"] + manifest["documents"]["validation"] == n_docs
    assert sum(manifest["kinds"]["train"].values()) == manifest["documents"]["train"]


def test_pack_sequences():
    packed = corpus.pack_sequences(list(range(23)), 5)
    assert packed.count == 4
    assert packed.sequences.shape == (4, 5)
    np.testing.assert_array_equal(packed.sequences[1], [5, 6, 7, 8, 9])
    np.testing.assert_array_equal(packed.token_ids, np.arange(20))
    with pytest.raises(corpus.CorpusError):
        corpus.pack_sequences([1, 2, 3], 1)


def test_token_stream_wraps_every_document(toy_tokenizer):
    stream = corpus.token_stream(toy_tokenizer, "the cat .\n\nthe dog .\n\n\nthe end .")
    assert stream.count(tokenizer.BOS_ID) == 3
    assert stream.count(tokenizer.EOD_ID) == 3
    assert stream[0] == tokenizer.BOS_ID
    assert stream[-1] == tokenizer.EOD_ID


def test_prepare_datasets(toy_data, toy_tokenizer):
    assert toy_data.vocab_size == toy_tokenizer.vocab_size
    assert toy_data.tokenizer_hash == tokenizer.tokenizer_hash(toy_tokenizer)
    assert toy_data.train.count > toy_data.validation.count > 0
    assert toy_data.train.token_ids.max() < toy_tokenizer.vocab_size


def test_prepare_datasets_needs_one_window(toy_tokenizer):
    with pytest.raises(corpus.CorpusError):
        corpus.prepare_datasets("a long enough training text " * 50, "short", toy_tokenizer, 33)


def test_random_subset(toy_split):
    train_text = toy_split[0]
    small = corpus.random_subset(train_text, 500, seed=2)
    large = corpus.random_subset(train_text, 1500, seed=2)
    assert corpus.random_subset(train_text, 500, seed=2) == small
    assert corpus.count_words(small) >= 500
    # same seed, same document order: the smaller subset is part of the larger
    assert set(corpus.split_documents(small)) <= set(corpus.split_documents(large))
    assert corpus.random_subset(train_text, 500, seed=3) != small


def test_random_subset_too_large(toy_split):
    with pytest.raises(corpus.CorpusError):
        corpus.random_subset(toy_split[0], corpus.count_words(toy_split[0]) + 1, seed=0)
    with pytest.raises(corpus.CorpusError):
        corpus.random_subset(toy_split[0], 0, seed=0)


def test_subset_sizes():
    assert corpus.subset_sizes(100, [1, 3]) == [100, 300]
