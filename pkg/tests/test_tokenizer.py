"""
Unit tests for the tokenizer module.
"""

# Standard Library
import json

# 3rd party
import numpy as np
import pytest
import testutils

# My stuff
import tokenizer


def test_ties_go_to_the_smallest_pair():
    """
    "ab" and "cd" both occur twice: "ab" is merged first.
    """
    model = tokenizer.bpe_train("abab cdcd", 1000)
    assert model.merges == ((ord("a"), ord("b")), (ord("c"), ord("d")))
    assert model.vocab[258] == b"ab"
    assert model.vocab[259] == b"cd"
    assert model.vocab_size == 260


def test_training_stops_without_repeated_pairs():
    model = tokenizer.bpe_train("abcdef", 1000)
    assert model.merges == ()
    assert model.vocab_size == tokenizer.FIRST_MERGE_ID


def test_training_stops_at_target_size(toy_split):
    model = tokenizer.bpe_train(toy_split[0], 270)
    assert model.vocab_size == 270
    assert len(model.merges) == 270 - tokenizer.FIRST_MERGE_ID


def test_bad_training_requests():
    with pytest.raises(tokenizer.TokenizerError):
        tokenizer.bpe_train("some text", 100)
    with pytest.raises(tokenizer.TokenizerError):
        tokenizer.bpe_train("", 300)


def test_training_is_deterministic(toy_split):
    first = tokenizer.bpe_train(toy_split[0][:5000], 290)
    second = tokenizer.bpe_train(toy_split[0][:5000], 290)
    assert first == second
    assert tokenizer.tokenizer_hash(first) == tokenizer.tokenizer_hash(second)


@pytest.mark.parametrize(
    "text",
    [
        "",
        "the dogs run .",
        "caffè, naïve, 日本語 ☕",
        "  leading and trailing spaces  \n\n new document",
        "\x00\x01 control bytes",
    ],
)
def test_decode_inverts_encode(toy_tokenizer, text):
    ids = tokenizer.encode(toy_tokenizer, text)
    assert tokenizer.decode(toy_tokenizer, ids) == text
    assert all(0 <= idx < toy_tokenizer.vocab_size for idx in ids)
    assert tokenizer.BOS_ID not in ids and tokenizer.EOD_ID not in ids


def random_text(rng, corpus_text=None):
    """Mix of corpus slices, ascii, accented letters, CJK and emoji."""
    pieces = []
    for _ in range(int(rng.integers(0, 8))):
        kind = int(rng.integers(0, 5 if corpus_text else 4))
        if kind == 0:
            pieces.append("".join(chr(c) for c in rng.integers(0, 128, size=int(rng.integers(1, 12)))))
        elif kind == 1:
            pieces.append("".join(chr(c) for c in rng.integers(0xA0, 0x250, size=int(rng.integers(1, 6)))))
        elif kind == 2:
            pieces.append("".join(chr(c) for c in rng.integers(0x4E00, 0x4F00, size=int(rng.integers(1, 4)))))
        elif kind == 3:
            pieces.append("".join(chr(c) for c in rng.integers(0x1F300, 0x1F600, size=int(rng.integers(1, 3)))))
        else:
            start = int(rng.integers(0, len(corpus_text) - 80))
            pieces.append(corpus_text[start : start + int(rng.integers(1, 80))])
    return "".join(pieces)


def test_random_strings_survive_a_round_trip(toy_tokenizer):
    rng = np.random.default_rng(11)
    for _ in range(1000):
        text = random_text(rng)
        assert tokenizer.decode(toy_tokenizer, tokenizer.encode(toy_tokenizer, text)) == text


def test_the_whole_corpus_survives_a_round_trip(toy_tokenizer, toy_split, toy_test_text):
    for text in (*toy_split, toy_test_text):
        assert tokenizer.decode(toy_tokenizer, tokenizer.encode(toy_tokenizer, text)) == text


def test_a_larger_vocabulary_never_lengthens_the_encoding(toy_tokenizer, toy_split):
    smaller = tokenizer.bpe_train(toy_split[0], 280)
    assert toy_tokenizer.merges[: len(smaller.merges)] == smaller.merges
    rng = np.random.default_rng(12)
    for _ in range(50):
        text = random_text(rng, toy_split[1])
        assert len(tokenizer.encode(toy_tokenizer, text)) <= len(tokenizer.encode(smaller, text))


def test_unseen_characters_fall_back_to_bytes(toy_tokenizer):
    assert tokenizer.encode(toy_tokenizer, "€") == list("€".encode("utf-8"))


def test_encode_matches_sequential_merges(toy_tokenizer, toy_split):
    text = toy_split[1][:600]
    assert tokenizer.encode(toy_tokenizer, text) == testutils.sequential_bpe(toy_tokenizer, text)


def test_merges_shorten_the_stream(toy_tokenizer, toy_split):
    text = toy_split[1][:2000]
    assert len(tokenizer.encode(toy_tokenizer, text)) < len(text.encode("utf-8"))


def test_decode_unknown_id(toy_tokenizer):
    with pytest.raises(tokenizer.TokenizerError):
        tokenizer.decode(toy_tokenizer, [toy_tokenizer.vocab_size])


def test_special_tokens_decode_to_nothing(toy_tokenizer):
    ids = tokenizer.encode_document(toy_tokenizer, "a cat")
    assert ids[0] == tokenizer.BOS_ID
    assert ids[-1] == tokenizer.EOD_ID
    assert tokenizer.decode(toy_tokenizer, ids) == "a cat"
    assert tokenizer.encode_document(toy_tokenizer, "a cat", eod=False)[-1] != tokenizer.EOD_ID


def test_save_and_load(tmp_path, toy_tokenizer):
    path = str(tmp_path / "tokenizer.json")
    tokenizer.save(toy_tokenizer, path)
    loaded = tokenizer.load(path)
    assert loaded == toy_tokenizer
    assert tokenizer.tokenizer_hash(loaded) == tokenizer.tokenizer_hash(toy_tokenizer)
    data = json.loads((tmp_path / "tokenizer.json").read_text())
    assert data["special_tokens"] == {"<s>": 256, "</s>": 257}
    assert len(data["vocab"]) == toy_tokenizer.vocab_size


def test_hash_depends_on_merges():
    assert tokenizer.tokenizer_hash(tokenizer.bpe_train("abab abab", 259)) != tokenizer.tokenizer_hash(
        tokenizer.bpe_train("abab abab", 260)
    )


def test_load_rejects_inconsistent_files(tmp_path, toy_tokenizer):
    data = tokenizer.to_dict(toy_tokenizer)
    data["vocab"][-1] = "ff"
    path = tmp_path / "broken.json"
    path.write_text(json.dumps(data))
    with pytest.raises(tokenizer.TokenizerError):
        tokenizer.load(str(path))

    data = tokenizer.to_dict(toy_tokenizer)
    data["version"] = 99
    path.write_text(json.dumps(data))
    with pytest.raises(tokenizer.TokenizerError):
        tokenizer.load(str(path))

    path.write_text("not json")
    with pytest.raises(tokenizer.TokenizerError):
        tokenizer.load(str(path))
