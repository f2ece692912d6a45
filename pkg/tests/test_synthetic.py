"""
Unit tests for the synthetic data generator.
"""

# 3rd party
import pytest

# My stuff
import synthetic
from corpus import count_words
from corpus import read_documents
from corpus import sources_from_dir
from evaluation import MinimalPairSuite
from evaluation import load_labeled


def test_generate_corpus_is_deterministic():
    first = synthetic.generate_corpus(2000, seed=3)
    assert first == synthetic.generate_corpus(2000, seed=3)
    assert first != synthetic.generate_corpus(2000, seed=4)
    assert first != synthetic.generate_corpus(2000, seed=3, stream="test")


def test_generate_corpus_budget():
    documents = synthetic.generate_corpus(5000, seed=0)
    assert set(documents) == set(synthetic.KINDS)
    for kind, docs in documents.items():
        words = sum(count_words(doc) for doc in docs)
        budget = round(5000 * synthetic.TRAIN_MIX[kind])
        assert budget <= words < budget + max(count_words(doc) for doc in docs)
    only_qa = synthetic.generate_corpus(300, seed=0, mix={"qa": 1.0})
    assert list(only_qa) == ["qa"]


def test_corpus_is_lowercase():
    for docs in synthetic.generate_corpus(1000, seed=1).values():
        for doc in docs:
            assert doc.strip()
            assert doc == doc.lower()


def test_minimal_pair_suites():
    suites = synthetic.minimal_pair_suites(seed=0, n_pairs=12)
    assert [suite.name for suite in suites] == [
        "agreement",
        "determiner_noun",
        "anaphor",
        "word_order",
        "argument_structure",
        "world_knowledge",
    ]
    for suite in suites:
        assert len(suite.pairs) == 12
        for pair in suite.pairs:
            assert pair.sentence_good != pair.sentence_bad
            assert pair.phenomenon
    assert synthetic.minimal_pair_suites(seed=0, n_pairs=12) == suites


def test_agreement_pairs_differ_in_the_verb():
    (agreement,) = [suite for suite in synthetic.minimal_pair_suites(seed=2, n_pairs=8) if suite.name == "agreement"]
    for pair in agreement.pairs:
        good, bad = pair.sentence_good.split(), pair.sentence_bad.split()
        assert len(good) == len(bad)
        assert sum(g != b for g, b in zip(good, bad)) == 1


def test_classification_task():
    examples = synthetic.classification_task(seed=0, n_examples=10)
    assert [example.label for example in examples] == [1, 0] * 5
    for example in examples:
        adjective = example.text.split()[3]
        assert adjective in (synthetic.POSITIVE if example.label else synthetic.NEGATIVE)


def test_write_desk_data(tmp_path):
    written = synthetic.write_desk_data(str(tmp_path), seed=1, train_words=1500, test_words=500, n_pairs=5, n_task_examples=6)
    assert len(written["train"]) == len(synthetic.KINDS)
    assert len(written["suites"]) == 6
    assert (tmp_path / "corpus" / "test" / "qa.txt").is_file()
    documents = read_documents(sources_from_dir(str(tmp_path / "corpus" / "train")))
    assert len({document.kind for document in documents}) == len(synthetic.KINDS)
    suite = MinimalPairSuite.load(str(tmp_path / "suites" / "anaphor.jsonl"))
    assert len(suite.pairs) == 5
    train = load_labeled(str(tmp_path / "tasks" / "sentiment_train.jsonl"))
    held_out = load_labeled(str(tmp_path / "tasks" / "sentiment_eval.jsonl"))
    assert len(train) == len(held_out) == 6
    assert {example.label for example in held_out} == {0, 1}


@pytest.mark.parametrize("kind", synthetic.KINDS)
def test_every_kind_has_a_generator(kind):
    grammar = synthetic.Grammar(synthetic.rng_for(0, "kinds"))
    assert count_words(grammar.document(kind)) > 0
