"""
Corpus ingestion, train/validation split and sequence packing.

A corpus is a list of UTF-8 text files; inside a file, documents are
separated by blank lines. Each source file carries a source-kind label
(child-directed speech, children's stories, subtitles...), kept as metadata
only: genre ratios are never rebalanced.

The validation split is one contiguous run of documents (wrapping around the
end of the document list) starting at an offset drawn from the seed, sized
so that its share of characters is as close as possible to the requested
fraction. The test split is a separate set of files.

Directory structure
~~~~~~~~~~~~~~~~~~~

A typical desk corpus, as written by ``experiment.py synth``::

    .
    ├── corpus
    │   ├── train
    │   │   ├── child_directed_speech.txt
    │   │   ├── childrens_stories.txt
    │   │   └── ...
    │   └── test
    │       └── ...
    └── suites
        ├── agreement.jsonl
        └── ...
"""

# Standard Library
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple

# 3rd party
import numpy as np

# My stuff
import tokenizer
from utils import dump_json
from utils import rng_for

DOC_SEPARATOR = "\n\n"
_BLANK_LINES = re.compile(r"\n[ \t]*\n")
DEFAULT_SPLIT = (0.95, 0.05)
MIN_SEQUENCE_LENGTH = 2


class CorpusError(ValueError):
    """
    Unreadable, empty or badly split corpus.
    """


class Document(NamedTuple):
    """
    One document with the source-kind label of the file it comes from.
    """

    text: str
    kind: str


@dataclass(frozen=True)
class CorpusSpec:
    """
    Corpus files plus the split request.

    :param sources: list of ``(path, source kind)``.
    :param split_fractions: ``(train, validation)``, summing to 1.
    :param seed: split seed.
    :param test_sources: files of the separate test split (optional).
    """

    sources: Tuple[Tuple[str, str], ...]
    split_fractions: Tuple[float, float] = DEFAULT_SPLIT
    seed: int = 0
    test_sources: Tuple[Tuple[str, str], ...] = field(default_factory=tuple)

    @classmethod
    def from_dict(cls, data: dict) -> "CorpusSpec":
        """
        Build from the ``corpus`` section of a config file.

        Sources are either ``path`` strings (kind = file stem) or
        ``{path: ..., kind: ...}`` mappings.
        """
        return cls(
            sources=_parse_sources(data.get("sources", [])),
            split_fractions=tuple(data.get("split_fractions", DEFAULT_SPLIT)),  # type: ignore[arg-type]
            seed=int(data.get("seed", 0)),
            test_sources=_parse_sources(data.get("test_sources", [])),
        )

    def to_dict(self) -> dict:
        """Complete snapshot for manifests."""
        return {
            "sources": [{"path": path, "kind": kind} for path, kind in self.sources],
            "split_fractions": list(self.split_fractions),
            "seed": self.seed,
            "test_sources": [{"path": path, "kind": kind} for path, kind in self.test_sources],
        }


def _parse_sources(items) -> Tuple[Tuple[str, str], ...]:
    parsed = []
    for item in items:
        if isinstance(item, str):
            parsed.append((item, os.path.splitext(os.path.basename(item))[0]))
        else:
            parsed.append((item["path"], item.get("kind") or os.path.splitext(os.path.basename(item["path"]))[0]))
    return tuple(parsed)


def sources_from_dir(directory: str) -> Tuple[Tuple[str, str], ...]:
    """
    All ``.txt`` files of a directory, sorted, labelled by file stem.
    """
    if not os.path.isdir(directory):
        raise CorpusError(f"corpus directory not found: {directory}")
    return tuple(
        (os.path.join(directory, name), os.path.splitext(name)[0])
        for name in sorted(os.listdir(directory))
        if name.endswith(".txt") and not name.startswith(".")
    )


class PackedDataset(NamedTuple):
    """
    Flat token stream cut into ``count`` windows of ``sequence_length``.
    """

    token_ids: np.ndarray
    sequence_length: int
    count: int

    @property
    def sequences(self) -> np.ndarray:
        """``[count x sequence_length]`` view of the token stream."""
        return self.token_ids.reshape(self.count, self.sequence_length)


class CorpusData(NamedTuple):
    """
    Packed train and validation splits, ready for the training loops.
    """

    train: PackedDataset
    validation: PackedDataset
    tokenizer_hash: str
    vocab_size: int


def split_documents(text: str) -> List[str]:
    """
    Blank-line separated documents, stripped, empty ones dropped.

    >>> split_documents("one\\n\\n two \\n\\n\\n\\nthree\\n")
    ['one', 'two', 'three']
    """
    return [doc.strip() for doc in _BLANK_LINES.split(text.replace("\r\n", "\n")) if doc.strip()]


def join_documents(docs: Sequence[str]) -> str:
    """Inverse of ``split_documents`` for stripped documents."""
    return DOC_SEPARATOR.join(docs)


def read_documents(sources: Sequence[Tuple[str, str]]) -> List[Document]:
    """
    Read every source file, in order.

    :raises CorpusError: missing or empty file, or no documents overall.
    """
    documents: List[Document] = []
    for path, kind in sources:
        if not os.path.isfile(path):
            raise CorpusError(f"corpus file not found: {path}")
        with open(path, "r", encoding="utf-8") as file_pointer:
            docs = split_documents(file_pointer.read())
        if not docs:
            raise CorpusError(f"corpus file is empty: {path}")
        logging.debug("%s: %d documents (%s)", path, len(docs), kind)
        documents.extend(Document(doc, kind) for doc in docs)
    if not documents:
        raise CorpusError("empty corpus: no source files")
    return documents


def _check_fractions(fractions: Sequence[float]) -> Tuple[float, float]:
    if len(fractions) != 2:
        raise CorpusError(f"expected (train, validation) fractions, got {fractions!r}")
    train, validation = float(fractions[0]), float(fractions[1])
    if not (0.0 < train < 1.0 and 0.0 < validation < 1.0):
        raise CorpusError(f"split fractions must both lie in (0, 1), got ({train}, {validation})")
    if abs(train + validation - 1.0) > 1e-9:
        raise CorpusError(f"split fractions must sum to 1, got {train + validation}")
    return train, validation


def split_train_validation(
    documents: Sequence[Document], fractions: Sequence[float], seed: int
) -> Tuple[List[Document], List[Document]]:
    """
    Split documents into train and validation, by document boundary.

    >>> docs = [Document(f"doc {i:03d}", "x") for i in range(200)]
    >>> train, validation = split_train_validation(docs, (0.95, 0.05), seed=1)
    >>> len(train), len(validation)
    (190, 10)
    """
    _, validation_fraction = _check_fractions(fractions)
    n_docs = len(documents)
    if n_docs < 2:
        raise CorpusError(f"need at least 2 documents to split, got {n_docs}")
    lengths = [len(doc.text) for doc in documents]
    target = validation_fraction * sum(lengths)
    start = int(rng_for(seed, "split").integers(n_docs))

    # grow the block while it gets closer to the target share of characters
    taken, chars = 0, 0
    while taken < n_docs - 1:
        candidate = chars + lengths[(start + taken) % n_docs]
        if taken and abs(candidate - target) >= abs(chars - target):
            break
        taken += 1
        chars = candidate
    in_validation = {(start + i) % n_docs for i in range(taken)}
    train = [doc for i, doc in enumerate(documents) if i not in in_validation]
    validation = [documents[(start + i) % n_docs] for i in range(taken)]
    return train, validation


def load_and_split(spec: CorpusSpec) -> Tuple[str, str]:
    """
    Read the corpus of ``spec`` and split it into train and validation text.

    :return: ``(train text, validation text)``, documents joined by blank lines.
    """
    _check_fractions(spec.split_fractions)
    documents = read_documents(spec.sources)
    train, validation = split_train_validation(documents, spec.split_fractions, spec.seed)
    logging.info(
        "Split %d documents: %d train, %d validation (seed %d)",
        len(documents),
        len(train),
        len(validation),
        spec.seed,
    )
    return join_documents([doc.text for doc in train]), join_documents([doc.text for doc in validation])


def load_test_text(spec: CorpusSpec) -> str:
    """
    Text of the separate test split.
    """
    if not spec.test_sources:
        raise CorpusError("no test sources configured")
    return join_documents([doc.text for doc in read_documents(spec.test_sources)])


def split_manifest(spec: CorpusSpec) -> dict:
    """
    Seed, fractions, and per-split document counts (overall and per kind).
    """
    documents = read_documents(spec.sources)
    train, validation = split_train_validation(documents, spec.split_fractions, spec.seed)
    return {
        "seed": spec.seed,
        "split_fractions": list(spec.split_fractions),
        "documents": {"train": len(train), "validation": len(validation)},
        "characters": {
            "train": sum(len(doc.text) for doc in train),
            "validation": sum(len(doc.text) for doc in validation),
        },
        "kinds": {
            "train": kind_counts(train),
            "validation": kind_counts(validation),
        },
    }


def write_split_manifest(spec: CorpusSpec, path: str) -> dict:
    """
    Store the split manifest as json and return it.
    """
    manifest = split_manifest(spec)
    dump_json(manifest, path)
    return manifest


def pack_sequences(token_ids: Sequence[int], sequence_length: int) -> PackedDataset:
    """
    Cut a token stream into contiguous, non-overlapping windows.

    The trailing remainder shorter than ``sequence_length`` is dropped.

    >>> pack_sequences(range(10), 4).count
    2
    >>> pack_sequences(range(3), 4).count
    0
    """
    if sequence_length < MIN_SEQUENCE_LENGTH:
        raise CorpusError(f"sequence_length must be >= {MIN_SEQUENCE_LENGTH}, got {sequence_length}")
    stream = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    count = len(stream) // sequence_length
    return PackedDataset(
        token_ids=stream[: count * sequence_length].copy(),
        sequence_length=sequence_length,
        count=count,
    )


def token_stream(model: tokenizer.TokenizerModel, text: str) -> List[int]:
    """
    Concatenate ``[BOS] + encode(doc) + [EOD]`` over the documents of ``text``.
    """
    stream: List[int] = []
    for doc in split_documents(text):
        stream.extend(tokenizer.encode_document(model, doc))
    return stream


def pack_text(model: tokenizer.TokenizerModel, text: str, sequence_length: int) -> PackedDataset:
    """
    Tokenize and pack a split.
    """
    return pack_sequences(token_stream(model, text), sequence_length)


def prepare_datasets(
    train_text: str,
    validation_text: str,
    model: tokenizer.TokenizerModel,
    sequence_length: int,
) -> CorpusData:
    """
    Tokenize and pack both splits.

    :raises CorpusError: a split too short for a single sequence.
    """
    train = pack_text(model, train_text, sequence_length)
    validation = pack_text(model, validation_text, sequence_length)
    for name, dataset in (("train", train), ("validation", validation)):
        if dataset.count == 0:
            raise CorpusError(f"{name} split is shorter than one sequence of {sequence_length} tokens")
    logging.info(
        "Packed %d train and %d validation sequences of %d tokens",
        train.count,
        validation.count,
        sequence_length,
    )
    return CorpusData(train, validation, tokenizer.tokenizer_hash(model), model.vocab_size)


def count_words(text: str) -> int:
    """
    >>> count_words("the cat  sat\\n\\non it")
    5
    """
    return len(text.split())


def random_subset(text: str, n_words: int, seed: int) -> str:
    """
    Deterministic random subset of whole documents totalling about ``n_words``.

    Documents are drawn in a seeded random order until the word budget is
    reached; the last document may overshoot it.

    :raises CorpusError: ``n_words`` larger than the corpus.
    """
    docs = split_documents(text)
    total = sum(count_words(doc) for doc in docs)
    if n_words > total:
        raise CorpusError(f"subset of {n_words} words requested, corpus has only {total}")
    if n_words <= 0:
        raise CorpusError(f"subset size must be positive, got {n_words}")
    order = rng_for(seed, "subset").permutation(len(docs))
    chosen: List[int] = []
    words = 0
    for idx in order:
        if words >= n_words:
            break
        chosen.append(int(idx))
        words += count_words(docs[idx])
    return join_documents([docs[i] for i in sorted(chosen)])


def kind_counts(documents: Sequence[Document]) -> Dict[str, int]:
    """Documents per source kind."""
    return dict(sorted(Counter(doc.kind for doc in documents).items()))


def subset_sizes(unit: int, multipliers: Optional[Sequence[int]] = None) -> List[int]:
    """
    >>> subset_sizes(1000)
    [1000, 2000, 4000, 8000]
    """
    return [unit * m for m in (multipliers or (1, 2, 4, 8))]
