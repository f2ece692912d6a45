"""
Byte-level Byte-Pair Encoding tokenizer.

The base alphabet is the 256 byte values, so every string is encodable
(byte fallback). Two special tokens follow the bytes (begin-of-sequence and
end-of-document), then the learned merges in training order::

    0..255        raw bytes
    256           <s>   (BOS)
    257           </s>  (EOD)
    258..         merges, in the order they were learned

Training runs over the raw byte stream: whitespace is an ordinary byte and
there is no pre-tokenization. Pairs are counted over all adjacent positions,
the most frequent pair is merged, ties go to the lexicographically smallest
``(left bytes, right bytes)`` pair. Training stops at the target vocabulary
size or when no pair occurs at least twice.

Usage
~~~~~

::

    python tokenizer.py corpus.txt --vocab-size 16000 -o tokenizer.json
"""

# Standard Library
import argparse
import heapq
import json
import logging
from collections import defaultdict
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Set
from typing import Tuple

# My stuff
from utils import sha256_bytes

FORMAT_VERSION = 1
N_BYTES = 256
BOS = "<s>"
EOD = "</s>"
SPECIAL_TOKENS = (BOS, EOD)
BOS_ID = N_BYTES
EOD_ID = N_BYTES + 1
FIRST_MERGE_ID = N_BYTES + len(SPECIAL_TOKENS)
#: vocabulary size of the full-size model
DEFAULT_VOCAB_SIZE = 16000

Pair = Tuple[int, int]


class TokenizerError(ValueError):
    """
    Invalid tokenizer input, training request or file.
    """


@dataclass(frozen=True)
class TokenizerModel:
    """
    Trained tokenizer: ordered merges plus the id -> bytes table.

    ``vocab[i]`` is the byte string of token ``i``; special tokens map to
    empty byte strings (they never come out of ``encode``).
    """

    merges: Tuple[Pair, ...]
    vocab: Tuple[bytes, ...]
    special_tokens: Tuple[str, ...] = SPECIAL_TOKENS
    #: merge pair -> training rank
    ranks: Dict[Pair, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "ranks", {pair: rank for rank, pair in enumerate(self.merges)})

    @property
    def vocab_size(self) -> int:
        """Total number of ids."""
        return len(self.vocab)

    @property
    def bos_id(self) -> int:
        """Begin-of-sequence id."""
        return BOS_ID

    @property
    def eod_id(self) -> int:
        """End-of-document id."""
        return EOD_ID


class _MergeEngine:
    """
    Token sequence as a doubly linked list with a pair -> positions index.

    A position is the index of the left token of a pair. Merging a pair walks
    its positions in ascending order, so overlapping occurrences ("aaa") are
    merged left to right, like a plain sequential scan would.
    """

    def __init__(self, ids: Sequence[int]):
        self.tokens: List[int] = list(ids)
        size = len(self.tokens)
        self.prev = list(range(-1, size - 1))
        self.next = list(range(1, size + 1))
        if size:
            self.next[-1] = -1
        self.alive = [True] * size
        self.positions: Dict[Pair, Set[int]] = defaultdict(set)
        for pos in range(size - 1):
            self.positions[(self.tokens[pos], self.tokens[pos + 1])].add(pos)

    def count(self, pair: Pair) -> int:
        """Number of (possibly overlapping) occurrences of ``pair``."""
        found = self.positions.get(pair)
        return len(found) if found else 0

    def _discard(self, pair: Pair, pos: int, touched: Set[Pair]) -> None:
        found = self.positions.get(pair)
        if found is not None:
            found.discard(pos)
            touched.add(pair)
            if not found:
                del self.positions[pair]

    def _add(self, pair: Pair, pos: int, touched: Set[Pair]) -> None:
        self.positions[pair].add(pos)
        touched.add(pair)

    def merge(self, pair: Pair, new_id: int) -> Set[Pair]:
        """
        Replace every occurrence of ``pair`` with ``new_id``.

        :return: the pairs whose occurrence counts changed.
        """
        left, right = pair
        touched: Set[Pair] = set()
        for pos in sorted(self.positions.get(pair, ())):
            if not self.alive[pos] or self.tokens[pos] != left:
                continue
            nxt = self.next[pos]
            if nxt < 0 or self.tokens[nxt] != right:
                continue
            before = self.prev[pos]
            after = self.next[nxt]
            self._discard(pair, pos, touched)
            if before >= 0:
                self._discard((self.tokens[before], left), before, touched)
            if after >= 0:
                self._discard((right, self.tokens[after]), nxt, touched)
            self.tokens[pos] = new_id
            self.alive[nxt] = False
            self.next[pos] = after
            if after >= 0:
                self.prev[after] = pos
            if before >= 0:
                self._add((self.tokens[before], new_id), before, touched)
            if after >= 0:
                self._add((new_id, self.tokens[after]), pos, touched)
        return touched

    def sequence(self) -> List[int]:
        """Current token ids, in order."""
        out = []
        pos = 0 if self.tokens else -1
        while pos >= 0:
            out.append(self.tokens[pos])
            pos = self.next[pos]
        return out


def bpe_train(text: str, target_vocab: int = DEFAULT_VOCAB_SIZE) -> TokenizerModel:
    """
    Learn BPE merges on ``text`` until the vocabulary reaches ``target_vocab``.

    >>> model = bpe_train("aaab aaab", 260)
    >>> model.merges[0] == (ord("a"), ord("a"))
    True
    >>> len(bpe_train("hello", 258).merges)
    0

    :param text: training text (non empty).
    :param target_vocab: total vocabulary size, bytes and special tokens included.
    :return: the trained TokenizerModel.
    """
    if target_vocab < FIRST_MERGE_ID:
        raise TokenizerError(
            f"target_vocab={target_vocab} is too small: at least {FIRST_MERGE_ID} ids are reserved"
        )
    if not text:
        raise TokenizerError("cannot train a tokenizer on empty text")

    vocab: List[bytes] = [bytes([b]) for b in range(N_BYTES)] + [b""] * len(SPECIAL_TOKENS)
    merges: List[Pair] = []
    engine = _MergeEngine(text.encode("utf-8"))

    def heap_key(pair: Pair) -> Tuple[int, bytes, bytes]:
        return (-engine.count(pair), vocab[pair[0]], vocab[pair[1]])

    heap = [heap_key(pair) + (pair,) for pair in engine.positions]
    heapq.heapify(heap)
    n_merges = target_vocab - FIRST_MERGE_ID
    while len(merges) < n_merges and heap:
        neg_count, _, _, pair = heapq.heappop(heap)
        current = engine.count(pair)
        if current != -neg_count:
            # stale entry, the fresh one is somewhere else in the heap
            continue
        if current < 2:
            break
        new_id = len(vocab)
        vocab.append(vocab[pair[0]] + vocab[pair[1]])
        merges.append(pair)
        for changed in engine.merge(pair, new_id):
            if engine.count(changed):
                heapq.heappush(heap, heap_key(changed) + (changed,))
        if len(merges) % 1000 == 0:
            logging.debug("BPE: %d/%d merges learned", len(merges), n_merges)

    logging.info("BPE: learned %d merges, vocabulary size %d", len(merges), len(vocab))
    return TokenizerModel(merges=tuple(merges), vocab=tuple(vocab))


def encode(model: TokenizerModel, text: str) -> List[int]:
    """
    Encode ``text`` by applying the merges in training order.

    >>> model = bpe_train("aaab aaab", 260)
    >>> encode(model, "")
    []
    >>> decode(model, encode(model, "aaab")) == "aaab"
    True
    """
    engine = _MergeEngine(text.encode("utf-8"))
    ranks = model.ranks
    heap = [(ranks[pair], pair) for pair in engine.positions if pair in ranks]
    heapq.heapify(heap)
    while heap:
        rank, pair = heapq.heappop(heap)
        if not engine.count(pair):
            continue
        for changed in engine.merge(pair, FIRST_MERGE_ID + rank):
            # merged tokens only form pairs ranked after ``rank``
            if changed in ranks and engine.count(changed):
                heapq.heappush(heap, (ranks[changed], changed))
    return engine.sequence()


def decode(model: TokenizerModel, ids: Iterable[int]) -> str:
    """
    Inverse of ``encode``. Special tokens decode to nothing.

    Byte sequences that are not valid UTF-8 (only reachable with hand-made
    id lists) are decoded with replacement characters.
    """
    chunks = []
    size = model.vocab_size
    for idx in ids:
        if not 0 <= idx < size:
            raise TokenizerError(f"unknown token id {idx} (vocabulary size {size})")
        chunks.append(model.vocab[idx])
    return b"".join(chunks).decode("utf-8", errors="replace")


def to_dict(model: TokenizerModel) -> dict:
    """
    Json-ready representation: version, special tokens, merges, vocab array.

    Vocab entries are hex strings of the token bytes; special tokens are
    listed with their ids and have an empty vocab entry.
    """
    return {
        "version": FORMAT_VERSION,
        "special_tokens": {token: N_BYTES + i for i, token in enumerate(model.special_tokens)},
        "merges": [list(pair) for pair in model.merges],
        "vocab": [token.hex() for token in model.vocab],
    }


def from_dict(data: dict) -> TokenizerModel:
    """
    Rebuild a TokenizerModel, checking the vocab against the merges.
    """
    if data.get("version") != FORMAT_VERSION:
        raise TokenizerError(f"unsupported tokenizer version {data.get('version')!r}")
    specials = data.get("special_tokens", {})
    if specials != {token: N_BYTES + i for i, token in enumerate(SPECIAL_TOKENS)}:
        raise TokenizerError(f"unexpected special tokens {specials!r}")
    merges = tuple((int(left), int(right)) for left, right in data["merges"])
    vocab = tuple(bytes.fromhex(token) for token in data["vocab"])
    expected: List[bytes] = [bytes([b]) for b in range(N_BYTES)] + [b""] * len(SPECIAL_TOKENS)
    for left, right in merges:
        if not (0 <= left < len(expected) and 0 <= right < len(expected)):
            raise TokenizerError(f"merge ({left}, {right}) refers to an unknown id")
        expected.append(expected[left] + expected[right])
    if list(vocab) != expected:
        raise TokenizerError("vocab array does not match the merge list")
    return TokenizerModel(merges=merges, vocab=vocab)


def canonical_bytes(model: TokenizerModel) -> bytes:
    """Stable serialization used for hashing and saving."""
    return json.dumps(to_dict(model), sort_keys=True, separators=(",", ":")).encode("utf-8")


def tokenizer_hash(model: TokenizerModel) -> str:
    """
    Content hash recorded in checkpoints and manifests.
    """
    return sha256_bytes(canonical_bytes(model))


def save(model: TokenizerModel, path: str) -> None:
    """
    Save the tokenizer as json.
    """
    with open(path, "w", encoding="utf-8") as file_pointer:
        json.dump(to_dict(model), file_pointer, sort_keys=True)
        file_pointer.write("\n")


def load(path: str) -> TokenizerModel:
    """
    Load a tokenizer saved with ``save``.
    """
    try:
        with open(path, "r", encoding="utf-8") as file_pointer:
            data = json.load(file_pointer)
    except json.JSONDecodeError as exc:
        raise TokenizerError(f"{path}: not a tokenizer file ({exc})") from exc
    return from_dict(data)


def encode_document(model: TokenizerModel, text: str, eod: Optional[bool] = True) -> List[int]:
    """
    ``[BOS] + encode(text) (+ [EOD])``: the unit token streams are built from.
    """
    ids = [BOS_ID] + encode(model, text)
    if eod:
        ids.append(EOD_ID)
    return ids


if __name__ == "__main__":  # pragma: no cover
    parser = argparse.ArgumentParser(description="Train a byte-level BPE tokenizer.")
    parser.add_argument("corpus", help="utf-8 text file")
    parser.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE)
    parser.add_argument("-o", "--output", default="tokenizer.json")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)-8s %(message)s")
    with open(args.corpus, encoding="utf-8") as corpus_file:
        save(bpe_train(corpus_file.read(), args.vocab_size), args.output)
