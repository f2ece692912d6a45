"""
Held-out loss, zero-shot minimal-pair scoring and classifier fine-tuning.

A sentence is scored by its total log-likelihood under the model, with the
begin-of-sequence token prepended. A minimal pair counts as correct when the
acceptable sentence scores strictly higher than the unacceptable one; an
exact tie counts half.

Suite files are json-lines with BLiMP field names::

    {"sentence_good": "the dogs run .", "sentence_bad": "the dogs runs .", "phenomenon": "agreement"}

Usage::

    report = evaluate(ckpt, tok, test_text=text, suites=[MinimalPairSuite.load("agreement.jsonl")])
    report.save_json("eval.json")
    report.append_csv("results.csv")
"""

# Standard Library
import csv
import json
import logging
import os
from collections import defaultdict
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from functools import partial
from multiprocessing import Pool
from typing import Any
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
from checkpoint import Checkpoint
from corpus import pack_text
from model import ModelConfig
from model import ModelParams
from model import backward_from_cache
from model import forward
from model import forward_with_cache
from training import AdamState
from training import TrainConfig
from training import adamw_step
from training import clamp_warmup
from training import clip_grad_norm
from training import cross_entropy_and_grad
from training import mean_cross_entropy
from training import steps_per_epoch
from training import update_lr
from utils import dump_json
from utils import load_config
from utils import rng_for

CLASSIFIER_WEIGHT = "classifier.weight"
CLASSIFIER_BIAS = "classifier.bias"
RESULTS_FIELDS = ["checkpoint_id", "metric", "value"]


class EvaluationError(ValueError):
    """
    Invalid evaluation input.
    """


class TokenizerMismatchError(EvaluationError):
    """
    The checkpoint was trained with another tokenizer.
    """


def check_tokenizer(checkpoint: Checkpoint, tok: tokenizer.TokenizerModel) -> None:
    """
    :raise TokenizerMismatchError: hashes differ.
    """
    tok_hash = tokenizer.tokenizer_hash(tok)
    if checkpoint.tokenizer_hash != tok_hash:
        raise TokenizerMismatchError(
            f"checkpoint tokenizer {checkpoint.tokenizer_hash[:12]} != given tokenizer {tok_hash[:12]}"
        )


# ---------------------------------------------------------------- held-out loss


def eval_loss(
    checkpoint: Checkpoint,
    tok: tokenizer.TokenizerModel,
    text: str,
    sequence_length: Optional[int] = None,
    batch_size: int = 32,
) -> float:
    """
    Mean per-token cross-entropy over the packed ``text``.

    Windows are packed like the training splits; the window length defaults
    to the one the checkpoint was trained with.
    """
    check_tokenizer(checkpoint, tok)
    length = sequence_length or checkpoint.metadata.get("sequence_length") or checkpoint.config.max_seq_len + 1
    dataset = pack_text(tok, text, int(length))
    if dataset.count == 0:
        raise EvaluationError(f"test text is shorter than one window of {length} tokens")
    return mean_cross_entropy(checkpoint.params, checkpoint.config, dataset, batch_size)


# ---------------------------------------------------------------- minimal pairs


class MinimalPair(NamedTuple):
    """An acceptable sentence and its minimally different unacceptable twin."""

    sentence_good: str
    sentence_bad: str
    phenomenon: str = ""


@dataclass
class MinimalPairSuite:
    """
    Named collection of minimal pairs.
    """

    name: str
    pairs: List[MinimalPair]

    def __post_init__(self):
        if not self.pairs:
            raise EvaluationError(f"suite {self.name!r} has no pairs")
        for idx, pair in enumerate(self.pairs):
            if not pair.sentence_good.strip() or not pair.sentence_bad.strip():
                raise EvaluationError(f"suite {self.name!r}, pair {idx}: empty sentence")

    @classmethod
    def load(cls, path: str, name: Optional[str] = None) -> "MinimalPairSuite":
        """
        Read a json-lines suite; the name defaults to the file stem.
        """
        pairs = []
        with open(path, "r", encoding="utf-8") as file_pointer:
            for line_no, line in enumerate(file_pointer, 1):
                if not line.strip():
                    continue
                try:
                    item = json.loads(line)
                    pairs.append(MinimalPair(item["sentence_good"], item["sentence_bad"], item.get("phenomenon", "")))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise EvaluationError(f"{path}:{line_no}: malformed pair ({exc})") from exc
        return cls(name or os.path.splitext(os.path.basename(path))[0], pairs)

    def save(self, path: str) -> None:
        """Write as json-lines."""
        with open(path, "w", encoding="utf-8") as file_pointer:
            for pair in self.pairs:
                file_pointer.write(json.dumps(pair._asdict(), ensure_ascii=False) + "\n")


def score_sentence(
    checkpoint: Checkpoint,
    tok: tokenizer.TokenizerModel,
    sentence: str,
    normalize: bool = False,
) -> float:
    """
    Total log-likelihood of ``sentence`` given the begin-of-sequence token.

    :param normalize: divide by the number of scored tokens.
    :raise EvaluationError: empty sentence, or longer than the model context
        (sentences are never truncated).
    """
    ids = [tokenizer.BOS_ID] + tokenizer.encode(tok, sentence)
    if len(ids) < 2:
        raise EvaluationError("cannot score an empty sentence")
    if len(ids) - 1 > checkpoint.config.max_seq_len:
        raise EvaluationError(f"sentence of {len(ids) - 1} tokens exceeds max_seq_len={checkpoint.config.max_seq_len}")
    logits = forward(checkpoint.params, checkpoint.config, np.asarray(ids[:-1], dtype=np.int64))[0]
    logits = logits.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    total = float(np.sum(log_probs[np.arange(len(ids) - 1), ids[1:]]))
    return total / (len(ids) - 1) if normalize else total


def pair_outcome(good_score: float, bad_score: float) -> float:
    """
    >>> pair_outcome(-1.0, -2.0), pair_outcome(-2.0, -1.0), pair_outcome(-1.0, -1.0)
    (1.0, 0.0, 0.5)
    """
    if good_score > bad_score:
        return 1.0
    if good_score == bad_score:
        return 0.5
    return 0.0


def _score_pair(checkpoint: Checkpoint, tok: tokenizer.TokenizerModel, normalize: bool, pair: MinimalPair) -> float:
    return pair_outcome(
        score_sentence(checkpoint, tok, pair.sentence_good, normalize),
        score_sentence(checkpoint, tok, pair.sentence_bad, normalize),
    )


def pair_outcomes(
    checkpoint: Checkpoint,
    tok: tokenizer.TokenizerModel,
    suite: MinimalPairSuite,
    normalize: bool = False,
    jobs: int = 1,
) -> List[float]:
    """
    Per-pair outcome (1, 0.5 or 0), in suite order.
    """
    score = partial(_score_pair, checkpoint, tok, normalize)
    if jobs > 1:
        with Pool(jobs) as pool:
            return pool.map(score, suite.pairs, chunksize=max(1, len(suite.pairs) // (4 * jobs)))
    return [score(pair) for pair in suite.pairs]


def minimal_pair_accuracy(
    checkpoint: Checkpoint,
    tok: tokenizer.TokenizerModel,
    suite: MinimalPairSuite,
    normalize: bool = False,
    jobs: int = 1,
) -> float:
    """
    Fraction of pairs whose acceptable sentence scores higher, ties counting half.
    """
    check_tokenizer(checkpoint, tok)
    outcomes = pair_outcomes(checkpoint, tok, suite, normalize, jobs)
    return sum(outcomes) / len(outcomes)


def phenomenon_accuracy(suite: MinimalPairSuite, outcomes: Sequence[float]) -> Dict[str, float]:
    """
    Accuracy per phenomenon tag (untagged pairs are grouped under the suite name).
    """
    groups: Dict[str, List[float]] = defaultdict(list)
    for pair, outcome in zip(suite.pairs, outcomes):
        groups[pair.phenomenon or suite.name].append(outcome)
    return {tag: sum(values) / len(values) for tag, values in sorted(groups.items())}


@dataclass
class EvalReport:
    """
    Scores of one checkpoint.
    """

    checkpoint_id: str
    test_loss: Optional[float] = None
    suite_accuracy: Dict[str, float] = field(default_factory=dict)
    phenomenon_accuracy: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def macro_average(self) -> Optional[float]:
        """Unweighted mean of the suite accuracies."""
        if not self.suite_accuracy:
            return None
        return sum(self.suite_accuracy.values()) / len(self.suite_accuracy)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["macro_average"] = self.macro_average
        return data

    def save_json(self, path: str) -> None:
        dump_json(self.to_dict(), path)

    def rows(self) -> List[Dict[str, Any]]:
        """Long-format rows: one per metric."""
        rows = []
        if self.test_loss is not None:
            rows.append({"checkpoint_id": self.checkpoint_id, "metric": "test_loss", "value": self.test_loss})
        for suite, accuracy in sorted(self.suite_accuracy.items()):
            rows.append({"checkpoint_id": self.checkpoint_id, "metric": f"accuracy/{suite}", "value": accuracy})
        if self.macro_average is not None:
            rows.append({"checkpoint_id": self.checkpoint_id, "metric": "macro_average", "value": self.macro_average})
        return rows

    def append_csv(self, path: str) -> None:
        """
        Append the rows to a results csv, writing the header on creation.
        """
        new_file = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", encoding="utf-8", newline="") as file_pointer:
            writer = csv.DictWriter(file_pointer, fieldnames=RESULTS_FIELDS)
            if new_file:
                writer.writeheader()
            writer.writerows(self.rows())


def evaluate(
    checkpoint: Checkpoint,
    tok: tokenizer.TokenizerModel,
    checkpoint_id: str = "",
    test_text: Optional[str] = None,
    suites: Sequence[MinimalPairSuite] = (),
    normalize: bool = False,
    jobs: int = 1,
) -> EvalReport:
    """
    Held-out loss (when ``test_text`` is given) and minimal-pair accuracy on
    every suite.
    """
    check_tokenizer(checkpoint, tok)
    report = EvalReport(checkpoint_id)
    if test_text is not None:
        report.test_loss = eval_loss(checkpoint, tok, test_text)
        logging.info("%s test loss %.4f", checkpoint_id, report.test_loss)
    for suite in suites:
        outcomes = pair_outcomes(checkpoint, tok, suite, normalize, jobs)
        report.suite_accuracy[suite.name] = sum(outcomes) / len(outcomes)
        report.phenomenon_accuracy[suite.name] = phenomenon_accuracy(suite, outcomes)
        logging.info("%s %s accuracy %.3f (%d pairs)", checkpoint_id, suite.name, report.suite_accuracy[suite.name], len(outcomes))
    return report


# ---------------------------------------------------------------- fine-tuning


@dataclass(frozen=True)
class FineTuneTaskConfig:  # pylint: disable=too-many-instance-attributes
    """
    Optimizer settings of one downstream classification task.
    """

    task: str
    max_learning_rate: float = 1e-4
    batch_size: int = 16
    n_epochs: int = 3
    weight_decay: float = 0.0
    schedule: str = "cosine"
    warmup_steps: int = 0
    n_classes: int = 2

    def __post_init__(self):
        if self.n_epochs < 0:
            raise EvaluationError(f"{self.task}: n_epochs must be non negative")
        if self.n_classes < 2:
            raise EvaluationError(f"{self.task}: n_classes must be at least 2")
        if self.max_learning_rate <= 0 or self.batch_size <= 0:
            raise EvaluationError(f"{self.task}: learning rate and batch size must be positive")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FineTuneTaskConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise EvaluationError(f"unknown task config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def train_config(self, seed: int) -> TrainConfig:
        """Optimizer settings as a TrainConfig (needs ``n_epochs > 0``)."""
        return TrainConfig(
            max_learning_rate=self.max_learning_rate,
            n_epochs=self.n_epochs,
            batch_size=self.batch_size,
            weight_decay=self.weight_decay,
            warmup_steps=self.warmup_steps,
            schedule=self.schedule,
            seed=seed,
        )


def load_task_configs(path: str) -> Dict[str, FineTuneTaskConfig]:
    """
    Task presets from the ``tasks`` section of a config file, one row per task::

        tasks:
          - {task: boolq, max_learning_rate: 1.0e-5, batch_size: 16, n_epochs: 3}
    """
    rows = load_config(path).get("tasks")
    if not rows:
        raise EvaluationError(f"{path}: no 'tasks' section")
    if isinstance(rows, dict):
        rows = [dict(value, task=key) for key, value in rows.items()]
    configs = {}
    for row in rows:
        config = FineTuneTaskConfig.from_dict(row)
        if config.task in configs:
            raise EvaluationError(f"{path}: task {config.task!r} listed twice")
        configs[config.task] = config
    return configs


class LabeledExample(NamedTuple):
    """One classification example."""

    text: str
    label: int


def load_labeled(path: str) -> List[LabeledExample]:
    """Json-lines with ``text`` and ``label`` keys."""
    examples = []
    with open(path, "r", encoding="utf-8") as file_pointer:
        for line in file_pointer:
            if line.strip():
                item = json.loads(line)
                examples.append(LabeledExample(item["text"], int(item["label"])))
    return examples


class FineTuneResult(NamedTuple):
    """Fine-tuned checkpoint (with its classifier head) and accuracies."""

    checkpoint: Checkpoint
    accuracy: float
    train_accuracy: float


def _encode_batch(tok: tokenizer.TokenizerModel, texts: Sequence[str], max_seq_len: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right-padded ``[BOS] + encode(text)`` rows and the index of each last real token."""
    encoded = [[tokenizer.BOS_ID] + tokenizer.encode(tok, text) for text in texts]
    longest = max(len(ids) for ids in encoded)
    if longest > max_seq_len:
        raise EvaluationError(f"example of {longest} tokens exceeds max_seq_len={max_seq_len}")
    batch = np.full((len(encoded), longest), tokenizer.EOD_ID, dtype=np.int64)
    for row, ids in enumerate(encoded):
        batch[row, : len(ids)] = ids
    return batch, np.array([len(ids) - 1 for ids in encoded], dtype=np.int64)


def classify(params: ModelParams, config: ModelConfig, tok: tokenizer.TokenizerModel, texts: Sequence[str]) -> np.ndarray:
    """
    Class logits ``[n x n_classes]`` from the hidden state of the last real token.
    """
    batch, last = _encode_batch(tok, texts, config.max_seq_len)
    _, cache = forward_with_cache(params, config, batch, need_logits=False)
    pooled = cache.final_hidden[np.arange(len(texts)), last]
    return pooled @ params[CLASSIFIER_WEIGHT] + params[CLASSIFIER_BIAS]


def _accuracy(params: ModelParams, config: ModelConfig, tok: tokenizer.TokenizerModel, examples: Sequence[LabeledExample], batch_size: int) -> float:
    correct = 0
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        predicted = np.argmax(classify(params, config, tok, [ex.text for ex in chunk]), axis=-1)
        correct += int(np.sum(predicted == np.array([ex.label for ex in chunk])))
    return correct / len(examples)


def fine_tune_classifier(
    checkpoint: Checkpoint,
    tok: tokenizer.TokenizerModel,
    train_examples: Sequence[LabeledExample],
    task: FineTuneTaskConfig,
    eval_examples: Optional[Sequence[LabeledExample]] = None,
    seed: int = 0,
) -> FineTuneResult:
    """
    Attach a random linear head on the last-token hidden state and train the
    whole model plus head on the labeled examples.

    :param eval_examples: held-out examples for the reported accuracy
        (training examples when omitted).
    :raise EvaluationError: labels out of range or a single class.
    """
    # pylint: disable=too-many-locals
    check_tokenizer(checkpoint, tok)
    labels = np.array([ex.label for ex in train_examples], dtype=np.int64)
    if labels.size == 0 or labels.min() < 0 or labels.max() >= task.n_classes:
        raise EvaluationError(f"{task.task}: labels must lie in [0, {task.n_classes})")
    if len(set(labels.tolist())) < 2:
        raise EvaluationError(f"{task.task}: training data holds a single class")

    config = checkpoint.config
    params = {name: value.copy() for name, value in checkpoint.params.items() if not name.startswith("classifier.")}
    head_rng = rng_for(seed, f"classifier/{task.task}")
    dtype = params["norm"].dtype
    params[CLASSIFIER_WEIGHT] = (head_rng.standard_normal((config.d_model, task.n_classes)) * 0.02).astype(dtype)
    params[CLASSIFIER_BIAS] = np.zeros(task.n_classes, dtype=dtype)

    if task.n_epochs > 0:
        per_epoch = steps_per_epoch(len(train_examples), task.batch_size)
        total_steps = task.n_epochs * per_epoch
        train_config = clamp_warmup(task.train_config(seed), total_steps)
        state = AdamState.zeros_like(params)
        order_rng = rng_for(seed, f"finetune_order/{task.task}")
        step = 0
        for _ in range(task.n_epochs):
            order = order_rng.permutation(len(train_examples))
            for start in range(0, len(order), task.batch_size):
                chunk = [train_examples[i] for i in order[start : start + task.batch_size]]
                batch, last = _encode_batch(tok, [ex.text for ex in chunk], config.max_seq_len)
                _, cache = forward_with_cache(params, config, batch, need_logits=False)
                rows = np.arange(len(chunk))
                pooled = cache.final_hidden[rows, last]
                class_logits = pooled @ params[CLASSIFIER_WEIGHT] + params[CLASSIFIER_BIAS]
                _, grad_class = cross_entropy_and_grad(class_logits, np.array([ex.label for ex in chunk]))
                grad_hidden = np.zeros_like(cache.final_hidden)
                grad_hidden[rows, last] = grad_class @ params[CLASSIFIER_WEIGHT].T
                grads = backward_from_cache(cache, grad_hidden=grad_hidden)
                grads[CLASSIFIER_WEIGHT] = pooled.T @ grad_class
                grads[CLASSIFIER_BIAS] = grad_class.sum(axis=0)
                if train_config.max_grad_norm is not None:
                    grads = clip_grad_norm(grads, train_config.max_grad_norm)
                step += 1
                params, state = adamw_step(params, grads, state, update_lr(train_config, step, total_steps), train_config)

    train_accuracy = _accuracy(params, config, tok, train_examples, task.batch_size)
    accuracy = _accuracy(params, config, tok, eval_examples, task.batch_size) if eval_examples else train_accuracy
    logging.info("%s: train accuracy %.3f, held-out accuracy %.3f", task.task, train_accuracy, accuracy)
    metadata = dict(checkpoint.metadata, finetune_task=task.to_dict(), finetune_accuracy=accuracy)
    return FineTuneResult(Checkpoint(config, params, checkpoint.tokenizer_hash, metadata), accuracy, train_accuracy)

