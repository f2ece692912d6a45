"""
Hyperparameter sweep with successive halving, and the loss/score correlation.

Trials are random draws from per-field priors. Rung ``k`` of ``R`` trains
every surviving trial for ``ceil(n_epochs * eta^(k - R + 1))`` epochs (the
learning-rate schedule always spans the full ``n_epochs``) and keeps the
``floor(n_trials / eta^(k + 1))`` best by validation loss, ties broken by
trial id. Diverged trials are recorded and never promoted.

A rung run for a longer budget starts again from the initial state: with a
schedule laid out over the full run, this is the same trajectory as resuming.

Every finished (trial, rung) appends one json line to the records file; the
last line of a trial wins. Rerunning with the same seed and the same records
file skips what is already done and takes the same decisions.

Priors file section::

    priors:
      max_learning_rate: {dist: log_uniform, low: 1.0e-4, high: 1.0e-2}
      weight_decay: {dist: log_normal, mu: -2.3, sigma: 1.0}
      schedule: {dist: categorical, values: [cosine, linear, constant]}
      model.attention_dropout: {dist: uniform, low: 0.0, high: 0.2}
"""

# Standard Library
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
from dataclasses import replace
from functools import partial
from multiprocessing import Pool
from typing import Any
from typing import Dict
from typing import List
from typing import NamedTuple
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

# 3rd party
import numpy as np
from tabulate import tabulate

# My stuff
import tokenizer
from corpus import CorpusData
from evaluation import MinimalPairSuite
from evaluation import evaluate
from model import ModelConfig
from model import ModelConfigError
from training import TrainConfig
from training import TrainConfigError
from training import TrainingDivergedError
from training import TrainResult
from training import train_teacher
from utils import dump_json
from utils import eta_message
from utils import rng_for
from utils import substream_seed

MODEL_PREFIX = "model."
CORRELATION_FIELDS = ["trial_id", "rung", "val_loss", "test_loss", "accuracy"]


class SweepError(ValueError):
    """
    Malformed priors or plan, inconsistent records, or too few trials to analyse.
    """


# ---------------------------------------------------------------- priors


@dataclass(frozen=True)
class LogNormal:
    """``exp(N(mu, sigma))``."""

    mu: float
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise SweepError(f"log_normal sigma must be positive, got {self.sigma}")

    def sample(self, rng: np.random.Generator) -> float:
        return float(np.exp(rng.normal(self.mu, self.sigma)))


@dataclass(frozen=True)
class LogUniform:
    """Uniform in ``log`` between ``low`` and ``high``."""

    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise SweepError(f"log_uniform needs 0 < low < high, got ({self.low}, {self.high})")

    def sample(self, rng: np.random.Generator) -> float:
        return float(np.exp(rng.uniform(np.log(self.low), np.log(self.high))))


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise SweepError(f"uniform needs low < high, got ({self.low}, {self.high})")

    def sample(self, rng: np.random.Generator) -> float:
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Categorical:
    values: Tuple[Any, ...]

    def __post_init__(self):
        if not self.values:
            raise SweepError("categorical prior without values")

    def sample(self, rng: np.random.Generator) -> Any:
        return self.values[int(rng.integers(len(self.values)))]


Prior = Union[LogNormal, LogUniform, Uniform, Categorical]
PriorSpec = Dict[str, Prior]
_DISTRIBUTIONS = {
    "log_normal": LogNormal,
    "log_uniform": LogUniform,
    "uniform": Uniform,
    "categorical": Categorical,
}
_TRAIN_FIELDS = {f.name: f for f in fields(TrainConfig)}
_MODEL_FIELDS = {f.name: f for f in fields(ModelConfig)}
#: integer fields that may be 0; every other integer is at least 1
_NON_NEGATIVE_INTS = {"warmup_steps", "n_layers"}


def parse_priors(data: Dict[str, Dict[str, Any]]) -> PriorSpec:
    """
    Priors from the ``priors`` section of a config file.

    >>> parse_priors({"schedule": {"dist": "categorical", "values": ["cosine", "linear"]}})
    {'schedule': Categorical(values=('cosine', 'linear'))}
    """
    priors: PriorSpec = {}
    for key, entry in data.items():
        name = key[len(MODEL_PREFIX) :] if key.startswith(MODEL_PREFIX) else key
        known = _MODEL_FIELDS if key.startswith(MODEL_PREFIX) else _TRAIN_FIELDS
        if name not in known or name == "seed":
            raise SweepError(f"prior on unknown or unsweepable field {key!r}")
        if not isinstance(entry, dict) or entry.get("dist") not in _DISTRIBUTIONS:
            raise SweepError(f"prior {key!r}: 'dist' must be one of {sorted(_DISTRIBUTIONS)}")
        args = {k: v for k, v in entry.items() if k != "dist"}
        if entry["dist"] == "categorical":
            args = {"values": tuple(args.get("values", ()))}
        try:
            priors[key] = _DISTRIBUTIONS[entry["dist"]](**args)
        except TypeError as exc:
            raise SweepError(f"prior {key!r}: {exc}") from exc
    return priors


def _coerce(key: str, value: Any) -> Any:
    name = key[len(MODEL_PREFIX) :] if key.startswith(MODEL_PREFIX) else key
    kind = (_MODEL_FIELDS if key.startswith(MODEL_PREFIX) else _TRAIN_FIELDS)[name].type
    if kind in (int, "int") and not isinstance(value, str):
        return max(0 if name in _NON_NEGATIVE_INTS else 1, int(round(value)))
    return value


def sample_values(priors: PriorSpec, seed: int) -> Dict[str, Any]:
    """
    One draw per prior, keys visited in sorted order.
    """
    rng = rng_for(seed, "sampling")
    return {key: _coerce(key, priors[key].sample(rng)) for key in sorted(priors)}


def _apply(values: Dict[str, Any], base_train: TrainConfig, base_model: ModelConfig, seed: int) -> Tuple[TrainConfig, ModelConfig]:
    train_values = {k: v for k, v in values.items() if not k.startswith(MODEL_PREFIX)}
    model_values = {k[len(MODEL_PREFIX) :]: v for k, v in values.items() if k.startswith(MODEL_PREFIX)}
    try:
        return replace(base_train, seed=seed, **train_values), replace(base_model, **model_values)
    except (TrainConfigError, ModelConfigError) as exc:
        raise SweepError(f"sampled values {values} are invalid: {exc}") from exc


def sample_config(priors: PriorSpec, seed: int, base: Optional[TrainConfig] = None) -> TrainConfig:
    """
    TrainConfig with the swept fields drawn from their priors and the other
    fields taken from ``base``. The training seed is ``seed``.

    :raise SweepError: a prior yields an invalid value.
    """
    train_priors = {k: v for k, v in priors.items() if not k.startswith(MODEL_PREFIX)}
    config, _ = _apply(sample_values(train_priors, seed), base or TrainConfig(), ModelConfig(), seed)
    return config


# ---------------------------------------------------------------- halving


@dataclass(frozen=True)
class SweepPlan:
    """
    Successive-halving geometry.
    """

    n_trials: int = 16
    eta: int = 2
    n_rungs: int = 3

    def __post_init__(self):
        halving_schedule(self.n_trials, self.eta, self.n_rungs)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepPlan":
        known = {f.name for f in fields(cls)}
        if set(data) - known:
            raise SweepError(f"unknown sweep plan keys: {sorted(set(data) - known)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def survivors(self) -> List[int]:
        """Trials trained at each rung."""
        return halving_schedule(self.n_trials, self.eta, self.n_rungs)

    def rung_epochs(self, rung: int, n_epochs: int) -> int:
        """
        Epoch budget of a rung; the last rung gets the full ``n_epochs``.

        >>> [SweepPlan(16, 2, 3).rung_epochs(k, 8) for k in range(3)]
        [2, 4, 8]
        """
        return max(1, -(-n_epochs // self.eta ** (self.n_rungs - 1 - rung)))


def halving_schedule(n_trials: int, eta: int, n_rungs: int) -> List[int]:
    """
    Survivor count per rung.

    >>> halving_schedule(27, 3, 4)
    [27, 9, 3, 1]
    >>> halving_schedule(10, 3, 3)
    [10, 3, 1]
    """
    if eta < 2 or n_rungs < 1:
        raise SweepError(f"need eta >= 2 and n_rungs >= 1, got eta={eta}, n_rungs={n_rungs}")
    if n_trials < eta ** (n_rungs - 1):
        raise SweepError(f"{n_trials} trials cannot fill {n_rungs} rungs at eta={eta} (need {eta ** (n_rungs - 1)})")
    return [n_trials // eta**rung for rung in range(n_rungs)]


def promote(losses: Dict[int, float], keep: int) -> List[int]:
    """
    The ``keep`` best trials by loss, ties broken by trial id. Non-finite
    losses (diverged trials) never promote.

    >>> promote({0: 1.5, 1: 1.2, 2: float("nan"), 3: 1.2}, 2)
    [1, 3]
    """
    finite = sorted((loss, trial_id) for trial_id, loss in losses.items() if math.isfinite(loss))
    return [trial_id for _, trial_id in finite[:keep]]


# ---------------------------------------------------------------- records


@dataclass
class SweepRecord:  # pylint: disable=too-many-instance-attributes
    """
    Bookkeeping of one trial.
    """

    trial_id: int
    seed: int
    sampled: Dict[str, Any]
    train_config: Dict[str, Any]
    model_config: Dict[str, Any]
    rung_losses: List[float] = field(default_factory=list)
    rung_epochs: List[int] = field(default_factory=list)
    completed: bool = False
    diverged: bool = False
    test_loss: Optional[float] = None
    accuracies: Dict[str, float] = field(default_factory=dict)

    @property
    def last_loss(self) -> float:
        """Validation loss at the last rung reached (``inf`` if none)."""
        return self.rung_losses[-1] if self.rung_losses else math.inf

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["rung_losses"] = [loss if math.isfinite(loss) else None for loss in self.rung_losses]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepRecord":
        data = dict(data)
        data["rung_losses"] = [math.inf if loss is None else loss for loss in data.get("rung_losses", [])]
        return cls(**data)


def append_record(path: str, record: SweepRecord) -> None:
    """Append one snapshot line to the records file."""
    with open(path, "a", encoding="utf-8") as file_pointer:
        file_pointer.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")


def load_records(path: str) -> Dict[int, SweepRecord]:
    """
    Latest snapshot of every trial in a records file (missing file: no records).
    """
    records: Dict[int, SweepRecord] = {}
    if not os.path.exists(path):
        return records
    with open(path, "r", encoding="utf-8") as file_pointer:
        for line_no, line in enumerate(file_pointer, 1):
            if not line.strip():
                continue
            try:
                record = SweepRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError) as exc:
                raise SweepError(f"{path}:{line_no}: unreadable record ({exc})") from exc
            records[record.trial_id] = record
    return records


def replay_promotions(records: Dict[int, SweepRecord], plan: SweepPlan) -> List[List[int]]:
    """
    Trials trained at every rung, reconstructed from the recorded rung losses.
    """
    rungs = [sorted(records)[: plan.n_trials]]
    survivors = plan.survivors
    for rung in range(plan.n_rungs - 1):
        losses = {tid: _rung_loss(records[tid], rung) for tid in rungs[-1]}
        rungs.append(promote(losses, survivors[rung + 1]))
    return rungs


def _rung_loss(record: SweepRecord, rung: int) -> float:
    return record.rung_losses[rung] if len(record.rung_losses) > rung else math.inf


# ---------------------------------------------------------------- running


class TrialEvaluation(NamedTuple):
    """What to measure on each trial after training."""

    tok: tokenizer.TokenizerModel
    test_text: Optional[str] = None
    suites: Sequence[MinimalPairSuite] = ()


class RungOutcome(NamedTuple):
    trial_id: int
    val_loss: float
    diverged: bool
    test_loss: Optional[float]
    accuracies: Dict[str, float]


def _run_rung(
    data: CorpusData,
    evaluation: Optional[TrialEvaluation],
    max_epochs: int,
    task: Tuple[int, TrainConfig, ModelConfig],
) -> RungOutcome:
    trial_id, train_config, model_config = task
    try:
        result = train_teacher(data, model_config, train_config, max_epochs=max_epochs)
    except TrainingDivergedError as exc:
        logging.warning("trial %d diverged: %s", trial_id, exc)
        return RungOutcome(trial_id, math.inf, True, None, {})
    val_loss = result.history.val_loss[-1]
    test_loss = None
    accuracies: Dict[str, float] = {}
    if evaluation is not None:
        report = evaluate(result.checkpoint, evaluation.tok, f"trial-{trial_id}", evaluation.test_text, evaluation.suites)
        test_loss = report.test_loss
        accuracies = dict(report.suite_accuracy)
        if report.macro_average is not None:
            accuracies["macro_average"] = report.macro_average
    return RungOutcome(trial_id, val_loss, False, test_loss, accuracies)


def make_trials(
    priors: PriorSpec,
    plan: SweepPlan,
    seed: int,
    base_train: TrainConfig,
    base_model: ModelConfig,
) -> Dict[int, SweepRecord]:
    """
    Fresh records of every trial, configs sampled from the master ``seed``.
    """
    trials = {}
    for trial_id in range(plan.n_trials):
        trial_seed = substream_seed(seed, f"trial/{trial_id}") & 0x7FFFFFFF
        values = sample_values(priors, trial_seed)
        train_config, model_config = _apply(values, base_train, base_model, trial_seed)
        trials[trial_id] = SweepRecord(trial_id, trial_seed, values, train_config.to_dict(), model_config.to_dict())
    return trials


def run_sweep(
    data: CorpusData,
    model_config: ModelConfig,
    priors: PriorSpec,
    plan: SweepPlan,
    seed: int,
    records_path: str,
    base_train: Optional[TrainConfig] = None,
    evaluation: Optional[TrialEvaluation] = None,
    jobs: int = 1,
) -> Dict[int, SweepRecord]:
    """
    Run (or resume) a successive-halving sweep.

    :param records_path: json-lines records file, appended after every rung
        of every trial; existing records are reused.
    :param evaluation: optional test text and suites measured after each
        rung, so that every trial has scores at the last rung it reached.
    :param jobs: trials trained in parallel within a rung.
    :return: final record of every trial.
    """
    # pylint: disable=too-many-locals,too-many-arguments
    base_train = base_train or TrainConfig()
    trials = make_trials(priors, plan, seed, base_train, model_config)
    previous = load_records(records_path)
    for trial_id, old in previous.items():
        if trial_id not in trials or old.sampled != trials[trial_id].sampled:
            raise SweepError(f"{records_path}: trial {trial_id} was sampled with another seed or other priors")
        trials[trial_id] = old
    if previous:
        logging.info("Resuming sweep from %s (%d trials on record)", records_path, len(previous))

    survivors = plan.survivors
    alive = sorted(trials)
    started = time.time()
    for rung in range(plan.n_rungs):
        todo = []
        for trial_id in alive:
            record = trials[trial_id]
            if len(record.rung_losses) > rung or record.diverged:
                continue
            train_config = TrainConfig.from_dict(record.train_config)
            todo.append((trial_id, train_config, ModelConfig.from_dict(record.model_config)))
        logging.info("Rung %d/%d: %d trials, %d to train", rung + 1, plan.n_rungs, len(alive), len(todo))

        groups: Dict[int, list] = {}
        for task in todo:
            groups.setdefault(plan.rung_epochs(rung, task[1].n_epochs), []).append(task)
        done = 0
        for max_epochs, tasks in sorted(groups.items()):
            run = partial(_run_rung, data, evaluation, max_epochs)
            if jobs > 1:
                with Pool(jobs) as pool:
                    outcomes = list(pool.imap(run, tasks))
            else:
                outcomes = [run(task) for task in tasks]
            for outcome in outcomes:
                record = trials[outcome.trial_id]
                record.rung_losses.append(outcome.val_loss)
                record.rung_epochs.append(max_epochs)
                record.diverged = outcome.diverged
                if not outcome.diverged:
                    record.test_loss = outcome.test_loss
                    record.accuracies = outcome.accuracies
                record.completed = not outcome.diverged and rung == plan.n_rungs - 1
                append_record(records_path, record)
                done += 1
                logging.info(
                    "trial %d rung %d val loss %.4f (%s)",
                    outcome.trial_id,
                    rung + 1,
                    outcome.val_loss,
                    eta_message(done, len(todo), time.time() - started),
                )
        if rung < plan.n_rungs - 1:
            alive = promote({tid: _rung_loss(trials[tid], rung) for tid in alive}, survivors[rung + 1])
    return trials


def pformat_rungs(records: Dict[int, SweepRecord], plan: SweepPlan) -> str:
    """
    Table of the trials trained at each rung with their losses.
    """
    rungs = replay_promotions(records, plan)
    rows = []
    for rung, trial_ids in enumerate(rungs):
        losses = [_rung_loss(records[tid], rung) for tid in trial_ids]
        finite = [loss for loss in losses if math.isfinite(loss)]
        rows.append(
            [
                rung + 1,
                len(trial_ids),
                min(finite) if finite else None,
                float(np.median(finite)) if finite else None,
                sum(1 for tid in trial_ids if records[tid].diverged),
            ]
        )
    return tabulate(rows, headers=["rung", "trials", "best val loss", "median val loss", "diverged"], floatfmt=".4f")


def best_record(records: Dict[int, SweepRecord]) -> SweepRecord:
    """
    Completed trial with the lowest final validation loss; when no trial
    completed, the lowest loss at the last rung reached.
    """
    candidates = [r for r in records.values() if r.completed] or [r for r in records.values() if not r.diverged]
    if not candidates:
        raise SweepError("no trial finished without diverging")
    return min(candidates, key=lambda r: (r.last_loss, r.trial_id))


def retrain_best(
    records: Dict[int, SweepRecord],
    data: CorpusData,
    seed: int,
    metrics_path: Optional[str] = None,
) -> TrainResult:
    """
    Train the best configuration again, for its full budget, from another seed.
    """
    best = best_record(records)
    train_config = replace(TrainConfig.from_dict(best.train_config), seed=seed)
    logging.info("Retraining trial %d (val loss %.4f) with seed %d", best.trial_id, best.last_loss, seed)
    return train_teacher(
        data,
        ModelConfig.from_dict(best.model_config),
        train_config,
        metrics_path,
        metadata={"sweep_trial": best.trial_id, "sweep_val_loss": best.last_loss},
    )


# ---------------------------------------------------------------- analysis


def ols_fit(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """
    Ordinary least squares ``y = slope * x + intercept``.

    >>> ols_fit([0, 1, 2], [1, 3, 5])
    (2.0, 1.0)
    """
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape:
        raise SweepError(f"length mismatch: {xs.size} vs {ys.size}")
    if xs.size < 3:
        raise SweepError(f"need at least 3 points, got {xs.size}")
    dx = xs - xs.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise SweepError("x is constant")
    slope = float(np.dot(dx, ys - ys.mean())) / sxx
    return slope, float(ys.mean() - slope * xs.mean())


def compute_r2(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Coefficient of determination of the least-squares line of ``y`` on ``x``;
    0 when ``y`` is constant.

    >>> compute_r2([1, 2, 3, 4], [3, 5, 7, 9])
    1.0
    >>> compute_r2([1, 2, 3], [4, 4, 4])
    0.0
    """
    slope, intercept = ols_fit(x, y)
    ys = np.asarray(y, dtype=np.float64)
    total = float(np.sum((ys - ys.mean()) ** 2))
    if total == 0.0:
        return 0.0
    residual = float(np.sum((ys - (slope * np.asarray(x, dtype=np.float64) + intercept)) ** 2))
    return 1.0 - residual / total


@dataclass
class CorrelationReport:
    """
    Validation loss against test loss and accuracy over sweep trials.
    """

    metric: str
    rows: List[Dict[str, Any]]
    r2_test_vs_val: Optional[float]
    r2_accuracy_vs_val: float
    accuracy_slope: float

    @property
    def slope_sign(self) -> int:
        return int(np.sign(self.accuracy_slope))

    def summary(self) -> Dict[str, Any]:
        return {
            "metric": self.metric,
            "n_trials": len(self.rows),
            "r2_test_vs_val": self.r2_test_vs_val,
            "r2_accuracy_vs_val": self.r2_accuracy_vs_val,
            "accuracy_slope": self.accuracy_slope,
            "slope_sign": self.slope_sign,
        }

    def save(self, csv_path: str, json_path: str) -> None:
        """Rows as csv for plotting, summary as json."""
        with open(csv_path, "w", encoding="utf-8", newline="") as file_pointer:
            writer = csv.DictWriter(file_pointer, fieldnames=CORRELATION_FIELDS)
            writer.writeheader()
            writer.writerows(self.rows)
        dump_json(self.summary(), json_path)


def correlate_loss_and_scores(
    records: Dict[int, SweepRecord],
    metric: str = "macro_average",
    include_early_stopped: bool = False,
) -> CorrelationReport:
    """
    Fit accuracy and test loss against validation loss over the completed
    trials.

    :param include_early_stopped: also fit the trials dropped before the last
        rung, each scored at the last rung it reached. Their losses come from
        shorter runs.
    :raise SweepError: fewer than 3 completed trials carry a validation loss
        and ``metric``.
    """
    usable = [
        record
        for record in sorted(records.values(), key=lambda r: r.trial_id)
        if not record.diverged and record.rung_losses and metric in record.accuracies
    ]
    n_completed = sum(1 for record in usable if record.completed)
    if n_completed < 3:
        raise SweepError(f"insufficient completed trials: {n_completed} carry a validation loss and {metric!r}; need 3")
    rows = [
        {
            "trial_id": record.trial_id,
            "rung": len(record.rung_losses),
            "val_loss": record.last_loss,
            "test_loss": record.test_loss,
            "accuracy": record.accuracies[metric],
        }
        for record in usable
        if record.completed or include_early_stopped
    ]
    val = [row["val_loss"] for row in rows]
    accuracy = [row["accuracy"] for row in rows]
    slope, _ = ols_fit(val, accuracy)
    r2_test = None
    if all(row["test_loss"] is not None for row in rows):
        r2_test = compute_r2(val, [row["test_loss"] for row in rows])
    report = CorrelationReport(metric, rows, r2_test, compute_r2(val, accuracy), slope)
    logging.info(
        "%d trials: R2(test|val)=%s R2(acc|val)=%.3f slope=%.4g",
        len(rows),
        "n/a" if r2_test is None else f"{r2_test:.4f}",
        report.r2_accuracy_vs_val,
        slope,
    )
    return report
