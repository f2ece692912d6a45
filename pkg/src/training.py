"""
Losses, optimizer, learning-rate schedule and the two pretraining loops.

The distillation objective, per unmasked token position, is::

    alpha * CE(target, softmax(z_s)) + (1 - alpha) * T^2 * KL(softmax(z_t / T) || softmax(z_s / T))

where ``z_t`` is the mean of the teacher logits. The KL takes the teacher
distribution first. Both terms are averaged over the same positions.

A training window of ``L`` tokens gives ``L - 1`` inputs and ``L - 1``
next-token targets, so the model needs ``max_seq_len >= L - 1``.

Usage::

    result = train_teacher(data, model_config, TrainConfig(seed=1))
    ensemble = TeacherEnsemble.from_checkpoints([t1.checkpoint, t2.checkpoint])
    student = train_student_distill(data, ensemble, model_config, TrainConfig(seed=3))
"""

# Standard Library
import csv
import logging
import math
import time
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import fields
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
from checkpoint import Checkpoint
from corpus import CorpusData
from corpus import PackedDataset
from model import Gradients
from model import ModelConfig
from model import ModelParams
from model import backward_from_cache
from model import forward
from model import forward_with_cache
from model import init_params
from utils import eta_message
from utils import rng_for

SCHEDULES = ("cosine", "linear", "constant")
METRICS_FIELDS = ["step", "epoch", "lr", "train_loss", "val_loss"]
#: abort when the loss stays above DIVERGENCE_FACTOR x initial loss ...
DIVERGENCE_FACTOR = 10.0
#: ... for this many consecutive steps
DIVERGENCE_PATIENCE = 100
PROGRESS_EVERY = 50


class TrainConfigError(ValueError):
    """
    Invalid training hyperparameters.
    """


class LossInputError(ValueError):
    """
    Malformed loss inputs (non-finite values, shape mismatch, empty mask).
    """


class TrainingDivergedError(RuntimeError):
    """
    Training produced a non-finite loss or ran away from its initial loss.
    """


class TeacherMismatchError(ValueError):
    """
    Teachers that cannot be ensembled together, or with a given student.
    """


@dataclass(frozen=True)
class TrainConfig:  # pylint: disable=too-many-instance-attributes
    """
    Training and distillation hyperparameters.

    Defaults are the pretraining settings of the full-size model (lr 7e-4,
    8 epochs, batch 128, weight decay 5, 600 warm-up steps, cosine schedule,
    T 1, alpha 0.5).
    """

    max_learning_rate: float = 7e-4
    n_epochs: int = 8
    batch_size: int = 128
    weight_decay: float = 5.0
    warmup_steps: int = 600
    schedule: str = "cosine"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_grad_norm: Optional[float] = 1.0
    distill_temperature: float = 1.0
    distill_alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.max_learning_rate <= 0:
            raise TrainConfigError(f"max_learning_rate must be positive, got {self.max_learning_rate}")
        if self.n_epochs <= 0 or self.batch_size <= 0:
            raise TrainConfigError("n_epochs and batch_size must be positive")
        if self.weight_decay < 0 or self.warmup_steps < 0:
            raise TrainConfigError("weight_decay and warmup_steps must be non negative")
        if self.schedule not in SCHEDULES:
            raise TrainConfigError(f"unknown schedule {self.schedule!r}, expected one of {SCHEDULES}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise TrainConfigError(f"{name} must lie in (0, 1), got {getattr(self, name)}")
        if self.adam_epsilon <= 0:
            raise TrainConfigError(f"adam_epsilon must be positive, got {self.adam_epsilon}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise TrainConfigError(f"max_grad_norm must be positive or None, got {self.max_grad_norm}")
        if self.distill_temperature <= 0:
            raise TrainConfigError(f"distill_temperature must be positive, got {self.distill_temperature}")
        if not 0.0 <= self.distill_alpha <= 1.0:
            raise TrainConfigError(f"distill_alpha must lie in [0, 1], got {self.distill_alpha}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """
        Build from the ``train`` section of a config file.
        """
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise TrainConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        """Complete snapshot."""
        return asdict(self)


# ---------------------------------------------------------------- losses


def _check_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise LossInputError(f"non-finite values in {name}")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - np.max(z, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax_with_temperature(z, temperature: float = 1.0) -> np.ndarray:
    """
    Softmax of ``z / temperature`` over the last axis.

    >>> softmax_with_temperature([np.log(2.0), 0.0]).round(6).tolist()
    [0.666667, 0.333333]
    >>> softmax_with_temperature([1000.0, 0.0]).round(6).tolist()
    [1.0, 0.0]
    """
    z = np.asarray(z, dtype=np.result_type(np.asarray(z).dtype, np.float32))
    _check_finite("logits", z)
    if temperature <= 0:
        raise LossInputError(f"temperature must be positive, got {temperature}")
    scaled = z / temperature
    shifted = np.exp(scaled - np.max(scaled, axis=-1, keepdims=True))
    return shifted / np.sum(shifted, axis=-1, keepdims=True)


def kl_divergence(p, q):
    """
    ``sum p * ln(p / q)`` over the last axis, with ``0 * ln 0 = 0``.

    >>> round(float(kl_divergence([1.0, 0.0], [0.5, 0.5])), 12) == round(math.log(2), 12)
    True

    :raise LossInputError: ``q`` is zero where ``p`` is not.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise LossInputError(f"shape mismatch {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise LossInputError("q must be positive wherever p is")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(support, p * (np.log(np.where(support, p, 1.0)) - np.log(np.where(support, q, 1.0))), 0.0)
    result = np.sum(terms, axis=-1)
    return float(result) if result.ndim == 0 else result


def _position_mask(targets: np.ndarray, ignore_mask) -> np.ndarray:
    if ignore_mask is None:
        return np.ones(targets.shape, dtype=bool)
    ignore = np.asarray(ignore_mask, dtype=bool)
    if ignore.shape != targets.shape:
        raise LossInputError(f"mask shape {ignore.shape} does not match targets {targets.shape}")
    return ~ignore


def cross_entropy_and_grad(logits, targets, ignore_mask=None) -> Tuple[float, np.ndarray]:
    """
    Mean next-token cross-entropy and its gradient with respect to the logits.

    :param ignore_mask: True where a position is excluded from the mean.
    """
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    _check_finite("logits", logits)
    if logits.shape[:-1] != targets.shape:
        raise LossInputError(f"logits {logits.shape} do not match targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise LossInputError("target id out of range")
    keep = _position_mask(targets, ignore_mask)
    count = int(keep.sum())
    if count == 0:
        raise LossInputError("every position is masked")
    log_probs = _log_softmax(logits.astype(np.float64))
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(picked[keep]) / count)
    grad = np.exp(log_probs)
    np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
    grad *= keep[..., None] / count
    return loss, grad.astype(logits.dtype)


def cross_entropy(logits, targets, ignore_mask=None) -> float:
    """
    Mean negative log-likelihood over the unmasked positions, natural log.

    >>> round(cross_entropy(np.zeros((1, 2, 4)), np.array([[0, 3]])), 12) == round(math.log(4), 12)
    True
    """
    return cross_entropy_and_grad(logits, targets, ignore_mask)[0]


def distillation_loss_and_grad(
    targets,
    student_logits,
    teacher_logits,
    alpha: float = 0.5,
    temperature: float = 1.0,
    ignore_mask=None,
) -> Tuple[float, np.ndarray]:
    """
    Distillation objective and its gradient with respect to the student logits.

    With ``alpha == 1`` the teacher logits are not looked at and the result is
    exactly the cross-entropy.
    """
    if not 0.0 <= alpha <= 1.0:
        raise LossInputError(f"alpha must lie in [0, 1], got {alpha}")
    if temperature <= 0:
        raise LossInputError(f"temperature must be positive, got {temperature}")
    student_logits = np.asarray(student_logits)
    targets = np.asarray(targets)
    if alpha == 1.0:
        return cross_entropy_and_grad(student_logits, targets, ignore_mask)
    teacher_logits = np.asarray(teacher_logits)
    if teacher_logits.shape != student_logits.shape:
        raise LossInputError(f"teacher logits {teacher_logits.shape} vs student logits {student_logits.shape}")
    _check_finite("teacher logits", teacher_logits)

    ce_loss, ce_grad = 0.0, np.zeros(student_logits.shape, dtype=np.float64)
    if alpha > 0.0:
        ce_loss, ce_grad = cross_entropy_and_grad(student_logits, targets, ignore_mask)
    _check_finite("student logits", student_logits)
    keep = _position_mask(targets, ignore_mask)
    count = int(keep.sum())
    if count == 0:
        raise LossInputError("every position is masked")
    log_q = _log_softmax(student_logits.astype(np.float64) / temperature)
    log_p = _log_softmax(teacher_logits.astype(np.float64) / temperature)
    p = np.exp(log_p)
    per_position = np.sum(p * (log_p - log_q), axis=-1)
    kl = float(np.sum(per_position[keep]) / count)
    loss = alpha * ce_loss + (1.0 - alpha) * temperature**2 * kl
    kl_grad = temperature * (np.exp(log_q) - p) * (keep[..., None] / count)
    grad = alpha * ce_grad + (1.0 - alpha) * kl_grad
    return float(loss), grad.astype(student_logits.dtype)


def distillation_loss(targets, student_logits, teacher_logits, alpha: float = 0.5, temperature: float = 1.0, ignore_mask=None) -> float:
    """
    Cross-entropy on the targets blended with the temperature-softened KL to
    the (mean) teacher distribution.
    """
    return distillation_loss_and_grad(targets, student_logits, teacher_logits, alpha, temperature, ignore_mask)[0]


# ---------------------------------------------------------------- teachers


@dataclass
class TeacherEnsemble:
    """
    Frozen teachers sharing one architecture and one tokenizer.
    """

    members: List[Tuple[ModelParams, ModelConfig]]
    tokenizer_hash: Optional[str] = None

    def __post_init__(self):
        if not self.members:
            raise TeacherMismatchError("the ensemble needs at least one teacher")
        first = self.members[0][1]
        for _, config in self.members[1:]:
            if config != first:
                raise TeacherMismatchError(f"teacher configs differ: {config} vs {first}")

    @classmethod
    def from_checkpoints(cls, checkpoints: Sequence[Checkpoint]) -> "TeacherEnsemble":
        """
        :raise TeacherMismatchError: teachers trained with different tokenizers.
        """
        hashes = {ckpt.tokenizer_hash for ckpt in checkpoints}
        if len(hashes) > 1:
            raise TeacherMismatchError(f"teachers use {len(hashes)} different tokenizers")
        return cls([(ckpt.params, ckpt.config) for ckpt in checkpoints], hashes.pop() if hashes else None)

    @property
    def config(self) -> ModelConfig:
        """Architecture shared by every teacher."""
        return self.members[0][1]

    def __len__(self) -> int:
        return len(self.members)


def ensemble_mean_logits(ensemble: TeacherEnsemble, token_ids) -> np.ndarray:
    """
    Elementwise mean of the teacher logits.
    """
    total: Optional[np.ndarray] = None
    for params, config in ensemble.members:
        logits = forward(params, config, token_ids)
        if total is None:
            total = logits.copy()
        else:
            total += logits
    assert total is not None
    if len(ensemble) > 1:
        total /= len(ensemble)
    return total


# ---------------------------------------------------------------- optimizer


def lr_at_step(config: TrainConfig, step: float, total_steps: int) -> float:
    """
    Linear warm-up from 0 to ``max_learning_rate``, then decay per ``schedule``.

    >>> cfg = TrainConfig(max_learning_rate=1.0, warmup_steps=10)
    >>> [lr_at_step(cfg, s, 110) for s in (0, 5, 10, 60, 110)]
    [0.0, 0.5, 1.0, 0.5, 0.0]
    """
    if not 0 <= step <= total_steps:
        raise TrainConfigError(f"step {step} outside [0, {total_steps}]")
    if config.warmup_steps > total_steps:
        raise TrainConfigError(f"warmup_steps={config.warmup_steps} exceeds total_steps={total_steps}")
    peak = config.max_learning_rate
    if step < config.warmup_steps:
        return peak * step / config.warmup_steps
    if config.schedule == "constant" or total_steps == config.warmup_steps:
        return peak
    progress = (step - config.warmup_steps) / (total_steps - config.warmup_steps)
    if config.schedule == "linear":
        return peak * (1.0 - progress)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def update_lr(config: TrainConfig, update: int, total_steps: int) -> float:
    """
    Learning rate of update ``update`` (1-based) of ``total_steps``: the
    schedule at the middle of the step. Neither the first warm-up update nor
    the last update of a decay to 0 gets a zero rate.

    >>> cfg = TrainConfig(max_learning_rate=1.0, warmup_steps=2)
    >>> [update_lr(cfg, k, 4) for k in (1, 2)]
    [0.25, 0.75]
    >>> 0.0 < update_lr(cfg, 4, 4) < 0.2
    True
    """
    if not 1 <= update <= total_steps:
        raise TrainConfigError(f"update {update} outside [1, {total_steps}]")
    return lr_at_step(config, update - 0.5, total_steps)


@dataclass
class AdamState:
    """
    First and second moments plus the number of steps taken.
    """

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        """Fresh state for ``params``."""
        return cls(0, {k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def decays(array: np.ndarray) -> bool:
    """Weight decay hits matrices; norm gains and other vectors are spared."""
    return array.ndim >= 2


def adamw_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    lr: float,
    config: TrainConfig,
) -> Tuple[ModelParams, AdamState]:
    """
    One AdamW update with decoupled weight decay.

    :return: new parameters and new state (inputs are left untouched).
    :raise TrainingDivergedError: non-finite gradient, or an update that overflows.
    """
    if state.step and set(state.m) != set(params):
        raise TrainConfigError("optimizer state does not match the parameters")
    step = state.step + 1
    beta1, beta2 = config.adam_beta1, config.adam_beta2
    bias1 = 1.0 - beta1**step
    bias2 = 1.0 - beta2**step
    new_params: ModelParams = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise TrainConfigError(f"{name}: gradient shape {grad.shape}, parameter shape {value.shape}")
        if not np.all(np.isfinite(grad)):
            raise TrainingDivergedError(f"non-finite gradient for {name}")
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - beta2) * grad * grad
        updated = value
        if config.weight_decay and decays(value):
            updated = value * (1.0 - lr * config.weight_decay)
        updated = updated - lr * (m / bias1) / (np.sqrt(v / bias2) + config.adam_epsilon)
        new_params[name] = updated.astype(value.dtype, copy=False)
        if not np.all(np.isfinite(new_params[name])):
            raise TrainingDivergedError(f"update of {name} overflowed (lr {lr:.3g})")
        new_m[name] = m.astype(value.dtype, copy=False)
        new_v[name] = v.astype(value.dtype, copy=False)
    return new_params, AdamState(step, new_m, new_v)


def global_grad_norm(grads: Gradients) -> float:
    """L2 norm over every gradient tensor."""
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_grad_norm(grads: Gradients, max_norm: float) -> Gradients:
    """
    Rescale every gradient by ``max_norm / norm`` when the global norm exceeds
    ``max_norm``.
    """
    if max_norm <= 0:
        raise TrainConfigError(f"max_norm must be positive, got {max_norm}")
    norm = global_grad_norm(grads)
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {name: (g * scale).astype(g.dtype, copy=False) for name, g in grads.items()}


# ---------------------------------------------------------------- loops


@dataclass
class TrainHistory:
    """
    Loss curves of one run.
    """

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    total_steps: int = 0
    epochs_run: int = 0


class TrainResult(NamedTuple):
    """Trained checkpoint with its loss curves."""

    checkpoint: Checkpoint
    history: TrainHistory


def steps_per_epoch(n_sequences: int, batch_size: int) -> int:
    """
    >>> steps_per_epoch(1000, 128)
    8
    """
    return math.ceil(n_sequences / batch_size)


def split_inputs_targets(sequences: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Inputs are all tokens but the last, targets all but the first."""
    return sequences[:, :-1], sequences[:, 1:]


def mean_cross_entropy(params: ModelParams, config: ModelConfig, dataset: PackedDataset, batch_size: int = 32) -> float:
    """
    Mean per-token next-token cross-entropy over every window of ``dataset``.

    Shared by the validation pass of the training loops and by held-out
    evaluation.
    """
    if dataset.count == 0:
        raise LossInputError("empty dataset")
    total = 0.0
    tokens = 0
    sequences = dataset.sequences
    for start in range(0, dataset.count, batch_size):
        inputs, targets = split_inputs_targets(sequences[start : start + batch_size])
        loss = cross_entropy(forward(params, config, inputs), targets)
        total += loss * targets.size
        tokens += targets.size
    return total / tokens


def _check_data(data: CorpusData, config: ModelConfig) -> None:
    if data.vocab_size != config.vocab_size:
        raise TrainConfigError(f"corpus vocabulary {data.vocab_size} != model vocab_size {config.vocab_size}")
    if data.train.sequence_length - 1 > config.max_seq_len:
        raise TrainConfigError(
            f"training windows of {data.train.sequence_length} tokens need max_seq_len >= {data.train.sequence_length - 1}"
        )
    if data.train.count == 0 or data.validation.count == 0:
        raise TrainConfigError("empty train or validation split")


def clamp_warmup(config: TrainConfig, total_steps: int) -> TrainConfig:
    """Warm-up longer than the whole run is cut down to the run length."""
    if config.warmup_steps <= total_steps:
        return config
    logging.warning("warmup_steps=%d exceeds the %d total steps, clamped", config.warmup_steps, total_steps)
    values = config.to_dict()
    values["warmup_steps"] = total_steps
    return TrainConfig(**values)


class _MetricsWriter:
    """Append-only metrics csv; a no-op without a path."""

    def __init__(self, path: Optional[str]):
        self._file = None
        self._writer = None
        if path:
            self._file = open(path, "w", encoding="utf-8", newline="")  # pylint: disable=consider-using-with
            self._writer = csv.DictWriter(self._file, fieldnames=METRICS_FIELDS)
            self._writer.writeheader()

    def row(self, **values) -> None:
        """Write one row and flush it."""
        if self._writer is not None and self._file is not None:
            self._writer.writerow(values)
            self._file.flush()

    def close(self) -> None:
        """Close the underlying file."""
        if self._file is not None:
            self._file.close()


def _train(
    data: CorpusData,
    model_config: ModelConfig,
    train_config: TrainConfig,
    ensemble: Optional[TeacherEnsemble],
    metrics_path: Optional[str],
    max_epochs: Optional[int],
    metadata: Optional[Dict[str, Any]],
) -> TrainResult:
    # pylint: disable=too-many-locals,too-many-arguments
    _check_data(data, model_config)
    per_epoch = steps_per_epoch(data.train.count, train_config.batch_size)
    total_steps = train_config.n_epochs * per_epoch
    config = clamp_warmup(train_config, total_steps)
    epochs_to_run = config.n_epochs if max_epochs is None else max(0, min(config.n_epochs, max_epochs))
    distilling = ensemble is not None and config.distill_alpha < 1.0

    params = init_params(model_config, config.seed)
    state = AdamState.zeros_like(params)
    order_rng = rng_for(config.seed, "data_order")
    dropout_rng = rng_for(config.seed, "dropout") if model_config.attention_dropout > 0 else None
    history = TrainHistory(total_steps=total_steps)
    sequences = data.train.sequences
    metrics = _MetricsWriter(metrics_path)
    initial_loss: Optional[float] = None
    above = 0
    step = 0
    started = time.time()
    logging.info(
        "Training %s: %d epochs (%d run) x %d steps, %d sequences",
        "student" if ensemble is not None else "teacher",
        config.n_epochs,
        epochs_to_run,
        per_epoch,
        data.train.count,
    )
    try:
        for epoch in range(epochs_to_run):
            order = order_rng.permutation(data.train.count)
            for start in range(0, data.train.count, config.batch_size):
                inputs, targets = split_inputs_targets(sequences[order[start : start + config.batch_size]])
                logits, cache = forward_with_cache(params, model_config, inputs, dropout_rng)
                if not np.all(np.isfinite(logits)):
                    raise TrainingDivergedError(f"non-finite logits at step {step} (epoch {epoch})")
                if distilling:
                    assert ensemble is not None
                    teacher_logits = ensemble_mean_logits(ensemble, inputs)
                    loss, grad_logits = distillation_loss_and_grad(
                        targets, logits, teacher_logits, config.distill_alpha, config.distill_temperature
                    )
                else:
                    loss, grad_logits = cross_entropy_and_grad(logits, targets)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss at step {step} (epoch {epoch})")
                if initial_loss is None:
                    initial_loss = loss
                above = above + 1 if loss > DIVERGENCE_FACTOR * initial_loss else 0
                if above >= DIVERGENCE_PATIENCE:
                    raise TrainingDivergedError(
                        f"loss {loss:.4g} above {DIVERGENCE_FACTOR:g}x the initial {initial_loss:.4g} "
                        f"for {DIVERGENCE_PATIENCE} steps (step {step})"
                    )
                grads = backward_from_cache(cache, grad_logits=grad_logits)
                if config.max_grad_norm is not None:
                    grads = clip_grad_norm(grads, config.max_grad_norm)
                step += 1
                lr = update_lr(config, step, total_steps)
                params, state = adamw_step(params, grads, state, lr, config)
                history.train_loss.append(loss)
                history.learning_rates.append(lr)
                val_loss = None
                if start + config.batch_size >= data.train.count:
                    try:
                        val_loss = mean_cross_entropy(params, model_config, data.validation, config.batch_size)
                    except LossInputError as exc:
                        raise TrainingDivergedError(f"validation after step {step}: {exc}") from exc
                    history.val_loss.append(val_loss)
                metrics.row(step=step, epoch=epoch + 1, lr=lr, train_loss=loss, val_loss="" if val_loss is None else val_loss)
                if step % PROGRESS_EVERY == 0:
                    logging.info("step %s loss %.4f", eta_message(step, epochs_to_run * per_epoch, time.time() - started), loss)
            history.epochs_run = epoch + 1
            logging.info("epoch %d/%d validation loss %.4f", epoch + 1, config.n_epochs, history.val_loss[-1])
    finally:
        metrics.close()

    info: Dict[str, Any] = {
        "kind": "student" if ensemble is not None else "teacher",
        "train_config": config.to_dict(),
        "sequence_length": data.train.sequence_length,
        "steps": step,
        "total_steps": total_steps,
        "epochs_run": history.epochs_run,
        "final_val_loss": history.val_loss[-1] if history.val_loss else None,
    }
    if ensemble is not None:
        info["n_teachers"] = len(ensemble)
    info.update(metadata or {})
    return TrainResult(Checkpoint(model_config, params, data.tokenizer_hash, info), history)


def train_teacher(
    data: CorpusData,
    model_config: ModelConfig,
    train_config: TrainConfig,
    metrics_path: Optional[str] = None,
    max_epochs: Optional[int] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Pretrain a model from scratch on next-token cross-entropy.

    :param data: packed train and validation splits.
    :param metrics_path: optional metrics csv (step, epoch, lr, train_loss, val_loss).
    :param max_epochs: stop after this many epochs; the learning-rate schedule
        still spans ``train_config.n_epochs``.
    :param metadata: extra entries for the checkpoint metadata.
    :raise TrainingDivergedError: non-finite or runaway loss.
    """
    return _train(data, model_config, train_config, None, metrics_path, max_epochs, metadata)


def train_student_distill(
    data: CorpusData,
    ensemble: TeacherEnsemble,
    model_config: ModelConfig,
    train_config: TrainConfig,
    metrics_path: Optional[str] = None,
    max_epochs: Optional[int] = None,
    metadata: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Pretrain a student on the distillation objective against a frozen ensemble.

    The teachers are only read. The student may differ from them in size,
    not in vocabulary.

    :raise TeacherMismatchError: vocabulary or tokenizer differs from the teachers.
    """
    if ensemble.config.vocab_size != model_config.vocab_size:
        raise TeacherMismatchError(
            f"student vocab_size {model_config.vocab_size} != teacher vocab_size {ensemble.config.vocab_size}"
        )
    if ensemble.tokenizer_hash is not None and ensemble.tokenizer_hash != data.tokenizer_hash:
        raise TeacherMismatchError("teachers were trained with a different tokenizer")
    return _train(data, model_config, train_config, ensemble, metrics_path, max_epochs, metadata)
