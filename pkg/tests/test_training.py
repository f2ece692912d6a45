"""
Unit tests for the training module: losses, optimizer, schedule and loops.
"""

# Standard Library
import csv
import math
from dataclasses import replace

# 3rd party
import numpy as np
import pytest
import testutils
from testutils import GRAD_CONFIG

# My stuff
import model
import training
from checkpoint import Checkpoint
from training import AdamState
from training import TeacherEnsemble
from training import TrainConfig


def random_logits(seed, shape=(2, 5, 7)):
    return np.random.default_rng(seed).standard_normal(shape) * 2.0


# ---------------------------------------------------------------- losses


def test_cross_entropy_of_uniform_logits():
    assert training.cross_entropy(np.zeros((3, 4, 9)), np.zeros((3, 4), dtype=int)) == pytest.approx(math.log(9))


def test_cross_entropy_gradient():
    logits = random_logits(0)
    targets = np.random.default_rng(1).integers(0, 7, size=(2, 5))
    mask = np.zeros((2, 5), dtype=bool)
    mask[1, 3:] = True
    _, grad = training.cross_entropy_and_grad(logits, targets, mask)
    assert not grad[1, 3:].any()
    params = {"logits": logits.copy()}
    testutils.check_gradients(lambda p: training.cross_entropy(p["logits"], targets, mask), params, {"logits": grad})


def test_cross_entropy_ignores_masked_positions():
    logits = random_logits(2)
    targets = np.zeros((2, 5), dtype=int)
    mask = np.zeros((2, 5), dtype=bool)
    mask[0] = True
    assert training.cross_entropy(logits, targets, mask) == pytest.approx(training.cross_entropy(logits[1:], targets[1:]))
    with pytest.raises(training.LossInputError):
        training.cross_entropy(logits, targets, np.ones((2, 5), dtype=bool))


@pytest.mark.parametrize("targets", [np.full((2, 5), 7), np.full((2, 5), -1), np.zeros((2, 4), dtype=int)])
def test_cross_entropy_bad_targets(targets):
    with pytest.raises(training.LossInputError):
        training.cross_entropy(random_logits(0), targets)


def test_softmax_with_temperature():
    logits = random_logits(3)
    probs = training.softmax_with_temperature(logits, 2.0)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
    hot = training.softmax_with_temperature(logits, 1e6)
    np.testing.assert_allclose(hot, 1.0 / 7, atol=1e-5)
    with pytest.raises(training.LossInputError):
        training.softmax_with_temperature(logits, 0.0)
    with pytest.raises(training.LossInputError):
        training.softmax_with_temperature([np.nan, 1.0])


def test_kl_divergence():
    p = training.softmax_with_temperature(random_logits(4))
    q = training.softmax_with_temperature(random_logits(5))
    np.testing.assert_allclose(training.kl_divergence(p, p), 0.0, atol=1e-12)
    assert np.all(training.kl_divergence(p, q) > 0)
    assert training.kl_divergence([0.5, 0.5, 0.0], [0.25, 0.25, 0.5]) == pytest.approx(math.log(2))
    with pytest.raises(training.LossInputError):
        training.kl_divergence([0.5, 0.5], [1.0, 0.0])


def test_kl_divergence_matches_a_plain_sum():
    rng = np.random.default_rng(6)
    for _ in range(20):
        p = rng.dirichlet(np.ones(8))
        q = rng.dirichlet(np.ones(8))
        expected = sum(float(a) * math.log(float(a) / float(b)) for a, b in zip(p, q))
        assert abs(training.kl_divergence(p, q) - expected) < 1e-10


def test_distillation_with_alpha_one_is_cross_entropy():
    logits = random_logits(6)
    targets = np.random.default_rng(7).integers(0, 7, size=(2, 5))
    garbage = np.full(logits.shape, np.nan)
    loss, grad = training.distillation_loss_and_grad(targets, logits, garbage, alpha=1.0, temperature=3.0)
    ce_loss, ce_grad = training.cross_entropy_and_grad(logits, targets)
    assert loss == ce_loss
    np.testing.assert_array_equal(grad, ce_grad)


def test_distillation_against_itself_with_alpha_zero():
    logits = random_logits(8)
    targets = np.zeros((2, 5), dtype=int)
    loss, grad = training.distillation_loss_and_grad(targets, logits, logits, alpha=0.0, temperature=2.0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_distillation_value():
    student = random_logits(9)
    teacher = random_logits(10)
    targets = np.random.default_rng(11).integers(0, 7, size=(2, 5))
    alpha, temperature = 0.3, 2.0
    p = training.softmax_with_temperature(teacher, temperature)
    q = training.softmax_with_temperature(student, temperature)
    expected = alpha * training.cross_entropy(student, targets) + (1 - alpha) * temperature**2 * float(
        np.mean(training.kl_divergence(p, q))
    )
    assert training.distillation_loss(targets, student, teacher, alpha, temperature) == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("alpha,temperature", [(0.5, 1.0), (0.3, 2.0), (0.0, 0.5)])
def test_distillation_gradient(alpha, temperature):
    student = random_logits(12)
    teacher = random_logits(13)
    targets = np.random.default_rng(14).integers(0, 7, size=(2, 5))
    _, grad = training.distillation_loss_and_grad(targets, student, teacher, alpha, temperature)
    params = {"logits": student.copy()}
    testutils.check_gradients(
        lambda p: training.distillation_loss(targets, p["logits"], teacher, alpha, temperature),
        params,
        {"logits": grad},
    )


def test_distillation_bad_inputs():
    logits = random_logits(0)
    targets = np.zeros((2, 5), dtype=int)
    with pytest.raises(training.LossInputError):
        training.distillation_loss(targets, logits, logits, alpha=1.5)
    with pytest.raises(training.LossInputError):
        training.distillation_loss(targets, logits, logits, temperature=0.0)
    with pytest.raises(training.LossInputError):
        training.distillation_loss(targets, logits, logits[:, :4])


# ---------------------------------------------------------------- optimizer


def test_train_config_validation():
    assert TrainConfig.from_dict(TrainConfig().to_dict()) == TrainConfig()
    with pytest.raises(training.TrainConfigError):
        TrainConfig.from_dict({"learning_rate": 1e-3})
    for values in ({"distill_alpha": 1.5}, {"schedule": "step"}, {"adam_beta2": 1.0}, {"max_grad_norm": 0.0}):
        with pytest.raises(training.TrainConfigError):
            TrainConfig(**values)


def test_learning_rate_schedules():
    cosine = TrainConfig(max_learning_rate=2.0, warmup_steps=4)
    assert training.lr_at_step(cosine, 0, 20) == 0.0
    assert training.lr_at_step(cosine, 2, 20) == pytest.approx(1.0)
    assert training.lr_at_step(cosine, 4, 20) == pytest.approx(2.0)
    assert training.lr_at_step(cosine, 12, 20) == pytest.approx(1.0)
    assert training.lr_at_step(cosine, 20, 20) == pytest.approx(0.0)
    linear = replace(cosine, schedule="linear")
    assert training.lr_at_step(linear, 16, 20) == pytest.approx(0.5)
    constant = replace(cosine, schedule="constant")
    assert training.lr_at_step(constant, 20, 20) == pytest.approx(2.0)
    rates = [training.lr_at_step(cosine, step, 20) for step in range(4, 21)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_learning_rate_bad_steps():
    config = TrainConfig(warmup_steps=30)
    with pytest.raises(training.TrainConfigError):
        training.lr_at_step(config, 5, 20)
    with pytest.raises(training.TrainConfigError):
        training.lr_at_step(TrainConfig(warmup_steps=0), 21, 20)


def test_updates_use_the_midpoint_rate():
    config = TrainConfig(max_learning_rate=2.0, warmup_steps=4, schedule="cosine")
    rates = [training.update_lr(config, k, 20) for k in range(1, 21)]
    assert rates[0] == pytest.approx(0.25)
    assert rates[-1] == pytest.approx(training.lr_at_step(config, 19.5, 20))
    assert 0.0 < rates[-1] < 0.01
    with pytest.raises(training.TrainConfigError):
        training.update_lr(config, 0, 20)
    with pytest.raises(training.TrainConfigError):
        training.update_lr(config, 21, 20)


def test_clamp_warmup(caplog):
    config = TrainConfig(warmup_steps=600)
    clamped = training.clamp_warmup(config, 40)
    assert clamped.warmup_steps == 40
    assert "clamped" in caplog.text
    assert training.clamp_warmup(config, 1000) is config


def test_adamw_first_step_closed_form():
    """
    After one step the bias-corrected update is ``lr * g / (|g| + eps)``;
    matrices also shrink by ``lr * weight_decay``, vectors do not.
    """
    config = TrainConfig(weight_decay=0.1, adam_epsilon=1e-8)
    params = {"matrix": np.ones((2, 2)), "norm": np.ones(3)}
    grads = {"matrix": np.array([[0.5, -2.0], [1e-3, 4.0]]), "norm": np.array([1.0, -1.0, 0.25])}
    new, state = training.adamw_step(params, grads, AdamState.zeros_like(params), 0.01, config)
    expected_matrix = 1.0 * (1 - 0.01 * 0.1) - 0.01 * grads["matrix"] / (np.abs(grads["matrix"]) + 1e-8)
    np.testing.assert_allclose(new["matrix"], expected_matrix, rtol=1e-12)
    np.testing.assert_allclose(new["norm"], 1.0 - 0.01 * np.sign(grads["norm"]), rtol=1e-7)
    assert state.step == 1
    np.testing.assert_allclose(state.m["norm"], 0.1 * grads["norm"])
    np.testing.assert_allclose(state.v["norm"], 0.001 * grads["norm"] ** 2)
    # inputs untouched
    np.testing.assert_array_equal(params["matrix"], np.ones((2, 2)))


def test_adamw_rejects_non_finite_gradients():
    params = {"w": np.ones((2, 2))}
    with pytest.raises(training.TrainingDivergedError):
        training.adamw_step(params, {"w": np.full((2, 2), np.nan)}, AdamState.zeros_like(params), 0.1, TrainConfig())


def test_adamw_decay_alone_shrinks_the_matrices():
    config = TrainConfig(weight_decay=5.0)
    params = {"matrix": np.random.default_rng(0).standard_normal((3, 4)), "norm": np.ones(4)}
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    new, _ = training.adamw_step(params, grads, AdamState.zeros_like(params), 7e-4, config)
    np.testing.assert_allclose(new["matrix"], params["matrix"] * (1 - 3.5e-3), rtol=1e-12, atol=0)
    np.testing.assert_array_equal(new["norm"], params["norm"])


def test_adamw_without_decay_is_adam():
    config = TrainConfig(weight_decay=0.0)
    rng = np.random.default_rng(1)
    params = {"matrix": rng.standard_normal((3, 4)), "bias": rng.standard_normal(4)}
    state = AdamState.zeros_like(params)
    expected = {name: value.copy() for name, value in params.items()}
    m = {name: np.zeros_like(value) for name, value in params.items()}
    v = {name: np.zeros_like(value) for name, value in params.items()}
    for step in range(1, 6):
        grads = {name: rng.standard_normal(value.shape) for name, value in params.items()}
        lr = 0.01 * step
        params, state = training.adamw_step(params, grads, state, lr, config)
        for name, grad in grads.items():
            m[name] = 0.9 * m[name] + 0.1 * grad
            v[name] = 0.999 * v[name] + 0.001 * grad**2
            m_hat = m[name] / (1 - 0.9**step)
            v_hat = v[name] / (1 - 0.999**step)
            expected[name] = expected[name] - lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    for name, value in expected.items():
        np.testing.assert_allclose(params[name], value, rtol=1e-10, atol=1e-12)
    assert state.step == 5


def test_clip_grad_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[0.0], [4.0]])}
    assert training.global_grad_norm(grads) == pytest.approx(5.0)
    clipped = training.clip_grad_norm(grads, 1.0)
    assert training.global_grad_norm(clipped) == pytest.approx(1.0)
    np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
    assert training.clip_grad_norm(grads, 10.0) is grads


def test_clip_grad_norm_of_zero_gradients():
    grads = {"a": np.zeros(3), "b": np.zeros((2, 2))}
    with np.errstate(all="raise"):
        clipped = training.clip_grad_norm(grads, 1.0)
    assert clipped is grads
    assert training.global_grad_norm(clipped) == 0.0


def test_overfit_one_batch():
    config = replace(GRAD_CONFIG, vocab_size=20, d_model=16, n_heads=4, n_kv_heads=2, d_ff=32, max_seq_len=16)
    params = model.init_params(config, seed=0)
    # distinct tokens: each next token is a function of the current one
    tokens = np.random.default_rng(0).permutation(20)[:17][None, :]
    inputs, targets = training.split_inputs_targets(tokens)
    train_config = TrainConfig(weight_decay=0.0, max_learning_rate=1e-2)
    state = AdamState.zeros_like(params)
    losses = []
    for _ in range(500):
        logits, cache = model.forward_with_cache(params, config, inputs)
        loss, grad = training.cross_entropy_and_grad(logits, targets)
        losses.append(loss)
        if loss < 0.1:
            break
        params, state = training.adamw_step(params, model.backward_from_cache(cache, grad), state, 1e-2, train_config)
    assert losses[0] == pytest.approx(math.log(20), abs=0.1)
    assert losses[-1] < 0.1


# ---------------------------------------------------------------- teachers


def test_ensemble_mean_logits():
    first = model.init_params(GRAD_CONFIG, seed=1)
    second = model.init_params(GRAD_CONFIG, seed=2)
    ensemble = TeacherEnsemble([(first, GRAD_CONFIG), (second, GRAD_CONFIG)])
    tokens = np.array([[1, 2, 3, 4]])
    expected = (model.forward(first, GRAD_CONFIG, tokens) + model.forward(second, GRAD_CONFIG, tokens)) / 2
    np.testing.assert_allclose(training.ensemble_mean_logits(ensemble, tokens), expected, rtol=1e-6)
    single = TeacherEnsemble([(first, GRAD_CONFIG)])
    np.testing.assert_array_equal(training.ensemble_mean_logits(single, tokens), model.forward(first, GRAD_CONFIG, tokens))


def test_ensemble_mismatches():
    with pytest.raises(training.TeacherMismatchError):
        TeacherEnsemble([])
    other = replace(GRAD_CONFIG, d_ff=16)
    with pytest.raises(training.TeacherMismatchError):
        TeacherEnsemble([(model.init_params(GRAD_CONFIG, 0), GRAD_CONFIG), (model.init_params(other, 0), other)])
    checkpoints = [
        Checkpoint(GRAD_CONFIG, model.init_params(GRAD_CONFIG, 0), "a" * 64),
        Checkpoint(GRAD_CONFIG, model.init_params(GRAD_CONFIG, 1), "b" * 64),
    ]
    with pytest.raises(training.TeacherMismatchError):
        TeacherEnsemble.from_checkpoints(checkpoints)


# ---------------------------------------------------------------- loops


def test_teacher_training(trained_teacher, toy_data, tiny_config, fast_train_config):
    history = trained_teacher.history
    per_epoch = training.steps_per_epoch(toy_data.train.count, fast_train_config.batch_size)
    assert history.total_steps == 2 * per_epoch
    assert len(history.train_loss) == history.total_steps
    assert len(history.val_loss) == history.epochs_run == 2
    total = history.total_steps
    assert history.learning_rates == [training.update_lr(fast_train_config, k, total) for k in range(1, total + 1)]
    assert 0.0 < history.learning_rates[-1] < 0.1 * fast_train_config.max_learning_rate
    assert 0.0 < history.learning_rates[0] < max(history.learning_rates) <= fast_train_config.max_learning_rate
    assert history.val_loss[-1] < history.train_loss[0] - 0.3
    ckpt = trained_teacher.checkpoint
    assert ckpt.config == tiny_config
    assert ckpt.tokenizer_hash == toy_data.tokenizer_hash
    assert ckpt.metadata["kind"] == "teacher"
    assert ckpt.metadata["sequence_length"] == toy_data.train.sequence_length
    assert ckpt.metadata["final_val_loss"] == history.val_loss[-1]
    assert ckpt.metadata["train_config"]["seed"] == fast_train_config.seed
    assert ckpt.metadata["final_val_loss"] == pytest.approx(
        training.mean_cross_entropy(ckpt.params, ckpt.config, toy_data.validation)
    )


def test_training_is_reproducible(trained_teacher, toy_data, tiny_config, fast_train_config):
    again = training.train_teacher(toy_data, tiny_config, fast_train_config)
    for name, value in trained_teacher.checkpoint.params.items():
        np.testing.assert_array_equal(again.checkpoint.params[name], value)
    assert again.history.train_loss == trained_teacher.history.train_loss


def test_other_seed_other_model(trained_teacher, toy_data, tiny_config, fast_train_config):
    other = training.train_teacher(toy_data, tiny_config, replace(fast_train_config, seed=2), max_epochs=1)
    assert not np.array_equal(other.checkpoint.params["output"], trained_teacher.checkpoint.params["output"])


def test_max_epochs_keeps_the_schedule(toy_data, tiny_config, fast_train_config, tmp_path):
    metrics = tmp_path / "metrics.csv"
    result = training.train_teacher(toy_data, tiny_config, fast_train_config, metrics_path=str(metrics), max_epochs=1)
    per_epoch = training.steps_per_epoch(toy_data.train.count, fast_train_config.batch_size)
    assert result.history.epochs_run == 1
    assert result.history.total_steps == 2 * per_epoch
    assert len(result.history.train_loss) == per_epoch
    assert result.checkpoint.metadata["steps"] == per_epoch
    # halfway through a cosine schedule
    assert result.history.learning_rates[-1] > 0.4 * fast_train_config.max_learning_rate
    with open(metrics, encoding="utf-8") as file_pointer:
        rows = list(csv.DictReader(file_pointer))
    assert len(rows) == per_epoch
    assert list(rows[0]) == ["step", "epoch", "lr", "train_loss", "val_loss"]
    assert [row["val_loss"] != "" for row in rows].count(True) == 1
    assert rows[-1]["val_loss"] != ""


def test_default_schedule_length(toy_data, tiny_config):
    result = training.train_teacher(toy_data, tiny_config, TrainConfig(), max_epochs=1)
    assert result.history.total_steps == 8 * math.ceil(toy_data.train.count / 128)
    assert result.history.epochs_run == 1


def test_student_with_alpha_one_trains_like_a_teacher(trained_teacher, toy_data, tiny_config, fast_train_config):
    ensemble = TeacherEnsemble.from_checkpoints([trained_teacher.checkpoint])
    config = replace(fast_train_config, distill_alpha=1.0, seed=5)
    student = training.train_student_distill(toy_data, ensemble, tiny_config, config, max_epochs=1)
    teacher = training.train_teacher(toy_data, tiny_config, config, max_epochs=1)
    assert student.history.train_loss == teacher.history.train_loss
    for name, value in teacher.checkpoint.params.items():
        np.testing.assert_array_equal(student.checkpoint.params[name], value)
    assert student.checkpoint.metadata["kind"] == "student"
    assert student.checkpoint.metadata["n_teachers"] == 1


def test_distillation_leaves_the_teachers_alone(trained_teacher, toy_data, tiny_config, fast_train_config):
    before = {name: value.copy() for name, value in trained_teacher.checkpoint.params.items()}
    ensemble = TeacherEnsemble.from_checkpoints([trained_teacher.checkpoint, trained_teacher.checkpoint])
    student_config = replace(tiny_config, n_layers=1, d_model=8, n_heads=2, n_kv_heads=1, d_ff=16)
    result = training.train_student_distill(toy_data, ensemble, student_config, fast_train_config, max_epochs=1)
    for name, value in before.items():
        np.testing.assert_array_equal(trained_teacher.checkpoint.params[name], value)
    assert result.checkpoint.config == student_config
    assert math.isfinite(result.history.val_loss[-1])
    assert result.history.train_loss[-1] < result.history.train_loss[0]


def test_student_must_share_the_vocabulary(trained_teacher, toy_data, tiny_config, fast_train_config):
    ensemble = TeacherEnsemble.from_checkpoints([trained_teacher.checkpoint])
    with pytest.raises(training.TeacherMismatchError):
        training.train_student_distill(toy_data, ensemble, replace(tiny_config, vocab_size=400), fast_train_config)
    stranger = TeacherEnsemble([(trained_teacher.checkpoint.params, tiny_config)], tokenizer_hash="f" * 64)
    with pytest.raises(training.TeacherMismatchError):
        training.train_student_distill(toy_data, stranger, tiny_config, fast_train_config)


def test_training_checks_the_data(toy_data, tiny_config, fast_train_config):
    with pytest.raises(training.TrainConfigError):
        training.train_teacher(toy_data, replace(tiny_config, max_seq_len=16), fast_train_config)
    with pytest.raises(training.TrainConfigError):
        training.train_teacher(toy_data, replace(tiny_config, vocab_size=tiny_config.vocab_size + 1), fast_train_config)


def test_non_finite_loss_stops_training(toy_data, tiny_config, fast_train_config, monkeypatch):
    def broken(logits, targets):
        return float("nan"), np.zeros_like(logits)

    monkeypatch.setattr(training, "cross_entropy_and_grad", broken)
    with pytest.raises(training.TrainingDivergedError):
        training.train_teacher(toy_data, tiny_config, fast_train_config)
