"""
Desk-scale distillation-pretraining experiments.

Usage
~~~~~

::

    python experiment.py synth --out-dir lab
    python experiment.py tokenizer-train --corpus lab/corpus/train --vocab-size 2000 --out-dir lab
    python experiment.py pretrain --config templates/desk.yml --corpus lab/corpus/train \\
        --tokenizer lab/tokenizer.json --seed 1 --output lab/teacher-1.ckpt --out-dir lab
    python experiment.py distill --config templates/desk.yml --corpus lab/corpus/train \\
        --tokenizer lab/tokenizer.json --teacher lab/teacher-1.ckpt --teacher lab/teacher-2.ckpt \\
        --seed 3 --output lab/student.ckpt --out-dir lab
    python experiment.py eval --checkpoint lab/student.ckpt --tokenizer lab/tokenizer.json \\
        --test-corpus lab/corpus/test --suite lab/suites/agreement.jsonl --out-dir lab

Subcommands: ``synth``, ``tokenizer-train``, ``pretrain``, ``distill``, ``eval``,
``sweep``, ``correlate``, ``scaling``, ``finetune``, ``teachers``.

Every command writes ``manifest-<command>.json`` in ``--out-dir`` with the
resolved configuration, the sha256 of every input and the list of outputs,
and logs to ``desk-distill.log`` in the same directory.

Exit status: 0 on success, 2 for usage errors (bad flags, missing inputs),
1 for failures while running.

Algorithm of the ``teachers`` study
~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~~

1. For every repetition, train ``--n-teachers`` teachers from different seeds.
2. Distill one student from the first ``k`` teachers, for ``k = 1 .. n``.
3. Measure the held-out loss of every model.
4. Report the median loss per group, how often the student beats the best
   of its teachers, and the gain of each added teacher.
"""

# Standard Library
import argparse
import csv
import datetime
import logging
import os
import sys
import time
from dataclasses import asdict
from dataclasses import dataclass
from dataclasses import field
from dataclasses import replace
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

# 3rd party
import numpy as np
from tabulate import tabulate

# My stuff
import corpus
import evaluation
import sweep
import synthetic
import tokenizer
from checkpoint import Checkpoint
from checkpoint import CheckpointError
from model import ModelConfig
from model import param_count
from training import TeacherEnsemble
from training import TrainConfig
from training import TrainingDivergedError
from training import train_student_distill
from training import train_teacher
from utils import dump_json
from utils import file_sha256
from utils import load_config
from utils import substream_seed

LOG_FILE = "desk-distill.log"
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
DEFAULT_JOBS = 1
MAX_JOBS = os.cpu_count()

#: command line flag -> TrainConfig field
TRAIN_OVERRIDES = {
    "epochs": "n_epochs",
    "batch_size": "batch_size",
    "lr": "max_learning_rate",
    "warmup": "warmup_steps",
    "alpha": "distill_alpha",
    "temperature": "distill_temperature",
}


class UsageError(Exception):
    """
    Missing inputs or incompatible flags.
    """


@dataclass
class RunManifest:
    """
    What a command read, with which configuration, and what it wrote.
    """

    command: str
    seed: int
    config: Dict[str, Any] = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    started: str = ""
    wall_clock_seconds: float = 0.0

    def add_input(self, path: str) -> None:
        """Record a file with its sha256."""
        self.inputs[path] = file_sha256(path)

    def add_output(self, path: str) -> str:
        if path not in self.outputs:
            self.outputs.append(path)
        return path

    def save(self, out_dir: str) -> str:
        path = os.path.join(out_dir, f"manifest-{self.command}.json")
        dump_json(asdict(self), path)
        return path


class Run:
    """
    Resolved settings of one command: config file sections overridden by
    command line flags.
    """

    def __init__(self, args: argparse.Namespace):
        self.args = args
        if args.config and not os.path.isfile(args.config):
            raise UsageError(f"config file not found: {args.config}")
        self.cfg = load_config(args.config) if args.config else {}
        train_seed = self.section("train").get("seed", 0)
        self.seed = int(args.seed if args.seed is not None else train_seed)
        self.manifest = RunManifest(
            args.command, self.seed, started=datetime.datetime.now().isoformat(timespec="seconds")
        )
        if args.config:
            self.manifest.add_input(args.config)

    def section(self, name: str) -> Dict[str, Any]:
        return dict(self.cfg.get(name) or {})

    def path(self, name: str) -> str:
        return os.path.join(self.args.out_dir, name)

    def output(self, flag_value: Optional[str], default_name: str) -> str:
        """Output path from a flag, or ``default_name`` inside ``--out-dir``."""
        return self.manifest.add_output(flag_value or self.path(default_name))

    # inputs

    def sources(self, paths: Sequence[str]) -> Tuple[Tuple[str, str], ...]:
        sources: List[Tuple[str, str]] = []
        for path in paths:
            if os.path.isdir(path):
                sources.extend(corpus.sources_from_dir(path))
            elif os.path.isfile(path):
                sources.append((path, os.path.splitext(os.path.basename(path))[0]))
            else:
                raise UsageError(f"corpus path not found: {path}")
        return tuple(sources)

    @staticmethod
    def _expand(sources: Sequence[Tuple[str, str]]) -> Tuple[Tuple[str, str], ...]:
        # config entries may name directories
        expanded: List[Tuple[str, str]] = []
        for path, kind in sources:
            expanded.extend(corpus.sources_from_dir(path) if os.path.isdir(path) else [(path, kind)])
        return tuple(expanded)

    def corpus_spec(self, need_test: bool = False) -> corpus.CorpusSpec:
        spec = corpus.CorpusSpec.from_dict(self.section("corpus"))
        spec = replace(spec, sources=self._expand(spec.sources), test_sources=self._expand(spec.test_sources))
        if getattr(self.args, "corpus", None):
            spec = replace(spec, sources=self.sources(self.args.corpus))
        if getattr(self.args, "test_corpus", None):
            spec = replace(spec, test_sources=self.sources(self.args.test_corpus))
        if not spec.sources:
            raise UsageError("no corpus given (--corpus or the 'corpus' section of --config)")
        if need_test and not spec.test_sources:
            raise UsageError("no test corpus given (--test-corpus or corpus.test_sources in --config)")
        for path, _ in spec.sources + spec.test_sources:
            if not os.path.isfile(path):
                raise UsageError(f"corpus file not found: {path}")
            self.manifest.add_input(path)
        self.manifest.config["corpus"] = spec.to_dict()
        return spec

    def load_tokenizer(self) -> tokenizer.TokenizerModel:
        path = self.args.tokenizer
        if not path or not os.path.isfile(path):
            raise UsageError(f"tokenizer file not found: {path}")
        self.manifest.add_input(path)
        return tokenizer.load(path)

    def load_checkpoint(self, path: str) -> Checkpoint:
        if not os.path.isfile(path):
            raise UsageError(f"checkpoint not found: {path}")
        self.manifest.add_input(path)
        return Checkpoint.load(path)

    # configs

    def model_config(self, tok: tokenizer.TokenizerModel, values: Optional[Dict[str, Any]] = None) -> ModelConfig:
        """Model section with the vocabulary size taken from the tokenizer."""
        values = dict(self.section("model") if values is None else values)
        if values.get("vocab_size", tok.vocab_size) != tok.vocab_size:
            logging.warning("model vocab_size %s replaced by the tokenizer's %d", values["vocab_size"], tok.vocab_size)
        values["vocab_size"] = tok.vocab_size
        config = ModelConfig.from_dict(values)
        self.manifest.config.setdefault("model", config.to_dict())
        return config

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        values = self.section("train")
        for flag, name in TRAIN_OVERRIDES.items():
            value = getattr(self.args, flag, None)
            if value is not None:
                values[name] = value
        values["seed"] = self.seed if seed is None else seed
        config = TrainConfig.from_dict(values)
        self.manifest.config.setdefault("train", config.to_dict())
        return config

    def sequence_length(self, model_config: ModelConfig) -> int:
        length = getattr(self.args, "sequence_length", None) or self.section("corpus").get("sequence_length")
        length = int(length or model_config.max_seq_len + 1)
        self.manifest.config["sequence_length"] = length
        return length

    def data(
        self, tok: tokenizer.TokenizerModel, model_config: ModelConfig, spec: Optional[corpus.CorpusSpec] = None
    ) -> corpus.CorpusData:
        spec = spec or self.corpus_spec()
        train_text, validation_text = corpus.load_and_split(spec)
        corpus.write_split_manifest(spec, self.output(None, "split-manifest.json"))
        return corpus.prepare_datasets(train_text, validation_text, tok, self.sequence_length(model_config))


# ---------------------------------------------------------------- commands


def cmd_synth(run: Run) -> None:
    """Write the synthetic corpus, suites and classification task."""
    args = run.args
    written = synthetic.write_desk_data(
        args.out_dir, run.seed, args.train_words, args.test_words, args.pairs, args.task_examples
    )
    run.manifest.config["synth"] = {
        "train_words": args.train_words,
        "test_words": args.test_words,
        "pairs": args.pairs,
        "task_examples": args.task_examples,
    }
    for paths in written.values():
        for path in paths:
            run.manifest.add_output(path)


def cmd_tokenizer_train(run: Run) -> None:
    """Train the BPE tokenizer on the training split."""
    spec = run.corpus_spec()
    train_text, _ = corpus.load_and_split(spec)
    vocab_size = run.args.vocab_size or run.section("corpus").get("vocab_size") or tokenizer.DEFAULT_VOCAB_SIZE
    run.manifest.config["vocab_size"] = int(vocab_size)
    model = tokenizer.bpe_train(train_text, int(vocab_size))
    path = run.output(run.args.output, "tokenizer.json")
    tokenizer.save(model, path)
    logging.info("Tokenizer with %d tokens written to %s", model.vocab_size, path)


def _save_checkpoint(run: Run, ckpt: Checkpoint, path: str) -> None:
    digest = ckpt.save(path)
    logging.info("Checkpoint %s written (sha256 %s, final validation loss %s)", path, digest[:12], ckpt.metadata.get("final_val_loss"))


def cmd_pretrain(run: Run) -> None:
    """Pretrain a teacher with cross-entropy."""
    tok = run.load_tokenizer()
    model_config = run.model_config(tok)
    data = run.data(tok, model_config)
    result = train_teacher(
        data,
        model_config,
        run.train_config(),
        metrics_path=run.output(run.args.metrics, "metrics-pretrain.csv"),
        max_epochs=run.args.max_epochs,
    )
    _save_checkpoint(run, result.checkpoint, run.output(run.args.output, "teacher.ckpt"))


def cmd_distill(run: Run) -> None:
    """Pretrain a student against the mean logits of the teachers."""
    tok = run.load_tokenizer()
    teachers = [run.load_checkpoint(path) for path in run.args.teacher]
    run.manifest.config["teachers"] = {path: run.manifest.inputs[path] for path in run.args.teacher}
    ensemble = TeacherEnsemble.from_checkpoints(teachers)
    model_config = run.model_config(tok)
    data = run.data(tok, model_config)
    result = train_student_distill(
        data,
        ensemble,
        model_config,
        run.train_config(),
        metrics_path=run.output(run.args.metrics, "metrics-distill.csv"),
        max_epochs=run.args.max_epochs,
        metadata={"teachers": run.manifest.config["teachers"]},
    )
    _save_checkpoint(run, result.checkpoint, run.output(run.args.output, "student.ckpt"))


def cmd_eval(run: Run) -> None:
    """Held-out loss and minimal-pair accuracy of one checkpoint."""
    args = run.args
    ckpt = run.load_checkpoint(args.checkpoint)
    tok = run.load_tokenizer()
    if not args.suite and not args.test_corpus:
        raise UsageError("nothing to evaluate: give --suite and/or --test-corpus")
    test_text = None
    if args.test_corpus:
        spec = corpus.CorpusSpec(sources=(), test_sources=run.sources(args.test_corpus))
        for path, _ in spec.test_sources:
            run.manifest.add_input(path)
        test_text = corpus.load_test_text(spec)
    suites = []
    for path in args.suite or []:
        if not os.path.isfile(path):
            raise UsageError(f"suite file not found: {path}")
        run.manifest.add_input(path)
        suites.append(evaluation.MinimalPairSuite.load(path))
    run.manifest.config["eval"] = {"normalize": args.normalize}
    report = evaluation.evaluate(
        ckpt, tok, run.manifest.inputs[args.checkpoint][:12], test_text, suites, args.normalize, args.jobs
    )
    report.save_json(run.output(args.output, "eval.json"))
    report.append_csv(run.output(args.results, "results.csv"))
    rows = [[suite, accuracy] for suite, accuracy in report.suite_accuracy.items()]
    if report.macro_average is not None:
        rows.append(["macro average", report.macro_average])
    if report.test_loss is not None:
        rows.append(["test loss", report.test_loss])
    print(tabulate(rows, headers=["metric", "value"], floatfmt=".4f"))


def cmd_sweep(run: Run) -> None:
    """Successive-halving sweep of the teacher hyperparameters."""
    args = run.args
    records_path = run.output(args.records, "sweep-records.jsonl")
    if os.path.exists(records_path) and not args.resume:
        raise UsageError(f"{records_path} exists: pass --resume to continue it")
    plan_values = run.section("sweep")
    for flag, name in (("trials", "n_trials"), ("eta", "eta"), ("rungs", "n_rungs")):
        if getattr(args, flag) is not None:
            plan_values[name] = getattr(args, flag)
    plan = sweep.SweepPlan.from_dict(plan_values)
    priors = sweep.parse_priors(run.section("priors"))
    run.manifest.config["sweep"] = plan.to_dict()
    run.manifest.config["priors"] = run.section("priors")

    tok = run.load_tokenizer()
    spec = run.corpus_spec()
    model_config = run.model_config(tok)
    data = run.data(tok, model_config, spec)
    trial_eval = None
    if args.suite or spec.test_sources:
        for path in args.suite or []:
            if not os.path.isfile(path):
                raise UsageError(f"suite file not found: {path}")
            run.manifest.add_input(path)
        suites = [evaluation.MinimalPairSuite.load(path) for path in args.suite or []]
        test_text = corpus.load_test_text(spec) if spec.test_sources else None
        trial_eval = sweep.TrialEvaluation(tok, test_text, suites)
    records = sweep.run_sweep(
        data, model_config, priors, plan, run.seed, records_path, run.train_config(), trial_eval, args.jobs
    )
    print(sweep.pformat_rungs(records, plan))
    if args.retrain_best is not None:
        result = sweep.retrain_best(records, data, args.retrain_best, run.output(None, "metrics-retrain-best.csv"))
        _save_checkpoint(run, result.checkpoint, run.output(None, "sweep-best.ckpt"))


def cmd_correlate(run: Run) -> None:
    """Validation loss against test loss and accuracy over the sweep trials."""
    args = run.args
    records_path = args.records or run.path("sweep-records.jsonl")
    if not os.path.isfile(records_path):
        raise UsageError(f"records file not found: {records_path}")
    run.manifest.add_input(records_path)
    records = sweep.load_records(records_path)
    report = sweep.correlate_loss_and_scores(records, args.metric, args.include_early_stopped)
    report.save(run.output(None, "correlation.csv"), run.output(None, "correlation.json"))
    run.manifest.config["correlate"] = {"metric": args.metric, "include_early_stopped": args.include_early_stopped}
    print(tabulate(sorted(report.summary().items()), headers=["", "value"]))


def run_scaling(
    train_text: str,
    validation_text: str,
    test_text: str,
    tok: tokenizer.TokenizerModel,
    models: Dict[str, ModelConfig],
    sizes: Sequence[int],
    train_config: TrainConfig,
    sequence_length: int,
) -> List[Dict[str, Any]]:
    """
    Train every model on a random subset of every size; held-out loss per run.
    """
    rows = []
    for name, model_config in models.items():
        for n_words in sizes:
            subset = corpus.random_subset(train_text, n_words, train_config.seed)
            data = corpus.prepare_datasets(subset, validation_text, tok, sequence_length)
            result = train_teacher(data, model_config, train_config, metadata={"subset_words": n_words})
            rows.append(
                {
                    "model": name,
                    "n_params": param_count(model_config),
                    "subset_words": n_words,
                    "words": corpus.count_words(subset),
                    "test_loss": evaluation.eval_loss(result.checkpoint, tok, test_text, sequence_length),
                }
            )
            logging.info("%s on %d words: test loss %.4f", name, n_words, rows[-1]["test_loss"])
    return rows


def write_rows(path: str, rows: List[Dict[str, Any]]) -> None:
    """Rows of dicts as csv, columns in first-row order."""
    with open(path, "w", encoding="utf-8", newline="") as file_pointer:
        writer = csv.DictWriter(file_pointer, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def cmd_scaling(run: Run) -> None:
    """Held-out loss as a function of the dataset size, for several model sizes."""
    args = run.args
    scaling = run.section("scaling")
    presets = scaling.get("models") or {}
    if len(presets) < 2:
        raise UsageError("the scaling experiment needs at least 2 model presets in scaling.models")
    tok = run.load_tokenizer()
    models = {name: run.model_config(tok, values) for name, values in presets.items()}
    unit = args.unit or scaling.get("unit")
    if not unit:
        raise UsageError("no subset unit given (--unit or scaling.unit)")
    sizes = corpus.subset_sizes(int(unit), args.multipliers or scaling.get("multipliers"))
    spec = run.corpus_spec(need_test=True)
    train_text, validation_text = corpus.load_and_split(spec)
    sequence_length = run.sequence_length(next(iter(models.values())))
    run.manifest.config["scaling"] = {"sizes": sizes, "models": {k: v.to_dict() for k, v in models.items()}}
    rows = run_scaling(
        train_text, validation_text, corpus.load_test_text(spec), tok, models, sizes, run.train_config(), sequence_length
    )
    write_rows(run.output(args.output, "scaling.csv"), rows)
    print(tabulate(rows, headers="keys", floatfmt=".4f"))


def cmd_finetune(run: Run) -> None:
    """Fine-tune a checkpoint with a classifier head on one task."""
    args = run.args
    ckpt = run.load_checkpoint(args.checkpoint)
    tok = run.load_tokenizer()
    tasks_file = args.tasks or args.config
    if not tasks_file:
        raise UsageError("no task presets given (--tasks or a 'tasks' section in --config)")
    if args.tasks:
        run.manifest.add_input(args.tasks)
    tasks = evaluation.load_task_configs(tasks_file)
    if args.task not in tasks:
        raise UsageError(f"task {args.task!r} not in {sorted(tasks)}")
    for path in filter(None, (args.train, args.eval)):
        if not os.path.isfile(path):
            raise UsageError(f"dataset not found: {path}")
        run.manifest.add_input(path)
    train_examples = evaluation.load_labeled(args.train)
    eval_examples = evaluation.load_labeled(args.eval) if args.eval else None
    run.manifest.config["task"] = tasks[args.task].to_dict()
    result = evaluation.fine_tune_classifier(ckpt, tok, train_examples, tasks[args.task], eval_examples, run.seed)
    _save_checkpoint(run, result.checkpoint, run.output(args.output, f"finetuned-{args.task}.ckpt"))
    dump_json(
        {"task": args.task, "accuracy": result.accuracy, "train_accuracy": result.train_accuracy},
        run.output(None, f"finetune-{args.task}.json"),
    )
    print(tabulate([[args.task, result.train_accuracy, result.accuracy]], headers=["task", "train acc", "held-out acc"]))


def run_teacher_study(
    data: corpus.CorpusData,
    test_text: str,
    tok: tokenizer.TokenizerModel,
    model_config: ModelConfig,
    train_config: TrainConfig,
    n_teachers: int,
    repetitions: int,
    seed: int,
) -> List[Dict[str, Any]]:
    """
    Teachers and students distilled from the first ``k`` of them, over
    several repetitions; one row per trained model.
    """
    # pylint: disable=too-many-locals,too-many-arguments
    sequence_length = data.train.sequence_length
    rows: List[Dict[str, Any]] = []
    for rep in range(repetitions):
        teachers = []
        for idx in range(n_teachers):
            teacher_seed = substream_seed(seed, f"study/{rep}/teacher/{idx}") & 0x7FFFFFFF
            try:
                result = train_teacher(data, model_config, replace(train_config, seed=teacher_seed))
            except TrainingDivergedError as exc:
                logging.warning("repetition %d, teacher %d diverged: %s", rep, idx, exc)
                break
            teachers.append(result.checkpoint)
            loss = evaluation.eval_loss(result.checkpoint, tok, test_text, sequence_length)
            rows.append({"repetition": rep, "role": "teacher", "k": idx + 1, "seed": teacher_seed, "test_loss": loss})
        student_seed = substream_seed(seed, f"study/{rep}/student") & 0x7FFFFFFF
        for k in range(1, len(teachers) + 1):
            ensemble = TeacherEnsemble.from_checkpoints(teachers[:k])
            result = train_student_distill(data, ensemble, model_config, replace(train_config, seed=student_seed))
            loss = evaluation.eval_loss(result.checkpoint, tok, test_text, sequence_length)
            rows.append({"repetition": rep, "role": "student", "k": k, "seed": student_seed, "test_loss": loss})
            logging.info("repetition %d: student from %d teacher(s) test loss %.4f", rep, k, loss)
    return rows


def summarize_teacher_study(rows: List[Dict[str, Any]]) -> Dict[str, Any]:
    """
    Median loss per group, how often the student matches or beats the best
    of its teachers, and the gain brought by each added teacher.
    """
    teachers = [row for row in rows if row["role"] == "teacher"]
    students: Dict[int, List[Dict[str, Any]]] = {}
    for row in rows:
        if row["role"] == "student":
            students.setdefault(row["k"], []).append(row)
    summary: Dict[str, Any] = {
        "median_teacher_loss": float(np.median([row["test_loss"] for row in teachers])) if teachers else None,
        "median_student_loss": {},
        "student_beats_best_teacher": {},
        "gain_per_added_teacher": {},
    }
    for k, group in sorted(students.items()):
        summary["median_student_loss"][k] = float(np.median([row["test_loss"] for row in group]))
        wins = 0
        for row in group:
            own = [t["test_loss"] for t in teachers if t["repetition"] == row["repetition"] and t["k"] <= k]
            wins += int(bool(own) and row["test_loss"] <= min(own))
        summary["student_beats_best_teacher"][k] = wins
    medians = summary["median_student_loss"]
    for k in sorted(medians):
        if k - 1 in medians:
            summary["gain_per_added_teacher"][f"{k - 1}->{k}"] = medians[k - 1] - medians[k]
    gains = summary["gain_per_added_teacher"]
    if "1->2" in gains and "2->3" in gains:
        summary["diminishing_returns"] = gains["2->3"] < gains["1->2"]
    return summary


def cmd_teachers(run: Run) -> None:
    """Teacher-count study."""
    args = run.args
    tok = run.load_tokenizer()
    spec = run.corpus_spec(need_test=True)
    model_config = run.model_config(tok)
    data = run.data(tok, model_config, spec)
    run.manifest.config["study"] = {"n_teachers": args.n_teachers, "repetitions": args.repetitions}
    rows = run_teacher_study(
        data,
        corpus.load_test_text(spec),
        tok,
        model_config,
        run.train_config(),
        args.n_teachers,
        args.repetitions,
        run.seed,
    )
    write_rows(run.output(args.output, "teachers.csv"), rows)
    summary = summarize_teacher_study(rows)
    dump_json(summary, run.output(None, "teachers-summary.json"))
    table = [["teachers", "", summary["median_teacher_loss"], ""]]
    for k, median in summary["median_student_loss"].items():
        table.append(["student", k, median, summary["student_beats_best_teacher"][k]])
    print(tabulate(table, headers=["role", "k", "median test loss", "beats best teacher"], floatfmt=".4f"))


COMMANDS = {
    "synth": cmd_synth,
    "tokenizer-train": cmd_tokenizer_train,
    "pretrain": cmd_pretrain,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "correlate": cmd_correlate,
    "scaling": cmd_scaling,
    "finetune": cmd_finetune,
    "teachers": cmd_teachers,
}


# ---------------------------------------------------------------- command line


def build_parser() -> argparse.ArgumentParser:
    """
    Argument parser with one subparser per command.
    """
    # pylint: disable=too-many-statements
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="yaml or json experiment configuration")
    common.add_argument("--seed", type=int, help="master seed (default: train.seed of the config, else 0)")
    common.add_argument(
        "-j",
        "--jobs",
        type=int,
        default=DEFAULT_JOBS,
        help=f"parallel workers for sweep trials and evaluation (default: {DEFAULT_JOBS}, max: {MAX_JOBS})",
    )
    common.add_argument("--out-dir", default=".", help="directory for outputs, manifest and log (default: .)")
    common.add_argument("-v", "--verbose", action="store_true", help="verbose mode")

    parser = argparse.ArgumentParser(description="Desk-scale distillation pretraining of small Llama models.")
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        return commands.add_parser(name, parents=[common], help=help_text, description=help_text)

    def add_corpus(sub: argparse.ArgumentParser, test: bool = False) -> None:
        sub.add_argument("--corpus", nargs="+", help="corpus files or directories of .txt files")
        if test:
            sub.add_argument("--test-corpus", nargs="+", help="held-out test files or directories")

    def add_training(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--tokenizer", required=True, help="tokenizer json")
        sub.add_argument("--sequence-length", type=int, help="training window in tokens")
        sub.add_argument("--epochs", type=int)
        sub.add_argument("--batch-size", type=int)
        sub.add_argument("--lr", type=float, help="maximum learning rate")
        sub.add_argument("--warmup", type=int, help="warm-up steps")

    sub = add("synth", "write a synthetic corpus, minimal-pair suites and a classification task")
    sub.add_argument("--train-words", type=int, default=200_000)
    sub.add_argument("--test-words", type=int, default=20_000)
    sub.add_argument("--pairs", type=int, default=100, help="pairs per suite")
    sub.add_argument("--task-examples", type=int, default=64, help="examples per task split")

    sub = add("tokenizer-train", "train the byte-level BPE tokenizer")
    add_corpus(sub)
    sub.add_argument("--vocab-size", type=int, help=f"default: corpus.vocab_size, else {tokenizer.DEFAULT_VOCAB_SIZE}")
    sub.add_argument("-o", "--output", help="default: <out-dir>/tokenizer.json")

    for name, help_text in (("pretrain", "pretrain a teacher"), ("distill", "distill a student from teachers")):
        sub = add(name, help_text)
        add_corpus(sub)
        add_training(sub)
        sub.add_argument("--max-epochs", type=int, help="stop early; the schedule still spans all epochs")
        sub.add_argument("--metrics", help="metrics csv")
        sub.add_argument("-o", "--output", help="checkpoint path")
        if name == "distill":
            sub.add_argument("--teacher", action="append", required=True, help="teacher checkpoint (repeatable)")
            sub.add_argument("--alpha", type=float, help="weight of the cross-entropy term (default 0.5)")
            sub.add_argument("--temperature", type=float, help="distillation temperature (default 1)")

    sub = add("eval", "held-out loss and minimal-pair accuracy of a checkpoint")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--tokenizer", required=True)
    sub.add_argument("--test-corpus", nargs="+")
    sub.add_argument("--suite", action="append", help="minimal-pair json-lines file (repeatable)")
    sub.add_argument("--normalize", action="store_true", help="score sentences by mean instead of total log-likelihood")
    sub.add_argument("--results", help="results csv to append to (default: <out-dir>/results.csv)")
    sub.add_argument("-o", "--output", help="report json (default: <out-dir>/eval.json)")

    sub = add("sweep", "successive-halving hyperparameter sweep")
    add_corpus(sub, test=True)
    add_training(sub)
    sub.add_argument("--trials", type=int)
    sub.add_argument("--eta", type=int)
    sub.add_argument("--rungs", type=int)
    sub.add_argument("--suite", action="append", help="suite scored on every trial (repeatable)")
    sub.add_argument("--records", help="records json-lines (default: <out-dir>/sweep-records.jsonl)")
    sub.add_argument("--resume", action="store_true", help="continue an existing records file")
    sub.add_argument("--retrain-best", type=int, metavar="SEED", help="retrain the best trial with this seed")

    sub = add("correlate", "validation loss against test loss and accuracy over sweep trials")
    sub.add_argument("--records", help="records json-lines (default: <out-dir>/sweep-records.jsonl)")
    sub.add_argument("--metric", default="macro_average", help="accuracy key of the records")
    sub.add_argument(
        "--include-early-stopped", action="store_true", help="also fit trials dropped before the last rung"
    )

    sub = add("scaling", "held-out loss against dataset size")
    add_corpus(sub, test=True)
    add_training(sub)
    sub.add_argument("--unit", type=int, help="smallest subset, in words")
    sub.add_argument("--multipliers", type=int, nargs="+", help="subset sizes as multiples of the unit")
    sub.add_argument("-o", "--output", help="default: <out-dir>/scaling.csv")

    sub = add("finetune", "fine-tune a classifier head and the model on one task")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--tokenizer", required=True)
    sub.add_argument("--tasks", help="task presets file (default: --config)")
    sub.add_argument("--task", required=True)
    sub.add_argument("--train", required=True, help="labeled json-lines")
    sub.add_argument("--eval", help="held-out labeled json-lines")
    sub.add_argument("-o", "--output", help="fine-tuned checkpoint")

    sub = add("teachers", "teacher-count study")
    add_corpus(sub, test=True)
    add_training(sub)
    sub.add_argument("--n-teachers", type=int, default=3)
    sub.add_argument("--repetitions", type=int, default=5)
    sub.add_argument("--alpha", type=float)
    sub.add_argument("--temperature", type=float)
    sub.add_argument("-o", "--output", help="default: <out-dir>/teachers.csv")
    return parser


def setup_logging(out_dir: str, verbose: bool) -> None:
    """
    Debug log file in ``out_dir`` plus a console handler.
    """
    root = logging.getLogger("")
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    logging.basicConfig(
        level=logging.DEBUG,
        format="%(asctime)s | %(name)s | %(levelname)-8s | %(message)s",
        filename=os.path.join(out_dir, LOG_FILE),
        filemode="a",
    )
    # define a Handler which writes INFO messages or higher to the sys.stderr
    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter("%(levelname)-8s %(message)s"))
    console.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.addHandler(console)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    :return: exit status.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    os.makedirs(args.out_dir, exist_ok=True)
    setup_logging(args.out_dir, args.verbose)
    logging.debug("Command line arguments: %s", args)
    started = time.time()
    try:
        run = Run(args)
        COMMANDS[args.command](run)
    except UsageError as exc:
        logging.error("%s", exc)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError, CheckpointError) as exc:
        logging.error("%s failed: %s", args.command, exc)
        logging.debug("traceback", exc_info=True)
        return EXIT_RUNTIME
    run.manifest.wall_clock_seconds = round(time.time() - started, 3)
    logging.info("Manifest written to %s", run.manifest.save(args.out_dir))
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
