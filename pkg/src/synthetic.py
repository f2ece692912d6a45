"""
Synthetic desk-scale data: a toy English corpus, minimal-pair suites and a
classification task, all drawn from one small grammar.

The corpus mixes six source kinds (child-directed speech, children's
stories, dialogue subtitles, simple encyclopedia, transcribed speech and
question answering). Every corpus sentence is grammatical: verbs agree with
their subject, determiners with their noun, reflexives with the gender of
their antecedent, word order is subject-verb-object, intransitive verbs
never take an object, and encyclopedia facts are true. The minimal-pair
suites break exactly one of these regularities in the bad sentence.

Directory structure written by ``write_desk_data``::

    out_dir
    ├── corpus
    │   ├── train
    │   │   └── <kind>.txt
    │   └── test
    │       └── <kind>.txt
    ├── suites
    │   └── <suite>.jsonl
    └── tasks
        ├── sentiment_train.jsonl
        └── sentiment_eval.jsonl
"""

# Standard Library
import json
import logging
import os
from typing import Callable
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

# 3rd party
import numpy as np

# My stuff
from corpus import count_words
from corpus import join_documents
from evaluation import LabeledExample
from evaluation import MinimalPair
from evaluation import MinimalPairSuite
from utils import rng_for

NOUNS = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("child", "children"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("teacher", "teachers"),
    ("horse", "horses"),
    ("friend", "friends"),
    ("baby", "babies"),
]
#: (singular, plural) verb forms
INTRANSITIVE = [("runs", "run"), ("sleeps", "sleep"), ("sings", "sing"), ("laughs", "laugh"), ("jumps", "jump")]
TRANSITIVE = [("sees", "see"), ("likes", "like"), ("finds", "find"), ("helps", "help"), ("follows", "follow")]
THINGS = ["the ball", "the apple", "a book", "the tree", "the house", "a cake", "the boat", "a hat"]
PLACES = ["the park", "the garden", "the house", "the river", "school", "the farm"]
POSITIVE = ["happy", "kind", "glad", "brave"]
NEGATIVE = ["sad", "angry", "tired", "sick"]
NAMES = [("mary", "f"), ("anna", "f"), ("lucy", "f"), ("john", "m"), ("tom", "m"), ("peter", "m")]
REFLEXIVE = {"f": "herself", "m": "himself"}
PRONOUN = {"f": "she", "m": "he"}
#: (subject, relation, true completion, false completion)
FACTS = [
    ("a cow", "eats", "grass", "rocks"),
    ("a bird", "lives in", "a nest", "a shoe"),
    ("a fish", "swims in", "the water", "the sky"),
    ("a dog", "says", "woof", "moo"),
    ("a cat", "says", "meow", "woof"),
    ("the sun", "is", "hot", "cold"),
    ("snow", "is", "cold", "hot"),
    ("a horse", "eats", "hay", "shoes"),
    ("a bee", "makes", "honey", "milk"),
    ("the night", "is", "dark", "bright"),
]

KINDS = (
    "child_directed_speech",
    "childrens_stories",
    "dialogue_subtitles",
    "simple_encyclopedia",
    "transcribed_speech",
    "qa",
)
#: share of words per kind
TRAIN_MIX = {
    "child_directed_speech": 0.30,
    "childrens_stories": 0.20,
    "dialogue_subtitles": 0.20,
    "simple_encyclopedia": 0.10,
    "transcribed_speech": 0.15,
    "qa": 0.05,
}
TEST_MIX = {
    "child_directed_speech": 0.25,
    "childrens_stories": 0.25,
    "dialogue_subtitles": 0.15,
    "simple_encyclopedia": 0.15,
    "transcribed_speech": 0.10,
    "qa": 0.10,
}
#: suites probing grammar, and the extra argument-structure and world-knowledge ones
GRAMMAR_SUITES = ("agreement", "determiner_noun", "anaphor", "word_order")
SUPPLEMENT_SUITES = ("argument_structure",)
KNOWLEDGE_SUITES = ("world_knowledge",)


class Grammar:
    """
    Seeded sentence and document generator.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._documents: Dict[str, Callable[[], str]] = {
            "child_directed_speech": self.child_directed_speech,
            "childrens_stories": self.childrens_story,
            "dialogue_subtitles": self.dialogue,
            "simple_encyclopedia": self.encyclopedia,
            "transcribed_speech": self.transcribed_speech,
            "qa": self.question_answer,
        }

    def pick(self, items: Sequence):
        """Uniform choice."""
        return items[int(self.rng.integers(len(items)))]

    def chance(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def noun_phrase(self, plural: bool) -> Tuple[str, int]:
        """Determiner, optional adjective, noun; returns the noun index too."""
        idx = int(self.rng.integers(len(NOUNS)))
        det = self.pick(["the", "these", "those"] if plural else ["the", "this", "that", "a"])
        adj = self.pick(POSITIVE + NEGATIVE) + " " if self.chance(0.3) else ""
        return f"{det} {adj}{NOUNS[idx][1 if plural else 0]}", idx

    def clause(self) -> str:
        """Subject (with an optional prepositional attractor), agreeing verb, object."""
        plural = self.chance(0.5)
        subject, _ = self.noun_phrase(plural)
        if self.chance(0.25):
            subject += f" near the {self.pick(NOUNS)[0 if self.chance(0.5) else 1]}"
        if self.chance(0.5):
            return f"{subject} {self.pick(INTRANSITIVE)[1 if plural else 0]}"
        obj = self.pick(THINGS) if self.chance(0.6) else self.noun_phrase(self.chance(0.5))[0]
        return f"{subject} {self.pick(TRANSITIVE)[1 if plural else 0]} {obj}"

    def reflexive(self) -> str:
        name, gender = self.pick(NAMES)
        return f"{name} sees {REFLEXIVE[gender]} in the water"

    def fact(self) -> str:
        subject, relation, true_object, _ = self.pick(FACTS)
        return f"{subject} {relation} {true_object}"

    def sentence(self) -> str:
        roll = self.rng.random()
        if roll < 0.15:
            return self.reflexive() + " ."
        if roll < 0.25:
            name, gender = self.pick(NAMES)
            return f"{name} goes to {self.pick(PLACES)} . {PRONOUN[gender]} is {self.pick(POSITIVE + NEGATIVE)} ."
        return self.clause() + " ."

    # documents, one method per source kind

    def child_directed_speech(self) -> str:
        lines = []
        for _ in range(int(self.rng.integers(3, 8))):
            noun = self.pick(NOUNS)[0]
            lines.append(
                self.pick(
                    [
                        f"look at the {noun} !",
                        f"do you see the {noun} ?",
                        f"where is the {noun} ?",
                        "good job !",
                        f"can you find {self.pick(THINGS)} ?",
                        self.sentence(),
                    ]
                )
            )
        return " ".join(lines)

    def childrens_story(self) -> str:
        noun = self.pick(NOUNS)[0]
        parts = [f"once upon a time there was a {self.pick(POSITIVE)} {noun} ."]
        parts.extend(self.sentence() for _ in range(int(self.rng.integers(4, 10))))
        parts.append("the end .")
        return " ".join(parts)

    def dialogue(self) -> str:
        lines = []
        for _ in range(int(self.rng.integers(2, 6))):
            name, gender = self.pick(NAMES)
            lines.append(f"- where is {name} ?")
            lines.append(f"- {PRONOUN[gender]} is at {self.pick(PLACES)} .")
            if self.chance(0.5):
                lines.append(f"- {self.sentence()}")
        return "\n".join(lines)

    def encyclopedia(self) -> str:
        parts = [self.fact() + " ." for _ in range(int(self.rng.integers(2, 5)))]
        singular, plural = self.pick(NOUNS)
        parts.append(f"{plural} {self.pick(INTRANSITIVE)[1]} . a {singular} {self.pick(TRANSITIVE)[0]} {self.pick(THINGS)} .")
        return " ".join(parts)

    def transcribed_speech(self) -> str:
        fillers = ["well ,", "um ,", "you know ,", "so ,", "i think"]
        return " ".join(f"{self.pick(fillers)} {self.sentence()}" for _ in range(int(self.rng.integers(3, 7))))

    def question_answer(self) -> str:
        subject, relation, true_object, _ = self.pick(FACTS)
        return f"question : tell me about {subject} . answer : {subject} {relation} {true_object} ."

    def document(self, kind: str) -> str:
        return self._documents[kind]()


def generate_corpus(
    n_words: int, seed: int, mix: Optional[Dict[str, float]] = None, stream: str = "train"
) -> Dict[str, List[str]]:
    """
    Documents per source kind, about ``n_words`` words in total.

    :param stream: name of the random sub-stream; the test corpus uses its own.
    """
    mix = mix or TRAIN_MIX
    grammar = Grammar(rng_for(seed, f"synthetic/corpus/{stream}"))
    documents: Dict[str, List[str]] = {}
    for kind in KINDS:
        budget = int(round(n_words * mix.get(kind, 0.0)))
        docs: List[str] = []
        words = 0
        while words < budget:
            doc = grammar.document(kind)
            docs.append(doc)
            words += count_words(doc)
        if docs:
            documents[kind] = docs
    return documents


def _pairs_agreement(grammar: Grammar, n: int) -> List[MinimalPair]:
    pairs = []
    for i in range(n):
        singular, plural = grammar.pick(NOUNS)
        verb = grammar.pick(INTRANSITIVE)
        if i % 2:
            other = grammar.pick(NOUNS)[1]
            pairs.append(MinimalPair(f"the {singular} near the {other} {verb[0]} .", f"the {singular} near the {other} {verb[1]} .", "attractor"))
        elif grammar.chance(0.5):
            pairs.append(MinimalPair(f"the {singular} {verb[0]} .", f"the {singular} {verb[1]} .", "singular_subject"))
        else:
            pairs.append(MinimalPair(f"the {plural} {verb[1]} .", f"the {plural} {verb[0]} .", "plural_subject"))
    return pairs


def _pairs_determiner(grammar: Grammar, n: int) -> List[MinimalPair]:
    pairs = []
    for _ in range(n):
        singular, plural = grammar.pick(NOUNS)
        near = grammar.chance(0.5)
        det_sg, det_pl = ("this", "these") if near else ("that", "those")
        verb = grammar.pick(INTRANSITIVE)
        if grammar.chance(0.5):
            pairs.append(MinimalPair(f"{det_sg} {singular} {verb[0]} .", f"{det_pl} {singular} {verb[0]} .", "singular_noun"))
        else:
            pairs.append(MinimalPair(f"{det_pl} {plural} {verb[1]} .", f"{det_sg} {plural} {verb[1]} .", "plural_noun"))
    return pairs


def _pairs_anaphor(grammar: Grammar, n: int) -> List[MinimalPair]:
    pairs = []
    for _ in range(n):
        name, gender = grammar.pick(NAMES)
        wrong = REFLEXIVE["m" if gender == "f" else "f"]
        pairs.append(MinimalPair(f"{name} sees {REFLEXIVE[gender]} in the water .", f"{name} sees {wrong} in the water .", "gender"))
    return pairs


def _pairs_word_order(grammar: Grammar, n: int) -> List[MinimalPair]:
    pairs = []
    for _ in range(n):
        subject = grammar.pick(NOUNS)[0]
        obj = grammar.pick(THINGS)
        verb = grammar.pick(TRANSITIVE)[0]
        pairs.append(MinimalPair(f"the {subject} {verb} {obj} .", f"the {subject} {obj} {verb} .", "verb_position"))
    return pairs


def _pairs_argument_structure(grammar: Grammar, n: int) -> List[MinimalPair]:
    pairs = []
    for _ in range(n):
        subject = grammar.pick(NOUNS)[0]
        obj = grammar.pick(THINGS)
        pairs.append(
            MinimalPair(
                f"the {subject} {grammar.pick(TRANSITIVE)[0]} {obj} .",
                f"the {subject} {grammar.pick(INTRANSITIVE)[0]} {obj} .",
                "transitivity",
            )
        )
    return pairs


def _pairs_world_knowledge(grammar: Grammar, n: int) -> List[MinimalPair]:
    pairs = []
    for _ in range(n):
        subject, relation, true_object, false_object = grammar.pick(FACTS)
        pairs.append(MinimalPair(f"{subject} {relation} {true_object} .", f"{subject} {relation} {false_object} .", "physical_world"))
    return pairs


_SUITE_BUILDERS = {
    "agreement": _pairs_agreement,
    "determiner_noun": _pairs_determiner,
    "anaphor": _pairs_anaphor,
    "word_order": _pairs_word_order,
    "argument_structure": _pairs_argument_structure,
    "world_knowledge": _pairs_world_knowledge,
}


def minimal_pair_suites(seed: int, n_pairs: int = 100) -> List[MinimalPairSuite]:
    """
    One suite per tested regularity, ``n_pairs`` pairs each.
    """
    suites = []
    for name, build in _SUITE_BUILDERS.items():
        grammar = Grammar(rng_for(seed, f"synthetic/suite/{name}"))
        suites.append(MinimalPairSuite(name, build(grammar, n_pairs)))
    return suites


def classification_task(seed: int, n_examples: int) -> List[LabeledExample]:
    """
    Two-class sentiment task: label 1 for a positive sentence, 0 for a
    negative one. Classes alternate so both are always present.
    """
    grammar = Grammar(rng_for(seed, "synthetic/task"))
    examples = []
    for i in range(n_examples):
        positive = i % 2 == 0
        noun = grammar.pick(NOUNS)[0]
        adjective = grammar.pick(POSITIVE if positive else NEGATIVE)
        ending = grammar.pick(["sings", "laughs", "jumps"] if positive else ["sleeps", "stays at the house", "sits alone"])
        examples.append(LabeledExample(f"the {noun} is {adjective} and {ending} .", int(positive)))
    return examples


def write_documents(directory: str, documents: Dict[str, List[str]]) -> List[str]:
    """One ``<kind>.txt`` file per kind; returns the paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for kind, docs in sorted(documents.items()):
        path = os.path.join(directory, f"{kind}.txt")
        with open(path, "w", encoding="utf-8") as file_pointer:
            file_pointer.write(join_documents(docs) + "\n")
        paths.append(path)
    return paths


def write_labeled(path: str, examples: Sequence[LabeledExample]) -> None:
    with open(path, "w", encoding="utf-8") as file_pointer:
        for example in examples:
            file_pointer.write(json.dumps(example._asdict()) + "\n")


def write_desk_data(
    out_dir: str,
    seed: int = 0,
    train_words: int = 200_000,
    test_words: int = 20_000,
    n_pairs: int = 100,
    n_task_examples: int = 64,
) -> Dict[str, List[str]]:
    """
    Write the whole synthetic data set under ``out_dir``.

    :return: written paths grouped by role (train, test, suites, tasks).
    """
    written = {
        "train": write_documents(os.path.join(out_dir, "corpus", "train"), generate_corpus(train_words, seed, TRAIN_MIX)),
        "test": write_documents(
            os.path.join(out_dir, "corpus", "test"), generate_corpus(test_words, seed, TEST_MIX, stream="test")
        ),
        "suites": [],
        "tasks": [],
    }
    suite_dir = os.path.join(out_dir, "suites")
    os.makedirs(suite_dir, exist_ok=True)
    for suite in minimal_pair_suites(seed, n_pairs):
        path = os.path.join(suite_dir, f"{suite.name}.jsonl")
        suite.save(path)
        written["suites"].append(path)
    task_dir = os.path.join(out_dir, "tasks")
    os.makedirs(task_dir, exist_ok=True)
    examples = classification_task(seed, 2 * n_task_examples)
    for name, chunk in (("sentiment_train", examples[:n_task_examples]), ("sentiment_eval", examples[n_task_examples:])):
        path = os.path.join(task_dir, f"{name}.jsonl")
        write_labeled(path, chunk)
        written["tasks"].append(path)
    logging.info(
        "Synthetic data in %s: %d train files, %d test files, %d suites",
        out_dir,
        len(written["train"]),
        len(written["test"]),
        len(written["suites"]),
    )
    return written
