"""Synthetic multi-task instruction corpus with engineered conflicts.

Every task family shares one pool of random symbol strings but applies
a different answer function (first / last / second / next-to-last
symbol), so the tasks are distinguishable only through their
instruction templates. Held-out paraphrase templates probe instruction
generalization, and a held-out combination task (first and last
together) needs the skills of two training families at once.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .encoder import tokenize
from .model import ANSWER_ID, PAD_ID, SEP_ID
from .tensor import make_rng

CORPUS_FORMAT = "clustermix-corpus-v1"

SYMBOLS = tuple("mnopqrst")
DIGITS = tuple(str(d) for d in range(10))
SPECIAL_TOKENS = ("<pad>", "<sep>", "<ans>")


@dataclass
class Template:
    template_id: str
    text: str
    held_out: bool = False
    scaffold: bool = False  # shared wording across families; clusters will mix tasks


@dataclass
class TaskSpec:
    task_id: str
    family: str
    templates: list[Template]
    answer_fn: str
    held_out: bool = False

    def train_templates(self) -> list[Template]:
        return [t for t in self.templates if not t.held_out]

    def heldout_templates(self) -> list[Template]:
        return [t for t in self.templates if t.held_out]


@dataclass
class Record:
    instruction: str
    input_ids: list[int]
    target_ids: list[int]
    task_id: str
    template_id: str
    held_out: bool
    cluster: int | None = None


@dataclass
class Corpus:
    held_in: list[Record]
    held_out: list[Record]
    seed: int
    vocab: list[str]
    family_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def vocab_index(self) -> dict[str, int]:
        return {word: i for i, word in enumerate(self.vocab)}

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(str(self.seed).encode())
        h.update("\x1f".join(self.vocab).encode())
        h.update(str(len(self.held_in)).encode())
        h.update(str(len(self.held_out)).encode())
        return h.hexdigest()


# Each family keeps three templates in its own register plus one
# "name the ... symbol in ..." scaffold shared across families. The
# scaffold instances of different tasks are near-identical text, so
# clustering mixes them: those clusters see conflicting answers, which
# is what keeps their gates soft and the universal adapter active.
TASK_LIBRARY: dict[str, TaskSpec] = {
    "first": TaskSpec(
        task_id="first",
        family="caption-style",
        answer_fn="first",
        templates=[
            Template("first/t0", "first symbol: {input} answer:"),
            Template("first/t1", "report the first symbol from {input} answer:"),
            Template("first/t2", "first one in the list {input} answer:"),
            Template("first/t3", "name the first symbol in {input} answer:", scaffold=True),
            Template("first/ho0", "tell the first symbol for {input} answer:", held_out=True),
        ],
    ),
    "last": TaskSpec(
        task_id="last",
        family="question-style",
        answer_fn="last",
        templates=[
            Template("last/t0", "what comes last in {input} short answer:"),
            Template("last/t1", "question: the last of {input} short answer:"),
            Template("last/t2", "what does {input} end with short answer:"),
            Template("last/t3", "name the last symbol in {input} answer:", scaffold=True),
            Template("last/ho0", "what symbol is last for {input} short answer:", held_out=True),
        ],
    ),
    "firstpair": TaskSpec(
        task_id="firstpair",
        family="generation-style",
        answer_fn="first_two",
        templates=[
            Template("firstpair/t0", "give the first two symbols of {input} here:"),
            Template("firstpair/t1", "first two from {input} here:"),
            Template("firstpair/t2", "give the opening pair of {input} here:"),
            Template("firstpair/t3", "name the first two symbols in {input} answer:",
                     scaffold=True),
            Template("firstpair/ho0", "give me the starting two of {input} here:",
                     held_out=True),
        ],
    ),
    "lastpair": TaskSpec(
        task_id="lastpair",
        family="conversation-style",
        answer_fn="last_two",
        templates=[
            Template("lastpair/t0", "the final two symbols of {input} reply:"),
            Template("lastpair/t1", "last two in {input} reply:"),
            Template("lastpair/t2", "the ending pair of {input} reply:"),
            Template("lastpair/t3", "name the last two symbols in {input} answer:",
                     scaffold=True),
            Template("lastpair/ho0", "the closing two symbols of {input} reply:",
                     held_out=True),
        ],
    ),
    "second": TaskSpec(
        task_id="second",
        family="generation-style",
        answer_fn="second",
        templates=[
            Template("second/t0", "give the second symbol of {input} here:"),
            Template("second/t1", "second place in {input} here:"),
            Template("second/t2", "second symbol please {input} here:"),
            Template("second/t3", "name the second symbol in {input} answer:", scaffold=True),
            Template("second/ho0", "give the one in second spot of {input} here:", held_out=True),
        ],
    ),
    "penult": TaskSpec(
        task_id="penult",
        family="conversation-style",
        answer_fn="penult",
        templates=[
            Template("penult/t0", "just before the end of {input} reply:"),
            Template("penult/t1", "before last in {input} reply:"),
            Template("penult/t2", "which symbol sits before the last of {input} reply:"),
            Template("penult/t3", "name the prior symbol in {input} answer:", scaffold=True),
            Template("penult/ho0", "the symbol before the final one in {input} reply:",
                     held_out=True),
        ],
    ),
    "count_q": TaskSpec(
        task_id="count_q",
        family="counting-style",
        answer_fn="count:q",
        templates=[
            Template("count_q/t0", "how many q in {input} answer:"),
            Template("count_q/t1", "count the q symbols in {input} answer:"),
            Template("count_q/ho0", "how many times q appears in {input} answer:", held_out=True),
        ],
    ),
    "bounds": TaskSpec(
        task_id="bounds",
        family="combination",
        answer_fn="first_last",
        held_out=True,
        templates=[
            Template("bounds/ho0", "name the first and last symbols in {input} answer:",
                     held_out=True),
            Template("bounds/ho1", "first and last symbols: {input} answer:", held_out=True),
        ],
    ),
}


@dataclass
class SuiteConfig:
    tasks: tuple[str, ...] = ("first", "last", "firstpair", "lastpair")
    combo_task: str | None = "bounds"
    scaffold_templates: bool = True
    train_records_per_task: int = 240
    heldout_records_per_task: int = 32
    combo_records: int = 48
    min_input_len: int = 5
    max_input_len: int = 7
    unique_symbols: bool = True
    vocab_size: int = 64
    max_seq_len: int = 32

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if len(self.tasks) < 2:
            raise ValueError("need at least two task families")
        if self.max_input_len < self.min_input_len or self.min_input_len < 2:
            raise ValueError("input length range must be sane and >= 2")
        if self.unique_symbols and self.max_input_len > len(SYMBOLS):
            raise ValueError("unique sampling needs input length <= alphabet size")


def oracle_answer(answer_fn: str, input_tokens: list[str]) -> list[str]:
    """Ground-truth answer tokens as a pure function of the input."""
    if answer_fn == "first":
        return [input_tokens[0]]
    if answer_fn == "last":
        return [input_tokens[-1]]
    if answer_fn == "second":
        return [input_tokens[1]]
    if answer_fn == "penult":
        return [input_tokens[-2]]
    if answer_fn == "first_two":
        return [input_tokens[0], input_tokens[1]]
    if answer_fn == "last_two":
        return [input_tokens[-2], input_tokens[-1]]
    if answer_fn == "smallest":
        return [min(input_tokens)]
    if answer_fn == "first_last":
        return [input_tokens[0], input_tokens[-1]]
    if answer_fn.startswith("count:"):
        needle = answer_fn.split(":", 1)[1]
        return [str(sum(1 for t in input_tokens if t == needle))]
    raise ValueError(f"unknown answer function {answer_fn!r}")


def render_instruction(template: Template, input_text: str) -> str:
    """Substitute the input into the template's slot, nothing else."""
    if "{input}" not in template.text:
        raise ValueError(f"template {template.template_id} has no {{input}} slot")
    return template.text.replace("{input}", input_text)


def build_vocab(config: SuiteConfig) -> list[str]:
    """Deterministic vocabulary: specials, symbols, digits, template words."""
    words: set[str] = set()
    task_ids = list(config.tasks)
    if config.combo_task:
        task_ids.append(config.combo_task)
    for task_id in task_ids:
        spec = TASK_LIBRARY[task_id]
        for template in spec.templates:
            words.update(tokenize(template.text.replace("{input}", "")))
    words -= set(SYMBOLS) | set(DIGITS)
    vocab = list(SPECIAL_TOKENS) + list(SYMBOLS) + list(DIGITS) + sorted(words)
    if len(vocab) > config.vocab_size:
        raise ValueError(
            f"vocab of {len(vocab)} words does not fit vocab_size {config.vocab_size}"
        )
    assert vocab[PAD_ID] == "<pad>" and vocab[SEP_ID] == "<sep>" and vocab[ANSWER_ID] == "<ans>"
    return vocab


def _sample_inputs(config: SuiteConfig, count: int, rng) -> list[list[str]]:
    pool = []
    for _ in range(count):
        length = int(rng.integers(config.min_input_len, config.max_input_len + 1))
        if config.unique_symbols:
            chosen = rng.permutation(len(SYMBOLS))[:length]
        else:
            chosen = rng.integers(0, len(SYMBOLS), size=length)
        pool.append([SYMBOLS[i] for i in chosen])
    return pool


def _make_record(
    spec: TaskSpec,
    template: Template,
    input_tokens: list[str],
    vocab_index: dict[str, int],
    max_seq_len: int,
    held_out: bool,
) -> Record:
    instruction = render_instruction(template, " ".join(input_tokens))
    answer = oracle_answer(spec.answer_fn, input_tokens)
    input_ids = [vocab_index[w] for w in tokenize(instruction)] + [ANSWER_ID]
    target_ids = [vocab_index[w] for w in answer]
    if len(input_ids) + len(target_ids) - 1 > max_seq_len:
        raise ValueError(
            f"record for {template.template_id} exceeds max_seq_len {max_seq_len}"
        )
    return Record(
        instruction=instruction,
        input_ids=input_ids,
        target_ids=target_ids,
        task_id=spec.task_id,
        template_id=template.template_id,
        held_out=held_out,
    )


def generate_corpus(config: SuiteConfig, seed: int) -> Corpus:
    """Deterministic corpus: conflicting families over one shared input
    pool, held-out paraphrase templates, and a held-out combination
    task requiring two families' skills."""
    vocab = build_vocab(config)
    vocab_index = {word: i for i, word in enumerate(vocab)}
    rng = make_rng(seed, "corpus")

    shared_pool = _sample_inputs(config, config.train_records_per_task, rng)
    heldout_pool = _sample_inputs(config, config.heldout_records_per_task, rng)
    combo_pool = _sample_inputs(config, config.combo_records, rng)

    held_in: list[Record] = []
    held_out: list[Record] = []
    family_counts: dict[str, dict[str, int]] = {}

    for task_id in config.tasks:
        spec = TASK_LIBRARY[task_id]
        train_templates = spec.train_templates()
        if not config.scaffold_templates:
            train_templates = [t for t in train_templates if not t.scaffold]
        for i, input_tokens in enumerate(shared_pool):
            template = train_templates[i % len(train_templates)]
            held_in.append(
                _make_record(spec, template, input_tokens, vocab_index,
                             config.max_seq_len, held_out=False)
            )
        for i, input_tokens in enumerate(heldout_pool):
            templates = spec.heldout_templates()
            template = templates[i % len(templates)]
            held_out.append(
                _make_record(spec, template, input_tokens, vocab_index,
                             config.max_seq_len, held_out=True)
            )
        family_counts[task_id] = {
            "held_in": config.train_records_per_task,
            "held_out": config.heldout_records_per_task,
        }

    if config.combo_task:
        spec = TASK_LIBRARY[config.combo_task]
        templates = spec.heldout_templates()
        for i, input_tokens in enumerate(combo_pool):
            template = templates[i % len(templates)]
            held_out.append(
                _make_record(spec, template, input_tokens, vocab_index,
                             config.max_seq_len, held_out=True)
            )
        family_counts[config.combo_task] = {"held_in": 0, "held_out": config.combo_records}

    return Corpus(
        held_in=held_in,
        held_out=held_out,
        seed=seed,
        vocab=vocab,
        family_counts=family_counts,
    )


# -- line-delimited serialization -------------------------------------------


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": CORPUS_FORMAT,
            "seed": corpus.seed,
            "vocab": corpus.vocab,
            "family_counts": corpus.family_counts,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for record in corpus.held_in + corpus.held_out:
            fh.write(json.dumps({
                "instruction": record.instruction,
                "input_ids": record.input_ids,
                "target_ids": record.target_ids,
                "task": record.task_id,
                "template": record.template_id,
                "held_out": record.held_out,
                "cluster": record.cluster,
            }, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CORPUS_FORMAT:
            raise ValueError(f"unsupported corpus format {header.get('format')!r}")
        held_in: list[Record] = []
        held_out: list[Record] = []
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if obj["task"] not in TASK_LIBRARY:
                raise ValueError(f"corpus references unknown task id {obj['task']!r}")
            record = Record(
                instruction=obj["instruction"],
                input_ids=list(obj["input_ids"]),
                target_ids=list(obj["target_ids"]),
                task_id=obj["task"],
                template_id=obj["template"],
                held_out=obj["held_out"],
                cluster=obj["cluster"],
            )
            (held_out if record.held_out else held_in).append(record)
    return Corpus(
        held_in=held_in,
        held_out=held_out,
        seed=header["seed"],
        vocab=list(header["vocab"]),
        family_counts=header.get("family_counts", {}),
    )
