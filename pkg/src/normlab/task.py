"""Integer-addition next-token task: generation, tokenisation, probabilities.

A datapoint is a signed sum rendered per character, for example::

    input   [453+16+17-N846=1332
    target  ***************1332]

``N`` marks a negative integer and ``-`` means subtraction. Targets are the
inputs shifted by one; every position whose target is ``*`` (everything up to
the ``=``) is excluded from the loss.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator, Sequence

import numpy as np

TOKENS = tuple("0123456789") + ("+", "-", "=", "N") + ("[", "]", "*")
TOKEN_ID = {c: i for i, c in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)
BEG, END, MASK = TOKEN_ID["["], TOKEN_ID["]"], TOKEN_ID["*"]


class Vocab:
    """Per-character token mapping over the fixed 17-symbol alphabet."""

    tokens = TOKENS

    def __len__(self) -> int:
        return VOCAB_SIZE

    def encode(self, text: str) -> list[int]:
        try:
            return [TOKEN_ID[c] for c in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(TOKENS[int(i)] for i in ids)


VOCAB = Vocab()


@dataclass(frozen=True)
class TaskConfig:
    N_choices: tuple[int, ...]
    L_choices: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "N_choices", tuple(int(n) for n in self.N_choices))
        object.__setattr__(self, "L_choices", tuple(int(n) for n in self.L_choices))
        if not self.N_choices or not self.L_choices:
            raise ValueError("N_choices and L_choices must be nonempty")
        if min(self.N_choices) < 1 or min(self.L_choices) < 1:
            raise ValueError("all choices must be >= 1")

    def with_seed(self, seed: int) -> "TaskConfig":
        return TaskConfig(self.N_choices, self.L_choices, seed)


PRESETS: dict[str, TaskConfig] = {
    "baseline-train": TaskConfig((3, 4, 6), (2, 3)),
    "baseline-ood-interp": TaskConfig((5,), (2, 3)),
    "baseline-ood-extrap": TaskConfig((7, 8, 9), (2, 3)),
    "large-train": TaskConfig((4, 5, 7, 8), (3, 4, 5)),
    "large-ood-interp": TaskConfig((6,), (3, 4, 5)),
    "large-ood-extrap": TaskConfig((9, 10, 11), (3, 4, 5)),
    "desk-train": TaskConfig((2, 3), (1, 2)),
    "desk-ood-interp": TaskConfig((4,), (1, 2)),
}
# Validation runs use the interpolation sets.
PRESETS["baseline-validation"] = PRESETS["baseline-ood-interp"]
PRESETS["large-validation"] = PRESETS["large-ood-interp"]


def preset(name: str, seed: int = 0) -> TaskConfig:
    try:
        return PRESETS[name].with_seed(seed)
    except KeyError:
        raise ValueError(f"unknown dataset preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class Sample:
    input_ids: list[int]
    target_ids: list[int]
    loss_mask: list[bool]
    answer_value: int

    @property
    def text_in(self) -> str:
        return VOCAB.decode(self.input_ids)

    @property
    def text_out(self) -> str:
        return VOCAB.decode(self.target_ids)

    def __len__(self) -> int:
        return len(self.input_ids)


@dataclass
class Batch:
    input_ids: np.ndarray  # (B, T) int
    target_ids: np.ndarray  # (B, T) int
    loss_mask: np.ndarray  # (B, T) bool
    valid: np.ndarray  # (B, T) bool, False on padding
    samples: list[Sample] = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_ids.shape


def render_int(value: int) -> str:
    return f"N{-value}" if value < 0 else str(value)


def evaluate_question(text: str) -> int:
    """Evaluate a rendered question such as ``453+16+17-N846`` exactly."""
    text = text.lstrip("[").split("=")[0]
    total, op, i = 0, "+", 0
    while i < len(text):
        neg = text[i] == "N"
        if neg:
            i += 1
        j = i
        while j < len(text) and text[j].isdigit():
            j += 1
        if j == i:
            raise ValueError(f"malformed question {text!r}")
        value = -int(text[i:j]) if neg else int(text[i:j])
        total = total + value if op == "+" else total - value
        if j < len(text):
            op = text[j]
            if op not in "+-":
                raise ValueError(f"unexpected operator {op!r}")
            j += 1
        i = j
    return total


def from_parts(values: Sequence[int], ops: Sequence[str]) -> Sample:
    """Build a sample from its integers and the operators between them."""
    if len(ops) != len(values) - 1:
        raise ValueError("need one operator between each pair of integers")
    question = render_int(values[0]) + "".join(op + render_int(v) for op, v in zip(ops, values[1:]))
    answer = values[0]
    for op, v in zip(ops, values[1:]):
        answer = answer + v if op == "+" else answer - v
    full = "[" + question + "=" + render_int(answer) + "]"
    ids = VOCAB.encode(full)
    n_masked = len(question) + 1  # "[" and the question itself
    target = [MASK] * n_masked + ids[n_masked + 1 :]
    inputs = ids[:-1]
    return Sample(inputs, target, [t != MASK for t in target], answer)


def _magnitude_range(length: int) -> tuple[int, int]:
    if length == 1:
        return 0, 9
    return 10 ** (length - 1), 10**length - 1


def sample_rng(config: TaskConfig, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(config.seed), int(index)])))


def sample(config: TaskConfig, rng: np.random.Generator | int) -> Sample:
    """Draw one datapoint; an integer ``rng`` is a sample index under ``config.seed``."""
    if not isinstance(rng, np.random.Generator):
        rng = sample_rng(config, int(rng))
    n = config.N_choices[rng.integers(len(config.N_choices))]
    values = []
    for _ in range(n):
        length = config.L_choices[rng.integers(len(config.L_choices))]
        lo, hi = _magnitude_range(length)
        magnitude = int(rng.integers(lo, hi + 1))
        negative = bool(rng.integers(2))
        values.append(-magnitude if negative else magnitude)
    ops = ["+-"[int(b)] for b in rng.integers(2, size=n - 1)]
    return from_parts(values, ops)


def stream(config: TaskConfig, start: int = 0, count: int | None = None) -> Iterator[Sample]:
    indices = itertools.count(start) if count is None else range(start, start + count)
    for i in indices:
        yield sample(config, i)


def _parse_parts(text_in: str) -> tuple[list[int], list[str]]:
    question = text_in.lstrip("[").split("=")[0]
    values, ops, i = [], [], 0
    while i < len(question):
        neg = question[i] == "N"
        i += neg
        j = i
        while j < len(question) and question[j].isdigit():
            j += 1
        digits = question[i:j]
        if not digits or (len(digits) > 1 and digits[0] == "0") or (neg and digits == "0"):
            raise ValueError("not a canonical rendering")
        values.append(-int(digits) if neg else int(digits))
        if j < len(question):
            ops.append(question[j])
            j += 1
        i = j
    return values, ops


def datapoint_probability_exact(config: TaskConfig, s: Sample) -> Fraction:
    """Exact probability that :func:`sample` emits ``s`` under ``config``."""
    try:
        values, ops = _parse_parts(s.text_in)
    except ValueError:
        return Fraction(0)
    if from_parts(values, ops).input_ids != list(s.input_ids):
        return Fraction(0)
    if len(values) not in config.N_choices:
        return Fraction(0)
    p = Fraction(config.N_choices.count(len(values)), len(config.N_choices))
    for v in values:
        length = len(str(abs(v)))
        if length not in config.L_choices:
            return Fraction(0)
        lo, hi = _magnitude_range(length)
        p *= Fraction(config.L_choices.count(length), len(config.L_choices))
        p *= Fraction(1, hi - lo + 1)
        # Zero renders identically for both signs.
        if v != 0:
            p *= Fraction(1, 2)
    p *= Fraction(1, 2) ** len(ops)
    return p


def datapoint_probability(config: TaskConfig, s: Sample) -> float:
    """Probability of ``s`` under ``config``; zero if it cannot be produced."""
    return float(datapoint_probability_exact(config, s))


def enumerate_samples(config: TaskConfig) -> Iterator[Sample]:
    """Every distinct sample producible under a (small) config."""
    magnitudes = []
    for length in sorted(set(config.L_choices)):
        lo, hi = _magnitude_range(length)
        magnitudes.extend(range(lo, hi + 1))
    signed = sorted({v for m in magnitudes for v in (m, -m)})
    for n in sorted(set(config.N_choices)):
        for values in itertools.product(signed, repeat=n):
            for ops in itertools.product("+-", repeat=n - 1):
                yield from_parts(list(values), list(ops))


def make_batch(samples: Sequence[Sample], pad_to: int | None = None) -> Batch:
    """Right-pad samples with the mask token; padding never enters the loss."""
    if not samples:
        raise ValueError("empty batch")
    longest = max(len(s) for s in samples)
    pad_to = longest if pad_to is None else pad_to
    if pad_to < longest:
        raise ValueError(f"sample of length {longest} exceeds pad_to={pad_to}")
    shape = (len(samples), pad_to)
    inputs = np.full(shape, MASK, dtype=np.int64)
    targets = np.full(shape, MASK, dtype=np.int64)
    mask = np.zeros(shape, dtype=bool)
    valid = np.zeros(shape, dtype=bool)
    for b, s in enumerate(samples):
        n = len(s)
        inputs[b, :n] = s.input_ids
        targets[b, :n] = s.target_ids
        mask[b, :n] = s.loss_mask
        valid[b, :n] = True
    return Batch(inputs, targets, mask, valid, list(samples))


def batch_at(config: TaskConfig, batch_index: int, batch_size: int, pad_to: int | None = None) -> Batch:
    start = batch_index * batch_size
    return make_batch([sample(config, i) for i in range(start, start + batch_size)], pad_to)


def max_length(config: TaskConfig) -> int:
    """Longest possible input length under ``config``."""
    n = max(config.N_choices)
    digits = max(config.L_choices)
    answer_digits = len(str(n * (10**digits - 1)))
    return 1 + n * (digits + 1) + (n - 1) + 1 + answer_digits + 1


def to_record(s: Sample) -> dict:
    return {"text_in": s.text_in, "text_out": s.text_out, "answer": s.answer_value}


def write_jsonl(samples: Iterable[Sample], fh) -> int:
    n = 0
    for s in samples:
        fh.write(json.dumps(to_record(s)) + "\n")
        n += 1
    return n
