"""Synthetic sequence-classification tasks and JSONL ingestion."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .model import BOS_ID, PAD_ID

FIRST_WORD_ID = 2
GENERATORS = ("presence", "order", "majority")


@dataclass(frozen=True)
class Example:
    tokens: tuple[int, ...]
    label: int


class Dataset:
    """Padded token matrix plus labels; immutable after construction."""

    def __init__(self, examples: Sequence[Example], max_seq_len: int):
        if not examples:
            self.tokens = np.zeros((0, max_seq_len), dtype=np.int64)
            self.labels = np.zeros(0, dtype=np.int64)
        else:
            width = max(len(e.tokens) for e in examples)
            if width > max_seq_len:
                raise InputError(f"example of length {width} exceeds max_seq_len={max_seq_len}")
            self.tokens = np.full((len(examples), width), PAD_ID, dtype=np.int64)
            for i, e in enumerate(examples):
                self.tokens[i, :len(e.tokens)] = e.tokens
            self.labels = np.array([e.label for e in examples], dtype=np.int64)
        self.tokens.setflags(write=False)
        self.labels.setflags(write=False)
        self.examples = tuple(examples)

    def __len__(self) -> int:
        return len(self.examples)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "presence"
    train_size: int = 512
    val_size: int = 128
    seed: int = 0
    seq_len: int | None = None
    min_len: int | None = None
    path: str | None = None
    val_path: str | None = None
    params: Mapping = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"task.{sorted(unknown)[0]}", "unknown field")
        return cls(**d)

    def to_dict(self) -> dict:
        return {k: (dict(v) if k == "params" else v) for k, v in self.__dict__.items()}


@dataclass(frozen=True)
class Splits:
    train: Dataset
    validation: Dataset


class HashTokenizer:
    """Whitespace tokenizer hashing each word into ``[2, vocab_size)``.

    Ids 0 and 1 are reserved for padding and the leading BOS token. Text is
    truncated to the first ``max_seq_len`` words.
    """

    def __init__(self, vocab_size: int, max_seq_len: int):
        if vocab_size <= FIRST_WORD_ID:
            raise ConfigError("model.vocab_size", "too small for the hash tokenizer")
        self.vocab_size = vocab_size
        self.max_seq_len = max_seq_len

    def token_id(self, word: str) -> int:
        digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
        return FIRST_WORD_ID + int.from_bytes(digest, "little") % (self.vocab_size - FIRST_WORD_ID)

    def encode(self, text: str) -> list[int]:
        return [self.token_id(w) for w in text.split()[: self.max_seq_len]]


def load_jsonl(path: str | Path, tokenizer: HashTokenizer, num_classes: int) -> list[Example]:
    """Read ``{"text": ..., "label": ...}`` lines.

    Tokenized text gets a leading BOS so the classifier has a summary slot.
    A ``tokens`` list, when present, is used verbatim instead
    (this is what :func:`write_jsonl` emits).
    """
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict) or "label" not in obj or ("text" not in obj and "tokens" not in obj):
                raise ParseError('expected an object with "text" and "label"', lineno)
            label = obj["label"]
            if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < num_classes:
                raise InputError(f"line {lineno}: unknown label {label!r} (num_classes={num_classes})")
            if "tokens" in obj:
                tokens = [int(t) for t in obj["tokens"]][: tokenizer.max_seq_len]
                if any(t < 0 or t >= tokenizer.vocab_size for t in tokens):
                    raise InputError(f"line {lineno}: token id outside vocabulary")
            else:
                words = tokenizer.encode(str(obj["text"]))[: tokenizer.max_seq_len - 1]
                tokens = [BOS_ID, *words] if words else []
            if not tokens:
                raise InputError(f"line {lineno}: empty example")
            examples.append(Example(tuple(tokens), label))
    return examples


def write_jsonl(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            text = " ".join(f"t{t}" for t in e.tokens)
            fh.write(json.dumps({"text": text, "label": e.label, "tokens": list(e.tokens)}) + "\n")


def _filler(rng, n, vocab_size, exclude):
    pool = np.setdiff1d(np.arange(FIRST_WORD_ID, vocab_size), np.asarray(exclude, dtype=np.int64))
    return list(rng.choice(pool, size=n))


def _gen_presence(rng, length, vocab_size, params):
    marker = int(params.get("marker", FIRST_WORD_ID))
    body = _filler(rng, length - 1, vocab_size, [marker])
    label = int(rng.integers(2))
    if label:
        body[int(rng.integers(len(body)))] = marker
    return body, label


def _gen_order(rng, length, vocab_size, params):
    a = int(params.get("first", FIRST_WORD_ID))
    b = int(params.get("second", FIRST_WORD_ID + 1))
    body = _filler(rng, length - 1, vocab_size, [a, b])
    i, j = rng.choice(len(body), size=2, replace=False)
    body[i], body[j] = a, b
    return body, int(i < j)


def _gen_majority(rng, length, vocab_size, params):
    a = int(params.get("first", FIRST_WORD_ID))
    b = int(params.get("second", FIRST_WORD_ID + 1))
    body = _filler(rng, length - 1, vocab_size, [a, b])
    total = 2 * int(rng.integers((len(body) + 1) // 2)) + 1
    count_a = int(rng.integers(total + 1))
    pos = rng.permutation(len(body))[:total]
    for k, p in enumerate(pos):
        body[p] = a if k < count_a else b
    return body, int(count_a * 2 > total)


_GENERATORS = {"presence": _gen_presence, "order": _gen_order, "majority": _gen_majority}


def generate_task(spec: TaskSpec, vocab_size: int, max_seq_len: int) -> Splits:
    """Build disjoint train/validation splits from a seeded generator.

    Sequences start with BOS and have a length drawn uniformly from
    ``[min_len, seq_len]``; duplicates are rejected so the splits never overlap.
    """
    if spec.kind not in _GENERATORS:
        raise ConfigError("task.kind", f"expected one of {GENERATORS} or a path, got {spec.kind!r}")
    for name in ("train_size", "val_size"):
        value = getattr(spec, name)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"task.{name}", f"must be a positive integer, got {value!r}")
    seq_len = spec.seq_len or max_seq_len
    min_len = spec.min_len or max(3, seq_len // 2)
    if not 3 <= min_len <= seq_len <= max_seq_len:
        raise ConfigError("task.seq_len", f"need 3 <= min_len ({min_len}) <= seq_len ({seq_len}) "
                                          f"<= max_seq_len ({max_seq_len})")
    if vocab_size < FIRST_WORD_ID + 3:
        raise ConfigError("model.vocab_size", "synthetic tasks need at least 5 token ids")
    gen = _GENERATORS[spec.kind]
    rng = np.random.default_rng(spec.seed)
    wanted = spec.train_size + spec.val_size
    seen: set[tuple[int, ...]] = set()
    examples: list[Example] = []
    attempts = 0
    while len(examples) < wanted:
        attempts += 1
        if attempts > 50 * wanted:
            raise ConfigError("task.train_size", "too many examples requested for this sequence space")
        length = int(rng.integers(min_len, seq_len + 1))
        body, label = gen(rng, length, vocab_size, spec.params)
        tokens = (BOS_ID, *(int(t) for t in body))
        if tokens in seen:
            continue
        seen.add(tokens)
        examples.append(Example(tokens, label))
    return Splits(Dataset(examples[: spec.train_size], max_seq_len),
                  Dataset(examples[spec.train_size:], max_seq_len))


def load_task(spec: TaskSpec, vocab_size: int, max_seq_len: int, num_classes: int) -> Splits:
    if spec.path is None:
        return generate_task(spec, vocab_size, max_seq_len)
    if spec.val_path is None:
        raise ConfigError("task.val_path", "required when task.path is given")
    tok = HashTokenizer(vocab_size, max_seq_len)
    train = load_jsonl(spec.path, tok, num_classes)
    val = load_jsonl(spec.val_path, tok, num_classes)
    return Splits(Dataset(train, max_seq_len), Dataset(val, max_seq_len))
