"""Examples, the whitespace vocabulary, encoder input layout and TSV loading."""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .transformer import Pooling

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class Example:
    text_a: str
    label: int | float | list[int] | None = None
    text_b: str | None = None


class Vocab:
    """Whitespace token vocabulary; the special tokens take ids 0 to 4."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocabulary must start with {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be distinct")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    pad_id, cls_id, sep_id, mask_id, unk_id = range(5)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> Vocab:
        counts = Counter(tok for text in texts for tok in text.split())
        for special in SPECIALS:
            counts.pop(special, None)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        if max_size is not None:
            ordered = ordered[: max(0, max_size - len(SPECIALS))]
        return cls(list(SPECIALS) + ordered)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, self.unk_id) for tok in text.split()]

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


@dataclass
class ModelInput:
    ids: list[int]
    mask_index: int
    token_positions: list[int] = field(default_factory=list)  # positions holding text_a tokens


def build_input(example: Example, vocab: Vocab, pooling: Pooling | str = Pooling.MASK,
                max_len: int = 64, reserve: int = 0) -> ModelInput:
    """Lay out ``[CLS] a.. [MASK]`` or ``[CLS] a.. [MASK] b.. [SEP]``.

    The layout is the same for both poolings. Overlong inputs lose tokens
    from the end of ``text_b`` first, then ``text_a``; specials are kept.
    ``reserve`` keeps room for positions appended later (a prompt).
    """
    Pooling(pooling)
    a = vocab.encode(example.text_a)
    b = vocab.encode(example.text_b) if example.text_b is not None else None
    n_special = 2 if b is None else 3
    budget = max_len - reserve - n_special
    if budget < 1:
        raise DataError(f"max_len={max_len} leaves no room for text")
    if b is not None:
        overflow = len(a) + len(b) - budget
        if overflow > 0:
            b = b[: max(0, len(b) - overflow)]
    a = a[:budget - (len(b) if b is not None else 0)]
    ids = [vocab.cls_id] + a + [vocab.mask_id]
    mask_index = len(ids) - 1
    if b is not None:
        ids += b + [vocab.sep_id]
    return ModelInput(ids, mask_index, list(range(1, 1 + len(a))))


@dataclass
class Batch:
    tokens: np.ndarray  # (B, S) int
    mask: np.ndarray  # (B, S) bool
    mask_index: np.ndarray  # (B,)
    labels: np.ndarray | None = None
    label_mask: np.ndarray | None = None  # token tasks: which positions carry a tag


def collate(inputs: Sequence[ModelInput], pad_id: int = Vocab.pad_id, labels=None, token_labels=None) -> Batch:
    width = max(len(x.ids) for x in inputs)
    tokens = np.full((len(inputs), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(inputs), width), dtype=bool)
    for i, x in enumerate(inputs):
        tokens[i, : len(x.ids)] = x.ids
        mask[i, : len(x.ids)] = True
    batch = Batch(tokens, mask, np.array([x.mask_index for x in inputs], dtype=np.int64))
    if token_labels is not None:
        tags = np.zeros((len(inputs), width), dtype=np.int64)
        tag_mask = np.zeros((len(inputs), width), dtype=bool)
        for i, (x, seq) in enumerate(zip(inputs, token_labels)):
            for pos, tag in zip(x.token_positions, seq):
                tags[i, pos] = tag
                tag_mask[i, pos] = True
        batch.labels, batch.label_mask = tags, tag_mask
    elif labels is not None:
        batch.labels = np.asarray(labels)
    return batch


# ---------------------------------------------------------------------------
# TSV


@dataclass
class TsvSchema:
    """Column layout: ``text_a [\\t text_b] \\t label``.

    ``kind`` is ``classify`` (label names mapped through ``labels``),
    ``regress`` (real scores) or ``token_classify`` (space-separated tags,
    one per text_a token, mapped through ``labels``).
    """

    pair: bool = False
    kind: str = "classify"
    labels: list[str] | None = None


def load_tsv(path: str | Path, schema: TsvSchema) -> tuple[list[Example], list[str] | None]:
    """Parse a headerless UTF-8 TSV. Returns examples and the label names used.

    When ``schema.labels`` is None, label names are collected from the file
    and sorted; otherwise unknown labels are errors.
    """
    raw = Path(path).read_bytes().decode("utf-8")
    text = raw.replace("\r\n", "\n").replace("\r", "\n")
    n_cols = 3 if schema.pair else 2
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE), start=1):
        if not row or row == [""]:
            continue
        if len(row) != n_cols or not row[-1].strip():
            raise DataError(f"{path}:{lineno}: expected {n_cols} tab-separated columns with a label, got {len(row)}")
        rows.append((lineno, row))
    names = schema.labels
    if schema.kind in ("classify", "token_classify") and names is None:
        found = set()
        for _, row in rows:
            found.update(row[-1].split() if schema.kind == "token_classify" else [row[-1].strip()])
        names = sorted(found)
    lookup = {name: i for i, name in enumerate(names or [])}
    examples = []
    for lineno, row in rows:
        text_a, label_text = row[0], row[-1].strip()
        text_b = row[1] if schema.pair else None
        if schema.kind == "regress":
            try:
                label = float(label_text)
            except ValueError:
                raise DataError(f"{path}:{lineno}: label {label_text!r} is not a number") from None
        elif schema.kind == "token_classify":
            tags = label_text.split()
            if len(tags) != len(text_a.split()):
                raise DataError(f"{path}:{lineno}: {len(tags)} tags for {len(text_a.split())} tokens")
            unknown = [t for t in tags if t not in lookup]
            if unknown:
                raise DataError(f"{path}:{lineno}: unknown tag {unknown[0]!r}")
            label = [lookup[t] for t in tags]
        elif schema.kind == "classify":
            if label_text not in lookup:
                raise DataError(f"{path}:{lineno}: unknown label {label_text!r}")
            label = lookup[label_text]
        else:
            raise DataError(f"unknown task kind {schema.kind!r}")
        examples.append(Example(text_a, label, text_b))
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples, names


def write_tsv(path: str | Path, examples: Sequence[Example], label_names: Sequence[str] | None = None) -> None:
    lines = []
    for ex in examples:
        cols = [ex.text_a] + ([ex.text_b] if ex.text_b is not None else [])
        if isinstance(ex.label, list):
            cols.append(" ".join(label_names[t] if label_names else str(t) for t in ex.label))
        elif isinstance(ex.label, float):
            cols.append(repr(ex.label))
        else:
            cols.append(label_names[ex.label] if label_names else str(ex.label))
        lines.append("\t".join(cols))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
