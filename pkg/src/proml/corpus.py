"""CoNLL-column ingestion, IO label bookkeeping and label masking."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import DataError

O = "O"
_BIO_PREFIX = re.compile(r"^[BIES]-")


class ConllParseError(DataError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def default_annotation(label: str) -> str:
    return re.sub(r"[_\-]+", " ", label).strip().lower()


@dataclass(frozen=True)
class LabelSet:
    """Ordered label ids with their plain-text annotations; ``O`` is always first."""

    labels: tuple[str, ...]
    annotation: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels or labels[0] != O:
            raise ValueError("label set must start with O")
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate label ids in {labels}")
        ann = {lab: default_annotation(lab) for lab in labels[1:]}
        ann.update({k: v for k, v in dict(self.annotation).items() if k in ann})
        for lab in labels[1:]:
            words = ann[lab].split()
            if not words:
                raise ValueError(f"empty annotation for label {lab!r}")
            ann[lab] = " ".join(w.lower() for w in words)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "annotation", ann)

    @property
    def entity_labels(self) -> tuple[str, ...]:
        return self.labels[1:]

    def __contains__(self, label: object) -> bool:
        return label in self.labels

    def __len__(self) -> int:
        return len(self.labels)

    def with_annotations(self, overrides: Mapping[str, str]) -> "LabelSet":
        unknown = set(overrides) - set(self.labels)
        if unknown:
            raise KeyError(f"annotation for unknown labels: {sorted(unknown)}")
        return LabelSet(self.labels, {**self.annotation, **overrides})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelSet):
            return NotImplemented
        return self.labels == other.labels and dict(self.annotation) == dict(other.annotation)

    def __hash__(self) -> int:
        return hash((self.labels, tuple(sorted(self.annotation.items()))))


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        tokens, labels = tuple(self.tokens), tuple(self.labels)
        if len(tokens) != len(labels):
            raise ValueError(f"{len(tokens)} tokens but {len(labels)} labels")
        if not tokens:
            raise ValueError("sentence must contain at least one token")
        if any(t == "" for t in tokens):
            raise ValueError("empty token")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.tokens)

    def entity_labels(self) -> set[str]:
        return {lab for lab in self.labels if lab != O}

    def mentions(self) -> list[tuple[int, int, str]]:
        """Maximal runs of one non-O label as ``(start, end, label)``."""
        out = []
        start = 0
        for i in range(1, len(self.labels) + 1):
            if i == len(self.labels) or self.labels[i] != self.labels[start]:
                if self.labels[start] != O:
                    out.append((start, i, self.labels[start]))
                start = i
        return out


@dataclass(frozen=True)
class Dataset:
    sentences: tuple[LabeledSentence, ...]
    label_set: LabelSet

    def __post_init__(self):
        sentences = tuple(self.sentences)
        object.__setattr__(self, "sentences", sentences)
        for i, s in enumerate(sentences):
            for lab in s.labels:
                if lab not in self.label_set:
                    raise ValueError(f"sentence {i}: label {lab!r} not in label set")

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def fingerprint(self) -> str:
        return hashlib.sha256(to_conll(self).encode("utf-8")).hexdigest()


def strip_bio(label: str) -> str:
    return _BIO_PREFIX.sub("", label)


def parse_conll(text: str, column: int = -1) -> Dataset:
    """Parse whitespace-separated CoNLL columns into an IO-tagged dataset.

    ``column`` indexes the label column (default: last). BIO prefixes are
    stripped so ``B-PER``/``I-PER`` both become ``PER``.
    """
    sentences: list[LabeledSentence] = []
    order: dict[str, None] = {}
    tokens: list[str] = []
    labels: list[str] = []

    def flush():
        if tokens:
            sentences.append(LabeledSentence(tuple(tokens), tuple(labels)))
            tokens.clear()
            labels.clear()

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            flush()
            continue
        cols = line.split()
        if cols[0] == "-DOCSTART-":
            flush()
            continue
        if len(cols) < 2:
            raise ConllParseError(line_no, f"token without label column: {raw!r}")
        try:
            tag = cols[column]
        except IndexError:
            raise ConllParseError(line_no, f"no column {column} in {raw!r}") from None
        if column % len(cols) == 0:
            raise ConllParseError(line_no, "label column coincides with token column")
        lab = strip_bio(tag)
        if not lab:
            raise ConllParseError(line_no, f"empty label {tag!r}")
        tokens.append(cols[0])
        labels.append(lab)
        if lab != O:
            order.setdefault(lab, None)
    flush()
    return Dataset(tuple(sentences), LabelSet((O, *order)))


def read_conll(path: str | Path, column: int = -1, annotations: str | Path | None = None) -> Dataset:
    d = parse_conll(Path(path).read_text(encoding="utf-8"), column)
    if annotations is not None:
        d = Dataset(d.sentences, d.label_set.with_annotations(read_annotations(annotations, d.label_set)))
    return d


def parse_annotations(text: str) -> dict[str, str]:
    """``LABEL<TAB>plain text words`` per line."""
    out = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        label, sep, words = raw.partition("\t")
        if not sep or not words.strip():
            raise ConllParseError(line_no, f"expected LABEL<TAB>annotation, got {raw!r}")
        out[strip_bio(label.strip())] = words.strip()
    return out


def read_annotations(path: str | Path, label_set: LabelSet | None = None) -> dict[str, str]:
    ann = parse_annotations(Path(path).read_text(encoding="utf-8"))
    if label_set is not None:
        ann = {k: v for k, v in ann.items() if k in label_set and k != O}
    return ann


def to_conll(d: Dataset | Iterable[LabeledSentence]) -> str:
    sentences = d.sentences if isinstance(d, Dataset) else d
    blocks = ["\n".join(f"{t} {lab}" for t, lab in zip(s.tokens, s.labels)) for s in sentences]
    return "".join(b + "\n\n" for b in blocks)


def mask_sentence(s: LabeledSentence, keep: set[str] | frozenset[str]) -> LabeledSentence:
    labels = tuple(lab if lab in keep else O for lab in s.labels)
    return s if labels == s.labels else LabeledSentence(s.tokens, labels)


def mask_labels(d: Dataset, keep: Iterable[str]) -> Dataset:
    """Relabel every entity type outside ``keep`` as O (tag-set extension)."""
    keep = set(keep)
    unknown = keep - set(d.label_set.labels)
    if unknown:
        raise KeyError(f"unknown labels: {sorted(unknown)}")
    keep.add(O)
    ls = LabelSet(
        tuple(lab for lab in d.label_set.labels if lab in keep),
        {k: v for k, v in d.label_set.annotation.items() if k in keep},
    )
    return Dataset(tuple(mask_sentence(s, keep) for s in d.sentences), ls)


def annotation_text(ls: LabelSet, label: str) -> list[str]:
    if label == O:
        return ["other"]
    if label not in ls:
        raise KeyError(f"unknown label {label!r}")
    return ls.annotation[label].split(" ")
