"""Mask-reducible prompts.

Every prompt here only inserts tokens, so ``reduce`` recovers the raw
sentence by keeping the mask-1 positions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import O, LabelSet, annotation_text


@dataclass(frozen=True)
class PromptedSequence:
    tokens: tuple[str, ...]
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.int8)
        if mask.shape != (len(self.tokens),):
            raise ValueError(f"mask length {mask.shape} != {len(self.tokens)} tokens")
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask must be binary")
        mask.setflags(write=False)
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "mask", mask)

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PromptedSequence):
            return NotImplemented
        return self.tokens == other.tokens and np.array_equal(self.mask, other.mask)

    __hash__ = None


def reduce(p: PromptedSequence) -> list[str]:
    return [t for t, m in zip(p.tokens, p.mask) if m]


def identity_prompt(x: Sequence[str]) -> PromptedSequence:
    if not len(x):
        raise ValueError("empty sentence")
    return PromptedSequence(tuple(x), np.ones(len(x), dtype=np.int8))


def option_order(ls: LabelSet, labels=None) -> list[list[str]]:
    """Canonical option list: ``other`` first, then entity annotations sorted."""
    labels = ls.entity_labels if labels is None else [lab for lab in labels if lab != O]
    return [["other"]] + sorted(annotation_text(ls, lab) for lab in labels)


def option_prefix(x: Sequence[str], options: Sequence[Sequence[str]]) -> PromptedSequence:
    """``s1 , s2 , ... , sn : x`` with separators as standalone tokens."""
    if not len(x):
        raise ValueError("empty sentence")
    if not options:
        raise ValueError("empty option set")
    prefix: list[str] = []
    for i, words in enumerate(options):
        if not words or any(not w for w in words):
            raise ValueError(f"empty annotation in option {i}")
        if i:
            prefix.append(",")
        prefix.extend(words)
    prefix.append(":")
    mask = np.concatenate([np.zeros(len(prefix), np.int8), np.ones(len(x), np.int8)])
    return PromptedSequence((*prefix, *x), mask)


def label_aware(x: Sequence[str], y: Sequence[str], ls: LabelSet) -> PromptedSequence:
    """Wrap each entity mention ``e`` of type ``E`` as ``[ e | E ]``."""
    if len(x) != len(y):
        raise ValueError(f"{len(x)} tokens but {len(y)} labels")
    if not len(x):
        raise ValueError("empty sentence")
    tokens: list[str] = []
    mask: list[int] = []
    i = 0
    while i < len(x):
        lab = y[i]
        if lab == O:
            tokens.append(x[i])
            mask.append(1)
            i += 1
            continue
        j = i
        while j < len(x) and y[j] == lab:
            j += 1
        ann = annotation_text(ls, lab)
        tokens += ["[", *x[i:j], "|", *ann, "]"]
        mask += [0] + [1] * (j - i) + [0] * (len(ann) + 2)
        i = j
    return PromptedSequence(tuple(tokens), np.asarray(mask, dtype=np.int8))
