"""Synthetic NER corpus with type-correlated surface cues.

Entity tokens are built from a stem shared with their type's annotation
(``locat`` + suffix for ``location``) and most mentions are preceded by a
cue word typical of the type. Used by the end-to-end acceptance run and the
ablation script; it is a sanity corpus, not a benchmark.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import O, Dataset, LabeledSentence, LabelSet

TYPES = {
    "PER": ("person", ("mr", "mrs", "dr", "said")),
    "LOC": ("location", ("in", "near", "at", "from")),
    "ORG": ("organization", ("joined", "company", "agency", "firm")),
    "DATE": ("date", ("on", "since", "until", "before")),
    "PROD": ("product", ("bought", "sells", "uses", "model")),
    "EVT": ("event", ("during", "attended", "celebrated", "after")),
    "DIS": ("disease", ("diagnosed", "cured", "suffers", "infected")),
    "VEH": ("vehicle", ("drove", "rode", "parked", "boarded")),
}

FILLER = (
    "the a an and or but it this that these those was were is are has had have "
    "will would could should very quite really some many few more most other such "
    "then there here when where while because about over under again also only "
    "just still even well good new old big small long short first last next same "
    "today yesterday week year day time people thing way work life world hand part "
    "place case point group number fact problem story result reason idea "
    "went came saw made took gave found told asked left kept began seemed"
).split()

SUFFIXES = ("a", "o", "i", "an", "el", "or", "is", "um", "ex", "ya", "ik", "on", "ar", "et", "ul", "iv")


@dataclass(frozen=True)
class SyntheticConfig:
    n_sentences: int = 2000
    n_types: int = 8
    names_per_type: int = 40
    min_len: int = 6
    max_len: int = 14
    max_mentions: int = 3
    cue_prob: float = 0.8
    novel_frac: float = 0.0
    n_test: int = 0
    seed: int = 0


def entity_names(stem: str, n: int, rng: np.random.Generator) -> list[str]:
    names: set[str] = set()
    while len(names) < n:
        k = int(rng.integers(1, 3))
        names.add(stem + "".join(rng.choice(SUFFIXES, size=k)))
    return sorted(names)


def label_set(n_types: int = 8) -> LabelSet:
    types = list(TYPES)[:n_types]
    return LabelSet((O, *types), {t: TYPES[t][0] for t in types})


def generate(cfg: SyntheticConfig = SyntheticConfig()) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    ls = label_set(cfg.n_types)
    types = list(ls.entity_labels)
    names = {t: entity_names(TYPES[t][0][:5], cfg.names_per_type, rng) for t in types}
    n_novel = int(round(cfg.novel_frac * cfg.names_per_type))
    seen = {t: v[: len(v) - n_novel] for t, v in names.items()}
    sentences = []
    for k in range(cfg.n_sentences):
        pool = names if k >= cfg.n_sentences - cfg.n_test else seen
        tokens: list[str] = []
        labels: list[str] = []
        n_ment = int(rng.integers(1, cfg.max_mentions + 1))
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        slots = sorted(rng.choice(max(length - 1, n_ment), size=n_ment, replace=False))
        pos = 0
        for slot in slots:
            while pos < slot:
                tokens.append(str(rng.choice(FILLER)))
                labels.append(O)
                pos += 1
            t = types[int(rng.integers(len(types)))]
            if rng.random() < cfg.cue_prob:
                tokens.append(str(rng.choice(TYPES[t][1])))
                labels.append(O)
            for _ in range(int(rng.integers(1, 3))):
                tokens.append(str(rng.choice(pool[t])))
                labels.append(t)
            # a filler keeps adjacent mentions of one type from merging under IO
            tokens.append(str(rng.choice(FILLER)))
            labels.append(O)
            pos += 1
        while pos < length:
            tokens.append(str(rng.choice(FILLER)))
            labels.append(O)
            pos += 1
        sentences.append(LabeledSentence(tuple(tokens), tuple(labels)))
    return Dataset(tuple(sentences), ls)


def split(d: Dataset, n_test: int) -> tuple[Dataset, Dataset]:
    """First ``len(d) - n_test`` sentences train, the rest test; label sets shared."""
    cut = len(d) - n_test
    return Dataset(d.sentences[:cut], d.label_set), Dataset(d.sentences[cut:], d.label_set)
