"""N-way K-shot episode sampling with the K~2K greedy + minimality scheme."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import O, Dataset, LabeledSentence, LabelSet, mask_sentence
from .errors import InsufficientDataError


@dataclass(frozen=True)
class SamplerConfig:
    N: int = 5
    K: int = 1
    seed: int = 0
    query_K: int | None = None

    def __post_init__(self):
        if self.N < 1 or self.K < 1:
            raise ValueError(f"need N >= 1 and K >= 1, got N={self.N} K={self.K}")
        if self.query_K is not None and self.query_K < 1:
            raise ValueError("query_K must be >= 1")

    @property
    def qK(self) -> int:
        return self.K if self.query_K is None else self.query_K


@dataclass(frozen=True)
class Episode:
    support: tuple[LabeledSentence, ...]
    query: tuple[LabeledSentence, ...]
    target_labels: frozenset[str]
    label_set: LabelSet
    seed: object = None

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "target_labels": sorted(self.target_labels),
            "annotations": {lab: self.label_set.annotation[lab] for lab in sorted(self.target_labels)},
            "support": [_sentence_record(s) for s in self.support],
            "query": [_sentence_record(s) for s in self.query],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        targets = tuple(rec["target_labels"])
        ls = LabelSet((O, *targets), rec.get("annotations", {}))
        return cls(
            support=tuple(LabeledSentence(tuple(s["tokens"]), tuple(s["labels"])) for s in rec["support"]),
            query=tuple(LabeledSentence(tuple(s["tokens"]), tuple(s["labels"])) for s in rec["query"]),
            target_labels=frozenset(targets),
            label_set=ls,
            seed=rec.get("seed"),
        )


def _sentence_record(s: LabeledSentence) -> dict:
    return {"tokens": list(s.tokens), "labels": list(s.labels)}


def write_episodes(path, episodes: Iterable[Episode], extra: Iterable[dict] | None = None) -> None:
    """One JSON object per line; ``extra`` dicts are merged into the matching records."""
    extra = iter(extra) if extra is not None else None
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            rec = ep.to_record()
            if extra is not None:
                rec.update(next(extra))
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def read_episodes(path) -> list[Episode]:
    with open(path, encoding="utf-8") as fh:
        return [Episode.from_record(json.loads(line)) for line in fh if line.strip()]


def mention_counts(s: LabeledSentence) -> Counter:
    return Counter(lab for _, _, lab in s.mentions())


class _Index:
    """Per-sentence mention counts and per-label posting lists for one sentence list."""

    def __init__(self, sentences: Sequence[LabeledSentence]):
        self.sentences = tuple(sentences)
        self.counts = [mention_counts(s) for s in self.sentences]
        self.by_label: dict[str, list[int]] = {}
        for i, c in enumerate(self.counts):
            for lab in c:
                self.by_label.setdefault(lab, []).append(i)


_INDEX_CACHE: dict[int, tuple[object, _Index]] = {}


def _index_for(sentences: Sequence[LabeledSentence]) -> _Index:
    # keyed by identity; the stored reference keeps the id from being recycled
    hit = _INDEX_CACHE.get(id(sentences))
    if hit is not None and hit[0] is sentences:
        return hit[1]
    idx = _Index(sentences)
    if len(_INDEX_CACHE) > 32:
        _INDEX_CACHE.clear()
    _INDEX_CACHE[id(sentences)] = (sentences, idx)
    return idx


def _greedy_select(
    index: _Index,
    candidates: Sequence[int],
    targets: Sequence[str],
    K: int,
    rng: np.random.Generator,
) -> list[int]:
    """Indices of a minimal sentence set with every target count in [K, 2K].

    Counts outside ``targets`` are ignored, which is equivalent to masking
    those labels to O.
    """
    order = rng.permutation(np.asarray(candidates, dtype=np.int64)) if len(candidates) else []
    total = dict.fromkeys(targets, 0)
    chosen: list[int] = []
    deficient = len(targets)
    for i in order:
        c = index.counts[int(i)]
        rel = [(t, c[t]) for t in targets if c.get(t)]
        if not rel or all(total[t] >= K for t, _ in rel):
            continue
        if any(total[t] + n > 2 * K for t, n in rel):
            continue
        for t, n in rel:
            if total[t] < K <= total[t] + n:
                deficient -= 1
            total[t] += n
        chosen.append(int(i))
        if deficient == 0:
            break
    if deficient:
        worst = min(targets, key=lambda t: (total[t], t))
        raise InsufficientDataError(worst, total[worst], K)
    for i in reversed(list(chosen)):
        c = index.counts[i]
        if all(total[t] - c.get(t, 0) >= K for t in targets):
            chosen.remove(i)
            for t in targets:
                total[t] -= c.get(t, 0)
    return chosen


def _candidates(index: _Index, targets: Iterable[str], exclude: set[int] | None = None) -> list[int]:
    pool: set[int] = set()
    for t in targets:
        pool.update(index.by_label.get(t, ()))
    if exclude:
        pool -= exclude
    return sorted(pool)


def sample_entity_set(
    d: Dataset | Sequence[LabeledSentence],
    target_labels: Iterable[str],
    K: int,
    rng: np.random.Generator,
) -> list[LabeledSentence]:
    """Greedy K~2K sample; sentences carrying non-target entities are not candidates."""
    sentences = d.sentences if isinstance(d, Dataset) else d
    targets = sorted(set(target_labels))
    index = _index_for(sentences)
    allowed = set(targets)
    cands = [i for i in _candidates(index, targets) if set(index.counts[i]) <= allowed]
    return [index.sentences[i] for i in _greedy_select(index, cands, targets, K, rng)]


def sample_episode(d: Dataset, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> Episode:
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    entity = list(d.label_set.entity_labels)
    if len(entity) < cfg.N:
        raise InsufficientDataError(f"<{cfg.N} entity types>", len(entity), cfg.N)
    picks = rng.choice(len(entity), size=cfg.N, replace=False)
    targets = sorted(entity[int(i)] for i in picks)
    index = _index_for(d.sentences)
    support = _greedy_select(index, _candidates(index, targets), targets, cfg.K, rng)
    query = _greedy_select(index, _candidates(index, targets, set(support)), targets, cfg.qK, rng)
    keep = frozenset(targets)
    ls = LabelSet((O, *targets), {t: d.label_set.annotation[t] for t in targets})
    return Episode(
        support=tuple(mask_sentence(d.sentences[i], keep) for i in support),
        query=tuple(mask_sentence(d.sentences[i], keep) for i in query),
        target_labels=keep,
        label_set=ls,
        seed=cfg.seed,
    )


def episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def sample_episodes(d: Dataset, cfg: SamplerConfig, count: int) -> list[Episode]:
    """``count`` episodes; episode ``i`` draws from ``episode_rng(cfg.seed, i)``."""
    out = []
    for i in range(count):
        ep = sample_episode(d, cfg, episode_rng(cfg.seed, i))
        out.append(Episode(ep.support, ep.query, ep.target_labels, ep.label_set, seed=[cfg.seed, i]))
    return out


def sample_low_resource(
    d_test: Dataset, K: int, rng: np.random.Generator
) -> tuple[list[LabeledSentence], list[LabeledSentence]]:
    """K-shot support over the full test label set; query is everything else."""
    targets = list(d_test.label_set.entity_labels)
    index = _index_for(d_test.sentences)
    chosen = set(_greedy_select(index, _candidates(index, targets), targets, K, rng))
    support = [d_test.sentences[i] for i in sorted(chosen)]
    query = [s for i, s in enumerate(d_test.sentences) if i not in chosen]
    return support, query


def check_entity_set(sentences: Sequence[LabeledSentence], targets: Iterable[str], K: int) -> tuple[bool, str]:
    """Brute-force verdict on the [K, 2K] count bounds and minimality."""
    targets = set(targets)

    def count(sents):
        c = Counter()
        for s in sents:
            prev = O
            for lab in s.labels:
                if lab != prev and lab != O:
                    c[lab] += 1
                prev = lab
        return c

    sentences = list(sentences)
    totals = count(sentences)
    stray = set(totals) - targets
    if stray:
        return False, f"non-target labels present: {sorted(stray)}"
    for t in sorted(targets):
        if not K <= totals[t] <= 2 * K:
            return False, f"label {t} occurs {totals[t]} times, outside [{K}, {2 * K}]"
    for j in range(len(sentences)):
        rest = count(sentences[:j] + sentences[j + 1 :])
        if all(rest[t] >= K for t in targets):
            return False, f"sentence {j} is removable"
    return True, "ok"


def check_episode(ep: Episode, K: int, query_K: int | None = None) -> tuple[bool, str]:
    ok, why = check_entity_set(ep.support, ep.target_labels, K)
    if not ok:
        return False, f"support: {why}"
    ok, why = check_entity_set(ep.query, ep.target_labels, K if query_K is None else query_K)
    if not ok:
        return False, f"query: {why}"
    if set(map(id, ep.support)) & set(map(id, ep.query)):
        return False, "support and query share a sentence"
    return True, "ok"
