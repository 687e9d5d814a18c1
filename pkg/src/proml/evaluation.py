"""Nearest-neighbour inference, IO span extraction, micro-F1 and both evaluation protocols."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import O, Dataset, LabeledSentence
from .encoding import represent_query, represent_support
from .episodes import Episode, sample_low_resource
from .prompting import option_order
from .training import ModelParams, represent_episode

NN_CHUNK = 512


@dataclass(frozen=True, order=True)
class Span:
    start: int
    end: int
    label: str

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"bad span bounds [{self.start}, {self.end})")
        if self.label == O:
            raise ValueError("span label cannot be O")


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "Counts") -> "Counts":
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self


def prf(c: Counts) -> tuple[float, float, float]:
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class EvalReport:
    per_unit_f1: list[float]
    mean_f1: float
    std_f1: float
    precision: float
    recall: float
    counts: Counts = field(default_factory=Counts)
    protocol: str = "episode"
    aggregate: str = "per-unit"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def nn_predict(support: Sequence[tuple[np.ndarray, object]], queries: Sequence[np.ndarray] | np.ndarray) -> list:
    """Label of the Euclidean-nearest support token; ties go to the lower index."""
    if not len(support):
        raise ValueError("empty support")
    S = np.vstack([np.asarray(v, dtype=np.float64) for v, _ in support])
    labels = [lab for _, lab in support]
    return nn_predict_arrays(S, labels, np.asarray(queries, dtype=np.float64))


def nn_predict_arrays(S: np.ndarray, s_labels: Sequence, Q: np.ndarray) -> list:
    if S.shape[0] == 0:
        raise ValueError("empty support")
    if Q.ndim == 1:
        Q = Q[None, :]
    if Q.shape[1] != S.shape[1]:
        raise ValueError(f"width mismatch {Q.shape[1]} vs {S.shape[1]}")
    out = []
    for i in range(0, Q.shape[0], NN_CHUNK):
        diff = Q[i : i + NN_CHUNK, None, :] - S[None, :, :]
        d2 = np.einsum("qsh,qsh->qs", diff, diff)
        # argmin returns the first minimum
        out.extend(s_labels[j] for j in d2.argmin(axis=1))
    return out


def spans_from_io(labels: Sequence[str]) -> set[Span]:
    spans = set()
    start = 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            if labels[start] != O:
                spans.add(Span(start, i, labels[start]))
            start = i
    return spans


def span_counts(gold: Sequence[set[Span]], pred: Sequence[set[Span]]) -> Counts:
    if len(gold) != len(pred):
        raise ValueError(f"{len(gold)} gold sentences vs {len(pred)} predicted")
    c = Counts()
    for g, p in zip(gold, pred):
        tp = len(g & p)
        c += Counts(tp, len(p) - tp, len(g) - tp)
    return c


def micro_f1(gold: Sequence[set[Span]], pred: Sequence[set[Span]]) -> tuple[float, float, float, Counts]:
    c = span_counts(gold, pred)
    p, r, f = prf(c)
    return p, r, f, c


def _split(flat: Sequence, sentences: Sequence[LabeledSentence]) -> list[list]:
    out, i = [], 0
    for s in sentences:
        out.append(list(flat[i : i + len(s)]))
        i += len(s)
    return out


def predict_episode(model: ModelParams, ep: Episode) -> list[list]:
    Hs, Hq = represent_episode(model, ep)
    s_labels = [lab for s in ep.support for lab in s.labels]
    return _split(nn_predict_arrays(Hs, s_labels, Hq), ep.query)


def score_sentences(gold: Sequence[LabeledSentence], pred_labels: Sequence[Sequence]) -> Counts:
    return span_counts([spans_from_io(s.labels) for s in gold], [spans_from_io(p) for p in pred_labels])


def _report(unit_counts: list[Counts], protocol: str, aggregate: str) -> EvalReport:
    total = Counts()
    for c in unit_counts:
        total += c
    p, r, f_pooled = prf(total)
    if aggregate == "pooled":
        f1s = [f_pooled]
    elif aggregate == "per-unit":
        f1s = [prf(c)[2] for c in unit_counts]
    else:
        raise ValueError(f"unknown aggregate {aggregate!r}")
    arr = np.asarray([prf(c)[2] for c in unit_counts]) if unit_counts else np.zeros(0)
    mean = float(np.mean(f1s)) if f1s else 0.0
    std = float(np.std(arr)) if aggregate == "per-unit" and len(arr) else 0.0
    return EvalReport([float(x) for x in arr], mean, std, p, r, total, protocol, aggregate)


def _score_episode(model: ModelParams, ep: Episode) -> Counts:
    return score_sentences(ep.query, predict_episode(model, ep))


_WORKER_MODEL: ModelParams | None = None


def _init_worker(model: ModelParams) -> None:
    global _WORKER_MODEL
    _WORKER_MODEL = model


def _score_in_worker(ep: Episode) -> Counts:
    return _score_episode(_WORKER_MODEL, ep)


def score_episodes(model: ModelParams, episodes: Sequence[Episode], jobs: int = 1) -> list[Counts]:
    """Per-episode counts in input order; ``jobs > 1`` fans out to worker processes."""
    if jobs <= 1 or len(episodes) < 2:
        return [_score_episode(model, ep) for ep in episodes]
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(model,)) as pool:
        return list(pool.map(_score_in_worker, episodes, chunksize=max(1, len(episodes) // (4 * jobs))))


def evaluate_episodes(
    model: ModelParams, episodes: Iterable[Episode], aggregate: str = "per-unit", jobs: int = 1
) -> EvalReport:
    """F1 computed inside each episode, then averaged (population std)."""
    return _report(score_episodes(model, list(episodes), jobs), "episode", aggregate)


def low_resource_seeds(seed: int, runs: int) -> list[int]:
    return [seed + i for i in range(runs)]


def evaluate_low_resource(
    model: ModelParams,
    d_test: Dataset,
    K: int,
    runs: int = 10,
    seeds: Sequence[int] | None = None,
    aggregate: str = "per-unit",
    jobs: int = 1,
) -> EvalReport:
    seeds = list(seeds) if seeds is not None else low_resource_seeds(0, runs)
    if len(seeds) != runs:
        raise ValueError(f"{runs} runs but {len(seeds)} seeds")
    targets = frozenset(d_test.label_set.entity_labels)
    eps = []
    for seed in seeds:
        support, query = sample_low_resource(d_test, K, np.random.default_rng(seed))
        eps.append(Episode(tuple(support), tuple(query), targets, d_test.label_set, seed))
    return _report(score_episodes(model, eps, jobs), "low-resource", aggregate)


def export_embeddings(
    model: ModelParams,
    episode: Episode,
    path=None,
    o_fraction: float = 1.0,
    rng: np.random.Generator | None = None,
) -> list[tuple]:
    """Rows ``(set, sentence, position, token, label, vector)`` for every kept token.

    ``o_fraction`` < 1 keeps that random share of O tokens (entities are always kept).
    Writes a tab-separated file with a header when ``path`` is given.
    """
    if not 0.0 <= o_fraction <= 1.0:
        raise ValueError("o_fraction must lie in [0, 1]")
    rng = rng or np.random.default_rng(0)
    options = option_order(episode.label_set)
    rows = []
    for role, sentences in (("support", episode.support), ("query", episode.query)):
        for si, s in enumerate(sentences):
            if role == "support":
                H = represent_support(model.encoder, s.tokens, s.labels, episode.label_set, options, model.rho, model.variant)
            else:
                H = represent_query(model.encoder, s.tokens, options, model.variant)
            for j, (tok, lab) in enumerate(zip(s.tokens, s.labels)):
                if lab == O and o_fraction < 1.0 and rng.random() >= o_fraction:
                    continue
                rows.append((role, si, j, tok, lab, H[j]))
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            h = model.encoder.hidden
            w.writerow(["set", "sentence", "position", "token", "label", *[f"v{i}" for i in range(h)]])
            for role, si, j, tok, lab, vec in rows:
                w.writerow([role, si, j, tok, lab, *map(repr, vec.tolist())])
    return rows
