import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from proml import synthetic
from proml.corpus import LabeledSentence, LabelSet
from proml.episodes import Episode, SamplerConfig, sample_episodes
from proml.evaluation import (
    Span,
    evaluate_episodes,
    evaluate_low_resource,
    export_embeddings,
    micro_f1,
    nn_predict,
    predict_episode,
    spans_from_io,
)
from proml.encoding import represent_query, represent_support
from proml.prompting import option_order
from proml.training import ModelParams


def test_nn_exact_match():
    sup = [(np.array([0.0, 1.0]), "O"), (np.array([3.0, 3.0]), "PER")]
    assert nn_predict(sup, [np.array([3.0, 3.0])]) == ["PER"]


def test_nn_nearer_prototype():
    assert nn_predict([(np.array([0.0]), "O"), (np.array([10.0]), "PER")], [np.array([1.0])]) == ["O"]


def test_nn_tie_goes_to_lower_index():
    sup = [(np.array([-1.0]), "LOC"), (np.array([1.0]), "PER")]
    assert nn_predict(sup, [np.array([0.0])]) == ["LOC"]
    assert nn_predict(sup[::-1], [np.array([0.0])]) == ["PER"]


def test_nn_empty_support():
    with pytest.raises(ValueError):
        nn_predict([], [np.zeros(2)])


@given(st.integers(0, 10_000), st.floats(-50, 50), st.floats(-50, 50))
def test_nn_translation_invariant(seed, tx, ty):
    rng = np.random.default_rng(seed)
    S = rng.integers(-20, 20, size=(6, 2)).astype(float)
    Q = rng.integers(-20, 20, size=(5, 2)).astype(float)
    labels = list("abcdef")
    shift = np.array([np.round(tx), np.round(ty)])
    a = nn_predict(list(zip(S, labels)), Q)
    b = nn_predict(list(zip(S + shift, labels)), Q + shift)
    assert a == b


def test_spans_from_io():
    assert spans_from_io(["PER", "PER", "O", "LOC"]) == {Span(0, 2, "PER"), Span(3, 4, "LOC")}
    assert spans_from_io(["O", "O"]) == set()
    assert spans_from_io(["PER", "LOC"]) == {Span(0, 1, "PER"), Span(1, 2, "LOC")}
    assert spans_from_io([]) == set()


def test_span_invariants():
    with pytest.raises(ValueError):
        Span(2, 2, "PER")
    with pytest.raises(ValueError):
        Span(0, 1, "O")


def test_micro_f1_cases():
    gold = [{Span(0, 1, "PER"), Span(2, 3, "LOC")}]
    assert micro_f1(gold, gold)[2] == 1.0
    assert micro_f1(gold, [set()])[:3] == (0.0, 0.0, 0.0)
    p, r, f, c = micro_f1(gold, [{Span(0, 1, "PER"), Span(2, 3, "PER")}])
    assert (p, r, f) == (0.5, 0.5, 0.5)
    assert (c.tp, c.fp, c.fn) == (1, 1, 1)
    with pytest.raises(ValueError):
        micro_f1(gold, [])


@given(st.permutations(range(4)))
def test_micro_f1_permutation_invariant(perm):
    gold = [{Span(0, 1, "A")}, {Span(1, 3, "B")}, set(), {Span(0, 2, "A"), Span(3, 4, "B")}]
    pred = [{Span(0, 1, "A")}, {Span(1, 2, "B")}, {Span(0, 1, "A")}, {Span(3, 4, "B")}]
    assert micro_f1([gold[i] for i in perm], [pred[i] for i in perm]) == micro_f1(gold, pred)


@pytest.fixture(scope="module")
def corpus():
    return synthetic.generate(synthetic.SyntheticConfig(n_sentences=120, names_per_type=10, seed=2))


@pytest.fixture(scope="module")
def model():
    return ModelParams.init(0, vocab_size=1 << 12, hidden=16, layers=3, dim=8)


def test_query_equal_support_scores_one(corpus, model):
    eps = sample_episodes(corpus, SamplerConfig(N=3, K=1, seed=1), 5)
    mirrored = [Episode(e.support, e.support, e.target_labels, e.label_set) for e in eps]
    m = ModelParams(model.encoder, model.heads, 0.7, "A")
    rep = evaluate_episodes(m, mirrored)
    assert rep.mean_f1 == 1.0 and rep.std_f1 == 0.0


def test_episode_order_does_not_change_mean(corpus, model):
    eps = sample_episodes(corpus, SamplerConfig(N=3, K=1, seed=2), 6)
    a = evaluate_episodes(model, eps)
    b = evaluate_episodes(model, eps[::-1])
    assert a.mean_f1 == pytest.approx(b.mean_f1, abs=1e-15)
    assert len(a.per_unit_f1) == 6
    assert 0.0 <= a.mean_f1 <= 1.0
    assert a.std_f1 == pytest.approx(np.std(a.per_unit_f1))


def test_pooled_aggregate(corpus, model):
    eps = sample_episodes(corpus, SamplerConfig(N=3, K=1, seed=3), 4)
    rep = evaluate_episodes(model, eps, aggregate="pooled")
    c = rep.counts
    p, r = c.tp / (c.tp + c.fp), c.tp / (c.tp + c.fn)
    assert rep.mean_f1 == pytest.approx(2 * p * r / (p + r) if p + r else 0.0)


def test_low_resource_protocol(corpus, model):
    a = evaluate_low_resource(model, corpus, K=1, runs=3, seeds=[4, 5, 6])
    b = evaluate_low_resource(model, corpus, K=1, runs=3, seeds=[4, 5, 6])
    assert a.to_json() == b.to_json()
    assert len(a.per_unit_f1) == 3
    with pytest.raises(ValueError):
        evaluate_low_resource(model, corpus, K=1, runs=2, seeds=[1])


def test_export_embeddings(tmp_path, corpus, model):
    ep = sample_episodes(corpus, SamplerConfig(N=2, K=1, seed=7), 1)[0]
    path = tmp_path / "emb.tsv"
    rows = export_embeddings(model, ep, path)
    assert len(rows) == sum(len(s) for s in ep.support + ep.query)
    opts = option_order(ep.label_set)
    s0 = ep.support[0]
    ref = represent_support(model.encoder, s0.tokens, s0.labels, ep.label_set, opts, model.rho, model.variant)
    for j in range(len(s0)):
        np.testing.assert_array_equal(rows[j][5], ref[j])
    q0 = ep.query[0]
    qref = represent_query(model.encoder, q0.tokens, opts, model.variant)
    qrows = [r for r in rows if r[0] == "query" and r[1] == 0]
    np.testing.assert_array_equal(np.vstack([r[5] for r in qrows]), qref)
    with open(path, newline="") as fh:
        table = list(csv.reader(fh, delimiter="\t"))
    assert table[0][:5] == ["set", "sentence", "position", "token", "label"]
    assert len(table) == len(rows) + 1
    assert float(table[1][5]) == rows[0][5][0]


def test_export_downsamples_o(corpus, model):
    ep = sample_episodes(corpus, SamplerConfig(N=2, K=1, seed=8), 1)[0]
    rows = export_embeddings(model, ep, o_fraction=0.2, rng=np.random.default_rng(0))
    n_ent = sum(lab != "O" for s in ep.support + ep.query for lab in s.labels)
    assert sum(r[4] != "O" for r in rows) == n_ent
    assert len(rows) < sum(len(s) for s in ep.support + ep.query)


def test_predict_returns_labels_per_query_sentence(corpus, model):
    ep = sample_episodes(corpus, SamplerConfig(N=2, K=1, seed=9), 1)[0]
    pred = predict_episode(model, ep)
    assert [len(p) for p in pred] == [len(s) for s in ep.query]
    assert set(l for p in pred for l in p) <= {"O", *ep.target_labels}
