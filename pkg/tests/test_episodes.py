import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proml import synthetic
from proml.corpus import Dataset, LabeledSentence, LabelSet
from proml.episodes import (
    Episode,
    SamplerConfig,
    check_entity_set,
    check_episode,
    read_episodes,
    sample_entity_set,
    sample_episode,
    sample_episodes,
    sample_low_resource,
    write_episodes,
)
from proml.errors import InsufficientDataError


def sent(*pairs):
    return LabeledSentence(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))


@pytest.fixture(scope="module")
def small_corpus():
    return synthetic.generate(synthetic.SyntheticConfig(n_sentences=50, n_types=6, names_per_type=8, seed=3))


def test_k1_minimality_prunes_to_one():
    ls = LabelSet(("O", "PER"))
    d = Dataset(tuple(sent(("x%d" % i, "PER"), ("y", "O")) for i in range(3)), ls)
    for seed in range(20):
        out = sample_entity_set(d, {"PER"}, 1, np.random.default_rng(seed))
        assert len(out) == 1


def test_two_labels_both_required():
    ls = LabelSet(("O", "A", "B"))
    s1, s2 = sent(("a", "A")), sent(("b", "B"))
    out = sample_entity_set(Dataset((s1, s2), ls), {"A", "B"}, 1, np.random.default_rng(0))
    assert set(out) == {s1, s2}


def test_non_target_sentences_excluded():
    ls = LabelSet(("O", "A", "B"))
    d = Dataset((sent(("a", "A"), ("b", "B")),), ls)
    with pytest.raises(InsufficientDataError, match="'A'"):
        sample_entity_set(d, {"A"}, 1, np.random.default_rng(0))


def test_insufficient_names_label():
    ls = LabelSet(("O", "A", "B"))
    d = Dataset((sent(("a", "A")), sent(("a", "A"))), ls)
    with pytest.raises(InsufficientDataError) as e:
        sample_entity_set(d, {"A", "B"}, 1, np.random.default_rng(0))
    assert e.value.label == "B"


def test_mentions_not_tokens_are_counted():
    ls = LabelSet(("O", "A"))
    # one two-token mention counts once; the second sentence holds two mentions
    s1 = sent(("New", "A"), ("York", "A"))
    s2 = sent(("a", "A"), ("x", "O"), ("b", "A"))
    d = Dataset((s1, s2), ls)
    for seed in range(10):
        out = sample_entity_set(d, {"A"}, 2, np.random.default_rng(seed))
        assert check_entity_set(out, {"A"}, 2)[0]


def test_support_query_split_two_sentences():
    ls = LabelSet(("O", "PER"))
    s1, s2 = sent(("Ann", "PER")), sent(("Bob", "PER"))
    ep = sample_episode(Dataset((s1, s2), ls), SamplerConfig(N=1, K=1, seed=4))
    assert len(ep.support) == 1 and len(ep.query) == 1
    assert {ep.support[0], ep.query[0]} == {s1, s2}


def test_episode_is_deterministic(small_corpus):
    cfg = SamplerConfig(N=3, K=1, seed=11)
    assert sample_episode(small_corpus, cfg) == sample_episode(small_corpus, cfg)


def test_synthetic_5way_1shot_passes_checker(small_corpus):
    cfg = SamplerConfig(N=5, K=1, seed=0)
    for ep in sample_episodes(small_corpus, cfg, 200):
        ok, why = check_episode(ep, 1)
        assert ok, why
        assert len(ep.target_labels) == 5
        for s in ep.support + ep.query:
            assert s.entity_labels() <= ep.target_labels


def test_episode_masks_non_targets(small_corpus):
    ep = sample_episode(small_corpus, SamplerConfig(N=2, K=1, seed=5))
    assert ep.label_set.entity_labels == tuple(sorted(ep.target_labels))
    for s in ep.support:
        assert s.entity_labels() <= ep.target_labels


def test_low_resource_partition():
    ls = LabelSet(("O", "PER", "LOC"))
    sents = (sent(("Ann", "PER")), sent(("Rome", "LOC")), sent(("the", "O")), sent(("a", "O")))
    d = Dataset(sents, ls)
    support, query = sample_low_resource(d, 1, np.random.default_rng(0))
    assert len(support) == 2 and len(query) == len(d) - 2
    assert sorted(map(id, support + query)) == sorted(map(id, sents))


def test_low_resource_partition_synthetic(small_corpus):
    support, query = sample_low_resource(small_corpus, 2, np.random.default_rng(1))
    assert len(support) + len(query) == len(small_corpus)
    assert not set(map(id, support)) & set(map(id, query))
    assert check_entity_set(support, small_corpus.label_set.entity_labels, 2)[0]


def test_serialization_round_trip(tmp_path, small_corpus):
    eps = sample_episodes(small_corpus, SamplerConfig(N=2, K=1, seed=2), 3)
    path = tmp_path / "eps.jsonl"
    write_episodes(path, eps)
    back = read_episodes(path)
    for a, b in zip(eps, back):
        assert a.support == b.support and a.query == b.query
        assert a.target_labels == b.target_labels
        assert a.label_set == b.label_set


def test_checker_rejects_redundant_sentence():
    s1, s2 = sent(("a", "A")), sent(("b", "A"))
    ok, why = check_entity_set([s1, s2], {"A"}, 1)
    assert not ok and "removable" in why
    assert not check_entity_set([sent(("a", "A"), ("x", "O"), ("b", "A"), ("y", "O"), ("c", "A"))], {"A"}, 1)[0]


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(N=0)
    with pytest.raises(ValueError):
        SamplerConfig(K=0)


@pytest.fixture(scope="module")
def mid_corpus():
    return synthetic.generate(synthetic.SyntheticConfig(n_sentences=300, seed=9))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(1, 3))
def test_sampled_sets_are_valid(mid_corpus, seed, n, k):
    ep = sample_episode(mid_corpus, SamplerConfig(N=n, K=k, seed=seed))
    ok, why = check_episode(ep, k)
    assert ok, why
