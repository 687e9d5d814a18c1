import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proml.corpus import LabelSet
from proml.encoding import (
    EncoderParams,
    encode,
    encode_backward,
    encode_batch,
    extract_masked,
    fnv1a_64,
    fuse,
    represent_query,
    represent_support,
)
from proml.errors import NumericError
from proml.prompting import label_aware, option_order, option_prefix

LS = LabelSet(("O", "PER", "LOC"), {"PER": "person", "LOC": "location"})
X = ["Alice", "May", "lives", "in", "Chicago"]
Y = ["PER", "PER", "O", "O", "LOC"]


def small(layers=3, seed=0, V=53, h=6):
    return EncoderParams.init(np.random.default_rng(seed), vocab_size=V, hidden=h, layers=layers)


def test_fnv1a_reference_vectors():
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_shapes():
    th = small()
    assert encode(th, ["hi"]).shape == (1, 6)
    assert encode(th, X).shape == (5, 6)


def test_no_layers_is_position_free():
    th = small(layers=0)
    r = encode(th, ["a", "b", "a"])
    np.testing.assert_array_equal(r[0], r[2])


def test_layers_add_context():
    th = small(layers=3)
    r1 = encode(th, ["a", "b", "c"])
    r2 = encode(th, ["a", "z", "c"])
    assert not np.allclose(r1[0], r2[0])
    np.testing.assert_array_equal(encode(th, ["a", "b", "c"]), r1)


def test_batch_matches_single():
    th = small()
    seqs = [X, ["x"], ["the", "cat", "sat"]]
    R, _ = encode_batch(th, seqs)
    rows = np.vstack([encode(th, s) for s in seqs])
    np.testing.assert_allclose(R, rows, rtol=1e-13, atol=1e-15)


def test_non_finite_parameter_rejected():
    th = small()
    th.W[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        encode(th, ["a"])


@pytest.mark.parametrize("layers", [0, 1, 3, 5])
def test_encoder_gradient_matches_central_differences(layers):
    th = small(layers=layers, seed=layers)
    seqs = [X, ["q", "r"], ["solo"]]
    rng = np.random.default_rng(1)
    R, cache = encode_batch(th, seqs, keep_cache=True)
    w = rng.normal(size=R.shape)

    def f():
        return float(np.sum(w * encode_batch(th, seqs)[0]))

    grads = encode_backward(th, cache, w)
    step = 1e-5
    for name, p in th.tensors().items():
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * step)
        scale = max(np.abs(num).max(initial=0), np.abs(grads[name]).max(initial=0), 1e-7)
        assert np.abs(num - grads[name]).max(initial=0) / scale <= 1e-4, name


def test_extract_masked():
    r = np.arange(12.0).reshape(3, 4)
    np.testing.assert_array_equal(extract_masked(r, [1, 1, 1]), r)
    np.testing.assert_array_equal(extract_masked(r, [0, 1, 0]), r[1:2])
    with pytest.raises(ValueError):
        extract_masked(r, [0, 0, 0])
    with pytest.raises(ValueError):
        extract_masked(r, [1, 1])


def test_fuse():
    np.testing.assert_allclose(fuse(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), 0.7), [[0.7, 0.3]])
    a = np.random.default_rng(0).normal(size=(3, 2))
    np.testing.assert_allclose(fuse(a, a, 0.3), a, rtol=1e-15)
    with pytest.raises(ValueError):
        fuse(a, a, 1.0)
    with pytest.raises(ValueError):
        fuse(a, a, 0.0)
    with pytest.raises(ValueError):
        fuse(a, a[:2], 0.5)


@given(st.integers(0, 10_000), st.floats(0.01, 0.99))
def test_fuse_linearity(seed, rho):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    np.testing.assert_allclose(fuse(a, b, rho) + fuse(b, a, rho), a + b, atol=1e-12)


def test_represent_support_variants():
    th = small()
    opts = option_order(LS)
    pA = option_prefix(X, opts)
    pB = label_aware(X, Y, LS)
    hA = extract_masked(encode(th, pA), pA.mask)
    hB = extract_masked(encode(th, pB), pB.mask)
    np.testing.assert_array_equal(represent_support(th, X, Y, LS, opts, variant="A"), hA)
    np.testing.assert_array_equal(represent_support(th, X, Y, LS, opts, variant="B"), hB)
    np.testing.assert_array_equal(represent_support(th, X, Y, LS, opts, 0.7, "A+B"), fuse(hA, hB, 0.7))
    assert represent_support(th, X, Y, LS, opts, 0.7, "plain+B").shape == (5, 6)
    np.testing.assert_array_equal(represent_support(th, X, Y, LS, opts, variant="plain"), encode(th, X))
    with pytest.raises(ValueError):
        represent_support(th, X, Y, LS, opts, 1.0, "A+B")


def test_represent_query():
    th = small()
    opts = option_order(LS)
    q = represent_query(th, X, opts)
    assert q.shape == (5, 6)
    np.testing.assert_array_equal(q, represent_support(th, X, Y, LS, opts, variant="A"))
    np.testing.assert_array_equal(q, represent_query(th, X, opts))
    np.testing.assert_array_equal(represent_query(th, X, opts, "plain"), encode(th, X))


@settings(max_examples=50)
@given(st.lists(st.text(alphabet="abcdef", min_size=1, max_size=4), min_size=1, max_size=15))
def test_length_preserving(tokens):
    th = small()
    assert encode(th, tokens).shape[0] == len(tokens)
    opts = option_order(LS)
    assert represent_query(th, tokens, opts).shape[0] == len(tokens)
