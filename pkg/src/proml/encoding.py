"""Reference sequence encoder, masked extraction and masked weighted fusion.

The encoder is a word-level stand-in for a pretrained transformer: hashed
embeddings followed by ``L`` gated local-mixing layers::

    H[l+1]_i = alpha_l * H[l]_i + beta_l * mean(H[l]_{i-1..i+1}) + gamma_l * tanh(H[l]_i W_l)

and the output is the average of the last ``min(4, L + 1)`` layers. Many
sequences are encoded in one call by stacking them row-wise; the window
mean never crosses a sequence boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .corpus import LabelSet
from .errors import NumericError
from .prompting import PromptedSequence, identity_prompt, label_aware, option_prefix

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
N_AVERAGED_LAYERS = 4

VARIANTS = ("plain", "A", "B", "plain+B", "A+B")


@lru_cache(maxsize=1 << 18)
def fnv1a_64(token: str) -> int:
    h = FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def bucket(token: str, vocab_size: int) -> int:
    return fnv1a_64(token) % vocab_size


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape or (fan_in, fan_out))


@dataclass
class EncoderParams:
    embedding: np.ndarray  # (V, h)
    alpha: np.ndarray  # (L,)
    beta: np.ndarray  # (L,)
    gamma: np.ndarray  # (L,)
    W: np.ndarray  # (L, h, h)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        vocab_size: int = 1 << 16,
        hidden: int = 64,
        layers: int = 3,
        alpha: float = 1.0,
        beta: float = 0.5,
        gamma: float = 0.5,
    ) -> "EncoderParams":
        if hidden < 1 or vocab_size < 1 or layers < 0:
            raise ValueError("vocab_size, hidden must be >= 1 and layers >= 0")
        return cls(
            embedding=glorot(rng, vocab_size, hidden),
            alpha=np.full(layers, alpha),
            beta=np.full(layers, beta),
            gamma=np.full(layers, gamma),
            W=glorot(rng, hidden, hidden, (layers, hidden, hidden)),
        )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def hidden(self) -> int:
        return self.embedding.shape[1]

    @property
    def layers(self) -> int:
        return self.alpha.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"embedding": self.embedding, "alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "W": self.W}


@dataclass
class EncodeCache:
    ids: np.ndarray
    has_prev: np.ndarray
    has_next: np.ndarray
    count: np.ndarray
    layers: list[np.ndarray] = field(default_factory=list)
    tanhs: list[np.ndarray] = field(default_factory=list)
    mixes: list[np.ndarray] = field(default_factory=list)


def _window_mean(H, has_prev, has_next, count):
    out = H.copy()
    out[1:] += has_prev[1:, None] * H[:-1]
    out[:-1] += has_next[:-1, None] * H[1:]
    return out / count[:, None]


def _window_mean_T(G, has_prev, has_next, count):
    Gc = G / count[:, None]
    out = Gc.copy()
    # row i+1 averages row i iff it has a predecessor
    out[:-1] += has_prev[1:, None] * Gc[1:]
    out[1:] += has_next[:-1, None] * Gc[:-1]
    return out


def _boundaries(lengths: Sequence[int]):
    n = int(sum(lengths))
    has_prev = np.ones(n)
    has_next = np.ones(n)
    starts = np.cumsum([0, *lengths[:-1]]).astype(int)
    ends = starts + np.asarray(lengths, dtype=int) - 1
    has_prev[starts] = 0.0
    has_next[ends] = 0.0
    return has_prev, has_next, 1.0 + has_prev + has_next


def encode_batch(
    theta: EncoderParams, seqs: Sequence[Sequence[str]], keep_cache: bool = False
) -> tuple[np.ndarray, EncodeCache | None]:
    """Encode sequences stacked row-wise; returns ``(sum(len) x h, cache)``."""
    lengths = [len(s) for s in seqs]
    if not seqs or min(lengths) == 0:
        raise ValueError("cannot encode an empty sequence")
    V = theta.vocab_size
    ids = np.fromiter((bucket(t, V) for s in seqs for t in s), dtype=np.int64, count=sum(lengths))
    H = theta.embedding[ids]
    if not (np.isfinite(H).all() and all(np.isfinite(t).all() for t in (theta.alpha, theta.beta, theta.gamma, theta.W))):
        raise NumericError("non-finite encoder parameter")
    has_prev, has_next, count = _boundaries(lengths)
    cache = EncodeCache(ids, has_prev, has_next, count) if keep_cache else None
    layers = [H]
    for l in range(theta.layers):
        mix = _window_mean(H, has_prev, has_next, count)
        T = np.tanh(H @ theta.W[l])
        H = theta.alpha[l] * H + theta.beta[l] * mix + theta.gamma[l] * T
        layers.append(H)
        if cache is not None:
            cache.tanhs.append(T)
            cache.mixes.append(mix)
    k = min(N_AVERAGED_LAYERS, len(layers))
    out = sum(layers[-k:]) / k
    if cache is not None:
        cache.layers = layers
    return out, cache


def encode_backward(theta: EncoderParams, cache: EncodeCache, dR: np.ndarray) -> dict[str, np.ndarray]:
    L = theta.layers
    k = min(N_AVERAGED_LAYERS, L + 1)
    grads = {
        "alpha": np.zeros(L),
        "beta": np.zeros(L),
        "gamma": np.zeros(L),
        "W": np.zeros_like(theta.W),
    }
    dH = dR / k
    for l in range(L - 1, -1, -1):
        H, T, mix = cache.layers[l], cache.tanhs[l], cache.mixes[l]
        grads["alpha"][l] = np.sum(dH * H)
        grads["beta"][l] = np.sum(dH * mix)
        grads["gamma"][l] = np.sum(dH * T)
        dZ = theta.gamma[l] * dH * (1.0 - T * T)
        grads["W"][l] = H.T @ dZ
        dH_prev = theta.alpha[l] * dH + theta.beta[l] * _window_mean_T(dH, cache.has_prev, cache.has_next, cache.count)
        dH_prev += dZ @ theta.W[l].T
        if l >= L + 1 - k:
            dH_prev += dR / k
        dH = dH_prev
    dE = np.zeros(theta.embedding.shape)
    np.add.at(dE, cache.ids, dH)
    grads["embedding"] = dE
    return grads


def encode(theta: EncoderParams, p: PromptedSequence | Sequence[str]) -> np.ndarray:
    tokens = p.tokens if isinstance(p, PromptedSequence) else p
    if not len(tokens):
        raise ValueError("cannot encode an empty sequence")
    return encode_batch(theta, [tokens])[0]


def extract_masked(r: np.ndarray, mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.shape != (r.shape[0],):
        raise ValueError(f"mask length {mask.shape[0] if mask.ndim else 0} != {r.shape[0]} rows")
    if not mask.any():
        raise ValueError("mask selects no rows")
    return r[mask.astype(bool)]


def fuse(hA: np.ndarray, hB: np.ndarray, rho: float) -> np.ndarray:
    if hA.shape != hB.shape:
        raise ValueError(f"shape mismatch {hA.shape} vs {hB.shape}")
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    return rho * hA + (1.0 - rho) * hB


# -- prompt plans -----------------------------------------------------------
# A plan lists (prompted sequence, weight) pairs whose mask-extracted
# representations are summed; two-prompt plans realize ``fuse``.


def support_plan(variant: str, tokens, labels, ls: LabelSet, options, rho: float) -> list[tuple[PromptedSequence, float]]:
    if variant == "plain":
        return [(identity_prompt(tokens), 1.0)]
    if variant == "A":
        return [(option_prefix(tokens, options), 1.0)]
    if variant == "B":
        return [(label_aware(tokens, labels, ls), 1.0)]
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1) for variant {variant}, got {rho}")
    if variant == "plain+B":
        return [(identity_prompt(tokens), rho), (label_aware(tokens, labels, ls), 1.0 - rho)]
    if variant == "A+B":
        return [(option_prefix(tokens, options), rho), (label_aware(tokens, labels, ls), 1.0 - rho)]
    raise ValueError(f"unknown prompt variant {variant!r}")


def query_plan(variant: str, tokens, options) -> list[tuple[PromptedSequence, float]]:
    if variant not in VARIANTS:
        raise ValueError(f"unknown prompt variant {variant!r}")
    if variant.startswith("plain"):
        return [(identity_prompt(tokens), 1.0)]
    return [(option_prefix(tokens, options), 1.0)]


@dataclass
class PlanBatch:
    """Row bookkeeping for a batch of plans encoded in one ``encode_batch`` call."""

    seqs: list[tuple[str, ...]]
    # per slot: (source rows in the stacked encoder output, destination rows, weight)
    slots: list[tuple[np.ndarray, np.ndarray, float]]
    n_out: int
    sentence_offsets: list[int]


def build_batch(plans: Sequence[list[tuple[PromptedSequence, float]]]) -> PlanBatch:
    seqs, slots, offsets = [], [], []
    src0 = dst0 = 0
    for plan in plans:
        offsets.append(dst0)
        n = None
        for p, w in plan:
            m = p.mask.astype(bool)
            if n is None:
                n = int(m.sum())
            elif int(m.sum()) != n:
                raise ValueError("prompts in one plan reduce to different lengths")
            seqs.append(p.tokens)
            slots.append((src0 + np.flatnonzero(m), dst0 + np.arange(n), w))
            src0 += len(p.tokens)
        dst0 += n
    return PlanBatch(seqs, slots, dst0, offsets)


def _combine_parts(R: np.ndarray, batch: PlanBatch) -> np.ndarray:
    out = np.zeros((batch.n_out, R.shape[1]))
    for src, dst, w in batch.slots:
        # plain assignment keeps single-prompt rows bit-exact
        if w == 1.0:
            out[dst] = R[src]
        else:
            out[dst] += w * R[src]
    return out


def run_batch(theta: EncoderParams, batch: PlanBatch, keep_cache: bool = False):
    R, cache = encode_batch(theta, batch.seqs, keep_cache)
    return _combine_parts(R, batch), R.shape[0], cache


def batch_backward(theta: EncoderParams, batch: PlanBatch, n_rows: int, cache: EncodeCache, dOut: np.ndarray):
    dR = np.zeros((n_rows, dOut.shape[1]))
    for src, dst, w in batch.slots:
        dR[src] = w * dOut[dst]
    return encode_backward(theta, cache, dR)


def represent_support(
    theta: EncoderParams,
    tokens: Sequence[str],
    labels: Sequence[str],
    ls: LabelSet,
    options,
    rho: float = 0.7,
    variant: str = "A+B",
) -> np.ndarray:
    plan = support_plan(variant, tokens, labels, ls, options, rho)
    if len(plan) == 1:
        p, _ = plan[0]
        return extract_masked(encode(theta, p), p.mask)
    (pA, _), (pB, _) = plan
    return fuse(extract_masked(encode(theta, pA), pA.mask), extract_masked(encode(theta, pB), pB.mask), rho)


def represent_query(theta: EncoderParams, tokens: Sequence[str], options, variant: str = "A+B") -> np.ndarray:
    (p, _), = query_plan(variant, tokens, options)
    return extract_masked(encode(theta, p), p.mask)
