"""Gaussian token embeddings, symmetric-KL distance and the contrastive loss.

Variances (not precisions) are stored. The token distance is the
symmetrized KL ``(KL(p||q) + KL(q||p)) / 2``, which for diagonal Gaussians
reduces to

    0.25 * sum_i [ v0/v1 + v1/v0 + (m0 - m1)^2 (1/v0 + 1/v1) - 2 ]

and the similarity is ``exp(-distance)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .encoding import glorot
from .errors import DataError, NumericError

VAR_FLOOR = 1e-6


@dataclass
class HeadParams:
    W_mu: np.ndarray  # (h, d)
    b_mu: np.ndarray  # (d,)
    W_sigma: np.ndarray  # (h, d)
    b_sigma: np.ndarray  # (d,)

    @classmethod
    def init(cls, rng: np.random.Generator, hidden: int = 64, dim: int = 128) -> "HeadParams":
        if dim < 1 or hidden < 1:
            raise ValueError("hidden and dim must be >= 1")
        return cls(glorot(rng, hidden, dim), np.zeros(dim), glorot(rng, hidden, dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.W_mu.shape[1]

    @property
    def hidden(self) -> int:
        return self.W_mu.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"W_mu": self.W_mu, "b_mu": self.b_mu, "W_sigma": self.W_sigma, "b_sigma": self.b_sigma}


@dataclass(frozen=True)
class GaussianEmbedding:
    """Diagonal Gaussian(s); ``mu`` and ``var`` share a trailing dimension ``d``."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        if np.shape(self.mu) != np.shape(self.var):
            raise ValueError("mu and var shapes differ")

    @property
    def dim(self) -> int:
        return np.shape(self.mu)[-1]

    def __getitem__(self, i) -> "GaussianEmbedding":
        return GaussianEmbedding(self.mu[i], self.var[i])

    def __len__(self) -> int:
        return len(self.mu)


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -z))


def project(hp: HeadParams, h: np.ndarray) -> GaussianEmbedding:
    """Map representation row(s) to Gaussian embedding(s)."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != hp.hidden:
        raise ValueError(f"input width {h.shape[-1]} != head width {hp.hidden}")
    if not np.isfinite(h).all():
        raise NumericError("non-finite input to projection heads")
    mu = h @ hp.W_mu + hp.b_mu
    var = softplus(h @ hp.W_sigma + hp.b_sigma) + VAR_FLOOR
    return GaussianEmbedding(mu, var)


def _check_dims(g0: GaussianEmbedding, g1: GaussianEmbedding):
    if g0.dim != g1.dim:
        raise ValueError(f"dimension mismatch: {g0.dim} vs {g1.dim}")


def kl(g0: GaussianEmbedding, g1: GaussianEmbedding):
    """KL(g0 || g1) for diagonal Gaussians, summed over the last axis."""
    _check_dims(g0, g1)
    r = g0.var / g1.var
    terms = r + (g1.mu - g0.mu) ** 2 / g1.var - 1.0 - np.log(r)
    return 0.5 * np.sum(terms, axis=-1)


def js_distance(g0: GaussianEmbedding, g1: GaussianEmbedding):
    return 0.5 * (kl(g0, g1) + kl(g1, g0))


def similarity(g0: GaussianEmbedding, g1: GaussianEmbedding):
    return np.exp(-js_distance(g0, g1))


def distance_matrix(q: GaussianEmbedding, s: GaussianEmbedding) -> np.ndarray:
    """Pairwise symmetric-KL distances, shape ``(len(q), len(s))``, via matmuls."""
    _check_dims(q, s)
    mq, vq, ms, vs = q.mu, q.var, s.mu, s.var
    ivq, ivs = 1.0 / vq, 1.0 / vs
    D = vq @ ivs.T + ivq @ vs.T
    D += (mq * mq) @ ivs.T - 2.0 * mq @ (ms * ivs).T + np.sum(ms * ms * ivs, axis=1)
    D += np.sum(mq * mq * ivq, axis=1)[:, None] - 2.0 * (mq * ivq) @ ms.T + ivq @ (ms * ms).T
    D -= 2.0 * q.dim
    return np.maximum(0.25 * D, 0.0)


def distance_matrix_grad(q: GaussianEmbedding, s: GaussianEmbedding, G: np.ndarray):
    """Pull ``G = dLoss/dD`` back to ``(dmu_q, dvar_q, dmu_s, dvar_s)``."""
    mq, vq, ms, vs = q.mu, q.var, s.mu, s.var
    ivq, ivs = 1.0 / vq, 1.0 / vs
    Gq = 0.25 * G
    row, col = Gq.sum(axis=1)[:, None], Gq.sum(axis=0)[:, None]
    G_ms, G_ivs = Gq @ ms, Gq @ ivs
    GT_mq, GT_ivq = Gq.T @ mq, Gq.T @ ivq
    dmq = 2.0 * (mq * G_ivs + mq * ivq * row - Gq @ (ms * ivs) - ivq * G_ms)
    dms = -2.0 * (ivs * GT_mq - ms * ivs * col + Gq.T @ (mq * ivq) - ms * GT_ivq)
    dvq = G_ivs - ivq**2 * (Gq @ vs + mq * mq * row - 2.0 * mq * G_ms + Gq @ (ms * ms))
    dvs = GT_ivq - ivs**2 * (Gq.T @ vq + Gq.T @ (mq * mq) - 2.0 * ms * GT_mq + ms * ms * col)
    return dmq, dvq, dms, dvs


def token_loss(q: GaussianEmbedding, q_label, support: Sequence[tuple[GaussianEmbedding, object]]) -> float | None:
    """Contrastive loss of one query token; ``None`` when no support token shares its label."""
    if not support:
        raise ValueError("empty support")
    logs = np.array([-float(js_distance(q, p)) for p, _ in support])
    same = np.array([lab == q_label for _, lab in support])
    if not same.any():
        return None
    # -log( mean_{same} s / sum_all s ), in log space
    lse_same = np.logaddexp.reduce(logs[same])
    lse_all = np.logaddexp.reduce(logs)
    return float(max(lse_all - lse_same + np.log(same.sum()), 0.0))


def batch_loss(queries: Sequence[tuple[GaussianEmbedding, object]], support: Sequence[tuple[GaussianEmbedding, object]]) -> float:
    losses = [token_loss(q, lab, support) for q, lab in queries]
    kept = [x for x in losses if x is not None]
    if not kept:
        raise DataError("no contrastable tokens")
    return float(np.mean(kept))


def contrastive_loss_from_distances(D: np.ndarray, q_labels: Sequence, s_labels: Sequence):
    """Mean token loss over contrastable queries and its gradient w.r.t. ``D``."""
    q_labels = np.asarray(q_labels, dtype=object)
    s_labels = np.asarray(s_labels, dtype=object)
    same = q_labels[:, None] == s_labels[None, :]
    n_same = same.sum(axis=1)
    valid = n_same > 0
    if not valid.any():
        raise DataError("no contrastable tokens")
    A = -D[valid]
    P = same[valid]
    m_all = A.max(axis=1, keepdims=True)
    E_all = np.exp(A - m_all)
    z_all = E_all.sum(axis=1, keepdims=True)
    A_same = np.where(P, A, -np.inf)
    m_same = A_same.max(axis=1, keepdims=True)
    E_same = np.where(P, np.exp(A_same - m_same), 0.0)
    z_same = E_same.sum(axis=1, keepdims=True)
    losses = (m_all + np.log(z_all) - m_same - np.log(z_same)).ravel() + np.log(n_same[valid])
    n = int(valid.sum())
    loss = float(np.mean(np.maximum(losses, 0.0)))
    G = np.zeros_like(D)
    G[valid] = (E_same / z_same - E_all / z_all) / n
    if not np.isfinite(G).all() or not np.isfinite(loss):
        raise NumericError("non-finite contrastive loss")
    return loss, G, losses
