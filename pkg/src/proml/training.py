"""Meta-training: episode losses, analytic gradients, AdamW with warmup."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import Dataset
from .encoding import (
    VARIANTS,
    EncoderParams,
    batch_backward,
    build_batch,
    query_plan,
    run_batch,
    support_plan,
)
from .episodes import Episode, SamplerConfig, sample_episode
from .errors import NumericError
from .gaussian_metric import (
    GaussianEmbedding,
    HeadParams,
    VAR_FLOOR,
    contrastive_loss_from_distances,
    distance_matrix,
    distance_matrix_grad,
    sigmoid,
    softplus,
)
from .prompting import option_order

log = logging.getLogger(__name__)

NO_DECAY = frozenset({"encoder.alpha", "encoder.beta", "encoder.gamma", "heads.b_mu", "heads.b_sigma"})


@dataclass
class ModelParams:
    encoder: EncoderParams
    heads: HeadParams
    rho: float = 0.7
    variant: str = "A+B"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.variant in ("plain+B", "A+B") and not 0.0 < self.rho < 1.0:
            raise ValueError(f"rho must lie in (0, 1) for {self.variant}")
        if self.encoder.hidden != self.heads.hidden:
            raise ValueError("encoder width does not match projection heads")

    @classmethod
    def init(
        cls,
        seed: int = 0,
        variant: str = "A+B",
        rho: float = 0.7,
        vocab_size: int = 1 << 16,
        hidden: int = 64,
        layers: int = 3,
        dim: int = 128,
    ) -> "ModelParams":
        rng = np.random.default_rng(seed)
        enc = EncoderParams.init(rng, vocab_size, hidden, layers)
        return cls(enc, HeadParams.init(rng, hidden, dim), rho, variant)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"encoder.{k}": v for k, v in self.encoder.tensors().items()}
        out.update({f"heads.{k}": v for k, v in self.heads.tensors().items()})
        return out

    def copy(self) -> "ModelParams":
        enc = EncoderParams(**{k: v.copy() for k, v in self.encoder.tensors().items()})
        heads = HeadParams(**{k: v.copy() for k, v in self.heads.tensors().items()})
        return ModelParams(enc, heads, self.rho, self.variant)

    def shape_config(self) -> dict:
        return {
            "vocab_size": self.encoder.vocab_size,
            "hidden": self.encoder.hidden,
            "layers": self.encoder.layers,
            "dim": self.heads.dim,
            "rho": self.rho,
            "variant": self.variant,
        }


@dataclass
class TrainConfig:
    lr: float = 3e-5
    total_steps: int = 10_000
    warmup_frac: float = 0.10
    schedule: str = "constant"  # or "linear"
    weight_decay: float = 0.01
    no_decay: frozenset = NO_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    N: int = 5
    K: int = 1
    seed: int = 0
    eval_every: int = 0
    patience: int = 0

    def __post_init__(self):
        if not 0.0 < self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must lie in (0, 1)")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.schedule not in ("constant", "linear"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.no_decay = frozenset(self.no_decay)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["no_decay"] = sorted(self.no_decay)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    warmup = cfg.warmup_frac * cfg.total_steps
    if step < warmup:
        return cfg.lr * step / warmup
    if cfg.schedule == "linear" and cfg.total_steps > warmup:
        return cfg.lr * (cfg.total_steps - step) / (cfg.total_steps - warmup)
    return cfg.lr


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    # rows of row-sparse tensors whose moments have ever been non-zero
    active: dict[str, np.ndarray] = field(default_factory=dict)


# Tensors whose gradient touches few rows per step (hashed embedding table).
# Rows with zero moments only feel weight decay, so the Adam arithmetic runs
# on the active rows alone; the result is bit-identical to the dense update.
ROW_SPARSE = frozenset({"encoder.embedding"})


def _adam_update(p, g, m, v, lr, c1, c2, decay, cfg):
    m *= cfg.beta1
    m += (1.0 - cfg.beta1) * g
    v *= cfg.beta2
    v += (1.0 - cfg.beta2) * (g * g)
    upd = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    if decay:
        upd += cfg.weight_decay * p
    upd *= lr
    return upd


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
    step: int | None = None,
    lr: float | None = None,
    dense: bool = False,
):
    """In-place AdamW update with bias correction and decoupled weight decay.

    ``lr`` defaults to ``lr_at(step, cfg)``. ``dense=True`` disables the
    row-sparse shortcut (same result, slower).
    """
    if lr is None:
        lr = lr_at(step if step is not None else state.step, cfg)
    t = state.step + 1
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    updates = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros(p.shape)
            state.v[name] = np.zeros(p.shape)
        m, v = state.m[name], state.v[name]
        decay = bool(cfg.weight_decay) and name not in cfg.no_decay
        if name in ROW_SPARSE and p.ndim == 2 and not dense:
            active = state.active.setdefault(name, np.zeros(p.shape[0], dtype=bool))
            active |= np.any(g != 0.0, axis=1)
            rows = np.flatnonzero(active)
            if not np.isfinite(g[rows]).all():
                raise NumericError(f"non-finite gradient for {name}")
            m_r, v_r = m[rows], v[rows]
            upd_r = _adam_update(p[rows], g[rows], m_r, v_r, lr, c1, c2, decay, cfg)
            m[rows], v[rows] = m_r, v_r
            upd = None
            if decay:
                upd = cfg.weight_decay * p
                upd *= lr
            updates[name] = (rows, upd_r, upd)
            if not np.isfinite(upd_r).all():
                raise NumericError(f"non-finite update for {name}")
            continue
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
        upd = _adam_update(p, g, m, v, lr, c1, c2, decay, cfg)
        if not np.isfinite(upd).all():
            raise NumericError(f"non-finite update for {name}")
        updates[name] = upd
    for name, upd in updates.items():
        if isinstance(upd, tuple):
            rows, upd_r, full = upd
            if full is not None:
                full[rows] = upd_r
                params[name] -= full
            else:
                params[name][rows] -= upd_r
        else:
            params[name] -= upd
    state.step = t
    return params, state


# -- episode forward/backward --------------------------------------------------


def episode_plans(model: ModelParams, ep: Episode):
    options = option_order(ep.label_set)
    sup = [support_plan(model.variant, s.tokens, s.labels, ep.label_set, options, model.rho) for s in ep.support]
    qry = [query_plan(model.variant, s.tokens, options) for s in ep.query]
    return sup, qry


def represent_episode(model: ModelParams, ep: Episode) -> tuple[np.ndarray, np.ndarray]:
    """Token representations ``(support rows, query rows)`` for a whole episode."""
    sup, qry = episode_plans(model, ep)
    batch = build_batch(sup + qry)
    H, _, _ = run_batch(model.encoder, batch)
    n_s = sum(len(s) for s in ep.support)
    return H[:n_s], H[n_s:]


def _labels(sentences) -> list:
    return [lab for s in sentences for lab in s.labels]


def loss_and_grad(model: ModelParams, ep: Episode, need_grad: bool = True):
    sup, qry = episode_plans(model, ep)
    batch = build_batch(sup + qry)
    H, n_rows, cache = run_batch(model.encoder, batch, keep_cache=need_grad)
    hp = model.heads
    Zmu = H @ hp.W_mu + hp.b_mu
    Zs = H @ hp.W_sigma + hp.b_sigma
    var = softplus(Zs) + VAR_FLOOR
    n_s = sum(len(s) for s in ep.support)
    gs = GaussianEmbedding(Zmu[:n_s], var[:n_s])
    gq = GaussianEmbedding(Zmu[n_s:], var[n_s:])
    D = distance_matrix(gq, gs)
    loss, G, _ = contrastive_loss_from_distances(D, _labels(ep.query), _labels(ep.support))
    if not need_grad:
        return loss, None
    dmq, dvq, dms, dvs = distance_matrix_grad(gq, gs, G)
    dmu = np.vstack([dms, dmq])
    dZs = np.vstack([dvs, dvq]) * sigmoid(Zs)
    grads = {
        "heads.W_mu": H.T @ dmu,
        "heads.b_mu": dmu.sum(axis=0),
        "heads.W_sigma": H.T @ dZs,
        "heads.b_sigma": dZs.sum(axis=0),
    }
    dH = dmu @ hp.W_mu.T + dZs @ hp.W_sigma.T
    enc = batch_backward(model.encoder, batch, n_rows, cache, dH)
    grads.update({f"encoder.{k}": v for k, v in enc.items()})
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def loss_gradient(model: ModelParams, episodes: Episode | Sequence[Episode]) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean episode loss for every trainable tensor."""
    if isinstance(episodes, Episode):
        episodes = [episodes]
    total = None
    for ep in episodes:
        _, g = loss_and_grad(model, ep)
        total = g if total is None else {k: total[k] + g[k] for k in total}
    return {k: v / len(episodes) for k, v in total.items()}


def finite_diff_check(
    model: ModelParams,
    episode: Episode,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    tensors: Sequence[str] | None = None,
    frozen: Sequence[str] = (),
    floor: float = 1e-6,
) -> dict[str, dict]:
    """Compare analytic and central-difference gradients tensor by tensor.

    The per-tensor error is ``max|analytic - numeric|`` divided by the larger
    of ``max|analytic|``, ``max|numeric|`` and ``floor``; the floor keeps
    tensors whose true gradient is identically zero (e.g. the mean-head bias,
    to which every distance is invariant) from turning difference noise into
    a relative error of 1. Names in ``frozen`` are treated as non-trainable:
    their analytic gradient is zero by definition.
    """
    _, analytic = loss_and_grad(model, episode)
    params = model.tensors()
    report = {}
    for name in tensors or list(params):
        p = params[name]
        a = np.zeros_like(p) if name in frozen else analytic[name]
        num = np.zeros_like(p)
        if name not in frozen:
            flat = p.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                lp, _ = loss_and_grad(model, episode, need_grad=False)
                flat[i] = orig - step
                lm, _ = loss_and_grad(model, episode, need_grad=False)
                flat[i] = orig
                nflat[i] = (lp - lm) / (2.0 * step)
        diff = float(np.abs(a - num).max(initial=0.0))
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), floor)
        err = 0.0 if diff == 0.0 else diff / scale
        report[name] = {"max_rel_error": err, "passed": err <= tolerance, "size": int(p.size)}
    return report


# -- training loop -----------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, step: int, loss: float, lr: float):
        self.rows.append((step, loss, lr))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss", "lr"])
            for step, loss, lr in self.rows:
                w.writerow([step, repr(loss), repr(lr)])

    @property
    def losses(self) -> list[float]:
        return [r[1] for r in self.rows]


def train(
    train_set: Dataset,
    cfg: TrainConfig,
    model: ModelParams,
    dev_score: Callable[[ModelParams], float] | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
) -> tuple[ModelParams, TrainLog]:
    """Train ``model`` in place for ``cfg.total_steps`` single-episode steps.

    With ``dev_score`` and ``cfg.eval_every > 0`` the best-scoring snapshot is
    returned and training stops after ``cfg.patience`` non-improving checks
    (``patience=0`` never stops early).
    """
    rng = np.random.default_rng(cfg.seed)
    sampler = SamplerConfig(N=cfg.N, K=cfg.K, seed=cfg.seed)
    params = model.tensors()
    state = OptimizerState()
    history = TrainLog()
    best, best_score, bad = None, -np.inf, 0
    for step in range(cfg.total_steps):
        ep = sample_episode(train_set, sampler, rng)
        loss, grads = loss_and_grad(model, ep)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        lr = lr_at(step, cfg)
        adamw_step(params, grads, state, cfg, lr=lr)
        history.append(step, loss, lr)
        if on_step is not None:
            on_step(step, loss, lr)
        if dev_score is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
            score = dev_score(model)
            log.info("step %d dev score %.4f", step + 1, score)
            if score > best_score:
                best, best_score, bad = model.copy(), score, 0
            else:
                bad += 1
                if cfg.patience and bad >= cfg.patience:
                    log.info("early stop at step %d", step + 1)
                    break
    if best is not None:
        return best, history
    return model, history


# -- checkpoints ---------------------------------------------------------------------
# Layout: magic line, one JSON header line, then the tensors' raw
# little-endian float64 bytes back to back in header order.

CKPT_MAGIC = b"PROML-CKPT-1\n"


def config_fingerprint(meta: dict) -> str:
    return hashlib.sha256(json.dumps(meta, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, model: ModelParams, extra: dict | None = None) -> None:
    tensors = model.tensors()
    entries, offset = [], 0
    for name, arr in tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    model_cfg = model.shape_config()
    header = {
        "model": model_cfg,
        "fingerprint": config_fingerprint({"model": model_cfg, **(extra or {})}),
        "tensors": entries,
        "dtype": "<f8",
        **(extra or {}),
    }
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint")
    nl = raw.index(b"\n", len(CKPT_MAGIC))
    header = json.loads(raw[len(CKPT_MAGIC) : nl])
    body = raw[nl + 1 :]
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
    enc = EncoderParams(**{k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("encoder.")})
    heads = HeadParams(**{k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("heads.")})
    m = header["model"]
    return ModelParams(enc, heads, m["rho"], m["variant"]), header
