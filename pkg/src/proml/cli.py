"""Command-line driver: ``proml {synth,train,eval,sample,ablate}``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric error. Failures print a
single ``proml: error: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import synthetic
from .corpus import Dataset, read_conll, to_conll
from .encoding import VARIANTS
from .episodes import SamplerConfig, check_episode, sample_episodes, write_episodes
from .errors import DataError, ProMLError
from .evaluation import evaluate_episodes, evaluate_low_resource, export_embeddings, low_resource_seeds
from .training import ModelParams, TrainConfig, config_fingerprint, load_checkpoint, save_checkpoint, train

log = logging.getLogger("proml")

MANIFEST = "manifest.json"
# variants whose support representation does not involve rho
RHO_FREE = frozenset({"plain", "A", "B"})


class UsageError(ProMLError):
    exit_code = 1


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- helpers -------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _load_corpus(path: str, annotations: str | None, column: int) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"no such corpus file: {path}")
    if annotations is not None and not Path(annotations).is_file():
        raise DataError(f"no such annotation file: {annotations}")
    d = read_conll(p, column, annotations)
    if not d.label_set.entity_labels:
        raise DataError(f"{path}: no entity labels found")
    return d


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(args) -> TrainConfig:
    """Config file first, then any flag given explicitly on the command line."""
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(base, dict):
            raise UsageError("config must be a JSON object")
        model_keys = {"variant", "rho", "vocab_size", "hidden", "layers", "dim"}
        for k in model_keys & set(base):
            if getattr(args, k) is None:
                setattr(args, k, base[k])
        base = {k: v for k, v in base.items() if k not in model_keys}
    flags = {"lr": args.lr, "total_steps": args.steps, "N": args.N, "K": args.K, "seed": args.seed}
    flags.update({k: getattr(args, k) for k in ("warmup_frac", "schedule", "weight_decay")})
    base.update({k: v for k, v in flags.items() if v is not None})
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from None


def _model_defaults(args) -> dict:
    d = {"variant": "A+B", "rho": 0.7, "vocab_size": 1 << 16, "hidden": 64, "layers": 3, "dim": 128}
    return {k: (getattr(args, k) if getattr(args, k) is not None else v) for k, v in d.items()}


def _add_model_flags(p: argparse.ArgumentParser, with_variant: bool = True) -> None:
    if with_variant:
        p.add_argument("--variant", choices=VARIANTS, default=None)
        p.add_argument("--rho", type=float, default=None)
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--dim", type=int, default=None)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--steps", type=int, default=None, help="total training steps (episodes)")
    p.add_argument("--warmup-frac", dest="warmup_frac", type=float, default=None)
    p.add_argument("--schedule", choices=("constant", "linear"), default=None)
    p.add_argument("--weight-decay", dest="weight_decay", type=float, default=None)


def _add_corpus_flags(p: argparse.ArgumentParser, name: str, required: bool = True) -> None:
    p.add_argument(f"--{name}", required=required, help="CoNLL file")
    p.add_argument("--annotations", default=None, help="LABEL<TAB>annotation words, one per line")
    p.add_argument("--column", type=int, default=-1, help="label column (default: last)")


# -- commands ------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = synthetic.SyntheticConfig(
        n_sentences=args.sentences + args.test,
        n_types=args.types,
        names_per_type=args.names,
        novel_frac=args.novel_frac,
        n_test=args.test,
        seed=args.seed,
    )
    d = synthetic.generate(cfg)
    tr, te = synthetic.split(d, args.test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train.conll").write_text(to_conll(tr), encoding="utf-8")
    if args.test:
        (out / "test.conll").write_text(to_conll(te), encoding="utf-8")
    ann = "".join(f"{lab}\t{d.label_set.annotation[lab]}\n" for lab in d.label_set.entity_labels)
    (out / "annotations.tsv").write_text(ann, encoding="utf-8")
    print(f"wrote {len(tr)} train / {len(te)} test sentences to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    mcfg = _model_defaults(args)
    d = _load_corpus(args.train, args.annotations, args.column)
    model = ModelParams.init(cfg.seed, **mcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    def progress(step, loss, lr):
        if args.log_every and (step + 1) % args.log_every == 0:
            log.info("step %d loss %.4f lr %.2e", step + 1, loss, lr)

    model, history = train(d, cfg, model, on_step=progress)
    ckpt, csv_path = out / "model.ckpt", out / "train_log.csv"
    extra = {
        "manifest": MANIFEST,
        "train_config": cfg.to_dict(),
        "train_fingerprint": d.fingerprint(),
    }
    save_checkpoint(ckpt, model, extra)
    history.write_csv(csv_path)
    _write_json(
        out / MANIFEST,
        {
            "command": ["proml", *args.argv],
            "config": {"train": cfg.to_dict(), "model": model.shape_config()},
            "seeds": {"init": cfg.seed, "episodes": cfg.seed},
            "datasets": {"train": {"path": str(args.train), "sha256": d.fingerprint()}},
            "artifacts": {"checkpoint": ckpt.name, "log": csv_path.name},
            "timestamps": {"started": started, "finished": _now()},
        },
    )
    final = float(np.mean(history.losses[-50:])) if history.rows else float("nan")
    print(f"trained {len(history.rows)} steps, final loss {final:.4f}; checkpoint {ckpt}")
    return 0


def _check_model_flags(args, header: dict) -> None:
    model = header["model"]
    for k in ("vocab_size", "hidden", "layers", "dim"):
        want = getattr(args, k)
        if want is not None and want != model[k]:
            raise DataError(f"checkpoint/config mismatch: {k}={model[k]} in checkpoint, {want} requested")
    extra = {k: v for k, v in header.items() if k not in ("model", "fingerprint", "tensors", "dtype")}
    if config_fingerprint({"model": model, **extra}) != header.get("fingerprint"):
        raise DataError("checkpoint fingerprint does not match its header")


def cmd_eval(args) -> int:
    try:
        model, header = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {e}") from None
    _check_model_flags(args, header)
    d = _load_corpus(args.test, args.annotations, args.column)
    if args.protocol == "episode":
        eps = sample_episodes(d, SamplerConfig(N=args.N, K=args.K, seed=args.seed), args.episodes)
        report = evaluate_episodes(model, eps, args.aggregate, jobs=args.jobs)
        setup = {"N": args.N, "K": args.K, "episodes": args.episodes, "seed": args.seed}
    else:
        seeds = low_resource_seeds(args.seed, args.runs)
        report = evaluate_low_resource(model, d, args.K, args.runs, seeds, args.aggregate, jobs=args.jobs)
        eps = None
        setup = {"K": args.K, "runs": args.runs, "seeds": seeds}
    body = report.to_dict()
    body.update(
        {
            "setup": setup,
            "checkpoint": {"fingerprint": header["fingerprint"], "model": header["model"]},
            "test_sha256": d.fingerprint(),
        }
    )
    text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    if args.export_embeddings:
        ep = eps[0] if eps else sample_episodes(d, SamplerConfig(N=min(5, len(d.label_set.entity_labels)), K=args.K, seed=args.seed), 1)[0]
        export_embeddings(model, ep, args.export_embeddings, args.o_fraction, np.random.default_rng(args.seed))
    print(f"{report.protocol}: mean F1 {report.mean_f1:.4f} +- {report.std_f1:.4f} over {len(report.per_unit_f1)} units")
    return 0


def cmd_sample(args) -> int:
    d = _load_corpus(args.data, args.annotations, args.column)
    cfg = SamplerConfig(N=args.N, K=args.K, seed=args.seed)
    eps = sample_episodes(d, cfg, args.count)
    verdicts = []
    for ep in eps:
        ok, why = check_episode(ep, args.K)
        verdicts.append({"check": {"valid": ok, "reason": why}})
    write_episodes(args.out, eps, verdicts)
    bad = sum(not v["check"]["valid"] for v in verdicts)
    print(f"wrote {len(eps)} episodes to {args.out} ({bad} failed the checker)")
    return 0 if bad == 0 else 2


def _train_eval(train_set, eval_eps, cfg: TrainConfig, mcfg: dict) -> float:
    model = ModelParams.init(cfg.seed, **mcfg)
    model, _ = train(train_set, cfg, model)
    return evaluate_episodes(model, eval_eps).mean_f1


def ablation_grid(train_set, test_set, variants, rhos, seeds, cfg: TrainConfig, mcfg: dict, episodes: int, eval_seed: int):
    """Rows ``(variant, rho, per-seed F1 list)``; rho-free variants are trained once per seed."""
    eval_eps = sample_episodes(test_set, SamplerConfig(N=cfg.N, K=cfg.K, seed=eval_seed), episodes)
    cache: dict[tuple, list[float]] = {}
    rows = []
    for v in variants:
        for rho in rhos:
            key = (v, None if v in RHO_FREE else rho)
            if key not in cache:
                scores = []
                for s in seeds:
                    c = TrainConfig.from_dict({**cfg.to_dict(), "seed": s})
                    scores.append(_train_eval(train_set, eval_eps, c, {**mcfg, "variant": v, "rho": rho}))
                    log.info("%s rho=%s seed=%d F1 %.4f", v, key[1], s, scores[-1])
                cache[key] = scores
            rows.append((v, rho, cache[key]))
    return rows


def format_grid(rows, rhos) -> str:
    """Variant rows by rho columns, ``mean±std`` in F1 points."""
    variants = list(dict.fromkeys(r[0] for r in rows))
    cell = {(v, rho): s for v, rho, s in rows}
    head = "| variant | " + " | ".join(f"rho={r:g}" for r in rhos) + " |"
    lines = [head, "|" + "---|" * (len(rhos) + 1)]
    for v in variants:
        vals = [cell[(v, r)] for r in rhos]
        lines.append(f"| {v} | " + " | ".join(f"{100 * np.mean(s):.2f}±{100 * np.std(s):.2f}" for s in vals) + " |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    seeds = args.seeds
    if len(set(seeds)) < 3:
        raise UsageError("ablation needs at least 3 distinct seeds")
    if any(not 0.0 < r < 1.0 for r in args.rho_grid):
        raise UsageError("every rho must lie in (0, 1)")
    cfg = _train_config(args)
    mcfg = _model_defaults(args)
    tr = _load_corpus(args.train, args.annotations, args.column)
    te = _load_corpus(args.test, args.annotations, args.column)
    rows = ablation_grid(tr, te, args.variants, args.rho_grid, seeds, cfg, mcfg, args.episodes, args.eval_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.tsv", "w", encoding="utf-8") as fh:
        fh.write("variant\trho\tmean_f1\tstd_f1\tn_seeds\tper_seed_f1\n")
        for v, rho, s in rows:
            per_seed = ",".join(repr(float(x)) for x in s)
            fh.write(f"{v}\t{rho:g}\t{float(np.mean(s))!r}\t{float(np.std(s))!r}\t{len(s)}\t{per_seed}\n")
    table = format_grid(rows, args.rho_grid)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    _write_json(
        out / MANIFEST,
        {
            "command": ["proml", *args.argv],
            "config": {"train": cfg.to_dict(), "model": mcfg, "variants": args.variants, "rho_grid": args.rho_grid},
            "seeds": {"train": seeds, "eval": args.eval_seed},
            "datasets": {
                "train": {"path": str(args.train), "sha256": tr.fingerprint()},
                "test": {"path": str(args.test), "sha256": te.fingerprint()},
            },
            "artifacts": {"table": "ablation.md", "cells": "ablation.tsv"},
            "timestamps": {"finished": _now()},
        },
    )
    print(table, end="")
    return 0


# -- parser --------------------------------------------------------------------------


def build_parser() -> ArgParser:
    parser = ArgParser(prog="proml", description="Few-shot NER: metric learning over prompted token representations.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    p = sub.add_parser("synth", help="write a synthetic corpus with type-correlated cues")
    p.add_argument("--out", required=True)
    p.add_argument("--sentences", type=int, default=2000)
    p.add_argument("--test", type=int, default=600, help="held-out sentences")
    p.add_argument("--types", type=int, default=8)
    p.add_argument("--names", type=int, default=40, help="distinct names per type")
    p.add_argument("--novel-frac", dest="novel_frac", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="meta-train on episodes sampled from a CoNLL file")
    _add_corpus_flags(p, "train")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file of TrainConfig (and model) fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--log-every", dest="log_every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    _add_corpus_flags(p, "test")
    _add_model_flags(p, with_variant=False)
    p.add_argument("--protocol", choices=("episode", "low-resource"), default="episode")
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--episodes", type=int, default=5000)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--aggregate", choices=("per-unit", "pooled"), default="per-unit")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--export-embeddings", dest="export_embeddings", default=None, help="TSV path")
    p.add_argument("--o-fraction", dest="o_fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="write sampled episodes as JSON lines")
    _add_corpus_flags(p, "data")
    p.add_argument("--N", type=int, default=5)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ablate", help="train and evaluate a variant x rho grid")
    _add_corpus_flags(p, "train")
    p.add_argument("--test", required=True)
    _add_model_flags(p, with_variant=False)
    _add_train_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--rho-grid", dest="rho_grid", nargs="+", type=float, default=[0.3, 0.5, 0.7])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--N", type=int, default=None)
    p.add_argument("--K", type=int, default=None)
    p.add_argument("--episodes", type=int, default=200)
    p.add_argument("--eval-seed", dest="eval_seed", type=int, default=12345)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate, seed=None, variant=None, rho=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except ProMLError as e:
        return _fail(e, e.exit_code)
    except KeyError as e:
        return _fail(e, 2)
    except ValueError as e:
        # bad values that slipped past argparse, e.g. N larger than the label inventory
        return _fail(e, 1)
    except ArithmeticError as e:
        return _fail(e, 3)


def _fail(e: BaseException, code: int) -> int:
    msg = " ".join(str(e).split()) or type(e).__name__
    print(f"proml: error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
