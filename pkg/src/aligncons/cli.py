"""``aligncons`` command line: gen-data, train, selftrain, eval, decode."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import ConfigError, load_config
from .evalkit import decode_corpus, evaluate_corpus
from .model import CheckpointError, load_checkpoint
from .synthdata import CorpusFormatError, GenSpec, generate_corpus, read_corpus, read_hidden_transcripts, split_pools, write_corpus
from .training import atomic_write_text

log = logging.getLogger("aligncons")

# flag name -> config key
_OVERRIDES = {
    "alpha": "alpha",
    "lambda0": "lambda0",
    "lambda1": "lambda1",
    "unsup_lambda0": "unsup_lambda0",
    "unsup_lambda1": "unsup_lambda1",
    "gamma": "gamma",
    "pl_source": "pl_source",
    "seed": "seed",
    "epochs": "epochs",
    "avg_last": "avg_last",
    "lr": "lr",
    "out_dir": "out_dir",
    "init_checkpoint": "init_checkpoint",
    "train_corpus": "train_corpus",
    "unlabeled_corpus": "unlabeled_corpus",
    "dev_corpus": "dev_corpus",
}


class CommandError(RuntimeError):
    pass


def _parse_steps(text: str) -> list[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad step list {text!r}") from exc
    if not steps or min(steps) < 0:
        raise argparse.ArgumentTypeError("steps must be non-negative integers")
    return steps


def _add_run_flags(p: argparse.ArgumentParser, selftrain: bool) -> None:
    p.add_argument("config", help="flat YAML run config")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda0", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--avg-last", type=int, dest="avg_last")
    p.add_argument("--lr", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--train-corpus", dest="train_corpus")
    p.add_argument("--dev-corpus", dest="dev_corpus")
    p.add_argument("--resume", help="checkpoint to resume from")
    if selftrain:
        p.add_argument("--unsup-lambda0", type=float, dest="unsup_lambda0")
        p.add_argument("--unsup-lambda1", type=float, dest="unsup_lambda1")
        p.add_argument("--pl-source", choices=["ctc", "last-step"], dest="pl_source")
        p.add_argument("--init-checkpoint", dest="init_checkpoint")
        p.add_argument("--unlabeled-corpus", dest="unlabeled_corpus")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aligncons", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic corpus from a GenSpec file")
    g.add_argument("spec", help="YAML GenSpec")
    g.add_argument("out", help="output corpus directory")
    g.add_argument("--labeled-fraction", type=float, help="also write labeled/ and unlabeled/ pools")
    g.add_argument("--split-seed", type=int, default=0)

    _add_run_flags(sub.add_parser("train", help="supervised Align-Consistency training"), selftrain=False)
    _add_run_flags(sub.add_parser("selftrain", help="online self-training from a supervised checkpoint"), selftrain=True)

    e = sub.add_parser("eval", help="pooled toy-WER per inference step")
    e.add_argument("checkpoint")
    e.add_argument("corpus")
    e.add_argument("--steps", type=_parse_steps, default=[0, 2])
    e.add_argument("--out", help="write the report here instead of stdout")

    d = sub.add_parser("decode", help="greedy transcripts at one inference step")
    d.add_argument("checkpoint")
    d.add_argument("corpus")
    d.add_argument("--step", type=int, default=2)
    d.add_argument("--out", required=True)
    return parser


def _overrides(args) -> dict:
    return {key: getattr(args, flag) for flag, key in _OVERRIDES.items() if getattr(args, flag, None) is not None}


def _load_corpus(path: str, what: str):
    if not path:
        raise CommandError(f"no {what} corpus configured")
    return read_corpus(path)


def cmd_gen_data(args) -> None:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise CommandError(f"GenSpec file not found: {spec_path}")
    raw = yaml.safe_load(spec_path.read_text()) or {}
    spec = GenSpec.from_dict(raw)
    corpus = generate_corpus(spec)
    out = Path(args.out)
    write_corpus(corpus, out / "all")
    summary = {"utterances": len(corpus), "vocab_size": corpus.vocab_size, "feat_dim": corpus.feat_dim}
    if args.labeled_fraction is not None:
        labeled, unlabeled, hidden = split_pools(corpus, args.labeled_fraction, args.split_seed)
        write_corpus(labeled, out / "labeled")
        write_corpus(unlabeled, out / "unlabeled", hidden=hidden)
        summary.update(labeled=len(labeled), unlabeled=len(unlabeled))
    atomic_write_text(out / "genspec.yaml", yaml.safe_dump(spec.to_dict(), sort_keys=False))
    print(json.dumps(summary))


def cmd_train(args) -> None:
    from .training import train_supervised

    run = load_config(args.config, _overrides(args))
    train = _load_corpus(run.train_corpus, "train")
    dev = read_corpus(run.dev_corpus) if run.dev_corpus else None
    res = train_supervised(run, train, dev=dev, resume_from=args.resume)
    print(json.dumps({"final_checkpoint": str(res.final_checkpoint), "eval": res.eval}))


def cmd_selftrain(args) -> None:
    from .semisup import run_self_training

    run = load_config(args.config, _overrides(args))
    if not run.init_checkpoint or not Path(run.init_checkpoint).exists():
        raise CommandError(f"init checkpoint not found: {run.init_checkpoint or '(unset)'}")
    labeled = _load_corpus(run.train_corpus, "labeled")
    unlabeled = _load_corpus(run.unlabeled_corpus, "unlabeled") if run.unlabeled_corpus else None
    if unlabeled is None:
        from .synthdata import Corpus

        unlabeled = Corpus([], labeled.vocab_size, labeled.feat_dim)
    hidden = read_hidden_transcripts(run.unlabeled_corpus) if run.unlabeled_corpus else {}
    dev = read_corpus(run.dev_corpus) if run.dev_corpus else None
    res = run_self_training(run, labeled, unlabeled, dev=dev, hidden=hidden, resume_from=args.resume)
    print(json.dumps({"final_checkpoint": str(res.final_checkpoint), "eval": res.eval}))


def cmd_eval(args) -> None:
    params, cfg, _, _ = load_checkpoint(args.checkpoint)
    if max(args.steps) > cfg.refine_steps:
        raise CommandError(f"checkpoint has {cfg.refine_steps} refinement steps; cannot report step {max(args.steps)}")
    corpus = read_corpus(args.corpus)
    reports = evaluate_corpus(corpus, params, cfg, args.steps)
    text = json.dumps({str(s): r.as_dict() for s, r in reports.items()}, indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)


def cmd_decode(args) -> None:
    params, cfg, _, _ = load_checkpoint(args.checkpoint)
    if not 0 <= args.step <= cfg.refine_steps:
        raise CommandError(f"step {args.step} outside [0, {cfg.refine_steps}]")
    corpus = read_corpus(args.corpus)
    hyps = decode_corpus(params, cfg, [u.features for u in corpus], [args.step])[args.step]
    lines = [f"{u.id}\t{' '.join(str(int(t)) for t in h)}\n" for u, h in zip(corpus, hyps)]
    atomic_write_text(args.out, "".join(lines))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "selftrain": cmd_selftrain,
    "eval": cmd_eval,
    "decode": cmd_decode,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("ALIGNCONS_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except (CommandError, ConfigError, CorpusFormatError, CheckpointError, FileNotFoundError, KeyError, ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"aligncons {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
