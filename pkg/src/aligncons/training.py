"""Optimizer, batching and the supervised Align-Consistency training loop."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentPolicy, augment_pair
from .config import RunConfig
from .evalkit import average_checkpoints, evaluate_corpus
from .model import ModelConfig, Params, StepOutputs, forward_all_steps, init_params, load_checkpoint, pad_batch, save_checkpoint
from .objectives import LossReport, LossWeights, align_consistency_loss
from .synthdata import Corpus, Utterance

logger = logging.getLogger(__name__)


class SGD:
    """SGD with momentum, global-norm clipping and a linear learning-rate decay
    from ``lr`` to ``lr * final_scale`` over ``total_steps``."""

    def __init__(self, params: Params, lr: float, momentum: float = 0.9, total_steps: int = 1, final_scale: float = 1.0, clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.total_steps = max(int(total_steps), 1)
        self.final_scale = final_scale
        self.clip_norm = clip_norm
        self.velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.step_count = 0

    def current_lr(self) -> float:
        frac = min(self.step_count / self.total_steps, 1.0)
        return self.lr * (1.0 - (1.0 - self.final_scale) * frac)

    def zero_grad(self) -> None:
        ad.zero_grads(self.params.values())

    def step(self) -> float:
        """Apply one update; returns the pre-clipping gradient norm."""
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params.values()))
        factor = 1.0
        if self.clip_norm and norm > self.clip_norm:
            factor = self.clip_norm / norm
        lr = self.current_lr()
        for name, p in self.params.items():
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad * factor
            p.data -= lr * v
        self.step_count += 1
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {f"velocity/{k}": v for k, v in self.velocity.items()}
        out["step_count"] = np.array([self.step_count], dtype=np.float64)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k in self.velocity:
            self.velocity[k] = state[f"velocity/{k}"].copy()
        self.step_count = int(state["step_count"][0])


def make_optimizer(run: RunConfig, params: Params, total_steps: int) -> SGD:
    return SGD(params, run.lr, run.momentum, total_steps, run.lr_final_scale, run.clip_norm)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int, stream: int = 0) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch, stream, 5]).permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def forward_branches(params: Params, cfg: ModelConfig, x1: np.ndarray, x2: np.ndarray, lengths, steps: int) -> tuple[StepOutputs, StepOutputs]:
    """Run both augmented branches in one batched pass and split the outputs."""
    B = x1.shape[0]
    both = forward_all_steps(params, cfg, np.concatenate([x1, x2]), np.concatenate([lengths, lengths]), steps=steps)
    halves = []
    for sl in (slice(0, B), slice(B, 2 * B)):
        halves.append(
            StepOutputs([p[sl] for p in both.posteriors], [a[sl] for a in both.alignments], both.lengths[sl])
        )
    return halves[0], halves[1]


def branch_loss(
    params: Params,
    cfg: ModelConfig,
    utts: Sequence[Utterance],
    targets: Sequence,
    weights: LossWeights,
    policy: AugmentPolicy,
    seed: int,
    epoch: int,
    cap: float,
) -> LossReport:
    """Augment every utterance twice and build the Align-Consistency loss."""
    pairs = [augment_pair(u.features, policy, (seed, epoch, u.id)) for u in utts]
    x1, lengths = pad_batch([a for a, _ in pairs])
    x2, _ = pad_batch([b for _, b in pairs])
    steps = cfg.refine_steps if weights.uses_refinement else 0
    b1, b2 = forward_branches(params, cfg, x1, x2, lengths, steps)
    return align_consistency_loss(b1, b2, targets, weights, cap=cap)


def supervised_step(params: Params, cfg: ModelConfig, utts: Sequence[Utterance], run: RunConfig, opt: SGD, epoch: int) -> tuple[LossReport, float]:
    report = branch_loss(
        params, cfg, utts, [u.transcript for u in utts], run.loss_weights(), run.augment_policy(), run.seed, epoch, run.loss_cap
    )
    opt.zero_grad()
    report.total.backward()
    norm = opt.step()
    return report, norm


# -- run bookkeeping ---------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class MetricsLog:
    """One JSON record per line; the file is rewritten atomically on flush."""

    def __init__(self, path, records: list[dict] | None = None):
        self.path = Path(path)
        self.records = list(records or [])

    def add(self, **record) -> None:
        self.records.append(record)

    def flush(self) -> None:
        atomic_write_text(self.path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records))

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"epoch_{epoch:03d}.npz"


@dataclass
class TrainResult:
    out_dir: Path
    final_checkpoint: Path
    checkpoints: list[Path] = field(default_factory=list)
    eval: dict | None = None


def _resume(resume_from, opt: SGD, params: Params, out_dir: Path) -> tuple[int, list[dict]]:
    loaded, _, meta, extra = load_checkpoint(resume_from)
    for k, v in loaded.items():
        params[k].data[...] = v.data
    opt.load_state(extra)
    start = int(meta["epoch"])
    log_path = out_dir / "metrics.jsonl"
    old = MetricsLog.read(log_path) if log_path.exists() else []
    kept = [r for r in old if r.get("epoch", 0) <= start and r.get("kind") != "final"]
    return start, kept


def finalize(out_dir: Path, cfg: ModelConfig, checkpoints: list[Path], run: RunConfig, log: MetricsLog, dev: Corpus | None, meta: dict) -> TrainResult:
    final = out_dir / "final.npz"
    if checkpoints:
        avg, _ = average_checkpoints(checkpoints, k=run.avg_last)
        save_checkpoint(final, avg, cfg, meta={**meta, "averaged": [p.name for p in checkpoints[-run.avg_last :]]})
    result = TrainResult(out_dir, final, checkpoints)
    if dev is not None and checkpoints:
        steps = sorted({0, cfg.refine_steps}) if run.alpha < 1 else [0]
        reports = evaluate_corpus(dev, avg, cfg, steps)
        result.eval = {str(s): r.as_dict() for s, r in reports.items()}
        log.add(kind="final", **{f"wer_s{s}": r.rate for s, r in reports.items()})
        atomic_write_text(out_dir / "eval.json", json.dumps(result.eval, indent=2, sort_keys=True) + "\n")
    log.flush()
    return result


def train_supervised(
    run: RunConfig,
    train: Corpus,
    out_dir=None,
    dev: Corpus | None = None,
    init: Params | None = None,
    resume_from=None,
) -> TrainResult:
    """Supervised Align-Consistency training.

    Writes ``checkpoints/epoch_NNN.npz`` after every epoch, ``metrics.jsonl``
    (one record per step, plus per-epoch and final records), ``config.yaml`` and
    ``final.npz`` (average of the last ``avg_last`` epochs).
    """
    if len(train) == 0 or not train.labeled:
        raise ValueError("supervised training needs a non-empty labeled corpus")
    out_dir = Path(out_dir or run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.write_snapshot(out_dir / "config.yaml")
    cfg = run.model_config(train.vocab_size, train.feat_dim)
    params = init if init is not None else init_params(cfg)
    n_batches = math.ceil(len(train) / run.batch_size)
    opt = make_optimizer(run, params, run.epochs * n_batches)
    start, records = (0, []) if resume_from is None else _resume(resume_from, opt, params, out_dir)
    log = MetricsLog(out_dir / "metrics.jsonl", records)
    checkpoints = [checkpoint_path(out_dir, e) for e in range(1, start + 1) if checkpoint_path(out_dir, e).exists()]

    for epoch in range(start + 1, run.epochs + 1):
        losses = []
        for i, idx in enumerate(epoch_batches(len(train), run.batch_size, run.seed, epoch)):
            utts = [train[j] for j in idx]
            report, norm = supervised_step(params, cfg, utts, run, opt, epoch)
            losses.append(float(report.total.data))
            log.add(kind="step", epoch=epoch, step=opt.step_count, batch=i, lr=opt.current_lr(), grad_norm=norm, **report.as_record())
        path = checkpoint_path(out_dir, epoch)
        save_checkpoint(path, params, cfg, meta={"seed": run.seed, "epoch": epoch, "step": opt.step_count}, extra=opt.state())
        checkpoints.append(path)
        log.add(kind="epoch", epoch=epoch, mean_loss=float(np.mean(losses)))
        log.flush()
        logger.info("epoch %d: mean loss %.4f", epoch, np.mean(losses))
    return finalize(out_dir, cfg, checkpoints, run, log, dev, {"seed": run.seed, "epoch": run.epochs})
