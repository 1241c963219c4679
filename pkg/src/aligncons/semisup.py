"""Online self-training with Align-Consistency.

Each optimizer step decodes pseudo-labels for an unlabeled batch from the
clean features with the current parameters, treats them as constants, and
minimises the labeled-batch loss plus ``gamma`` times the unlabeled-batch loss.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .alignlab import collapse
from .config import RunConfig
from .evalkit import ZERO_REPORT, edit_distance
from .model import ModelConfig, Params, forward_all_steps, load_checkpoint, pad_batch, save_checkpoint
from .objectives import LossReport, semi_total_loss
from .synthdata import Corpus, Utterance
from .training import SGD, MetricsLog, make_optimizer, TrainResult, _resume, branch_loss, checkpoint_path, epoch_batches, finalize

logger = logging.getLogger(__name__)


class PseudoLabelSource(enum.Enum):
    BASE_CTC = "ctc"
    LAST_STEP = "last-step"

    def step(self, cfg: ModelConfig) -> int:
        if self is PseudoLabelSource.BASE_CTC:
            return 0
        if cfg.refine_steps < 1:
            raise ValueError("last-step pseudo-labels need at least one refinement step")
        return cfg.refine_steps


def generate_pseudo_labels(params: Params, cfg: ModelConfig, features: Sequence[np.ndarray], source: PseudoLabelSource) -> list[np.ndarray]:
    """Greedy transcripts of the clean ``features`` at the source's step. No graph is built."""
    step = source.step(cfg)
    x, lengths = pad_batch(list(features))
    with ad.no_grad():
        out = forward_all_steps(params, cfg, x, lengths, steps=step)
    return [collapse(out.alignment(step, b)) for b in range(len(features))]


def generate_pseudo_label(x_clean: np.ndarray, params: Params, cfg: ModelConfig, source: PseudoLabelSource) -> np.ndarray:
    return generate_pseudo_labels(params, cfg, [np.asarray(x_clean)], source)[0]


@dataclass
class SelfTrainStep:
    report: LossReport
    labeled: LossReport | None
    unlabeled: LossReport | None
    pseudo_labels: list[np.ndarray]
    grad_norm: float


def self_train_step(
    params: Params,
    cfg: ModelConfig,
    labeled: Sequence[Utterance],
    unlabeled: Sequence[Utterance],
    run: RunConfig,
    opt: SGD,
    epoch: int,
) -> SelfTrainStep:
    """One update on ``L_lab + gamma * L_unlab``.

    Pseudo-labels come from the clean unlabeled features before any
    augmentation. Either batch may be empty.
    """
    weights = run.loss_weights()
    policy = run.augment_policy()
    use_unlabeled = bool(unlabeled) and run.gamma > 0
    pls = generate_pseudo_labels(params, cfg, [u.features for u in unlabeled], PseudoLabelSource(run.pl_source)) if use_unlabeled else []

    lab = unl = None
    if labeled:
        lab = branch_loss(params, cfg, labeled, [u.transcript for u in labeled], weights, policy, run.seed, epoch, run.loss_cap)
    if use_unlabeled:
        unl = branch_loss(params, cfg, unlabeled, pls, weights.for_unlabeled(), policy, run.seed, epoch, run.loss_cap)
    total = semi_total_loss([lab.total] if lab else [], [unl.total] if unl else [], run.gamma)

    components, weights_out = {}, {}
    for prefix, rep, scale in (("lab_", lab, 1.0), ("unl_", unl, run.gamma)):
        if rep is None:
            continue
        components.update({prefix + k: v for k, v in rep.components.items()})
        weights_out.update({prefix + k: scale * w for k, w in rep.weights.items()})
    report = LossReport(
        total,
        components,
        weights_out,
        flagged=(lab.flagged if lab else 0) + (unl.flagged if unl else 0),
        num_utterances=len(labeled) + len(unlabeled),
        extras={"pl_mean_len": float(np.mean([len(p) for p in pls])) if pls else 0.0},
    )
    opt.zero_grad()
    if total.requires_grad:
        total.backward()
    norm = opt.step()
    return SelfTrainStep(report, lab, unl, pls, norm)


class _LabeledCycle:
    """Endless labeled batches: a fresh deterministic shuffle each pass."""

    def __init__(self, n: int, batch_size: int, seed: int, epoch: int):
        self.n, self.batch_size, self.seed, self.epoch = n, batch_size, seed, epoch
        self.pass_no = 0
        self.queue: list[np.ndarray] = []

    def next(self) -> np.ndarray:
        if not self.queue:
            self.pass_no += 1
            self.queue = epoch_batches(self.n, self.batch_size, self.seed, self.epoch, stream=self.pass_no)
        return self.queue.pop(0)


def run_self_training(
    run: RunConfig,
    labeled: Corpus,
    unlabeled: Corpus,
    out_dir=None,
    dev: Corpus | None = None,
    hidden: dict[str, np.ndarray] | None = None,
    init_checkpoint=None,
    resume_from=None,
) -> TrainResult:
    """Self-training from a supervised checkpoint.

    An epoch is one pass over the unlabeled pool; every step pairs one
    unlabeled batch with the next labeled batch. With an empty unlabeled pool
    an epoch is one pass over the labeled pool (plain fine-tuning). When
    ``hidden`` transcripts are given, the pseudo-label toy-WER of each epoch is
    logged.
    """
    if len(labeled) == 0 and len(unlabeled) == 0:
        raise ValueError("both pools are empty")
    if not labeled.labeled:
        raise ValueError("labeled pool contains utterances without transcripts")
    if any(u.transcript is not None for u in unlabeled):
        raise ValueError("unlabeled pool must not carry transcripts")
    init_checkpoint = init_checkpoint or run.init_checkpoint
    if not init_checkpoint:
        raise ValueError("self-training needs an init checkpoint")
    params, cfg, _, _ = load_checkpoint(init_checkpoint)
    out_dir = Path(out_dir or run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    run.write_snapshot(out_dir / "config.yaml")

    if len(unlabeled):
        n_steps = math.ceil(len(unlabeled) / run.unlabeled_batch_size)
    else:
        n_steps = math.ceil(len(labeled) / run.batch_size)
    opt = make_optimizer(run, params, run.epochs * n_steps)
    start, records = (0, []) if resume_from is None else _resume(resume_from, opt, params, out_dir)
    log = MetricsLog(out_dir / "metrics.jsonl", records)
    checkpoints = [checkpoint_path(out_dir, e) for e in range(1, start + 1) if checkpoint_path(out_dir, e).exists()]

    for epoch in range(start + 1, run.epochs + 1):
        cycle = _LabeledCycle(len(labeled), run.batch_size, run.seed, epoch) if len(labeled) else None
        pl_report = ZERO_REPORT
        losses = []
        if len(unlabeled):
            plan = [(cycle.next() if cycle else [], idx) for idx in epoch_batches(len(unlabeled), run.unlabeled_batch_size, run.seed, epoch, stream=100)]
        else:
            plan = [(idx, []) for idx in epoch_batches(len(labeled), run.batch_size, run.seed, epoch)]
        for i, (lab_idx, unl_idx) in enumerate(plan):
            lab_utts = [labeled[j] for j in lab_idx]
            unl_utts = [unlabeled[j] for j in unl_idx]
            res = self_train_step(params, cfg, lab_utts, unl_utts, run, opt, epoch)
            losses.append(float(res.report.total.data))
            if hidden:
                for u, pl in zip(unl_utts, res.pseudo_labels):
                    pl_report = pl_report + edit_distance(hidden[u.id], pl)
            log.add(kind="step", epoch=epoch, step=opt.step_count, batch=i, lr=opt.current_lr(), grad_norm=res.grad_norm, **res.report.as_record())
        path = checkpoint_path(out_dir, epoch)
        save_checkpoint(path, params, cfg, meta={"seed": run.seed, "epoch": epoch, "step": opt.step_count}, extra=opt.state())
        checkpoints.append(path)
        epoch_rec = {"kind": "epoch", "epoch": epoch, "mean_loss": float(np.mean(losses))}
        if hidden and pl_report.reference_length:
            epoch_rec["pl_wer"] = pl_report.rate
        log.add(**epoch_rec)
        log.flush()
        logger.info("self-train epoch %d: mean loss %.4f", epoch, epoch_rec["mean_loss"])
    return finalize(out_dir, cfg, checkpoints, run, log, dev, {"seed": run.seed, "epoch": run.epochs, "init": str(init_checkpoint)})
