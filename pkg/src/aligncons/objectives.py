"""Training objectives: non-AR CTC loss, Align-Consistency loss, semi-supervised total.

Every component is reduced to a mean over utterances before weighting, so the
loss weights mean the same thing at any batch size. Utterances whose target is
unreachable in the available frames are left out of the CTC means.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .consistency import cr_terms
from .ctc import DEFAULT_LOSS_CAP, ctc_nll
from .model import StepOutputs, frame_mask


@dataclass(frozen=True)
class LossWeights:
    """``alpha`` mixes CTC vs refinement; ``lambda0``/``lambda1`` weight CR on
    step 0 / refinement steps; ``gamma`` weights the unlabeled pool.
    ``lambda0_u``/``lambda1_u`` apply to unlabeled batches and default to the
    supervised values.
    """

    alpha: float = 0.3
    lambda0: float = 0.2
    lambda1: float = 0.2
    gamma: float = 1.0
    lambda0_u: float | None = None
    lambda1_u: float | None = None

    def __post_init__(self):
        vals = [self.alpha, self.lambda0, self.lambda1, self.gamma, self.lambda0_u, self.lambda1_u]
        if any(v is not None and v < 0 for v in vals):
            raise ValueError("loss weights must be >= 0")
        if self.alpha > 1:
            raise ValueError("alpha must be <= 1")

    @property
    def uses_refinement(self) -> bool:
        return self.alpha < 1.0

    def for_unlabeled(self) -> "LossWeights":
        return replace(
            self,
            lambda0=self.lambda0 if self.lambda0_u is None else self.lambda0_u,
            lambda1=self.lambda1 if self.lambda1_u is None else self.lambda1_u,
        )


@dataclass
class LossReport:
    """``total`` lives on the tape; ``components`` are detached batch means and
    ``weights`` the coefficient each one enters ``total`` with."""

    total: ad.Value
    components: dict[str, float]
    weights: dict[str, float]
    flagged: int = 0
    num_utterances: int = 0
    extras: dict[str, float] = field(default_factory=dict)

    def recompose(self) -> float:
        return float(sum(self.weights[k] * self.components[k] for k in self.components))

    def as_record(self) -> dict:
        rec = {"loss": float(self.total.data), **self.components, "flagged": self.flagged}
        rec.update(self.extras)
        return rec


def masked_mean(values: ad.Value, keep) -> ad.Value:
    """Mean of ``values`` over entries where ``keep`` is true (zero if none)."""
    keep = np.asarray(keep, dtype=np.float64)
    n = keep.sum()
    if n == 0:
        return ad.Value(0.0)
    return ad.scale(ad.sum_(values * ad.Value(keep)), 1.0 / n)


def step_ctc_losses(outputs: StepOutputs, targets: Sequence, cap: float = DEFAULT_LOSS_CAP):
    """Per-step batch-mean CTC losses ``[L_0, ..., L_S]`` and the unreachable flags."""
    losses, flags = [], None
    for p in outputs.posteriors:
        per_utt, f = ctc_nll(p, targets, outputs.lengths, cap=cap)
        flags = f if flags is None else flags | f
        losses.append(per_utt)
    return [masked_mean(l, ~flags) for l in losses], flags


def nar_loss(outputs: StepOutputs, targets: Sequence, alpha: float, S: int | None = None, cap: float = DEFAULT_LOSS_CAP) -> ad.Value:
    """``alpha * L_ctc + (1 - alpha) * mean_s L_s`` with each term a batch-mean CTC loss."""
    S = outputs.num_steps if S is None else S
    if alpha >= 1.0:
        per_utt, flags = ctc_nll(outputs.posteriors[0], targets, outputs.lengths, cap=cap)
        return masked_mean(per_utt, ~flags)
    if S < 1 or S > outputs.num_steps:
        raise ValueError(f"S={S} but outputs hold {outputs.num_steps} refinement steps")
    trimmed = StepOutputs(outputs.posteriors[: S + 1], outputs.alignments[: S + 1], outputs.lengths)
    losses, _ = step_ctc_losses(trimmed, targets, cap)
    refine = losses[1]
    for l in losses[2:]:
        refine = refine + l
    return ad.scale(losses[0], alpha) + ad.scale(refine, (1.0 - alpha) / S)


def align_consistency_loss(
    branch1: StepOutputs,
    branch2: StepOutputs,
    targets: Sequence,
    w: LossWeights,
    cap: float = DEFAULT_LOSS_CAP,
) -> LossReport:
    """``1/2 (L_nar(x1) + L_nar(x2)) + lambda0 L_cr^0 + lambda1 mean_s L_cr^s``.

    With ``alpha == 1`` only step 0 is used (plain CR-CTC) and any refinement
    posteriors in the branches are ignored.
    """
    S = branch1.num_steps if w.uses_refinement else 0
    if w.uses_refinement and S < 1:
        raise ValueError("alpha < 1 needs at least one refinement step in the branch outputs")
    if branch2.num_steps < S:
        raise ValueError("branches carry different numbers of steps")
    for s in range(S + 1):
        if branch1.posteriors[s].shape != branch2.posteriors[s].shape:
            raise ad.ShapeError(f"step {s}: {branch1.posteriors[s].shape} vs {branch2.posteriors[s].shape}")
    if not np.array_equal(branch1.lengths, branch2.lengths):
        raise ad.ShapeError("branches have different frame counts")

    B = len(targets)
    lengths = branch1.lengths
    fmask = frame_mask(lengths, branch1.posteriors[0].shape[1])
    ctc1, flags1 = step_ctc_losses(_first(branch1, S), targets, cap)
    ctc2, flags2 = step_ctc_losses(_first(branch2, S), targets, cap)
    flags = flags1 | flags2
    all_keep = np.ones(B, dtype=bool)
    cr = [masked_mean(cr_terms(branch1.posteriors[s], branch2.posteriors[s], fmask), all_keep) for s in range(S + 1)]

    values: dict[str, ad.Value] = {"ctc_branch1": ctc1[0], "ctc_branch2": ctc2[0]}
    weights = {"ctc_branch1": 0.5 * w.alpha, "ctc_branch2": 0.5 * w.alpha}
    total = ad.scale(ctc1[0] + ctc2[0], 0.5 * w.alpha)
    if S:
        refine_sum = None
        for s in range(1, S + 1):
            term = ad.scale(ctc1[s] + ctc2[s], 0.5)
            values[f"refine_s{s}"] = term
            weights[f"refine_s{s}"] = (1.0 - w.alpha) / S
            refine_sum = term if refine_sum is None else refine_sum + term
        total = total + ad.scale(refine_sum, (1.0 - w.alpha) / S)
    values["cr_s0"] = cr[0]
    weights["cr_s0"] = w.lambda0
    total = total + ad.scale(cr[0], w.lambda0)
    if S:
        cr_sum = None
        for s in range(1, S + 1):
            values[f"cr_s{s}"] = cr[s]
            weights[f"cr_s{s}"] = w.lambda1 / S
            cr_sum = cr[s] if cr_sum is None else cr_sum + cr[s]
        total = total + ad.scale(cr_sum, w.lambda1 / S)
    components = {k: float(v.data) for k, v in values.items()}
    return LossReport(total, components, weights, flagged=int(flags.sum()), num_utterances=B)


def _first(outputs: StepOutputs, S: int) -> StepOutputs:
    return StepOutputs(outputs.posteriors[: S + 1], outputs.alignments[: S + 1], outputs.lengths)


def semi_total_loss(labeled: Sequence[ad.Value], unlabeled: Sequence[ad.Value], gamma: float) -> ad.Value:
    """Mean of the labeled losses plus ``gamma`` times the mean of the unlabeled ones."""
    if not labeled and not unlabeled:
        raise ValueError("semi_total_loss needs at least one labeled or unlabeled loss")
    total = None
    if labeled:
        total = ad.scale(_sum(labeled), 1.0 / len(labeled))
    if unlabeled and gamma > 0:
        u = ad.scale(_sum(unlabeled), gamma / len(unlabeled))
        total = u if total is None else total + u
    return total if total is not None else ad.Value(0.0)


def _sum(values: Sequence[ad.Value]) -> ad.Value:
    out = ad.as_value(values[0])
    for v in values[1:]:
        out = out + v
    return out
