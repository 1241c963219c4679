"""Error rates, per-step corpus evaluation and checkpoint averaging."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .alignlab import collapse
from .model import ModelConfig, Params, forward_all_steps, load_checkpoint, pad_batch


class IncompatibleCheckpointsError(ValueError):
    pass


@dataclass(frozen=True)
class ErrorRateReport:
    substitutions: int
    deletions: int
    insertions: int
    reference_length: int
    empty_reference: bool = False

    @property
    def errors(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    @property
    def rate(self) -> float:
        return self.errors / max(self.reference_length, 1)

    def __add__(self, other: "ErrorRateReport") -> "ErrorRateReport":
        return ErrorRateReport(
            self.substitutions + other.substitutions,
            self.deletions + other.deletions,
            self.insertions + other.insertions,
            self.reference_length + other.reference_length,
            self.empty_reference or other.empty_reference,
        )

    def as_dict(self) -> dict:
        return {
            "substitutions": self.substitutions,
            "deletions": self.deletions,
            "insertions": self.insertions,
            "reference_length": self.reference_length,
            "errors": self.errors,
            "rate": self.rate,
        }


ZERO_REPORT = ErrorRateReport(0, 0, 0, 0)


def edit_distance(ref: Sequence, hyp: Sequence) -> ErrorRateReport:
    """Levenshtein alignment of ``hyp`` against ``ref`` with S/D/I counts.

    When several minimal edit scripts exist, the backtrace prefers a
    substitution (or match), then an insertion, then a deletion.
    An empty reference gives ``rate = len(hyp)`` and sets ``empty_reference``.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]), d[i, j - 1] + 1, d[i - 1, j] + 1)
    i, j, sub, ins, dele = n, m, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j > 0 and d[i, j] == d[i, j - 1] + 1:
            ins += 1
            j -= 1
        else:
            dele += 1
            i -= 1
    return ErrorRateReport(int(sub), dele, ins, n, empty_reference=n == 0)


def decode_corpus(params: Params, cfg: ModelConfig, features: list[np.ndarray], steps: Sequence[int], batch_size: int = 64):
    """Greedy transcripts for every utterance at each requested step.

    Utterances are batched in length order so the result does not depend on
    the order of ``features``. Returns ``{step: [LabelSeq, ...]}`` in input order.
    """
    max_step = max(steps)
    order = sorted(range(len(features)), key=lambda i: (features[i].shape[0], i))
    out = {s: [None] * len(features) for s in steps}
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x, lengths = pad_batch([features[i] for i in idx])
        res = forward_all_steps(params, cfg, x, lengths, steps=max_step)
        for s in steps:
            for b, i in enumerate(idx):
                out[s][i] = collapse(res.alignment(s, b))
    return out


def evaluate_corpus(corpus, params: Params, cfg: ModelConfig, steps_to_report: Sequence[int] = (0, 2), batch_size: int = 64) -> dict[int, ErrorRateReport]:
    """Pooled toy-WER per step: total edits over total reference tokens."""
    if not corpus.labeled:
        raise ValueError("evaluate_corpus needs a labeled corpus")
    steps = list(dict.fromkeys(int(s) for s in steps_to_report))
    hyps = decode_corpus(params, cfg, [u.features for u in corpus], steps, batch_size)
    reports = {}
    for s in steps:
        total = ZERO_REPORT
        for u, h in zip(corpus, hyps[s]):
            total = total + edit_distance(u.transcript, h)
        reports[s] = total
    return reports


def average_params(param_sets: Sequence[Params]) -> Params:
    if not param_sets:
        raise ValueError("nothing to average")
    names = set(param_sets[0])
    for p in param_sets[1:]:
        if set(p) != names or any(p[k].shape != param_sets[0][k].shape for k in names):
            raise IncompatibleCheckpointsError("parameter sets differ in names or shapes")
    out = {}
    for name in param_sets[0]:
        # incremental mean: exact when all inputs are equal, and for {x, -x}
        acc = param_sets[0][name].data.copy()
        for i, p in enumerate(param_sets[1:], start=2):
            acc = acc + (p[name].data - acc) / i
        out[name] = ad.Value(acc, requires_grad=True)
    return out


def average_checkpoints(paths: Sequence, k: int | None = 5) -> tuple[Params, ModelConfig]:
    """Arithmetic mean of the parameters in the last ``k`` of ``paths``.

    Summation runs in sorted-path order, so the result does not depend on the
    order of ``paths``.
    """
    paths = [Path(p) for p in paths]
    if k is not None:
        paths = paths[-k:]
    if not paths:
        raise ValueError("no checkpoints to average")
    loaded = [load_checkpoint(p) for p in sorted(paths, key=str)]
    cfg = loaded[0][1]
    for _, other, _, _ in loaded[1:]:
        if other != cfg:
            raise IncompatibleCheckpointsError(f"model configs differ: {cfg} vs {other}")
    return average_params([p for p, _, _, _ in loaded]), cfg
