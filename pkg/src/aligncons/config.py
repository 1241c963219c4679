"""Flat run configuration: one key per line in a YAML mapping, CLI flags override."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .augment import AugmentPolicy
from .model import ModelConfig
from .objectives import LossWeights

PL_SOURCES = ("ctc", "last-step")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # corpora
    train_corpus: str = ""
    unlabeled_corpus: str = ""
    dev_corpus: str = ""
    # model
    hidden_dim: int = 48
    embed_dim: int = 16
    encoder_layers: int = 2
    decoder_layers: int = 1
    refine_steps: int = 2
    pool_window: int = 2
    pool_stride: int = 2
    # loss
    alpha: float = 0.3
    lambda0: float = 0.2
    lambda1: float = 0.2
    gamma: float = 1.0
    unsup_lambda0: float | None = None
    unsup_lambda1: float | None = None
    loss_cap: float = 1e4
    # augmentation
    num_time_masks: int = 2
    max_time_mask_len: float = 0.1
    num_feat_masks: int = 2
    max_feat_mask_len: float = 0.25
    mask_value: float = 0.0
    # optimisation
    lr: float = 0.05
    momentum: float = 0.9
    lr_final_scale: float = 0.1
    clip_norm: float = 5.0
    batch_size: int = 32
    unlabeled_batch_size: int = 32
    epochs: int = 20
    avg_last: int = 5
    # self-training
    pl_source: str = "last-step"
    init_checkpoint: str = ""
    # run
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.pl_source not in PL_SOURCES:
            raise ConfigError(f"pl_source must be one of {PL_SOURCES}, got {self.pl_source!r}")
        if self.pl_source == "last-step" and self.refine_steps < 1 and self.alpha < 1:
            raise ConfigError("pl_source=last-step needs refine_steps >= 1")
        if self.batch_size < 1 or self.unlabeled_batch_size < 1 or self.epochs < 0 or self.avg_last < 1:
            raise ConfigError("batch sizes and avg_last must be >= 1, epochs >= 0")
        try:
            self.loss_weights()
            self.augment_policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    # -- views -------------------------------------------------------------

    def model_config(self, vocab_size: int, feat_dim: int) -> ModelConfig:
        return ModelConfig(
            feat_dim=feat_dim,
            hidden_dim=self.hidden_dim,
            vocab_size=vocab_size,
            embed_dim=self.embed_dim,
            encoder_layers=self.encoder_layers,
            decoder_layers=self.decoder_layers,
            refine_steps=self.refine_steps,
            pool_window=self.pool_window,
            pool_stride=self.pool_stride,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.lambda0, self.lambda1, self.gamma, self.unsup_lambda0, self.unsup_lambda1)

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(
            self.num_time_masks, self.max_time_mask_len, self.num_feat_masks, self.max_feat_mask_len, self.mask_value
        )

    # -- io ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **overrides) -> "RunConfig":
        return from_mapping({**self.to_dict(), **overrides})

    def write_snapshot(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def fingerprint(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _coerce(name: str, value, default):
    if value is None:
        return None
    typ = type(default)
    if default is None or typ is str:
        return value if default is None else str(value)
    try:
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if typ is float:
            return float(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {name!r}: cannot read {value!r} as {typ.__name__}") from exc
    return value


def from_mapping(raw: dict) -> RunConfig:
    known = {f.name: f.default for f in fields(RunConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {}
    for name, value in raw.items():
        if name in ("unsup_lambda0", "unsup_lambda1") and value is not None:
            value = float(value)
        values[name] = _coerce(name, value, known[name])
    return RunConfig(**values)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Read a flat YAML mapping; ``overrides`` (e.g. from CLI flags) win."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    raw = yaml.safe_load(path.read_text()) or {}
    if not isinstance(raw, dict) or any(isinstance(v, (dict, list)) for v in raw.values()):
        raise ConfigError(f"{path}: config must be a flat key: value mapping")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return from_mapping(raw)
