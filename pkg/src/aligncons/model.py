"""Toy Align-Refine network.

Encoder: per-frame input projection, residual MLP blocks, one full
self-attention layer, then 2x average pooling over time. A linear CTC head on
the pooled features gives step 0. The refinement decoder embeds the previous
greedy alignment, fuses it with the encoder output per frame, runs residual
MLP blocks and one full self-attention layer, and projects to log-posteriors.
The same decoder is applied for every refinement step.

All functions work on padded batches ``(B, T, F)`` plus per-utterance lengths.
A single ``(T, F)`` utterance is treated as a batch of one.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .alignlab import BLANK, greedy_decode

CHECKPOINT_VERSION = 1
_MASK_NEG = -1e30


class InputTooShortError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    feat_dim: int = 8
    hidden_dim: int = 48
    vocab_size: int = 17
    embed_dim: int = 16
    encoder_layers: int = 2
    decoder_layers: int = 1
    refine_steps: int = 2
    pool_window: int = 2
    pool_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.refine_steps < 0:
            raise ValueError("refine_steps must be >= 0")
        if self.pool_window < 1 or self.pool_stride < 1:
            raise ValueError("pooling window and stride must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")

    def pooled_length(self, n_frames):
        n = np.asarray(n_frames)
        return (n - self.pool_window) // self.pool_stride + 1


Params = dict[str, ad.Value]


def _uniform(rng, fan_in: int, shape) -> ad.Value:
    bound = 1.0 / np.sqrt(fan_in)
    return ad.Value(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> ad.Value:
    return ad.Value(np.zeros(shape), requires_grad=True)


def _ones(shape) -> ad.Value:
    return ad.Value(np.ones(shape), requires_grad=True)


def _add_block(params: Params, rng, prefix: str, H: int) -> None:
    params[f"{prefix}.ln.g"] = _ones(H)
    params[f"{prefix}.ln.b"] = _zeros(H)
    params[f"{prefix}.w1"] = _uniform(rng, H, (H, H))
    params[f"{prefix}.b1"] = _zeros(H)
    params[f"{prefix}.w2"] = _uniform(rng, H, (H, H))
    params[f"{prefix}.b2"] = _zeros(H)


def _add_attention(params: Params, rng, prefix: str, H: int) -> None:
    params[f"{prefix}.ln.g"] = _ones(H)
    params[f"{prefix}.ln.b"] = _zeros(H)
    for name in ("wq", "wk", "wv", "wo"):
        params[f"{prefix}.{name}"] = _uniform(rng, H, (H, H))


def init_params(cfg: ModelConfig) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng([cfg.seed, 17])
    H, V, E, F = cfg.hidden_dim, cfg.vocab_size, cfg.embed_dim, cfg.feat_dim
    p: Params = {}
    p["enc.in.w"] = _uniform(rng, F, (F, H))
    p["enc.in.b"] = _zeros(H)
    for i in range(cfg.encoder_layers):
        _add_block(p, rng, f"enc.block{i}", H)
    _add_attention(p, rng, "enc.attn", H)
    p["enc.out.ln.g"] = _ones(H)
    p["enc.out.ln.b"] = _zeros(H)
    p["ctc.w"] = _uniform(rng, H, (H, V))
    p["ctc.b"] = _zeros(V)
    if cfg.refine_steps > 0:
        p["dec.embed"] = ad.Value(rng.standard_normal((V, E)) * 0.5, requires_grad=True)
        p["dec.fuse.w"] = _uniform(rng, E + H, (E + H, H))
        p["dec.fuse.b"] = _zeros(H)
        for i in range(cfg.decoder_layers):
            _add_block(p, rng, f"dec.block{i}", H)
        _add_attention(p, rng, "dec.attn", H)
        p["dec.out.ln.g"] = _ones(H)
        p["dec.out.ln.b"] = _zeros(H)
        p["dec.out.w"] = _uniform(rng, H, (H, V))
        p["dec.out.b"] = _zeros(V)
    return p


def num_parameters(params: Params) -> int:
    return int(sum(v.data.size for v in params.values()))


# -- building blocks -------------------------------------------------------


def positional_encoding(T: int, H: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rates = np.exp(-np.log(10000.0) * (np.arange(0, H, 2) / H))
    pe = np.zeros((T, H))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: H // 2])
    return pe


def key_mask(lengths, T: int) -> np.ndarray:
    """``(B, 1, T)`` additive attention bias: 0 for real frames, very negative for padding."""
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return np.where(valid, 0.0, _MASK_NEG)[:, None, :]


def frame_mask(lengths, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def _block(p: Params, prefix: str, z: ad.Value) -> ad.Value:
    u = ad.layer_norm(z, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
    u = ad.tanh(u @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"])
    return z + (u @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"])


def _attention(p: Params, prefix: str, z: ad.Value, lengths) -> ad.Value:
    B, T, H = z.shape
    u = ad.layer_norm(z, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
    upos = u + ad.Value(positional_encoding(T, H))
    q = upos @ p[f"{prefix}.wq"]
    k = upos @ p[f"{prefix}.wk"]
    v = u @ p[f"{prefix}.wv"]
    scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / np.sqrt(H)) + ad.Value(key_mask(lengths, T))
    ctx = ad.softmax(scores, axis=-1) @ v
    return z + ctx @ p[f"{prefix}.wo"]


def as_batch(x, lengths=None) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ad.ShapeError(f"features must be T x F or B x T x F, got {x.shape}")
    if lengths is None:
        lengths = np.full(x.shape[0], x.shape[1], dtype=np.int64)
    return x, np.asarray(lengths, dtype=np.int64)


def pad_batch(features: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Zero-pad a list of ``T_i x F`` matrices into ``(B, T_max, F)``."""
    lengths = np.array([f.shape[0] for f in features], dtype=np.int64)
    out = np.zeros((len(features), int(lengths.max()), features[0].shape[1]))
    for i, f in enumerate(features):
        out[i, : f.shape[0]] = f
    return out, lengths


# -- model ops ----------------------------------------------------------------


def encode(params: Params, cfg: ModelConfig, x, lengths=None) -> tuple[ad.Value, np.ndarray]:
    """Encoder output ``h`` of shape ``(B, T', H)`` and the pooled lengths."""
    x, lengths = as_batch(x, lengths)
    if x.shape[2] != cfg.feat_dim:
        raise ad.ShapeError(f"expected {cfg.feat_dim} features per frame, got {x.shape[2]}")
    if lengths.min() < cfg.pool_window:
        raise InputTooShortError(f"utterance with {lengths.min()} frames is shorter than the pooling window")
    z = ad.tanh(ad.Value(x) @ params["enc.in.w"] + params["enc.in.b"])
    for i in range(cfg.encoder_layers):
        z = _block(params, f"enc.block{i}", z)
    z = _attention(params, "enc.attn", z, lengths)
    z = ad.layer_norm(z, params["enc.out.ln.g"], params["enc.out.ln.b"])
    h = ad.avg_pool_time(z, cfg.pool_window, cfg.pool_stride, axis=1)
    return h, cfg.pooled_length(lengths)


def ctc_head(params: Params, h: ad.Value) -> ad.Value:
    return ad.log_softmax(h @ params["ctc.w"] + params["ctc.b"], axis=-1)


def refine_step(params: Params, cfg: ModelConfig, prev_align, h: ad.Value, lengths=None) -> ad.Value:
    """Decoder posteriors conditioned on the previous alignment (consumed as data)."""
    prev_align = np.asarray(prev_align, dtype=np.int64)
    if prev_align.ndim == 1:
        prev_align = prev_align[None]
    B, T, _ = h.shape
    if prev_align.shape != (B, T):
        raise ad.ShapeError(f"alignment shape {prev_align.shape} does not match encoder frames {(B, T)}")
    if lengths is None:
        lengths = np.full(B, T, dtype=np.int64)
    e = ad.embedding(params["dec.embed"], prev_align)
    u = ad.tanh(ad.concat([e, h], axis=-1) @ params["dec.fuse.w"] + params["dec.fuse.b"])
    for i in range(cfg.decoder_layers):
        u = _block(params, f"dec.block{i}", u)
    u = _attention(params, "dec.attn", u, lengths)
    u = ad.layer_norm(u, params["dec.out.ln.g"], params["dec.out.ln.b"])
    return ad.log_softmax(u @ params["dec.out.w"] + params["dec.out.b"], axis=-1)


@dataclass
class StepOutputs:
    """Posteriors ``[p0 .. pS]`` (each ``B x T' x V``) and their greedy alignments."""

    posteriors: list[ad.Value]
    alignments: list[np.ndarray]
    lengths: np.ndarray
    h: ad.Value | None = field(default=None, repr=False)

    @property
    def num_steps(self) -> int:
        return len(self.posteriors) - 1

    def frame_logprobs(self, step: int, b: int = 0) -> np.ndarray:
        return self.posteriors[step].data[b, : self.lengths[b]]

    def alignment(self, step: int, b: int = 0) -> np.ndarray:
        return self.alignments[step][b, : self.lengths[b]]


def decode_alignment(logp: np.ndarray, lengths) -> np.ndarray:
    """Batched greedy decode; padded frames are set to blank."""
    align = greedy_decode(logp)
    align[frame_mask(lengths, logp.shape[1]) == 0] = BLANK
    return align


def forward_all_steps(params: Params, cfg: ModelConfig, x, lengths=None, steps: int | None = None) -> StepOutputs:
    """Run the CTC head (step 0) and ``steps`` refinement passes.

    Each refinement consumes the greedy alignment of the previous step as
    integer data, so no gradient flows through the argmax.
    """
    steps = cfg.refine_steps if steps is None else steps
    if steps > cfg.refine_steps:
        raise ValueError(f"model was built for {cfg.refine_steps} refinement steps, asked for {steps}")
    h, plen = encode(params, cfg, x, lengths)
    p = ctc_head(params, h)
    posteriors, alignments = [p], [decode_alignment(p.data, plen)]
    for _ in range(steps):
        p = refine_step(params, cfg, alignments[-1], h, plen)
        posteriors.append(p)
        alignments.append(decode_alignment(p.data, plen))
    return StepOutputs(posteriors, alignments, plen, h)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path, params: Params, cfg: ModelConfig, meta: dict | None = None, extra: dict | None = None) -> None:
    """Write a versioned ``.npz`` checkpoint (little-endian float64 arrays).

    ``meta`` is any JSON-serialisable dict (seed, epoch, ...); ``extra`` holds
    additional named arrays such as optimizer state.
    """
    path = Path(path)
    header = {"version": CHECKPOINT_VERSION, "model_config": asdict(cfg), "meta": meta or {}}
    arrays = {"__header__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, v in params.items():
        arrays[f"param/{name}"] = np.ascontiguousarray(v.data, dtype="<f8")
    for name, arr in (extra or {}).items():
        arrays[f"extra/{name}"] = np.ascontiguousarray(arr, dtype="<f8")
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict, dict]:
    """Inverse of :func:`save_checkpoint`: ``(params, cfg, meta, extra)``."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            header = json.loads(bytes(z["__header__"]).decode())
            arrays = {k: z[k] for k in z.files if k != "__header__"}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    cfg = ModelConfig(**header["model_config"])
    params = {k[len("param/") :]: ad.Value(v.astype(np.float64), requires_grad=True) for k, v in arrays.items() if k.startswith("param/")}
    extra = {k[len("extra/") :]: v.astype(np.float64) for k, v in arrays.items() if k.startswith("extra/")}
    expected = init_params(cfg)
    if set(params) != set(expected) or any(params[k].shape != expected[k].shape for k in expected):
        raise CheckpointError(f"{path}: parameter set does not match its model config")
    if not all(np.isfinite(v.data).all() for v in params.values()):
        raise CheckpointError(f"{path}: non-finite parameter values")
    return params, cfg, header.get("meta", {}), extra
