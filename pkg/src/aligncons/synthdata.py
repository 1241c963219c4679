"""Synthetic speech-like corpora and their on-disk format.

Each token id owns a fixed random prototype vector. An utterance is a token
sequence drawn from a sparse first-order Markov chain; every token is rendered
as its prototype repeated for a random number of frames plus Gaussian noise.
The model has to learn segmentation (durations are hidden) and can exploit the
token-transition structure, which is what gives refinement something to do.

On disk a corpus is a directory holding ``manifest.jsonl`` (a header line, then
one JSON record per utterance) and ``features.bin`` (little-endian float64
frames, concatenated in manifest order).
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

FORMAT_NAME = "aligncons-corpus"
FORMAT_VERSION = 1
MANIFEST = "manifest.jsonl"
BLOB = "features.bin"
HIDDEN = "hidden_transcripts.jsonl"
_DTYPE = np.dtype("<f8")


class CorpusFormatError(ValueError):
    """Corpus files are malformed or inconsistent."""


@dataclass
class Utterance:
    id: str
    features: np.ndarray
    transcript: np.ndarray | None = None

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Corpus:
    utterances: list[Utterance]
    vocab_size: int
    feat_dim: int

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self) -> Iterator[Utterance]:
        return iter(self.utterances)

    def __getitem__(self, i: int) -> Utterance:
        return self.utterances[i]

    @property
    def ids(self) -> list[str]:
        return [u.id for u in self.utterances]

    @property
    def labeled(self) -> bool:
        return all(u.transcript is not None for u in self.utterances)

    def subset(self, indices) -> "Corpus":
        return Corpus([self.utterances[i] for i in indices], self.vocab_size, self.feat_dim)


@dataclass(frozen=True)
class GenSpec:
    """Corpus generator settings.

    ``vocab_size`` counts real tokens; the model vocabulary adds the blank, so
    token ids run ``1 .. vocab_size``. ``successors`` is the number of tokens
    each token may be followed by (never itself, so repeats never occur).
    """

    vocab_size: int = 16
    feat_dim: int = 8
    label_len: tuple[int, int] = (3, 8)
    duration: tuple[int, int] = (3, 8)
    noise: float = 0.3
    prototype_scale: float = 0.35
    successors: int = 3
    prototype_seed: int = 0
    corpus_seed: int = 1
    num_utterances: int = 2000
    id_prefix: str = "utt"

    def __post_init__(self):
        lo, hi = self.label_len
        if not 1 <= lo <= hi:
            raise ValueError(f"bad label_len range {self.label_len}")
        lo, hi = self.duration
        if not 1 <= lo <= hi:
            raise ValueError(f"bad duration range {self.duration}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if not 1 <= self.successors <= self.vocab_size - 1:
            raise ValueError(f"successors must be in [1, {self.vocab_size - 1}]")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")

    @property
    def model_vocab_size(self) -> int:
        return self.vocab_size + 1

    @classmethod
    def from_dict(cls, raw: dict) -> "GenSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise KeyError(f"unknown GenSpec keys: {', '.join(unknown)}")
        raw = dict(raw)
        for key in ("label_len", "duration"):
            if key in raw:
                raw[key] = tuple(int(v) for v in raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_len"] = list(self.label_len)
        d["duration"] = list(self.duration)
        return d


def prototypes(spec: GenSpec) -> np.ndarray:
    """``(vocab_size + 1, F)`` prototype table; row 0 (blank) is unused and zero."""
    rng = np.random.default_rng([spec.prototype_seed, 0])
    table = np.zeros((spec.model_vocab_size, spec.feat_dim))
    table[1:] = rng.standard_normal((spec.vocab_size, spec.feat_dim)) * spec.prototype_scale
    return table


def transitions(spec: GenSpec) -> np.ndarray:
    """Row-stochastic successor matrix over token ids ``1..vocab_size`` (blank row/col zero)."""
    rng = np.random.default_rng([spec.prototype_seed, 1])
    V = spec.model_vocab_size
    P = np.zeros((V, V))
    for tok in range(1, V):
        others = np.array([v for v in range(1, V) if v != tok])
        nxt = rng.choice(others, size=spec.successors, replace=False)
        P[tok, nxt] = 1.0 / spec.successors
    return P


def sample_labels(spec: GenSpec, rng: np.random.Generator, P: np.ndarray) -> np.ndarray:
    n = int(rng.integers(spec.label_len[0], spec.label_len[1] + 1))
    y = np.empty(n, dtype=np.int64)
    y[0] = rng.integers(1, spec.model_vocab_size)
    for i in range(1, n):
        y[i] = rng.choice(spec.model_vocab_size, p=P[y[i - 1]])
    return y


def render(labels: np.ndarray, durations: np.ndarray, protos: np.ndarray, noise: float, rng) -> np.ndarray:
    frames = np.repeat(protos[labels], durations, axis=0)
    if noise > 0:
        frames = frames + rng.standard_normal(frames.shape) * noise
    return frames


def generate_corpus(spec: GenSpec) -> Corpus:
    protos = prototypes(spec)
    P = transitions(spec)
    rng = np.random.default_rng([spec.corpus_seed, 2])
    width = len(str(max(spec.num_utterances - 1, 1)))
    utts = []
    for i in range(spec.num_utterances):
        y = sample_labels(spec, rng, P)
        durations = rng.integers(spec.duration[0], spec.duration[1] + 1, size=y.size)
        x = render(y, durations, protos, spec.noise, rng)
        utts.append(Utterance(f"{spec.id_prefix}{i:0{width}d}", x, y))
    return Corpus(utts, spec.model_vocab_size, spec.feat_dim)


def split_pools(corpus: Corpus, labeled_fraction: float, seed: int) -> tuple[Corpus, Corpus, dict[str, np.ndarray]]:
    """Shuffle-split into a labeled pool and a transcript-free unlabeled pool.

    The third return value is the hidden sidecar ``{id: transcript}`` for the
    unlabeled pool, for scoring pseudo-labels only.
    """
    if not 0 < labeled_fraction <= 1:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    order = np.random.default_rng([seed, 3]).permutation(len(corpus))
    n_lab = int(round(labeled_fraction * len(corpus)))
    lab_idx, unl_idx = sorted(order[:n_lab]), sorted(order[n_lab:])
    labeled = corpus.subset(lab_idx)
    hidden = {corpus[i].id: corpus[i].transcript for i in unl_idx}
    unlabeled = Corpus(
        [Utterance(corpus[i].id, corpus[i].features, None) for i in unl_idx],
        corpus.vocab_size,
        corpus.feat_dim,
    )
    return labeled, unlabeled, hidden


# -- serialization ---------------------------------------------------------


def _atomic_dir(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    return Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))


def _commit_dir(tmp: Path, path: Path) -> None:
    if path.exists():
        shutil.rmtree(path)
    os.replace(tmp, path)


def write_corpus(corpus: Corpus, path, hidden: dict[str, np.ndarray] | None = None) -> None:
    """Write ``corpus`` to directory ``path`` (replaced atomically)."""
    path = Path(path)
    tmp = _atomic_dir(path)
    try:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "feat_dim": corpus.feat_dim,
            "vocab_size": corpus.vocab_size,
            "blank_id": 0,
            "num_utterances": len(corpus),
        }
        offset = 0
        with open(tmp / MANIFEST, "w") as mf, open(tmp / BLOB, "wb") as bf:
            mf.write(json.dumps(header) + "\n")
            for u in corpus:
                feats = np.ascontiguousarray(u.features, dtype=_DTYPE)
                if feats.ndim != 2 or feats.shape[1] != corpus.feat_dim:
                    raise ValueError(f"utterance {u.id}: features have shape {feats.shape}")
                rec = {
                    "id": u.id,
                    "frames": int(feats.shape[0]),
                    "offset": offset,
                    "transcript": None if u.transcript is None else [int(v) for v in u.transcript],
                }
                mf.write(json.dumps(rec) + "\n")
                bf.write(feats.tobytes())
                offset += feats.size
        if hidden is not None:
            with open(tmp / HIDDEN, "w") as hf:
                for uid, y in hidden.items():
                    hf.write(json.dumps({"id": uid, "transcript": [int(v) for v in y]}) + "\n")
        _commit_dir(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def read_corpus(path) -> Corpus:
    """Load a corpus directory. Raises :class:`CorpusFormatError` on any inconsistency."""
    path = Path(path)
    try:
        lines = (path / MANIFEST).read_text().splitlines()
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise CorpusFormatError(f"{path}: missing corpus file {exc.filename}") from exc
    if not lines:
        raise CorpusFormatError(f"{path}: empty manifest")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{path}: unreadable manifest header") from exc
    if header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise CorpusFormatError(f"{path}: unsupported format {header.get('format')!r} v{header.get('version')}")
    F, V = int(header["feat_dim"]), int(header["vocab_size"])
    if len(blob) % _DTYPE.itemsize:
        raise CorpusFormatError(f"{path}: feature blob size {len(blob)} is not a multiple of 8")
    values = np.frombuffer(blob, dtype=_DTYPE)
    records = lines[1:]
    if len(records) != header["num_utterances"]:
        raise CorpusFormatError(
            f"{path}: header promises {header['num_utterances']} utterances, manifest has {len(records)}"
        )
    utts, expected = [], 0
    for n, line in enumerate(records, start=1):
        try:
            rec = json.loads(line)
            uid, frames, offset = str(rec["id"]), int(rec["frames"]), int(rec["offset"])
            transcript = rec["transcript"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}: malformed manifest record {n}") from exc
        if offset != expected or offset + frames * F > values.size or frames < 1:
            raise CorpusFormatError(f"{path}: record {n} ({uid}) points outside the feature blob")
        feats = values[offset : offset + frames * F].reshape(frames, F).astype(np.float64)
        y = None if transcript is None else np.asarray(transcript, dtype=np.int64)
        if y is not None and (np.any(y <= 0) or np.any(y >= V)):
            raise CorpusFormatError(f"{path}: record {n} ({uid}) has token ids outside [1, {V})")
        utts.append(Utterance(uid, feats, y))
        expected = offset + frames * F
    if expected != values.size:
        raise CorpusFormatError(f"{path}: {values.size - expected} trailing values in feature blob")
    return Corpus(utts, V, F)


def read_hidden_transcripts(path) -> dict[str, np.ndarray]:
    hidden_path = Path(path) / HIDDEN
    if not hidden_path.exists():
        return {}
    out = {}
    for line in hidden_path.read_text().splitlines():
        rec = json.loads(line)
        out[rec["id"]] = np.asarray(rec["transcript"], dtype=np.int64)
    return out
