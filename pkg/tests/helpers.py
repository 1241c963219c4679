"""Small fixtures shared by several test modules."""

from aligncons.augment import AugmentPolicy, augment_pair
from aligncons.config import RunConfig
from aligncons.model import ModelConfig, init_params, pad_batch
from aligncons.synthdata import GenSpec
from aligncons.training import forward_branches

# filled by the acceptance tests, echoed in the terminal summary
CRITERIA_LINES: list[str] = []

TINY = ModelConfig(feat_dim=3, hidden_dim=6, vocab_size=4, embed_dim=3, encoder_layers=1, decoder_layers=1, refine_steps=2)

TOY_SPEC = GenSpec(vocab_size=5, feat_dim=4, label_len=(2, 4), duration=(2, 4), successors=2, num_utterances=48, corpus_seed=5)


def toy_run(**kw) -> RunConfig:
    """A run small enough to train in a second or two."""
    base = dict(hidden_dim=8, embed_dim=4, encoder_layers=1, decoder_layers=1, epochs=2, avg_last=2, batch_size=8, unlabeled_batch_size=8)
    base.update(kw)
    return RunConfig(**base)


def toy_batch(rng, n=2, T=(8, 12), V=4, F=3):
    feats = [rng.normal(size=(int(rng.integers(*T)), F)) for _ in range(n)]
    targets = [rng.integers(1, V, size=int(rng.integers(1, 3))) for _ in range(n)]
    return feats, targets


def branch_outputs(params, cfg, feats, seed=0, steps=None, policy=None):
    policy = policy or AugmentPolicy()
    pairs = [augment_pair(f, policy, (seed, 1, f"u{i}")) for i, f in enumerate(feats)]
    x1, lengths = pad_batch([a for a, _ in pairs])
    x2, _ = pad_batch([b for _, b in pairs])
    return forward_branches(params, cfg, x1, x2, lengths, cfg.refine_steps if steps is None else steps)


__all__ = ["CRITERIA_LINES", "TINY", "TOY_SPEC", "toy_run", "toy_batch", "branch_outputs", "init_params"]
