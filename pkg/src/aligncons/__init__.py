"""Align-Consistency: CTC with iterative alignment refinement, consistency
regularization and online self-training, on a small numpy autodiff engine."""

from .alignlab import BLANK, Vocab, collapse, greedy_decode
from .config import RunConfig, load_config
from .kernels import BACKEND
from .model import ModelConfig, forward_all_steps, init_params, load_checkpoint, save_checkpoint
from .objectives import LossWeights, align_consistency_loss, nar_loss, semi_total_loss

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BLANK",
    "LossWeights",
    "ModelConfig",
    "RunConfig",
    "Vocab",
    "align_consistency_loss",
    "collapse",
    "forward_all_steps",
    "greedy_decode",
    "init_params",
    "load_checkpoint",
    "load_config",
    "nar_loss",
    "save_checkpoint",
    "semi_total_loss",
]
