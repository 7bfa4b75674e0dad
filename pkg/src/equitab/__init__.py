"""Target-permutation-equivariant in-context tabular classification on a numpy autodiff core."""

from .baseline import BaselineModel, baseline_forward, build_codebook, ecoc_forward, ensemble_forward
from .lab import gap_estimate, sq_identity_check, symmetrize, violation_rate
from .model import EquiTabModel, ModelConfig, forward
from .prior import Episode, EpisodeBatch, PermutationSpec, PriorConfig, sample_batch, sample_episode
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
