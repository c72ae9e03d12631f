"""Set aggregation with neuralized Kolmogorov means.

Submodules: ``autodiff`` (reverse-mode tape), ``nets`` (MLP, RevNet, pairwise
encoder, checkpoints), ``nkm`` (poolings and generators), ``models`` (the model
families), ``synthgen`` (datasets and oracles), ``harness`` (training and
statistics), ``verify`` (property checks) and ``cli``.
"""

from .autodiff import Segments, Tape, Tensor, backward, finite_diff_grad, forward_op
from .models import FAMILIES, ModelConfig, SetModel, build_model, default_config, loss_mse
from .nkm import SetBatch, nkm_pool

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "Segments",
    "forward_op",
    "backward",
    "finite_diff_grad",
    "SetBatch",
    "nkm_pool",
    "FAMILIES",
    "ModelConfig",
    "SetModel",
    "build_model",
    "default_config",
    "loss_mse",
]
