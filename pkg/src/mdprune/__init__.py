"""Mirror-descent saliency search and one-shot sparsity mask export."""

from .autodiff import Tape, Tensor, backward, forward_primitive
from .masks import export_nm, export_unstructured, sparsity_sweep
from .mirror import PruneConfig, mirror_step, r24_penalty, r24_prox_step, \
    run_search, soft_threshold
from .model import ModelConfig, build_toy_model
from .saliency import MetricConfig, compute_score

__all__ = [
    "Tape", "Tensor", "backward", "forward_primitive",
    "export_nm", "export_unstructured", "sparsity_sweep",
    "PruneConfig", "mirror_step", "r24_penalty", "r24_prox_step",
    "run_search", "soft_threshold",
    "ModelConfig", "build_toy_model", "MetricConfig", "compute_score",
]
