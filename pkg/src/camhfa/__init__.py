"""Context-aware multi-head factorized attentive pooling on a small autodiff core."""

from .pooling import (
    CaMhfaParams,
    LayerwiseFeatures,
    attention_weights_conv,
    attention_weights_direct,
    compute_keys,
    compute_values,
    extract_embedding,
    init_params,
    normalize_layer_weights,
    pool,
)
from .tensor import GradTape, Tensor, finite_difference_gradient

__all__ = [
    "CaMhfaParams",
    "GradTape",
    "LayerwiseFeatures",
    "Tensor",
    "attention_weights_conv",
    "attention_weights_direct",
    "compute_keys",
    "compute_values",
    "extract_embedding",
    "finite_difference_gradient",
    "init_params",
    "normalize_layer_weights",
    "pool",
]
