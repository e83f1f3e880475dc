"""Additive-margin softmax objectives (AAM and AM) over cosine logits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import ContractError, ShapeError, Tensor

MARGIN_TYPES = ("additive-angular", "additive-cosine")


@dataclass
class ClassifierHead:
    class_weights: np.ndarray  # (C, E), rows need not be normalized
    margin: float = 0.2
    scale: float = 32.0
    margin_type: str = "additive-angular"

    def __post_init__(self):
        self.class_weights = np.array(self.class_weights, dtype=np.float64)
        if self.class_weights.ndim != 2:
            raise ShapeError(f"class weights must be (C, E), got {self.class_weights.shape}")
        if self.margin < 0:
            raise ContractError(f"margin must be >= 0, got {self.margin}")
        if self.scale <= 0:
            raise ContractError(f"scale must be > 0, got {self.scale}")
        if self.margin_type not in MARGIN_TYPES:
            raise ContractError(f"unknown margin type {self.margin_type!r}")

    @property
    def num_classes(self) -> int:
        return self.class_weights.shape[0]


def init_head(num_classes: int, embed_dim: int, margin=0.2, scale=32.0,
              margin_type="additive-angular", seed: int = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(embed_dim)
    weights = rng.uniform(-bound, bound, size=(num_classes, embed_dim))
    return ClassifierHead(weights, margin, scale, margin_type)


def cosine_logits(e, class_weights) -> Tensor:
    """e @ normalize_rows(W).T; ``e`` is expected to be unit-norm already."""
    e, W = tn.as_tensor(e), tn.as_tensor(class_weights)
    W_hat = W / tn.sqrt(tn.sum(W * W, axis=-1, keepdims=True))
    e2 = e if e.ndim == 2 else tn.reshape(e, (1, -1))
    return tn.matmul(e2, tn.transpose(W_hat))


def apply_margin(cos, onehot: np.ndarray, margin: float, margin_type: str) -> Tensor:
    """Replace the target-class cosine with its margin-penalized version.

    Additive-angular uses cos(theta + m) while theta + m <= pi and the linear
    extension cos(theta) - m*sin(m) beyond that point.
    """
    cos = tn.as_tensor(cos)
    if margin_type == "additive-cosine":
        return cos - margin * onehot
    if margin_type != "additive-angular":
        raise ContractError(f"unknown margin type {margin_type!r}")
    sin = tn.sqrt(tn.clip(1.0 - cos * cos, 0.0, 1.0))
    phi = cos * math.cos(margin) - sin * math.sin(margin)
    fallback = cos - margin * math.sin(margin)
    target = tn.where(cos.data >= math.cos(math.pi - margin), phi, fallback)
    return tn.where(onehot.astype(bool), target, cos)


def margin_softmax_loss(e, labels, head: ClassifierHead, class_weights=None) -> Tensor:
    """Mean cross-entropy over ``scale``-scaled margin logits.

    ``e`` is (E,) or (B, E); ``labels`` an int or (B,) ints.  ``class_weights``
    overrides ``head.class_weights`` (pass a Tensor to differentiate it).
    """
    W = tn.as_tensor(head.class_weights if class_weights is None else class_weights)
    labels = np.atleast_1d(np.asarray(labels))
    C = W.shape[0]
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels >= C):
        raise ContractError(f"labels must be integers in [0, {C}), got {labels.tolist()}")
    cos = cosine_logits(e, W)
    if cos.shape[0] != labels.shape[0]:
        raise ShapeError(f"{cos.shape[0]} embeddings but {labels.shape[0]} labels")
    onehot = np.zeros(cos.shape)
    onehot[np.arange(labels.shape[0]), labels] = 1.0
    logits = apply_margin(cos, onehot, head.margin, head.margin_type) * head.scale
    nll = -tn.sum(tn.log_softmax(logits, axis=-1) * onehot, axis=-1)
    return tn.mean(nll)
