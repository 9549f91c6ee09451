"""Classification head and training loss."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import functional as F
from .errors import LabelError
from .nn import BatchNorm2d, Linear, Module
from .tensor import Tensor, getitem, tsum


class ClassifierHead(Module):
    """Batchnorm, masked global average pool, then a linear map to class logits."""

    def __init__(self, channels: int, num_classes: int, rng: np.random.Generator):
        self.norm = BatchNorm2d(channels)
        self.fc = Linear(channels, num_classes, rng)

    def __call__(self, feat: Tensor, training: bool = False, mask: Optional[np.ndarray] = None) -> Tensor:
        return classify_head(feat, self, training, mask)


def global_pool(feat: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over (H, W); ``mask`` restricts the mean to cells marked 1."""
    h, w = feat.shape[-2:]
    if mask is None:
        mask = np.ones((h, w))
    weights = mask / mask.sum()
    return tsum(feat * Tensor(weights), axis=(-2, -1))


def classify_head(
    feat: Tensor, head: ClassifierHead, training: bool = False, mask: Optional[np.ndarray] = None
) -> Tensor:
    return head.fc(global_pool(head.norm(feat, training), mask))


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, n = logits.shape
    if labels.shape[0] != b:
        raise LabelError(f"{labels.shape[0]} labels for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        bad = labels[(labels < 0) | (labels >= n)][0]
        raise LabelError(f"label {int(bad)} outside [0, {n})")
    logp = F.log_softmax(logits, axis=-1)
    picked = getitem(logp, (np.arange(b), labels))
    return -picked.mean()
