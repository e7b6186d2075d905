"""K-rank ordinal codec and the rank-wise binary cross-entropy loss.

A class label Y in 1..K is stored as K-1 threshold bits, bit k (1-based)
being 1 iff Y > k, and recovered from predicted rank probabilities by
counting entries strictly above 0.5. Non-monotone probability patterns are
decoded by the same literal count.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, ShapeError, bce_with_logits, sum_all

__all__ = ["encode", "decode", "encode_batch", "rank_bce_loss", "probabilities"]


def encode(label, k_classes):
    """Threshold bits for one label: length K-1, bit k = 1{label > k}."""
    if k_classes < 2:
        raise ValueError(f"k_classes must be >= 2, got {k_classes}")
    label = int(label)
    if not 1 <= label <= k_classes:
        raise ValueError(f"label {label} outside 1..{k_classes}")
    return (label > np.arange(1, k_classes)).astype(np.float64)


def encode_batch(labels, k_classes):
    """Stacked threshold bits, one row per label."""
    return np.stack([encode(y, k_classes) for y in labels])


def decode(probs):
    """Predicted class 1 + #(entries strictly above 0.5); always in 1..K."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    return 1 + int(np.count_nonzero(p > 0.5))


def rank_bce_loss(logits, targets):
    """Binary cross-entropy summed over every bag and rank in the batch.

    logits: Tensor of pre-sigmoid rank scores, one row per bag, K-1 cols.
    targets: matching 0/1 array of threshold bits. Uses the fused stable
    form max(z,0) - z*t + log(1 + e^-|z|), so it never evaluates log(0).
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape != logits.data.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.data.shape}")
    return sum_all(bce_with_logits(logits, t))


def probabilities(logits):
    """Sigmoid of rank logits as a plain array (for decoding/reporting)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    z = np.clip(z, -40.0, 40.0)
    return 1.0 / (1.0 + np.exp(-z))
