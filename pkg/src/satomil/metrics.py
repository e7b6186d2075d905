"""Accuracy, macro-F1, quadratic weighted kappa, and attention diagnostics.

All headline metrics are pure functions of the confusion matrix. Kappa uses
quadratic disagreement weights (i-j)^2 / (K-1)^2 against the chance
agreement implied by the marginals, so distant misclassifications cost
more than adjacent ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

__all__ = [
    "confusion",
    "accuracy_macro_f1",
    "qwk",
    "MetricsReport",
    "attention_selectivity",
]


def confusion(truths, predictions, k_classes):
    """K x K counts; rows are true classes, columns predicted, both 1-based."""
    t = np.asarray(truths, dtype=np.int64).ravel()
    p = np.asarray(predictions, dtype=np.int64).ravel()
    if t.shape != p.shape:
        raise ValueError(f"{t.size} truths vs {p.size} predictions")
    for name, v in (("truth", t), ("prediction", p)):
        if v.size and (v.min() < 1 or v.max() > k_classes):
            raise ValueError(f"{name} outside 1..{k_classes}")
    cm = np.zeros((k_classes, k_classes), dtype=np.int64)
    np.add.at(cm, (t - 1, p - 1), 1)
    return cm


def accuracy_macro_f1(cm):
    """(accuracy, macro-F1). A class with no true and no predicted samples
    contributes F1 = 0 to the macro mean; conventions differ, this one is
    deliberate."""
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n < 1:
        raise ValueError("empty confusion matrix")
    acc = np.trace(cm) / n
    f1s = []
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        denom_p = cm[:, c].sum()
        denom_r = cm[c, :].sum()
        precision = tp / denom_p if denom_p > 0 else 0.0
        recall = tp / denom_r if denom_r > 0 else 0.0
        f1s.append(2 * precision * recall / (precision + recall)
                   if precision + recall > 0 else 0.0)
    return float(acc), float(np.mean(f1s))


def qwk(cm):
    """Quadratic weighted kappa from a confusion matrix.

    kappa = 1 - sum(w * O) / sum(w * E) with w_ij = (i-j)^2 / (K-1)^2,
    O the observed proportions and E the outer product of the marginals.
    The (K-1)^2 normalization cancels in the ratio; kept for transparency.
    Returns 1.0 when numerator and denominator are both 0 (all agreement
    concentrated in a single class).
    """
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    if n < 1:
        raise ValueError("empty confusion matrix")
    k = cm.shape[0]
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2
    if k > 1:
        w = w / (k - 1) ** 2
    observed = cm / n
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    num = float((w * observed).sum())
    den = float((w * expected).sum())
    if den == 0.0:
        return 1.0 if num == 0.0 else float("-inf")
    return float(1.0 - num / den)


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    qwk: float
    confusion: np.ndarray
    n_bags: int

    @classmethod
    def from_predictions(cls, truths, predictions, k_classes):
        cm = confusion(truths, predictions, k_classes)
        acc, f1 = accuracy_macro_f1(cm)
        return cls(acc, f1, qwk(cm), cm, int(cm.sum()))

    def to_dict(self):
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1,
                "qwk": self.qwk, "confusion": self.confusion.tolist(),
                "n_bags": self.n_bags}

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def attention_selectivity(records, bags):
    """Per-token attention split by instance severity (box-plot style data).

    For each token k, pools every instance's attention weight over all bags
    and compares the mean on instances whose true label exceeds k against
    the mean on the rest. Returns {"per_token": [...], "raw": [...]} where
    raw holds one entry per bag for external plotting.
    """
    if len(records) != len(bags):
        raise ValueError("records and bags must align")
    if not records:
        raise ValueError("no attention records")
    n_tokens = records[0].instance_weights.shape[0]
    above = [[] for _ in range(n_tokens)]
    at_or_below = [[] for _ in range(n_tokens)]
    raw = []
    for rec, bag in zip(records, bags):
        if bag.instance_labels is None:
            raise ValueError(f"bag {bag.id} has no instance labels")
        labels = bag.instance_labels
        raw.append({"bag_id": rec.bag_id, "bag_label": int(bag.label),
                    "instance_labels": labels.tolist(),
                    "weights": rec.instance_weights.tolist()})
        for k in range(n_tokens):
            w = rec.instance_weights[k]
            hi = labels > (k + 1)
            above[k].extend(w[hi].tolist())
            at_or_below[k].extend(w[~hi].tolist())
    per_token = []
    for k in range(n_tokens):
        per_token.append({
            "token": k + 1,
            "n_above": len(above[k]),
            "n_at_or_below": len(at_or_below[k]),
            "mean_attn_above": float(np.mean(above[k])) if above[k] else float("nan"),
            "mean_attn_at_or_below": float(np.mean(at_or_below[k])) if at_or_below[k] else float("nan"),
        })
    return {"per_token": per_token, "raw": raw}
