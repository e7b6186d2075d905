"""Comparison models: pooling MIL, gated attention, single-token
transformers, and an instance-supervised ceiling.

Every kind shares the selective-aggregation model's two-layer instance
embedder so comparisons isolate the aggregation strategy. K-way kinds
train with softmax cross-entropy; the ordinal kinds (transformer_krank and
instance_supervised_max) train with the same rank-wise BCE as the main
model.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import Bag, Dataset
from .ordinal import decode, encode_batch, probabilities, rank_bce_loss
from .sat_model import (AttentionRecord, SatConfig, _init_block, _param,
                        batched_block_stack, block_forward, embed_instances,
                        xavier_uniform)

__all__ = ["BaselineKind", "BaselineModel", "instances_as_bags",
           "instance_supervised_train_predict"]


class BaselineKind(str, Enum):
    OUTPUT_MEAN = "output_mean"
    OUTPUT_MAX = "output_max"
    FEATURE_MEAN = "feature_mean"
    FEATURE_MAX = "feature_max"
    GATED_ATTENTION = "gated_attention"
    SINGLE_TOKEN_TRANSFORMER = "transformer"
    TRANSFORMER_KRANK = "transformer_krank"
    INSTANCE_SUPERVISED_MAX = "instance_supervised_max"


RANK_KINDS = (BaselineKind.TRANSFORMER_KRANK, BaselineKind.INSTANCE_SUPERVISED_MAX)
TRANSFORMER_KINDS = (BaselineKind.SINGLE_TOKEN_TRANSFORMER, BaselineKind.TRANSFORMER_KRANK)


def _init_baseline_params(kind, config):
    rng = np.random.default_rng(config.seed)
    d, h, k = config.model_dim, config.embed_hidden, config.k_classes
    p = {}
    p["embed.w1"] = _param(xavier_uniform(rng, config.input_dim, h))
    p["embed.b1"] = _param(np.zeros((1, h)))
    p["embed.w2"] = _param(xavier_uniform(rng, h, d))
    p["embed.b2"] = _param(np.zeros((1, d)))
    if kind in TRANSFORMER_KINDS:
        p["token"] = _param(rng.normal(0.0, 0.02, size=(1, d)))
        for b in range(config.blocks):
            p.update(_init_block(rng, f"block{b}", d, config.mlp_hidden))
    if kind == BaselineKind.GATED_ATTENTION:
        p["gate.v"] = _param(xavier_uniform(rng, d, d))
        p["gate.u"] = _param(xavier_uniform(rng, d, d))
        p["gate.w"] = _param(xavier_uniform(rng, d, 1))
    if kind in RANK_KINDS:
        # zero rank heads start every prediction at class 1, like the main model
        p["heads.w"] = _param(np.zeros((d, k - 1)))
        p["heads.b"] = _param(np.zeros((1, k - 1)))
    else:
        p["cls.w"] = _param(xavier_uniform(rng, d, k))
        p["cls.b"] = _param(np.zeros((1, k)))
    return p


class BaselineModel:
    """One comparison model; behaviour switches on ``kind``.

    forward returns (scores, info): scores is a 1 x K class-score row for
    K-way kinds and a 1 x (K-1) rank-logit row for ordinal kinds; info
    exposes attention weights and per-instance scores where they exist.
    """

    def __init__(self, kind, config, params=None):
        self.kind = BaselineKind(kind)
        self.config = config
        self.params = _init_baseline_params(self.kind, config) if params is None else params

    def parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        ad.zero_grads(self.params.values())

    # -- per-kind forwards ---------------------------------------------

    def _from_embedded(self, embedded, bag_id):
        cfg = self.config
        kind = self.kind
        info = {}

        if kind in (BaselineKind.OUTPUT_MEAN, BaselineKind.OUTPUT_MAX):
            per_instance = ad.linear(embedded, self.params["cls.w"], self.params["cls.b"])
            info["instance_scores"] = per_instance.data.copy()
            pool = ad.mean_rows if kind == BaselineKind.OUTPUT_MEAN else ad.max_rows
            return pool(per_instance), info

        if kind in (BaselineKind.FEATURE_MEAN, BaselineKind.FEATURE_MAX):
            pool = ad.mean_rows if kind == BaselineKind.FEATURE_MEAN else ad.max_rows
            return ad.linear(pool(embedded), self.params["cls.w"], self.params["cls.b"]), info

        if kind == BaselineKind.GATED_ATTENTION:
            gate = ad.mul(ad.tanh(embedded @ self.params["gate.v"]),
                          ad.sigmoid(embedded @ self.params["gate.u"]))
            weights = ad.masked_softmax((gate @ self.params["gate.w"]).T,
                                        np.ones((1, embedded.shape[0])))
            info["attention"] = weights.data[0].copy()
            pooled = weights @ embedded
            return ad.linear(pooled, self.params["cls.w"], self.params["cls.b"]), info

        if kind in TRANSFORMER_KINDS:
            sequence = ad.concat_rows([self.params["token"], embedded])
            for b in range(cfg.blocks):
                token_out, attn = block_forward(self.params, f"block{b}", sequence, 1, cfg)
                if b + 1 < cfg.blocks:
                    sequence = ad.concat_rows([token_out, embedded])
            info["attention"] = attn[0, 1:].copy()
            info["record"] = AttentionRecord(
                bag_id=bag_id, instance_weights=attn[:, 1:].copy(),
                self_weights=attn[:, :1].diagonal().copy()
                if cfg.mask_mode == "literal" else None)
            head = "heads" if kind == BaselineKind.TRANSFORMER_KRANK else "cls"
            return ad.linear(token_out, self.params[f"{head}.w"],
                             self.params[f"{head}.b"]), info

        if kind == BaselineKind.INSTANCE_SUPERVISED_MAX:
            logits = ad.linear(embedded, self.params["heads.w"], self.params["heads.b"])
            info["instance_rank_logits"] = logits.data.copy()
            return logits, info

        raise ValueError(f"unhandled kind {kind}")

    def forward(self, bag, inputs=None):
        x = inputs if inputs is not None else Tensor(bag.instances)
        if x.shape[1] != self.config.input_dim:
            raise ValueError(
                f"bag {bag.id}: instance dim {x.shape[1]} != {self.config.input_dim}")
        return self._from_embedded(embed_instances(self.params, x), bag.id)

    # -- training objective and prediction -----------------------------

    def score_rows_batch(self, bags):
        """One score row per bag (or per instance for the instance-level
        kind). Embeds the whole batch at once; transformer kinds in strict
        mode additionally share one block-diagonal masked sequence."""
        x_all = Tensor(np.concatenate([bag.instances for bag in bags], axis=0))
        embedded_all = embed_instances(self.params, x_all)
        if self.kind is BaselineKind.INSTANCE_SUPERVISED_MAX:
            return ad.linear(embedded_all, self.params["heads.w"], self.params["heads.b"])
        if self.kind in TRANSFORMER_KINDS and self.config.mask_mode == "strict":
            stacked = batched_block_stack(self.params, self.config, self.params["token"],
                                          embedded_all, [bag.size for bag in bags])
            head = "heads" if self.kind == BaselineKind.TRANSFORMER_KRANK else "cls"
            return ad.linear(stacked, self.params[f"{head}.w"], self.params[f"{head}.b"])
        rows, offset = [], 0
        for bag in bags:
            embedded = ad.slice_rows(embedded_all, offset, offset + bag.size)
            offset += bag.size
            rows.append(self._from_embedded(embedded, bag.id)[0])
        return ad.concat_rows(rows)

    def loss(self, bags):
        if (self.kind is BaselineKind.INSTANCE_SUPERVISED_MAX
                and any(bag.size != 1 for bag in bags)):
            # trained on single-instance bags carrying instance labels
            raise ValueError("instance_supervised_max trains on single-instance bags")
        rows = self.score_rows_batch(bags)
        labels = [bag.label for bag in bags]
        if self.kind in RANK_KINDS:
            return rank_bce_loss(rows, encode_batch(labels, self.config.k_classes))
        return ad.softmax_cross_entropy(rows, np.asarray(labels) - 1)

    def _decide(self, score_row):
        if self.kind in RANK_KINDS:
            return decode(probabilities(score_row))
        return int(np.argmax(score_row)) + 1

    def predict(self, bag):
        with ad.no_grad():
            scores, _ = self.forward(bag)
        if self.kind is BaselineKind.INSTANCE_SUPERVISED_MAX:
            return max(decode(row) for row in probabilities(scores))
        return self._decide(scores.data[0])

    def predict_batch(self, bags):
        with ad.no_grad():
            rows = self.score_rows_batch(bags)
        if self.kind is BaselineKind.INSTANCE_SUPERVISED_MAX:
            per_instance = probabilities(rows)
            out, offset = [], 0
            for bag in bags:
                chunk = per_instance[offset:offset + bag.size]
                offset += bag.size
                out.append(max(decode(r) for r in chunk))
            return out
        return [self._decide(row) for row in rows.data]


def instances_as_bags(dataset):
    """Explode labelled instances into single-instance bags for supervised
    instance-level training. Requires instance labels."""
    bags = []
    for bag in dataset.bags:
        if bag.instance_labels is None:
            raise ValueError(f"bag {bag.id} has no instance labels")
        for j in range(bag.size):
            bags.append(Bag(f"{bag.id}#i{j}", bag.instances[j:j + 1],
                            int(bag.instance_labels[j])))
    return Dataset(dataset.k_classes, dataset.input_dim, bags)


def instance_supervised_train_predict(train_dataset, test_dataset, config=None,
                                      train_config=None):
    """Train a rank classifier on instance labels, predict bags by the max
    of per-instance decoded classes. Returns (predictions, model, history)."""
    from .trainer import TrainConfig, train

    if config is None:
        config = SatConfig(train_dataset.k_classes, train_dataset.input_dim)
    if train_config is None:
        train_config = TrainConfig()
    model = BaselineModel(BaselineKind.INSTANCE_SUPERVISED_MAX, config)
    instance_level = instances_as_bags(train_dataset)
    history = train(model, instance_level, train_config)
    predictions = [model.predict(bag) for bag in test_dataset.bags]
    return predictions, model, history
