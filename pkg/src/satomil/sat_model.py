"""Selective-aggregation transformer for max-label ordinal bags.

Instances are embedded by a two-layer perceptron, K-1 trainable selective
aggregator tokens are prepended, and a masked single-head attention block
aggregates instance features per token: token k's row of the attention
matrix scores every position (dot product of the token's key projection
against each position's query projection, scaled by 1/sqrt(d)) and its
output is the attention-weighted sum of value vectors. A second LayerNorm
plus MLP produces the per-token bag feature, and an independent linear
head per token emits the rank logit "label exceeds k".

Two masking semantics are provided. "strict" (default) removes all
token-to-token attention before the softmax, so each token's weights are a
convex combination over instances only. "literal" keeps the token's own
slot, takes the softmax over every position, and zeroes other tokens after
the softmax, so instance weights are sub-stochastic.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ordinal import decode, encode_batch, probabilities, rank_bce_loss

__all__ = ["SatConfig", "AttentionRecord", "SatModel", "init_params", "xavier_uniform"]

MASK_MODES = ("strict", "literal")


@dataclass(frozen=True)
class SatConfig:
    k_classes: int
    input_dim: int
    model_dim: int = 32
    embed_hidden: int = 32
    mlp_hidden: int = 32
    blocks: int = 1
    mask_mode: str = "strict"
    residual: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.k_classes < 2:
            raise ValueError("k_classes must be >= 2")
        if min(self.input_dim, self.model_dim, self.embed_hidden, self.mlp_hidden) < 1:
            raise ValueError("dimensions must be >= 1")
        if self.blocks < 1:
            raise ValueError("blocks must be >= 1")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    def to_dict(self):
        return asdict(self)


@dataclass
class AttentionRecord:
    """Last-block attention weights of one bag: rows are tokens, columns
    instances. self_weights holds each token's own-slot weight in literal
    mode and is None in strict mode."""

    bag_id: str
    instance_weights: np.ndarray
    self_weights: np.ndarray | None = None

    def to_dict(self):
        out = {"bag_id": self.bag_id, "instance_weights": self.instance_weights.tolist()}
        if self.self_weights is not None:
            out["self_weights"] = self.self_weights.tolist()
        return out


def xavier_uniform(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _param(data):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


def init_params(config):
    """Fresh parameters, deterministic per config.seed.

    Weight matrices are Xavier-uniform, biases zero, aggregator tokens
    Gaussian with std 0.02, LayerNorm affine at identity, and all rank
    heads exactly zero (a fresh model therefore predicts class 1 on every
    bag: zero logits, probabilities 0.5, strict > in the decode).
    """
    rng = np.random.default_rng(config.seed)
    d, h = config.model_dim, config.embed_hidden
    p = {}
    p["embed.w1"] = _param(xavier_uniform(rng, config.input_dim, h))
    p["embed.b1"] = _param(np.zeros((1, h)))
    p["embed.w2"] = _param(xavier_uniform(rng, h, d))
    p["embed.b2"] = _param(np.zeros((1, d)))
    p["tokens"] = _param(rng.normal(0.0, 0.02, size=(config.k_classes - 1, d)))
    for b in range(config.blocks):
        p.update(_init_block(rng, f"block{b}", d, config.mlp_hidden))
    for k in range(1, config.k_classes):
        p[f"head{k}.w"] = _param(np.zeros((d, 1)))
        p[f"head{k}.b"] = _param(np.zeros((1, 1)))
    return p


def _init_block(rng, prefix, d, mlp_hidden):
    p = {}
    p[f"{prefix}.ln1.gain"] = _param(np.ones((1, d)))
    p[f"{prefix}.ln1.bias"] = _param(np.zeros((1, d)))
    for name in ("wq", "wk", "wv"):
        p[f"{prefix}.{name}"] = _param(xavier_uniform(rng, d, d))
        p[f"{prefix}.b{name[-1]}"] = _param(np.zeros((1, d)))
    p[f"{prefix}.ln2.gain"] = _param(np.ones((1, d)))
    p[f"{prefix}.ln2.bias"] = _param(np.zeros((1, d)))
    p[f"{prefix}.mlp.w1"] = _param(xavier_uniform(rng, d, mlp_hidden))
    p[f"{prefix}.mlp.b1"] = _param(np.zeros((1, mlp_hidden)))
    p[f"{prefix}.mlp.w2"] = _param(xavier_uniform(rng, mlp_hidden, d))
    p[f"{prefix}.mlp.b2"] = _param(np.zeros((1, d)))
    return p


def embed_instances(params, x):
    """Two-layer perceptron instance embedder, n x input_dim -> n x d."""
    hidden = ad.relu(ad.linear(x, params["embed.w1"], params["embed.b1"]))
    return ad.linear(hidden, params["embed.w2"], params["embed.b2"])


def attention_mask(n_tokens, n_instances, mask_mode):
    """Binary mask over the (tokens) x (tokens + instances) score matrix.

    strict: every token column is disallowed, tokens aggregate instances
    only. literal: each token keeps its own column and loses the others.
    """
    m = np.ones((n_tokens, n_tokens + n_instances))
    if mask_mode == "strict":
        m[:, :n_tokens] = 0.0
    else:
        m[:, :n_tokens] = np.eye(n_tokens)
    return m


def block_forward(params, prefix, sequence, n_tokens, config):
    """One masked-attention block; returns (new token rows, attention array).

    Only token rows are transformed; instance rows pass through to the
    next block untouched, since attention scores are only formed for
    token keys.
    """
    d = config.model_dim
    normed = ad.layer_norm(sequence, params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    queries = ad.linear(normed, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    keys = ad.linear(normed, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    values = ad.linear(normed, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    token_keys = ad.slice_rows(keys, 0, n_tokens)
    scores = ad.scale(token_keys @ queries.T, 1.0 / np.sqrt(d))
    mask = attention_mask(n_tokens, sequence.shape[0] - n_tokens, config.mask_mode)
    mode = "pre" if config.mask_mode == "strict" else "post"
    attn = ad.masked_softmax(scores, mask, mode=mode)
    aggregated = attn @ values

    token_rows = ad.slice_rows(sequence, 0, n_tokens)
    mixed = token_rows + aggregated if config.residual else aggregated
    normed2 = ad.layer_norm(mixed, params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])
    mlp = ad.relu(ad.linear(normed2, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    mlp = ad.linear(mlp, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    out_tokens = mixed + mlp if config.residual else mlp
    return out_tokens, attn.data


def _batch_layout(n_tokens, sizes):
    """Row indices of every bag's tokens and the block-diagonal mask for a
    batch packed as [tokens, bag-0 instances, tokens, bag-1 instances, ...]."""
    total = int(sum(sizes)) + n_tokens * len(sizes)
    token_idx = np.empty(n_tokens * len(sizes), dtype=np.intp)
    mask = np.zeros((n_tokens * len(sizes), total))
    pos = 0
    for b, n in enumerate(sizes):
        token_idx[b * n_tokens:(b + 1) * n_tokens] = np.arange(pos, pos + n_tokens)
        mask[b * n_tokens:(b + 1) * n_tokens, pos + n_tokens:pos + n_tokens + n] = 1.0
        pos += n_tokens + n
    return token_idx, mask


def batched_block_stack(params, config, token_tensor, embedded_all, sizes):
    """Run the masked blocks over a whole batch packed into one sequence.

    Strict masking only: the block-diagonal mask keeps bags independent, so
    the result matches running each bag separately. Returns the stacked
    per-bag token outputs, shape (len(sizes) * n_tokens) x d, ordered bag
    by bag.
    """
    if config.mask_mode != "strict":
        raise ValueError("batched path requires strict masking")
    n_tokens = token_tensor.shape[0]
    token_idx, mask = _batch_layout(n_tokens, sizes)
    d = config.model_dim

    def interleave(tokens_stacked, instance_parts):
        parts = []
        for b, chunk in enumerate(instance_parts):
            parts.append(ad.slice_rows(tokens_stacked, b * n_tokens, (b + 1) * n_tokens)
                         if tokens_stacked is not None else token_tensor)
            parts.append(chunk)
        return ad.concat_rows(parts)

    instance_parts = []
    offset = 0
    for n in sizes:
        instance_parts.append(ad.slice_rows(embedded_all, offset, offset + n))
        offset += n
    sequence = interleave(None, instance_parts)

    for b in range(config.blocks):
        prefix = f"block{b}"
        normed = ad.layer_norm(sequence, params[f"{prefix}.ln1.gain"],
                               params[f"{prefix}.ln1.bias"])
        queries = ad.linear(normed, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
        keys = ad.linear(normed, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
        values = ad.linear(normed, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
        token_keys = ad.take_rows(keys, token_idx)
        scores = ad.scale(token_keys @ queries.T, 1.0 / np.sqrt(d))
        attn = ad.masked_softmax(scores, mask, mode="pre")
        aggregated = attn @ values

        token_rows = ad.take_rows(sequence, token_idx)
        mixed = token_rows + aggregated if config.residual else aggregated
        normed2 = ad.layer_norm(mixed, params[f"{prefix}.ln2.gain"],
                                params[f"{prefix}.ln2.bias"])
        mlp = ad.relu(ad.linear(normed2, params[f"{prefix}.mlp.w1"],
                                params[f"{prefix}.mlp.b1"]))
        mlp = ad.linear(mlp, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
        out_tokens = mixed + mlp if config.residual else mlp
        if b + 1 < config.blocks:
            sequence = interleave(out_tokens, instance_parts)
    return out_tokens


class SatModel:
    """Bag-level ordinal classifier with K-1 selective aggregator tokens."""

    def __init__(self, config, params=None):
        self.config = config
        self.params = init_params(config) if params is None else params

    def parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        ad.zero_grads(self.params.values())

    def _from_embedded(self, embedded, bag_id):
        cfg = self.config
        n_tokens = cfg.k_classes - 1
        sequence = ad.concat_rows([self.params["tokens"], embedded])
        for b in range(cfg.blocks):
            tokens_out, attn = block_forward(self.params, f"block{b}", sequence, n_tokens, cfg)
            if b + 1 < cfg.blocks:
                sequence = ad.concat_rows([tokens_out, embedded])
        logits = ad.transpose(ad.concat_rows(
            [ad.linear(ad.slice_rows(tokens_out, k, k + 1),
                       self.params[f"head{k + 1}.w"], self.params[f"head{k + 1}.b"])
             for k in range(n_tokens)]))
        record = AttentionRecord(
            bag_id=bag_id,
            instance_weights=attn[:, n_tokens:].copy(),
            self_weights=attn[:, :n_tokens].diagonal().copy()
            if cfg.mask_mode == "literal" else None,
        )
        return logits, record, tokens_out

    def forward(self, bag, inputs=None):
        """Rank logits for one bag.

        Returns (logits Tensor of shape 1 x (K-1), AttentionRecord from the
        last block, bag features array of shape (K-1) x d). Pass a prebuilt
        ``inputs`` tensor to differentiate with respect to the raw
        instance vectors.
        """
        cfg = self.config
        x = inputs if inputs is not None else Tensor(bag.instances)
        if x.shape[1] != cfg.input_dim:
            raise ValueError(f"bag {bag.id}: instance dim {x.shape[1]} != {cfg.input_dim}")
        embedded = embed_instances(self.params, x)
        logits, record, tokens_out = self._from_embedded(embedded, bag.id)
        return logits, record, tokens_out.data.copy()

    def rank_logits_batch(self, bags):
        """Stacked rank logits, one row per bag.

        Strict mode packs the whole batch into one block-diagonal masked
        sequence; literal mode falls back to per-bag forwards (its softmax
        denominator must span only the bag's own positions).
        """
        x_all = Tensor(np.concatenate([bag.instances for bag in bags], axis=0))
        embedded_all = embed_instances(self.params, x_all)
        if self.config.mask_mode != "strict":
            rows, offset = [], 0
            for bag in bags:
                embedded = ad.slice_rows(embedded_all, offset, offset + bag.size)
                offset += bag.size
                rows.append(self._from_embedded(embedded, bag.id)[0])
            return ad.concat_rows(rows)
        n_tokens = self.config.k_classes - 1
        sizes = [bag.size for bag in bags]
        stacked = batched_block_stack(self.params, self.config, self.params["tokens"],
                                      embedded_all, sizes)
        cols = []
        for k in range(n_tokens):
            rows_k = ad.take_rows(stacked, np.arange(k, len(bags) * n_tokens, n_tokens))
            cols.append(ad.transpose(ad.linear(rows_k, self.params[f"head{k + 1}.w"],
                                               self.params[f"head{k + 1}.b"])))
        return ad.transpose(ad.concat_rows(cols))

    def loss(self, bags):
        """Rank BCE summed over the bags (and their K-1 ranks)."""
        targets = encode_batch([bag.label for bag in bags], self.config.k_classes)
        return rank_bce_loss(self.rank_logits_batch(bags), targets)

    def rank_probabilities(self, bag):
        with ad.no_grad():
            logits, _, _ = self.forward(bag)
        return probabilities(logits)[0]

    def predict(self, bag):
        return decode(self.rank_probabilities(bag))

    def predict_batch(self, bags):
        with ad.no_grad():
            logits = self.rank_logits_batch(bags)
        return [decode(row) for row in probabilities(logits)]

    def attention(self, bag):
        with ad.no_grad():
            _, record, _ = self.forward(bag)
        return record

    def bag_features(self, bag):
        with ad.no_grad():
            _, _, features = self.forward(bag)
        return features
