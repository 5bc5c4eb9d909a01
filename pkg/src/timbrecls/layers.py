"""Layer zoo: linear, scaled dot-product / multi-head attention, cross-entropy.

All layers are pure functions over parameter structs built from
``timbrecls.tensor`` ops, so gradients flow without any extra bookkeeping
here. Attention weight matrices are exposed for tracing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from timbrecls import tensor as tt
from timbrecls.tensor import ShapeMismatch, Tensor


class InvalidHeadCount(ValueError):
    """Head count must divide the embedding width."""


class LabelOutOfRange(IndexError):
    """A class label falls outside [0, n_classes)."""


@dataclass
class LinearParams:
    """Affine map y = x W^T + b with weight [out, in] and bias [out]."""

    weight: Tensor
    bias: Tensor

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def param_count(self) -> int:
        return self.weight.size + self.bias.size


@dataclass
class AttentionParams:
    """Query/key/value/output projections for one multi-head attention block."""

    w_q: LinearParams
    w_k: LinearParams
    w_v: LinearParams
    w_o: LinearParams
    heads: int

    @property
    def d_model(self) -> int:
        return self.w_q.out_dim

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    def param_count(self) -> int:
        return sum(p.param_count() for p in (self.w_q, self.w_k, self.w_v, self.w_o))


@dataclass
class AttentionTrace:
    """Post-softmax attention weights of one sample: per head plus head-average."""

    per_head: np.ndarray            # [h, T, T]
    averaged: np.ndarray            # [T, T]
    raw_scores: np.ndarray | None = None  # [h, T, T], pre-scaling dot products


class AttentionInternals(NamedTuple):
    """Per-head weight (and optionally score) tensors kept for tracing."""

    weights: list[Tensor]
    scores: list[Tensor] | None


def linear(p: LinearParams, x: Tensor) -> Tensor:
    if x.shape[-1] != p.in_dim:
        raise ShapeMismatch(f"linear expects trailing dim {p.in_dim}, got {x.shape}")
    return tt.add(tt.matmul(x, tt.transpose(p.weight)), p.bias)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor,
                                 return_scores: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    Returns (output, weights) or (output, weights, scores) where ``scores``
    are the unscaled dot products. Rows of ``weights`` sum to 1.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeMismatch(f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if q.shape[-2] != k.shape[-2] or k.shape[-2] != v.shape[-2]:
        raise ShapeMismatch("self-attention expects q, k, v with equal sequence length")
    d_k = q.shape[-1]
    scores = tt.matmul(q, tt.transpose_last2(k))
    weights = tt.softmax_rows(tt.scale(scores, 1.0 / math.sqrt(d_k)))
    output = tt.matmul(weights, v)
    if return_scores:
        return output, weights, scores
    return output, weights


def multi_head_attention(p: AttentionParams, x: Tensor,
                         want_scores: bool = False) -> tuple[Tensor, AttentionInternals]:
    """Project, split into head-sized column blocks, attend, concat, re-project.

    ``x`` is [..., T, d_model]; head i uses columns [i*d_k, (i+1)*d_k) of the
    q/k/v projections, so h=1 degenerates to plain attention followed by the
    output projection.
    """
    d_model = p.d_model
    if x.shape[-1] != d_model:
        raise ShapeMismatch(f"expected trailing dim {d_model}, got {x.shape}")
    if p.heads < 1 or d_model % p.heads != 0:
        raise InvalidHeadCount(f"{p.heads} heads do not divide d_model {d_model}")
    q = linear(p.w_q, x)
    k = linear(p.w_k, x)
    v = linear(p.w_v, x)

    d_k = p.d_k
    head_outputs = []
    head_weights = []
    head_scores = [] if want_scores else None
    for i in range(p.heads):
        lo, hi = i * d_k, (i + 1) * d_k
        q_i = tt.slice_lastdim(q, lo, hi)
        k_i = tt.slice_lastdim(k, lo, hi)
        v_i = tt.slice_lastdim(v, lo, hi)
        if want_scores:
            out_i, w_i, s_i = scaled_dot_product_attention(q_i, k_i, v_i, return_scores=True)
            head_scores.append(s_i)
        else:
            out_i, w_i = scaled_dot_product_attention(q_i, k_i, v_i)
        head_outputs.append(out_i)
        head_weights.append(w_i)

    output = linear(p.w_o, tt.concat_lastdim(head_outputs))
    return output, AttentionInternals(weights=head_weights, scores=head_scores)


def build_trace(internals: AttentionInternals, sample: int | None = None) -> AttentionTrace:
    """Materialize an AttentionTrace from one sample's attention internals.

    ``sample`` selects the batch row when the forward pass was batched.
    """
    def pick(t: Tensor) -> np.ndarray:
        return t.data if sample is None else t.data[sample]

    per_head = np.stack([pick(w) for w in internals.weights])
    raw = None
    if internals.scores is not None:
        raw = np.stack([pick(s) for s in internals.scores])
    return AttentionTrace(per_head=per_head, averaged=per_head.mean(axis=0), raw_scores=raw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], via log-sum-exp.

    Backward is the classic (softmax - one_hot) / batch_size.
    """
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelOutOfRange(f"labels must lie in [0, {n_classes})")

    z = logits.data
    batch = z.shape[0]
    shift = z.max(axis=1, keepdims=True)
    exp = np.exp(z - shift)
    log_sum = np.log(exp.sum(axis=1)) + shift[:, 0]
    per_sample = log_sum - z[np.arange(batch), labels]
    data = np.array(per_sample.mean())

    def backward(g: np.ndarray) -> None:
        probs = exp / exp.sum(axis=1, keepdims=True)
        probs[np.arange(batch), labels] -= 1.0
        tt.accumulate_grad(logits, (float(g) / batch) * probs)

    return tt.make_op(data, (logits,), backward)
