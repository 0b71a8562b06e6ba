"""Multi-head self-attention with swappable score functions.

Two score functions are supported: the standard masked softmax, and a
normalized variant that standardizes each logit row over the unmasked
keys and applies a learned per-head scalar gain and bias. Masked key
positions contribute nothing to the statistics and receive score 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

SOFTMAX = "softmax"
NORMALIZED_BANDD = "normalized_bandd"

ATTENTION_KINDS = (SOFTMAX, NORMALIZED_BANDD)


class InputError(ValueError):
    pass


@dataclass
class AttentionParams:
    """Projection weights for one attention unit; g/b only for the
    normalized variant (one scalar pair per head)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    g: Tensor | None = None
    b: Tensor | None = None


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[B, S, H] -> [B, A, S, d] with d = H / A."""
    bsz, seq, hidden = x.shape
    d = hidden // num_heads
    return T.transpose(T.reshape(x, (bsz, seq, num_heads, d)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, A, S, d] -> [B, S, H]."""
    bsz, heads, seq, d = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (bsz, seq, heads * d))


def attention_logits(x: Tensor, params: AttentionParams, num_heads: int) -> Tensor:
    """Per-head scaled query-key dot products, shape [B, A, S, S].

    The 1/sqrt(d) scaling is applied for both score functions; for the
    normalized variant it is provably inert (standardization absorbs
    positive scaling) so the logits path can stay shared.
    """
    d = x.shape[-1] // num_heads
    q = split_heads(T.add(T.matmul(x, params.wq), params.bq), num_heads)
    k = split_heads(T.add(T.matmul(x, params.wk), params.bk), num_heads)
    logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    return T.scale(logits, 1.0 / math.sqrt(d))


def _check_mask(mask: np.ndarray, logits_shape) -> np.ndarray:
    bsz, _, _, seq = logits_shape  # mask applies along the key axis
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (bsz, seq):
        raise InputError(f"mask must have shape ({bsz}, {seq}), got {mask.shape}")
    if not mask.any(axis=-1).all():
        raise InputError("every sequence needs at least one unmasked key")
    return mask


def scores_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Masked softmax over the key axis; masked scores are exactly 0."""
    mask = _check_mask(mask, logits.shape)
    m = mask[:, None, None, :]
    z = np.where(m, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)
    T._flops(T.FLOPS_PER_ELEM_SOFTMAX * out.size)
    if T._tracking(logits):
        def bw(go):
            return (s * (go - (go * s).sum(axis=-1, keepdims=True)),)
        T._record(out, (logits,), bw)
    return out


def scores_normalized(logits: Tensor, mask: np.ndarray, g: Tensor, b: Tensor,
                      eps: float = 1e-6) -> Tensor:
    """Standardize each logit row over unmasked keys, then g * xhat + b.

    g and b are per-head scalars, shapes [A]. Mean and std are taken
    over the unmasked key positions only; masked positions output 0.
    """
    mask = _check_mask(mask, logits.shape)
    m = mask[:, None, None, :].astype(np.float64)
    n = m.sum(axis=-1, keepdims=True)
    x = logits.data
    mu = (x * m).sum(axis=-1, keepdims=True) / n
    var = (((x - mu) ** 2) * m).sum(axis=-1, keepdims=True) / n
    sigma = np.sqrt(var)
    denom = sigma + eps
    xhat = ((x - mu) / denom) * m
    gh = g.data[None, :, None, None]
    bh = b.data[None, :, None, None]
    out = Tensor((gh * xhat + bh) * m)
    T._flops(T.FLOPS_PER_ELEM_NORMALIZE * out.size)
    if T._tracking(logits, g, b):
        def bw(go):
            go_m = go * m
            h = go_m * gh
            hm = (h * m).sum(axis=-1, keepdims=True) / n
            hxm = (h * xhat).sum(axis=-1, keepdims=True) / n
            sig_safe = np.where(sigma > 0.0, sigma, 1.0)
            gx = ((h - hm) / denom - xhat * hxm / sig_safe) * m
            gg = (go_m * xhat).sum(axis=(0, 2, 3))
            gb = go_m.sum(axis=(0, 2, 3))
            return gx, gg, gb
        T._record(out, (logits, g, b), bw)
    return out


def attention_output(scores: Tensor, x: Tensor, params: AttentionParams,
                     num_heads: int, dropout_rate: float = 0.0,
                     training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Score-weighted value mixing plus output projection, [B, S, H]."""
    v = split_heads(T.add(T.matmul(x, params.wv), params.bv), num_heads)
    ctx = merge_heads(T.matmul(scores, v))
    out = T.add(T.matmul(ctx, params.wo), params.bo)
    if dropout_rate > 0.0 and training:
        out = T.dropout(out, dropout_rate, training, rng)
    return out


def self_attention(x: Tensor, params: AttentionParams, num_heads: int,
                   mask: np.ndarray, kind: str = SOFTMAX,
                   dropout_rate: float = 0.0, training: bool = False,
                   rng: np.random.Generator | None = None,
                   eps: float = 1e-6) -> Tensor:
    """One full attention unit. The normalized variant never applies
    output dropout (dropout removal is part of that variant)."""
    logits = attention_logits(x, params, num_heads)
    if kind == SOFTMAX:
        scores = scores_softmax(logits, mask)
        return attention_output(scores, x, params, num_heads,
                                dropout_rate, training, rng)
    if kind == NORMALIZED_BANDD:
        scores = scores_normalized(logits, mask, params.g, params.b, eps)
        return attention_output(scores, x, params, num_heads)
    raise InputError(f"unknown attention kind {kind!r}")
