"""Finite-difference verification suites for every differentiable path.

Each check compares the tape gradient of a scalar program against
central differences. Scalar losses are taken as a fixed random weighted
sum of the op output, so gradients are informative everywhere.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from . import attention as A
from . import encoder as E
from .tensor import Tensor

GRAD_CHECK_MAX_HIDDEN = 256

SUITES = ("all", "attention", "norm", "mlp")


class OversizeError(ValueError):
    pass


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum_all(T.mul(out, Tensor(w)))


def run_grad_check_suite(config: E.EncoderConfig | None = None,
                         ops: str = "all", seed: int = 0,
                         tol: float = 1e-4) -> list:
    """Run the selected finite-difference suite; returns one report per
    (op, input) pair. Refuses hidden sizes too large for differencing."""
    if ops not in SUITES:
        raise ValueError(f"ops must be one of {SUITES}")
    if config is None:
        config = E.EncoderConfig(hidden_size=8, num_heads=2,
                                 intermediate_size=16,
                                 num_attention_blocks=2,
                                 period=E.IntermediatePeriod.every(1),
                                 attn_output_dropout_rate=0.1,
                                 intermediate_dropout_rate=0.1,
                                 vocab_size=17, max_position=16,
                                 type_vocab=2)
    if config.hidden_size > GRAD_CHECK_MAX_HIDDEN:
        raise OversizeError(
            f"hidden_size {config.hidden_size} > {GRAD_CHECK_MAX_HIDDEN}: "
            "finite differences at this size are intractable")

    rng = np.random.default_rng(seed)
    h = config.hidden_size
    heads = config.num_heads
    bsz, seq = 2, 5
    reports = []

    def check(name, f, x):
        reports.append(T.grad_check(f, x, tol=tol, name=name))

    def rt(*shape, grad=True):
        return Tensor(rng.normal(0.0, 1.0, size=shape), requires_grad=grad)

    mask = np.ones((bsz, seq), dtype=bool)
    mask[:, -1] = False  # exercise the padding path
    wlog = rng.normal(size=(bsz, heads, seq, seq))

    if ops in ("norm", "all"):
        x = rt(3, 8)
        w = rng.normal(size=(3, 8))
        g = Tensor(np.array(1.3), requires_grad=True)
        b = Tensor(np.array(-0.2), requires_grad=True)
        check("normalize_rows/x", lambda t: _weighted(
            T.normalize_rows(t, g, b), w), x)
        check("normalize_rows/g", lambda t: _weighted(
            T.normalize_rows(x, t, b), w), g)
        check("normalize_rows/b", lambda t: _weighted(
            T.normalize_rows(x, g, t), w), b)
        xh = rt(bsz, seq, h)
        gain, bias = rt(h), rt(h)
        wln = rng.normal(size=(bsz, seq, h))
        check("layer_norm/x", lambda t: _weighted(
            T.layer_norm(t, gain, bias), wln), xh)
        check("layer_norm/gain", lambda t: _weighted(
            T.layer_norm(xh, t, bias), wln), gain)
        check("layer_norm/bias", lambda t: _weighted(
            T.layer_norm(xh, gain, t), wln), bias)
        logits = rt(bsz, heads, seq, seq)
        gh, bh = rt(heads), rt(heads)
        check("scores_normalized/logits", lambda t: _weighted(
            A.scores_normalized(t, mask, gh, bh), wlog), logits)
        check("scores_normalized/g", lambda t: _weighted(
            A.scores_normalized(logits, mask, t, bh), wlog), gh)
        check("scores_normalized/b", lambda t: _weighted(
            A.scores_normalized(logits, mask, gh, t), wlog), bh)
        check("softmax_rows", lambda t: _weighted(
            T.softmax_rows(t), w), rt(3, 8))

    if ops in ("mlp", "all"):
        x = rt(4, 6)
        w = rng.normal(size=(4, 6))
        check("gelu", lambda t: _weighted(T.gelu(t), w), x)
        a, b2 = rt(3, 4), rt(4, 5)
        wm = rng.normal(size=(3, 5))
        check("matmul/a", lambda t: _weighted(T.matmul(t, b2), wm), a)
        check("matmul/b", lambda t: _weighted(T.matmul(a, t), wm), b2)
        targets = rng.integers(0, 7, size=4)
        check("cross_entropy_logits", lambda t: T.cross_entropy_logits(
            t, targets), rt(4, 7))
        xd = rt(4, 6)
        check("dropout", lambda t: _weighted(
            T.dropout(t, 0.3, True, np.random.default_rng(1)), w), xd)
        check("tanh", lambda t: _weighted(T.tanh(t), w), rt(4, 6))

    if ops in ("attention", "all"):
        params = _random_attention_params(rng, h, heads, bandd=True)
        x = rt(bsz, seq, h)
        watt = rng.normal(size=(bsz, heads, seq, seq))
        wout = rng.normal(size=(bsz, seq, h))
        check("attention_logits/x", lambda t: _weighted(
            A.attention_logits(t, params, heads), watt), x)
        logits = rt(bsz, heads, seq, seq)
        check("scores_softmax/logits", lambda t: _weighted(
            A.scores_softmax(t, mask), wlog), logits)
        scores = Tensor(A.scores_softmax(Tensor(logits.data), mask).data)
        check("attention_output/x", lambda t: _weighted(
            A.attention_output(scores, t, params, heads), wout), x)
        check("self_attention(softmax)/x", lambda t: _weighted(
            A.self_attention(t, params, heads, mask, kind=A.SOFTMAX), wout), x)
        check("self_attention(normalized)/x", lambda t: _weighted(
            A.self_attention(t, params, heads, mask,
                             kind=A.NORMALIZED_BANDD), wout), x)
        check("self_attention(normalized)/wq", lambda t: _weighted(
            A.self_attention(x, params, heads, mask,
                             kind=A.NORMALIZED_BANDD), wout), params.wq)

    if ops == "all":
        # end-to-end: whole toy encoder, gradient w.r.t. one projection
        stack = E.build_stack(config, seed=seed)
        ids = rng.integers(0, config.vocab_size, size=(2, 4))
        wfull = rng.normal(size=(2, 4, h))
        target = stack.blocks[0].attn.wq
        check("encoder_forward/wq", lambda t: _weighted(
            E.forward(stack, ids, training=False), wfull), target)
        check("encoder_forward/word_emb", lambda t: _weighted(
            E.forward(stack, ids, training=False), wfull), stack.word_emb)

    return reports


def _random_attention_params(rng, h, heads, bandd=False):
    def w():
        return Tensor(rng.normal(0, 0.3, size=(h, h)), requires_grad=True)

    def bvec():
        return Tensor(rng.normal(0, 0.1, size=h), requires_grad=True)

    return A.AttentionParams(
        wq=w(), bq=bvec(), wk=w(), bk=bvec(), wv=w(), bv=bvec(),
        wo=w(), bo=bvec(),
        g=Tensor(np.ones(heads), requires_grad=True) if bandd else None,
        b=Tensor(np.zeros(heads), requires_grad=True) if bandd else None)
