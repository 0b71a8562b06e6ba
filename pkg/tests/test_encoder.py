import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slimformer import attention as A
from slimformer import encoder as E
from slimformer import tensor as T


def toy_config(**overrides):
    base = dict(hidden_size=8, num_heads=2, intermediate_size=16,
                num_attention_blocks=2, vocab_size=19, max_position=16,
                type_vocab=2, attn_output_dropout_rate=0.1,
                intermediate_dropout_rate=0.1)
    base.update(overrides)
    return E.EncoderConfig(**base)


# ---------------------------------------------------------------------------
# intermediate placement


def test_positions_every_2_of_12():
    got = E.intermediate_positions(12, E.IntermediatePeriod.every(2))
    assert got == [2, 4, 6, 8, 10, 12]


def test_positions_every_5_of_12():
    got = E.intermediate_positions(12, E.IntermediatePeriod.every(5))
    assert got == [5, 10]


def test_positions_none():
    assert E.intermediate_positions(12, E.IntermediatePeriod.none()) == []


def test_positions_every_1_is_dense():
    got = E.intermediate_positions(4, E.IntermediatePeriod.every(1))
    assert got == [1, 2, 3, 4]


def test_positions_period_larger_than_depth():
    assert E.intermediate_positions(3, E.IntermediatePeriod.every(7)) == []


@given(st.integers(1, 64), st.integers(1, 64))
@settings(max_examples=200, deadline=None)
def test_positions_floor_law(m, n):
    got = E.intermediate_positions(m, E.IntermediatePeriod.every(n))
    assert len(got) == m // n
    assert got == [n * i for i in range(1, m // n + 1)]
    assert all(1 <= p <= m for p in got)


def test_period_validation():
    with pytest.raises(E.ConfigError):
        E.IntermediatePeriod.every(0)
    with pytest.raises(E.ConfigError):
        E.intermediate_positions(0, E.IntermediatePeriod.every(1))


def test_period_round_trip():
    for p in (E.IntermediatePeriod.every(3), E.IntermediatePeriod.none()):
        assert E.IntermediatePeriod.parse(str(p)) == p
    with pytest.raises(E.ConfigError):
        E.IntermediatePeriod.parse("sometimes")


# ---------------------------------------------------------------------------
# config validation and file format


def test_config_rejects_indivisible_heads():
    with pytest.raises(E.ConfigError):
        toy_config(hidden_size=10, num_heads=3)


def test_config_rejects_unknown_attention():
    with pytest.raises(E.ConfigError):
        toy_config(attention_kind="linear")


def test_config_ablation_requires_acknowledgement():
    with pytest.raises(E.ConfigError, match="allow_ablation"):
        toy_config(attn_layernorm=E.REMOVE_ABLATION)
    cfg = toy_config(attn_layernorm=E.REMOVE_ABLATION, allow_ablation=True)
    assert cfg.attn_layernorm == E.REMOVE_ABLATION


def test_bandd_build_requires_zero_dropout():
    cfg = toy_config(attention_kind=A.NORMALIZED_BANDD,
                     attn_output_dropout_rate=0.1)
    with pytest.raises(E.ConfigError):
        E.build_stack(cfg)
    E.build_stack(E.bandd(toy_config()))  # helper clears the rate


def test_config_text_round_trip():
    cfg = toy_config(attention_kind=A.NORMALIZED_BANDD,
                     attn_output_dropout_rate=0.0,
                     mlp_layernorm=E.REMOVE,
                     period=E.IntermediatePeriod.every(2))
    assert E.config_from_text(E.config_to_text(cfg)) == cfg


def test_config_text_round_trip_none_period():
    cfg = toy_config(period=E.IntermediatePeriod.none())
    assert E.config_from_text(E.config_to_text(cfg)) == cfg


def test_config_text_comments_and_blanks():
    cfg = E.config_from_text(
        "# toy\nhidden_size = 8\nnum_heads = 2  # two heads\n\n"
        "vocab_size = 19\n")
    assert cfg.hidden_size == 8 and cfg.num_heads == 2


def test_config_text_unknown_key():
    with pytest.raises(E.ConfigError, match="unknown"):
        E.config_from_text("hiden_size = 8\n")


def test_config_text_duplicate_key():
    with pytest.raises(E.ConfigError, match="duplicate"):
        E.config_from_text("hidden_size = 8\nhidden_size = 16\n")


def test_config_text_missing_equals():
    with pytest.raises(E.ConfigError):
        E.config_from_text("hidden_size 8\n")


# ---------------------------------------------------------------------------
# parameter counting


def count_oracle(stack):
    return sum(t.size for _, t in stack.parameters())


def test_count_matches_built_stack_baseline():
    cfg = toy_config()
    assert E.count_parameters(cfg).total == count_oracle(E.build_stack(cfg))


@pytest.mark.parametrize("cfg", [
    E.bandd(E.EncoderConfig(hidden_size=8, num_heads=2, intermediate_size=16,
                            num_attention_blocks=3, vocab_size=19,
                            max_position=16)),
    E.no_mlp_layernorm(E.EncoderConfig(hidden_size=12, num_heads=4,
                                       intermediate_size=24,
                                       num_attention_blocks=4, vocab_size=19,
                                       max_position=16,
                                       period=E.IntermediatePeriod.every(2))),
    E.EncoderConfig(hidden_size=8, num_heads=2, intermediate_size=16,
                    num_attention_blocks=5, vocab_size=19, max_position=16,
                    period=E.IntermediatePeriod.none(),
                    include_pooler=False),
])
def test_count_matches_built_stack_variants(cfg):
    assert E.count_parameters(cfg).total == count_oracle(E.build_stack(cfg))


def test_count_single_intermediate_unit_example():
    # one unit at H=8, I=32: 8*32 + 32 + 32*8 + 8 = 552
    cfg = E.EncoderConfig(hidden_size=8, num_heads=2, intermediate_size=32,
                          num_attention_blocks=1, vocab_size=19,
                          max_position=16)
    assert E.count_parameters(cfg).intermediate == 552


def test_count_bandd_delta_is_two_scalars_per_head_per_block():
    cfg = toy_config()
    base = E.count_parameters(cfg)
    with_bandd = E.count_parameters(E.bandd(cfg))
    assert (with_bandd.attention - base.attention
            == cfg.num_attention_blocks * 2 * cfg.num_heads)


def test_count_nomlpln_delta_is_2h_per_unit():
    cfg = toy_config()
    base = E.count_parameters(cfg)
    removed = E.count_parameters(E.no_mlp_layernorm(cfg))
    assert (base.layernorms - removed.layernorms
            == cfg.num_intermediate_units * 2 * cfg.hidden_size)


def test_count_bert_base_near_110m():
    total = E.count_parameters(E.BERT_BASE).total
    assert total == 109_482_240
    assert abs(total - 110_000_000) / 110_000_000 < 0.015


def test_count_strictly_decreases_with_sparser_periods():
    totals = []
    for n in (1, 2, 3, 4, 6):
        cfg = E.EncoderConfig(period=E.IntermediatePeriod.every(n))
        totals.append(E.count_parameters(cfg).total)
    totals.append(E.count_parameters(
        E.EncoderConfig(period=E.IntermediatePeriod.none())).total)
    assert all(a > b for a, b in zip(totals, totals[1:]))


def test_size_ratio_positive_guard():
    base = E.count_parameters(E.BERT_BASE)
    fake = E.ParamCount(0, 0, 0, 0, 0)
    with pytest.raises(T.ContractError):
        E.size_ratio(base, fake)


# ---------------------------------------------------------------------------
# stack structure and forward pass


def test_build_stack_structure_every_2():
    cfg = toy_config(num_attention_blocks=4,
                     period=E.IntermediatePeriod.every(2))
    stack = E.build_stack(cfg)
    assert [blk.has_intermediate for blk in stack.blocks] == [
        False, True, False, True]


def test_build_stack_deterministic_in_seed():
    cfg = toy_config()
    a, b = E.build_stack(cfg, seed=5), E.build_stack(cfg, seed=5)
    for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    c = E.build_stack(cfg, seed=6)
    assert not np.array_equal(a.word_emb.data, c.word_emb.data)


def test_trunc_normal_respects_bound():
    rng = np.random.default_rng(0)
    x = E._trunc_normal(rng, (20000,), std=0.02)
    assert np.abs(x).max() <= 0.04
    assert abs(x.std() - 0.02) < 0.005


def test_forward_shape_and_finite():
    cfg = toy_config()
    stack = E.build_stack(cfg, seed=1)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, cfg.vocab_size, size=(3, 6))
    out = E.forward(stack, ids)
    assert out.shape == (3, 6, cfg.hidden_size)
    assert np.isfinite(out.data).all()


def test_forward_eval_deterministic():
    cfg = toy_config()
    stack = E.build_stack(cfg, seed=1)
    ids = np.arange(12).reshape(2, 6) % cfg.vocab_size
    a = E.forward(stack, ids, training=False).data
    b = E.forward(stack, ids, training=False).data
    np.testing.assert_array_equal(a, b)


def test_forward_rejects_long_sequences_and_bad_ids():
    cfg = toy_config(max_position=4)
    stack = E.build_stack(cfg)
    with pytest.raises(A.InputError, match="max_position"):
        E.forward(stack, np.zeros((1, 5), dtype=int))
    with pytest.raises(A.InputError, match="out of range"):
        E.forward(stack, np.full((1, 3), cfg.vocab_size))


def test_forward_padding_mask_changes_nothing_for_unmasked_tail():
    """Padding keys are excluded from attention, so the outputs at the
    unmasked positions must not depend on pad token content."""
    cfg = toy_config(attn_output_dropout_rate=0.0,
                     intermediate_dropout_rate=0.0)
    stack = E.build_stack(cfg, seed=3)
    rng = np.random.default_rng(4)
    ids = rng.integers(5, cfg.vocab_size, size=(1, 6))
    mask = np.array([[True] * 4 + [False] * 2])
    out1 = E.forward(stack, ids, attention_mask=mask).data
    ids2 = ids.copy()
    ids2[0, 4:] = 0
    out2 = E.forward(stack, ids2, attention_mask=mask).data
    np.testing.assert_allclose(out1[:, :4], out2[:, :4], atol=1e-12)


def test_forward_matches_hand_rolled_oracle_with_inert_attention():
    """Zero the value/output projections so each attention unit reduces
    to residual + layernorm, then replay the whole stack in plain numpy."""
    cfg = toy_config(num_attention_blocks=2,
                     attn_output_dropout_rate=0.0,
                     intermediate_dropout_rate=0.0)
    stack = E.build_stack(cfg, seed=7)
    for blk in stack.blocks:
        blk.attn.wv.data[:] = 0.0
        blk.attn.wo.data[:] = 0.0
        blk.attn.bv.data[:] = 0.0
        blk.attn.bo.data[:] = 0.0
    ids = np.arange(8).reshape(2, 4) % cfg.vocab_size

    def ln(x, gain, bias, eps=cfg.eps):
        mu = x.mean(-1, keepdims=True)
        sd = x.std(-1, keepdims=True)
        return gain * (x - mu) / (sd + eps) + bias

    from scipy.special import ndtr
    x = (stack.word_emb.data[ids] + stack.pos_emb.data[:4]
         + stack.type_emb.data[0])
    x = ln(x, stack.emb_ln.gain.data, stack.emb_ln.bias.data)
    for blk in stack.blocks:
        x = ln(x, blk.attn_ln.gain.data, blk.attn_ln.bias.data)
        y = x @ blk.inter_w1.data + blk.inter_b1.data
        y = y * ndtr(y)
        y = y @ blk.inter_w2.data + blk.inter_b2.data
        x = ln(x + y, blk.inter_ln.gain.data, blk.inter_ln.bias.data)

    got = E.forward(stack, ids).data
    np.testing.assert_allclose(got, x, atol=1e-10)


def test_pool_first_uses_first_position_only():
    cfg = toy_config(attn_output_dropout_rate=0.0,
                     intermediate_dropout_rate=0.0)
    stack = E.build_stack(cfg, seed=8)
    rng = np.random.default_rng(9)
    hidden = T.Tensor(rng.normal(size=(2, 5, cfg.hidden_size)))
    pooled = E.pool_first(stack, hidden).data
    expected = np.tanh(hidden.data[:, 0, :] @ stack.pooler_w.data
                       + stack.pooler_b.data)
    np.testing.assert_allclose(pooled, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_bit_exact():
    cfg = E.bandd(toy_config(period=E.IntermediatePeriod.every(2),
                             num_attention_blocks=4))
    stack = E.build_stack(cfg, seed=11)
    stack.word_emb.data[0, 0] = 0.123456789123456789
    data = E.serialize_checkpoint(stack)
    loaded = E.load_checkpoint(data)
    assert loaded.config == cfg and loaded.seed == 11
    for (na, ta), (nb, tb) in zip(stack.parameters(), loaded.parameters()):
        assert na == nb
        np.testing.assert_array_equal(ta.data, tb.data)
    # and a second serialization is byte-identical
    assert E.serialize_checkpoint(loaded) == data


def test_checkpoint_peek_reads_header_only():
    stack = E.build_stack(toy_config(), seed=4)
    data = E.serialize_checkpoint(stack)
    cfg, seed = E.peek_checkpoint_config(data)
    assert cfg == stack.config and seed == 4


def test_checkpoint_bad_magic():
    data = b"XXXX" + bytes(64)
    with pytest.raises(E.CheckpointError, match="magic"):
        E.peek_checkpoint_config(data)


def test_checkpoint_version_mismatch():
    stack = E.build_stack(toy_config())
    data = bytearray(E.serialize_checkpoint(stack))
    data[4] = 99
    with pytest.raises(E.VersionMismatchError):
        E.peek_checkpoint_config(bytes(data))


def test_checkpoint_truncation_detected():
    stack = E.build_stack(toy_config())
    data = E.serialize_checkpoint(stack)
    with pytest.raises(E.TruncatedCheckpointError):
        E.load_checkpoint(data[:-7])
    with pytest.raises(E.TruncatedCheckpointError):
        E.peek_checkpoint_config(data[:6])


def test_checkpoint_trailing_bytes_detected():
    stack = E.build_stack(toy_config())
    data = E.serialize_checkpoint(stack)
    with pytest.raises(E.CheckpointError, match="trailing"):
        E.load_checkpoint(data + b"\x00")


def test_checkpoint_config_mismatch():
    stack = E.build_stack(toy_config())
    data = E.serialize_checkpoint(stack)
    other = toy_config(num_attention_blocks=3)
    with pytest.raises(E.ConfigMismatchError):
        E.load_checkpoint(data, config=other)
