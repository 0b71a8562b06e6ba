"""Configurable BERT-style encoder stacks.

Three composable architecture axes:

* an intermediate-block period n: the feed-forward (intermediate) unit
  appears only after every n attention blocks, giving floor(m/n) units
  for m attention blocks (n = infinity means no intermediate units);
* the attention score function: softmax, or normalized attention with
  per-head gain/bias and no post-attention dropout;
* layernorm removal after intermediate units (keeping the residual),
  plus a guarded ablation that removes the attention-side layernorm.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from . import attention as A
from .tensor import Tensor

KEEP = "keep"
REMOVE = "remove"
REMOVE_ABLATION = "remove_ablation"

CHECKPOINT_MAGIC = b"SLFM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass(frozen=True)
class IntermediatePeriod:
    """Every(k) places an intermediate unit after every k attention
    blocks; NONE (k is None) places none at all."""

    k: int | None

    def __post_init__(self):
        if self.k is not None and self.k < 1:
            raise ConfigError(f"period must be >= 1, got {self.k}")

    @staticmethod
    def every(k: int) -> "IntermediatePeriod":
        return IntermediatePeriod(k)

    @staticmethod
    def none() -> "IntermediatePeriod":
        return IntermediatePeriod(None)

    @property
    def is_none(self) -> bool:
        return self.k is None

    def __str__(self):
        return "none" if self.k is None else f"every:{self.k}"

    @staticmethod
    def parse(text: str) -> "IntermediatePeriod":
        text = text.strip()
        if text == "none":
            return IntermediatePeriod.none()
        if text.startswith("every:"):
            return IntermediatePeriod.every(int(text.split(":", 1)[1]))
        raise ConfigError(f"bad period {text!r} (want 'every:N' or 'none')")


def intermediate_positions(m: int, period: IntermediatePeriod) -> list[int]:
    """1-based attention-block indices followed by an intermediate unit:
    [n, 2n, ..., floor(m/n)*n], or [] for the no-intermediate case."""
    if m < 1:
        raise ConfigError(f"need at least one attention block, got {m}")
    if period.is_none:
        return []
    n = period.k
    return [n * i for i in range(1, m // n + 1)]


@dataclass(frozen=True)
class EncoderConfig:
    hidden_size: int = 768
    num_heads: int = 12
    intermediate_size: int = 3072
    num_attention_blocks: int = 12
    period: IntermediatePeriod = field(default_factory=lambda: IntermediatePeriod.every(1))
    attention_kind: str = A.SOFTMAX
    mlp_layernorm: str = KEEP
    attn_layernorm: str = KEEP
    attn_output_dropout_rate: float = 0.1
    intermediate_dropout_rate: float = 0.1
    vocab_size: int = 30522
    max_position: int = 512
    type_vocab: int = 2
    include_pooler: bool = True
    eps: float = 1e-6
    allow_ablation: bool = False

    def __post_init__(self):
        for key in ("hidden_size", "num_heads", "intermediate_size",
                    "num_attention_blocks", "vocab_size", "max_position",
                    "type_vocab"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(
                f"hidden_size {self.hidden_size} not divisible by "
                f"num_heads {self.num_heads}")
        if self.attention_kind not in A.ATTENTION_KINDS:
            raise ConfigError(f"unknown attention_kind {self.attention_kind!r}")
        if self.mlp_layernorm not in (KEEP, REMOVE):
            raise ConfigError(f"mlp_layernorm must be keep|remove")
        if self.attn_layernorm not in (KEEP, REMOVE_ABLATION):
            raise ConfigError("attn_layernorm must be keep|remove_ablation")
        if self.attn_layernorm == REMOVE_ABLATION and not self.allow_ablation:
            raise ConfigError(
                "attn_layernorm=remove_ablation is a known-divergent "
                "configuration; set allow_ablation=true to acknowledge")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    @property
    def num_intermediate_units(self) -> int:
        return len(intermediate_positions(self.num_attention_blocks, self.period))

    def validate_for_build(self):
        if self.attention_kind == A.NORMALIZED_BANDD and self.attn_output_dropout_rate != 0.0:
            raise ConfigError(
                "normalized attention removes post-attention dropout: "
                "attn_output_dropout_rate must be 0")


# canonical BERT-BASE shape used for the headline size-reduction matrix
BERT_BASE = EncoderConfig()


def bandd(config: EncoderConfig) -> EncoderConfig:
    """Switch a config to normalized attention (drops output dropout)."""
    return replace(config, attention_kind=A.NORMALIZED_BANDD,
                   attn_output_dropout_rate=0.0)


def no_mlp_layernorm(config: EncoderConfig) -> EncoderConfig:
    return replace(config, mlp_layernorm=REMOVE)


# ---------------------------------------------------------------------------
# config file format: flat `key = value` lines, '#' comments


_CONFIG_KEYS = ("hidden_size", "num_heads", "intermediate_size",
                "num_attention_blocks", "period", "attention_kind",
                "mlp_layernorm", "attn_layernorm", "attn_output_dropout_rate",
                "intermediate_dropout_rate", "vocab_size", "max_position",
                "type_vocab", "include_pooler", "eps", "allow_ablation")

_INT_KEYS = {"hidden_size", "num_heads", "intermediate_size",
             "num_attention_blocks", "vocab_size", "max_position", "type_vocab"}
_FLOAT_KEYS = {"attn_output_dropout_rate", "intermediate_dropout_rate", "eps"}
_BOOL_KEYS = {"include_pooler", "allow_ablation"}


def _parse_bool(text, key):
    low = text.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"bad boolean for {key}: {text!r}")


def parse_flat_config(text: str) -> dict[str, str]:
    """Parse `key = value` lines, ignoring blanks and '#' comments."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_text(text: str) -> EncoderConfig:
    pairs = parse_flat_config(text)
    unknown = set(pairs) - set(_CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in pairs.items():
        if key == "period":
            kwargs[key] = IntermediatePeriod.parse(value)
        elif key in _INT_KEYS:
            kwargs[key] = int(value)
        elif key in _FLOAT_KEYS:
            kwargs[key] = float(value)
        elif key in _BOOL_KEYS:
            kwargs[key] = _parse_bool(value, key)
        else:
            kwargs[key] = value
    return EncoderConfig(**kwargs)


def config_to_text(config: EncoderConfig) -> str:
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(config, key)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def load_config(path) -> EncoderConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


# ---------------------------------------------------------------------------
# parameter counting


@dataclass
class ParamCount:
    embeddings: int
    attention: int
    intermediate: int
    layernorms: int
    pooler: int

    @property
    def total(self) -> int:
        return (self.embeddings + self.attention + self.intermediate
                + self.layernorms + self.pooler)


def count_parameters(config: EncoderConfig) -> ParamCount:
    """Closed-form parameter count; matches the built stack exactly."""
    h, i = config.hidden_size, config.intermediate_size
    m = config.num_attention_blocks
    u = config.num_intermediate_units
    embeddings = (config.vocab_size + config.max_position + config.type_vocab) * h
    attention = m * (4 * h * h + 4 * h)
    if config.attention_kind == A.NORMALIZED_BANDD:
        attention += m * 2 * config.num_heads  # per-head gain and bias scalars
    intermediate = u * (h * i + i + i * h + h)
    layernorms = 2 * h  # embedding layernorm
    if config.attn_layernorm == KEEP:
        layernorms += m * 2 * h
    if config.mlp_layernorm == KEEP:
        layernorms += u * 2 * h
    pooler = (h * h + h) if config.include_pooler else 0
    return ParamCount(embeddings, attention, intermediate, layernorms, pooler)


def size_ratio(base: ParamCount, variant: ParamCount) -> float:
    if variant.total <= 0:
        raise T.ContractError("variant parameter count must be positive")
    return base.total / variant.total


# ---------------------------------------------------------------------------
# stack construction


def _trunc_normal(rng: np.random.Generator, shape, std=0.02, bound=2.0):
    """Truncated normal at +/- bound*std, by redraw."""
    x = rng.normal(0.0, std, size=shape)
    limit = bound * std
    bad = np.abs(x) > limit
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > limit
    return x


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class Block:
    """One attention unit plus (optionally) an intermediate unit."""
    attn: A.AttentionParams
    attn_ln: LayerNormParams | None
    inter_w1: Tensor | None = None
    inter_b1: Tensor | None = None
    inter_w2: Tensor | None = None
    inter_b2: Tensor | None = None
    inter_ln: LayerNormParams | None = None

    @property
    def has_intermediate(self) -> bool:
        return self.inter_w1 is not None


@dataclass
class EncoderStack:
    config: EncoderConfig
    seed: int
    word_emb: Tensor
    pos_emb: Tensor
    type_emb: Tensor
    emb_ln: LayerNormParams
    blocks: list
    pooler_w: Tensor | None
    pooler_b: Tensor | None

    def parameters(self):
        """(name, tensor) pairs in fixed build order."""
        yield "embeddings.word", self.word_emb
        yield "embeddings.position", self.pos_emb
        yield "embeddings.type", self.type_emb
        yield "embeddings.ln.gain", self.emb_ln.gain
        yield "embeddings.ln.bias", self.emb_ln.bias
        for idx, blk in enumerate(self.blocks):
            p = f"block{idx}"
            yield f"{p}.attn.wq", blk.attn.wq
            yield f"{p}.attn.bq", blk.attn.bq
            yield f"{p}.attn.wk", blk.attn.wk
            yield f"{p}.attn.bk", blk.attn.bk
            yield f"{p}.attn.wv", blk.attn.wv
            yield f"{p}.attn.bv", blk.attn.bv
            yield f"{p}.attn.wo", blk.attn.wo
            yield f"{p}.attn.bo", blk.attn.bo
            if blk.attn.g is not None:
                yield f"{p}.attn.score_gain", blk.attn.g
                yield f"{p}.attn.score_bias", blk.attn.b
            if blk.attn_ln is not None:
                yield f"{p}.attn.ln.gain", blk.attn_ln.gain
                yield f"{p}.attn.ln.bias", blk.attn_ln.bias
            if blk.has_intermediate:
                yield f"{p}.inter.w1", blk.inter_w1
                yield f"{p}.inter.b1", blk.inter_b1
                yield f"{p}.inter.w2", blk.inter_w2
                yield f"{p}.inter.b2", blk.inter_b2
                if blk.inter_ln is not None:
                    yield f"{p}.inter.ln.gain", blk.inter_ln.gain
                    yield f"{p}.inter.ln.bias", blk.inter_ln.bias
        if self.pooler_w is not None:
            yield "pooler.w", self.pooler_w
            yield "pooler.b", self.pooler_b

    def param_tensors(self):
        return [t for _, t in self.parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def set_trainable(self, flag: bool):
        for _, t in self.parameters():
            t.requires_grad = flag


def build_stack(config: EncoderConfig, seed: int = 0) -> EncoderStack:
    """Initialize all parameters deterministically from the seed."""
    config.validate_for_build()
    rng = np.random.default_rng(seed)
    h, i = config.hidden_size, config.intermediate_size
    std = 0.02

    def weight(*shape):
        return Tensor(_trunc_normal(rng, shape, std), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ln():
        return LayerNormParams(Tensor(np.ones(h), requires_grad=True),
                               Tensor(np.zeros(h), requires_grad=True))

    word = weight(config.vocab_size, h)
    pos = weight(config.max_position, h)
    typ = weight(config.type_vocab, h)
    emb_ln = ln()

    positions = set(intermediate_positions(config.num_attention_blocks,
                                           config.period))
    is_bandd = config.attention_kind == A.NORMALIZED_BANDD
    blocks = []
    for blk_idx in range(1, config.num_attention_blocks + 1):
        attn = A.AttentionParams(
            wq=weight(h, h), bq=zeros(h),
            wk=weight(h, h), bk=zeros(h),
            wv=weight(h, h), bv=zeros(h),
            wo=weight(h, h), bo=zeros(h),
            g=Tensor(np.ones(config.num_heads), requires_grad=True) if is_bandd else None,
            b=Tensor(np.zeros(config.num_heads), requires_grad=True) if is_bandd else None,
        )
        blk = Block(attn=attn,
                    attn_ln=ln() if config.attn_layernorm == KEEP else None)
        if blk_idx in positions:
            blk.inter_w1 = weight(h, i)
            blk.inter_b1 = zeros(i)
            blk.inter_w2 = weight(i, h)
            blk.inter_b2 = zeros(h)
            blk.inter_ln = ln() if config.mlp_layernorm == KEEP else None
        blocks.append(blk)

    pooler_w = weight(h, h) if config.include_pooler else None
    pooler_b = zeros(h) if config.include_pooler else None
    return EncoderStack(config=config, seed=seed, word_emb=word, pos_emb=pos,
                        type_emb=typ, emb_ln=emb_ln, blocks=blocks,
                        pooler_w=pooler_w, pooler_b=pooler_b)


# ---------------------------------------------------------------------------
# forward pass


def forward(stack: EncoderStack, token_ids: np.ndarray,
            attention_mask: np.ndarray | None = None, training: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Run the encoder, returning hidden states [B, S, H]."""
    cfg = stack.config
    token_ids = np.asarray(token_ids)
    bsz, seq = token_ids.shape
    if seq > cfg.max_position:
        raise A.InputError(f"sequence length {seq} exceeds max_position "
                           f"{cfg.max_position}")
    if token_ids.min() < 0 or token_ids.max() >= cfg.vocab_size:
        raise A.InputError(f"token ids out of range [0, {cfg.vocab_size})")
    if attention_mask is None:
        attention_mask = np.ones((bsz, seq), dtype=bool)
    if training and rng is None:
        rng = np.random.default_rng(0)

    tok = T.embedding(stack.word_emb, token_ids)
    # position/type rows are identical across the batch: look them up
    # once and let broadcasting (with summed gradients) do the rest
    pos = T.embedding(stack.pos_emb, np.arange(seq))
    typ = T.embedding(stack.type_emb, np.zeros(1, dtype=int))
    x = T.layer_norm(T.add(T.add(tok, pos), typ),
                     stack.emb_ln.gain, stack.emb_ln.bias, cfg.eps)

    for blk in stack.blocks:
        attn_out = A.self_attention(
            x, blk.attn, cfg.num_heads, attention_mask,
            kind=cfg.attention_kind,
            dropout_rate=cfg.attn_output_dropout_rate,
            training=training, rng=rng, eps=cfg.eps)
        x = T.add(x, attn_out)
        if blk.attn_ln is not None:
            x = T.layer_norm(x, blk.attn_ln.gain, blk.attn_ln.bias, cfg.eps)
        if blk.has_intermediate:
            y = T.gelu(T.add(T.matmul(x, blk.inter_w1), blk.inter_b1))
            y = T.add(T.matmul(y, blk.inter_w2), blk.inter_b2)
            y = T.dropout(y, cfg.intermediate_dropout_rate, training, rng)
            x = T.add(x, y)
            if blk.inter_ln is not None:
                x = T.layer_norm(x, blk.inter_ln.gain, blk.inter_ln.bias, cfg.eps)
    return x


def pool_first(stack: EncoderStack, hidden: Tensor) -> Tensor:
    """First-position representation through the pooler (if present)."""
    first = Tensor(hidden.data[:, 0, :])
    if T._tracking(hidden):
        def bw(go):
            g = np.zeros_like(hidden.data)
            g[:, 0, :] = go
            return (g,)
        T._record(first, (hidden,), bw)
    if stack.pooler_w is None:
        return first
    return T.tanh(T.add(T.matmul(first, stack.pooler_w), stack.pooler_b))


# ---------------------------------------------------------------------------
# checkpoint serialization


def serialize_checkpoint(stack: EncoderStack) -> bytes:
    """Magic "SLFM", u32 version, length-prefixed config text (includes
    the build seed), then named little-endian f64 parameter tensors in
    build order."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = config_to_text(stack.config) + f"seed = {stack.seed}\n"
    hb = header.encode("utf-8")
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    for name, t in stack.parameters():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<Q", t.size))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def _read_exact(buf, n, what):
    data = buf.read(n)
    if len(data) != n:
        raise TruncatedCheckpointError(f"checkpoint truncated while reading {what}")
    return data


def peek_checkpoint_config(data: bytes) -> tuple[EncoderConfig, int]:
    """Read (config, seed) from the header without loading parameters."""
    buf = io.BytesIO(data)
    magic = _read_exact(buf, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"checkpoint version {version}, supported {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack("<I", _read_exact(buf, 4, "header length"))
    header = _read_exact(buf, hlen, "header").decode("utf-8")
    pairs = parse_flat_config(header)
    seed = int(pairs.pop("seed", "0"))
    config = config_from_text(
        "\n".join(f"{k} = {v}" for k, v in pairs.items()))
    return config, seed


def load_checkpoint(data: bytes, config: EncoderConfig | None = None) -> EncoderStack:
    """Rebuild a stack from checkpoint bytes; bit-exact round trip."""
    stored, seed = peek_checkpoint_config(data)
    if config is not None and stored != config:
        raise ConfigMismatchError(
            "checkpoint config does not match the requested config")
    stack = build_stack(stored, seed)
    buf = io.BytesIO(data)
    buf.seek(4 + 4)
    (hlen,) = struct.unpack("<I", _read_exact(buf, 4, "header length"))
    buf.seek(hlen, io.SEEK_CUR)
    for name, t in stack.parameters():
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4, "name length"))
        stored_name = _read_exact(buf, nlen, "name").decode("utf-8")
        if stored_name != name:
            raise CheckpointError(
                f"parameter order mismatch: expected {name}, found {stored_name}")
        (count,) = struct.unpack("<Q", _read_exact(buf, 8, "element count"))
        if count != t.size:
            raise ConfigMismatchError(
                f"parameter {name}: {count} stored elements, stack has {t.size}")
        raw = _read_exact(buf, 8 * count, f"data of {name}")
        t.data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t.shape)
    if buf.read(1):
        raise CheckpointError("trailing bytes after last parameter")
    return stack
