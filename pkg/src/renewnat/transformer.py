"""Transformer building blocks: embeddings, attention, encoder, decoder stack.

Pre-norm residual blocks throughout. The decoder stack is generic over a
contiguous layer range and a self-attention mode so the same layers serve
the parallel decoder sub-modules (full self-attention) and the
autoregressive teacher (causal).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .optim import ParameterStore
from .tensor import NEG_INF, Tensor


class ConfigError(ValueError):
    pass


class LengthError(ValueError):
    pass


class VocabError(ValueError):
    pass


LENGTH_OFFSET_CAP = 30  # length head classifies offsets in [-CAP, +CAP]
LENGTH_CLASSES = 2 * LENGTH_OFFSET_CAP + 1


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 128
    n_enc_layers: int = 4
    n_dec_layers: int = 4
    k_mlm_layers: int = 2
    max_len: int = 128
    dropout: float = 0.1
    tie_embeddings: bool = False

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.d_model % 2 != 0:
            raise ConfigError("d_model must be even (interleaved sin/cos positions)")
        if not 1 <= self.k_mlm_layers < self.n_dec_layers:
            raise ConfigError(
                f"k_mlm_layers must satisfy 1 <= K < N, got K={self.k_mlm_layers}, "
                f"N={self.n_dec_layers}"
            )
        if self.vocab_size < 1 or self.max_len < 1:
            raise ConfigError("vocab_size and max_len must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass
class EncoderOutput:
    """Final encoder states; position 0 holds the prepended length token."""

    states: Tensor  # (B, S, d_model)
    pad: np.ndarray  # (B, S) bool, True at PAD positions


# -----------------------------------------------------------------------------
# Positions and embedding
# -----------------------------------------------------------------------------

_pe_cache: dict[tuple[int, int], np.ndarray] = {}


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Interleaved sin/cos table (n, d); row 0 is [0, 1, 0, 1, ...]."""
    key = (n, d)
    if key not in _pe_cache:
        pos = np.arange(n, dtype=np.float64)[:, None]
        freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
        pe = np.zeros((n, d), dtype=np.float64)
        pe[:, 0::2] = np.sin(pos * freq)
        pe[:, 1::2] = np.cos(pos * freq)
        _pe_cache[key] = pe.astype(np.float32)
    return _pe_cache[key]


def embed(table: Tensor, ids: np.ndarray, max_len: int) -> Tensor:
    """Token embedding * sqrt(d) plus fixed sinusoidal positions.

    ids int (T,) or (B, T). Out-of-vocabulary ids raise; mapping unknown
    tokens to UNK is the data module's job, not the model's.
    """
    ids = np.asarray(ids)
    vocab, d = table.data.shape
    seq_len = ids.shape[-1]
    if seq_len > max_len:
        raise LengthError(f"sequence length {seq_len} exceeds max_len {max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise VocabError(f"token id out of vocabulary range [0, {vocab})")
    scaled = T.mul(T.embedding(table, ids), math.sqrt(d))
    return T.add(scaled, sinusoidal_positions(max_len, d)[:seq_len])


# -----------------------------------------------------------------------------
# Attention masks (additive, 0 = visible, NEG_INF = blocked)
# -----------------------------------------------------------------------------


def padding_attention_mask(key_pad: np.ndarray) -> np.ndarray:
    """(B, S) bool -> (B, 1, 1, S) additive float mask."""
    return np.where(key_pad[:, None, None, :], np.float32(NEG_INF), np.float32(0.0))


def causal_attention_mask(n: int) -> np.ndarray:
    """(1, 1, n, n) additive mask blocking positions j > i."""
    tri = np.triu(np.full((n, n), NEG_INF, dtype=np.float32), k=1)
    return tri[None, None, :, :]


# -----------------------------------------------------------------------------
# Parameter initialization
# -----------------------------------------------------------------------------


def _init_linear(store: ParameterStore, name: str, fan_in: int, fan_out: int,
                 rng: np.random.Generator, bias: bool = True) -> None:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    store.add(f"{name}.w", rng.uniform(-limit, limit, size=(fan_in, fan_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(fan_out))


def _init_norm(store: ParameterStore, name: str, d: int) -> None:
    store.add(f"{name}.g", np.ones(d))
    store.add(f"{name}.b", np.zeros(d))


def _init_attention(store: ParameterStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    for proj in ("wq", "wk", "wv", "wo"):
        _init_linear(store, f"{prefix}.{proj}", d, d, rng)


def init_embedding(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    store.add("emb.tok", rng.normal(0.0, cfg.d_model**-0.5, size=(cfg.vocab_size, cfg.d_model)))


def init_encoder(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        _init_norm(store, f"{p}.ln1", d)
        _init_attention(store, f"{p}.attn", d, rng)
        _init_norm(store, f"{p}.ln2", d)
        _init_linear(store, f"{p}.ffn.1", d, cfg.ffn_dim, rng)
        _init_linear(store, f"{p}.ffn.2", cfg.ffn_dim, d, rng)
    _init_norm(store, "enc.norm", d)


def init_decoder_layers(store: ParameterStore, cfg: ModelConfig, rng: np.random.Generator) -> None:
    d = cfg.d_model
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}"
        _init_norm(store, f"{p}.ln1", d)
        _init_attention(store, f"{p}.self", d, rng)
        _init_norm(store, f"{p}.ln2", d)
        _init_attention(store, f"{p}.cross", d, rng)
        _init_norm(store, f"{p}.ln3", d)
        _init_linear(store, f"{p}.ffn.1", d, cfg.ffn_dim, rng)
        _init_linear(store, f"{p}.ffn.2", cfg.ffn_dim, d, rng)


# -----------------------------------------------------------------------------
# Forward blocks
# -----------------------------------------------------------------------------


def _linear(store: ParameterStore, name: str, x: Tensor) -> Tensor:
    out = T.matmul(x, store[f"{name}.w"])
    if f"{name}.b" in store:
        out = T.add(out, store[f"{name}.b"])
    return out


def multi_head_attention(
    store: ParameterStore,
    prefix: str,
    queries: Tensor,
    keys: Tensor,
    values: Tensor,
    attention_mask: Optional[np.ndarray],
    n_heads: int,
) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated and projected.

    queries (B, Tq, d), keys/values (B, Tk, d); 2D inputs are lifted to a
    singleton batch. `attention_mask` is additive, broadcastable to
    (B, n_heads, Tq, Tk); blocked positions carry NEG_INF.
    """
    squeeze = queries.data.ndim == 2
    if squeeze:
        queries = T.reshape(queries, (1,) + queries.shape)
        keys = T.reshape(keys, (1,) + keys.shape)
        values = T.reshape(values, (1,) + values.shape)
    b, tq, d = queries.shape
    tk = keys.shape[1]
    dh = d // n_heads

    def split(x: Tensor, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (b, t, n_heads, dh)), (0, 2, 1, 3))

    q = split(_linear(store, f"{prefix}.wq", queries), tq)
    k = split(_linear(store, f"{prefix}.wk", keys), tk)
    v = split(_linear(store, f"{prefix}.wv", values), tk)
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if attention_mask is not None:
        scores = T.add(scores, attention_mask)
    attn = T.softmax(scores, axis=-1)
    ctx = T.matmul(attn, v)  # (B, H, Tq, dh)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
    out = _linear(store, f"{prefix}.wo", merged)
    if squeeze:
        out = T.reshape(out, (tq, d))
    return out


def _ffn(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return _linear(store, f"{prefix}.2", T.relu(_linear(store, f"{prefix}.1", x)))


def _maybe_dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if train and p > 0.0:
        assert rng is not None, "training forward needs an rng for dropout"
        return T.dropout(x, p, rng)
    return x


def encode(
    store: ParameterStore,
    cfg: ModelConfig,
    src_ids: np.ndarray,
    src_pad: np.ndarray,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    """Run the encoder stack over length-token-prefixed source ids (B, S)."""
    x = embed(store["emb.tok"], src_ids, cfg.max_len)
    mask = padding_attention_mask(src_pad)
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}"
        h = T.layer_norm(x, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        h = multi_head_attention(store, f"{p}.attn", h, h, h, mask, cfg.n_heads)
        x = T.add(x, _maybe_dropout(h, cfg.dropout, train, rng))
        h = T.layer_norm(x, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
        h = _ffn(store, f"{p}.ffn", h)
        x = T.add(x, _maybe_dropout(h, cfg.dropout, train, rng))
    x = T.layer_norm(x, store["enc.norm.g"], store["enc.norm.b"])
    return EncoderOutput(states=x, pad=np.asarray(src_pad, dtype=bool))


def decoder_stack(
    store: ParameterStore,
    cfg: ModelConfig,
    x: Tensor,
    enc: EncoderOutput,
    layer_lo: int,
    layer_hi: int,
    causal: bool,
    tgt_pad: Optional[np.ndarray] = None,
    train: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Run decoder layers [layer_lo, layer_hi) over inputs x (B, T, d).

    Full (non-causal) self-attention for the parallel sub-modules, causal for
    the autoregressive teacher. No final norm here: each consumer applies its
    own before its output head.
    """
    if not 0 <= layer_lo < layer_hi <= cfg.n_dec_layers:
        raise ConfigError(f"empty or invalid decoder layer range [{layer_lo}, {layer_hi})")
    t_len = x.shape[-2]
    self_mask = np.zeros((1, 1, 1, t_len), dtype=np.float32)
    if tgt_pad is not None:
        self_mask = padding_attention_mask(tgt_pad)
    if causal:
        self_mask = self_mask + causal_attention_mask(t_len)
    cross_mask = padding_attention_mask(enc.pad)
    for i in range(layer_lo, layer_hi):
        p = f"dec.{i}"
        h = T.layer_norm(x, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
        h = multi_head_attention(store, f"{p}.self", h, h, h, self_mask, cfg.n_heads)
        x = T.add(x, _maybe_dropout(h, cfg.dropout, train, rng))
        h = T.layer_norm(x, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
        h = multi_head_attention(store, f"{p}.cross", h, enc.states, enc.states,
                                 cross_mask, cfg.n_heads)
        x = T.add(x, _maybe_dropout(h, cfg.dropout, train, rng))
        h = T.layer_norm(x, store[f"{p}.ln3.g"], store[f"{p}.ln3.b"])
        h = _ffn(store, f"{p}.ffn", h)
        x = T.add(x, _maybe_dropout(h, cfg.dropout, train, rng))
    return x
