"""The split-decoder translation model and its joint training step.

The decoder is divided into a parallel translation sub-module (layers
1..N-K, fed a copy of the source embeddings) and a masked-LM renewal
sub-module (layers N-K+1..N, fed token embeddings of a partially masked
target). Both share one encoder and one embedding table; training sums a
potential-translation loss, a masked-token loss, and a length loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Batch, BOS_ID, EOS_ID, MASK_ID, PAD_ID
from .optim import ParameterStore, named_rng, warmup_inverse_sqrt
from .tensor import Tensor
from .transformer import (
    LENGTH_CLASSES,
    LENGTH_OFFSET_CAP,
    ConfigError,
    EncoderOutput,
    LengthError,
    ModelConfig,
    decoder_stack,
    embed,
    encode,
    init_decoder_layers,
    init_embedding,
    init_encoder,
    multi_head_attention,
    sinusoidal_positions,
    _init_linear,
    _init_norm,
)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    warmup_steps: int = 400
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    label_smoothing: float = 0.1
    mlm_input: str = "target"  # target | output | mixed
    p_mix: float = 0.5
    glancing: bool = False
    glancing_start: float = 0.5
    glancing_end: float = 0.3
    total_steps: int = 2000  # horizon for the linear glancing-ratio anneal
    copy_mode: str = "uniform"  # uniform | soft
    soft_copy_temp: float = 0.3
    # Diagnostic scaling of (pot, mlm, len) losses; reported sums use unit weights.
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        if self.mlm_input not in ("target", "output", "mixed"):
            raise ConfigError(f"bad mlm_input: {self.mlm_input}")
        if not 0.0 <= self.p_mix <= 1.0:
            raise ConfigError("p_mix must be in [0, 1]")
        for r in (self.glancing_start, self.glancing_end):
            if not 0.0 < r < 1.0:
                raise ConfigError("glancing ratios must be in (0, 1)")
        if self.copy_mode not in ("uniform", "soft"):
            raise ConfigError(f"bad copy_mode: {self.copy_mode}")

    def glancing_ratio(self, step: int) -> float:
        frac = min(1.0, step / max(1, self.total_steps))
        return self.glancing_start + (self.glancing_end - self.glancing_start) * frac


@dataclass
class PotentialTranslation:
    """First-pass output: tokens, per-position confidence, full log-probs."""

    tokens: np.ndarray  # (T,) int64
    confidence: np.ndarray  # (T,) float, max softmax probability per position
    log_probs: np.ndarray  # (T, V) float, kept for length-beam rescoring

    def __post_init__(self) -> None:
        t = len(self.tokens)
        if self.confidence.shape != (t,) or self.log_probs.shape[0] != t:
            raise ValueError("potential translation field lengths disagree")
        if t and not ((self.confidence > 0.0).all() and (self.confidence <= 1.0).all()):
            raise ValueError("confidence values must lie in (0, 1]")


@dataclass
class BatchPotential:
    """Batched, tape-detached potential translations (rows padded to T)."""

    tokens: np.ndarray  # (B, T) int64
    confidence: np.ndarray  # (B, T)
    log_probs: np.ndarray  # (B, T, V)

    def sentence(self, row: int, length: int) -> PotentialTranslation:
        return PotentialTranslation(
            tokens=self.tokens[row, :length].copy(),
            confidence=self.confidence[row, :length].copy(),
            log_probs=self.log_probs[row, :length].copy(),
        )


@dataclass
class MaskedInput:
    """Target partition: tokens carry MASK exactly at masked positions."""

    tokens: np.ndarray  # (T,) int64
    mask: np.ndarray  # (T,) bool

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.tokens.shape != self.mask.shape:
            raise ValueError("tokens/mask shape mismatch")
        if not ((self.tokens == MASK_ID) == self.mask).all():
            raise ValueError("tokens must equal MASK exactly at masked positions")

    @property
    def mask_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def observed_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)


@dataclass
class LossBundle:
    l_pot: float
    l_mlm: float
    l_len: float
    total: float


# -----------------------------------------------------------------------------
# Source-copy decoder inputs
# -----------------------------------------------------------------------------


def copy_indices(src_len: int, tgt_len: int) -> np.ndarray:
    """Uniform-copy index map: position j reads source floor(j * T_X / T)."""
    return (np.arange(tgt_len) * src_len) // tgt_len


def soft_copy_weights(src_len: int, tgt_len: int, temperature: float) -> np.ndarray:
    """(T, S) rows: softmax over -|j*T_X/T - i| / temperature."""
    centers = np.arange(tgt_len, dtype=np.float64)[:, None] * src_len / tgt_len
    dist = -np.abs(centers - np.arange(src_len, dtype=np.float64)[None, :]) / temperature
    dist -= dist.max(axis=1, keepdims=True)
    w = np.exp(dist)
    return (w / w.sum(axis=1, keepdims=True)).astype(np.float32)


def copy_source(
    src_emb: Tensor,
    tgt_len: int,
    mode: str = "uniform",
    temperature: float = 0.3,
    max_len: Optional[int] = None,
) -> Tensor:
    """Build the parallel decoder input from source embeddings (S, d)."""
    if tgt_len < 1 or src_emb.shape[0] < 1:
        raise LengthError("copy_source needs non-empty source and target")
    if max_len is not None and tgt_len > max_len:
        raise LengthError(f"target length {tgt_len} exceeds max_len {max_len}")
    src_len = src_emb.shape[0]
    if mode == "uniform":
        return T.gather_rows(src_emb, copy_indices(src_len, tgt_len))
    if mode == "soft":
        weights = Tensor(soft_copy_weights(src_len, tgt_len, temperature))
        return T.matmul(weights, src_emb)
    raise ConfigError(f"unknown copy mode: {mode}")


def copy_source_batch(
    src_emb: Tensor,
    src_lens: np.ndarray,
    tgt_lens: np.ndarray,
    mode: str = "uniform",
    temperature: float = 0.3,
) -> Tensor:
    """Batched copy over padded rows; positions past tgt_lens read index 0."""
    b, s_width, _ = src_emb.shape
    t_width = int(tgt_lens.max())
    if mode == "uniform":
        idx = np.zeros((b, t_width), dtype=np.int64)
        for row in range(b):
            t = int(tgt_lens[row])
            idx[row, :t] = copy_indices(int(src_lens[row]), t)
        return T.gather_rows(src_emb, idx)
    if mode == "soft":
        weights = np.zeros((b, t_width, s_width), dtype=np.float32)
        for row in range(b):
            t, s = int(tgt_lens[row]), int(src_lens[row])
            weights[row, :t, :s] = soft_copy_weights(s, t, temperature)
            weights[row, t:, 0] = 1.0
        return T.matmul(Tensor(weights), src_emb)
    raise ConfigError(f"unknown copy mode: {mode}")


# -----------------------------------------------------------------------------
# Masking and MLM input construction
# -----------------------------------------------------------------------------


def uniform_mask(
    y: np.ndarray,
    rng: np.random.Generator,
    count_sampler=None,
) -> MaskedInput:
    """Mask n ~ Uniform{1..T} positions chosen uniformly without replacement."""
    y = np.asarray(y, dtype=np.int64)
    t = len(y)
    if t < 1:
        raise LengthError("cannot mask an empty sequence")
    n = int(count_sampler(t, rng)) if count_sampler is not None else int(rng.integers(1, t + 1))
    n = min(max(n, 1), t)
    positions = rng.choice(t, size=n, replace=False)
    mask = np.zeros(t, dtype=bool)
    mask[positions] = True
    tokens = y.copy()
    tokens[mask] = MASK_ID
    return MaskedInput(tokens=tokens, mask=mask)


def build_mlm_input(
    y: np.ndarray,
    y_pot: Optional[np.ndarray],
    strategy: str,
    p_mix: float,
    rng: np.random.Generator,
    mask: MaskedInput,
) -> MaskedInput:
    """Fill observed positions from the target, the first-pass output, or a mix."""
    y = np.asarray(y, dtype=np.int64)
    if strategy == "target":
        observed = y
    else:
        if y_pot is None:
            raise ConfigError(f"strategy {strategy!r} needs first-pass output tokens")
        y_pot = np.asarray(y_pot, dtype=np.int64)
        if y_pot.shape != y.shape:
            raise LengthError("first-pass output length must match the target during training")
        if strategy == "output":
            observed = y_pot
        elif strategy == "mixed":
            take_pot = rng.random(len(y)) < p_mix
            observed = np.where(take_pot, y_pot, y)
        else:
            raise ConfigError(f"unknown mlm input strategy: {strategy}")
    tokens = observed.copy()
    tokens[mask.mask] = MASK_ID
    return MaskedInput(tokens=tokens, mask=mask.mask.copy())


def glancing_sample(
    h: Tensor,
    y: np.ndarray,
    y_pot: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    y_emb: Tensor,
) -> tuple[Tensor, np.ndarray]:
    """Reveal round(ratio * hamming) target embeddings in the decoder input.

    Returns the (possibly identical) input and the glanced-position mask;
    the potential loss is then computed over unglanced positions only.
    """
    y = np.asarray(y)
    y_pot = np.asarray(y_pot)
    if y.shape != y_pot.shape or h.shape[0] != len(y):
        raise LengthError("glancing_sample: length mismatch")
    distance = int((y != y_pot).sum())
    n = min(int(round(ratio * distance)), len(y))
    glanced = np.zeros(len(y), dtype=bool)
    if n == 0:
        return h, glanced
    glanced[rng.choice(len(y), size=n, replace=False)] = True
    return T.where(glanced[:, None], y_emb, h), glanced


# -----------------------------------------------------------------------------
# Models
# -----------------------------------------------------------------------------


class RenewNAT:
    """Split-decoder parallel translator with confidence-based renewal."""

    arch = "renewnat"
    has_mlm = True

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: Optional[ParameterStore] = None):
        self.cfg = cfg
        self.store = store if store is not None else self._init_params(cfg, seed)
        self.counters = {"nat_forward": 0, "mlm_forward": 0}

    # -- parameters -----------------------------------------------------------

    def _init_params(self, cfg: ModelConfig, seed: int) -> ParameterStore:
        store = ParameterStore()
        rng = named_rng(seed, "init")
        init_embedding(store, cfg, rng)
        init_encoder(store, cfg, rng)
        init_decoder_layers(store, cfg, rng)
        _init_norm(store, "nat.norm", cfg.d_model)
        _init_norm(store, "len.norm", cfg.d_model)
        _init_linear(store, "len.head", cfg.d_model, LENGTH_CLASSES, rng)
        if not cfg.tie_embeddings:
            _init_linear(store, "nat.head", cfg.d_model, cfg.vocab_size, rng, bias=False)
        if self.has_mlm:
            _init_norm(store, "mlm.norm", cfg.d_model)
            if not cfg.tie_embeddings:
                _init_linear(store, "mlm.head", cfg.d_model, cfg.vocab_size, rng, bias=False)
        return store

    def _head(self, hidden: Tensor, name: str) -> Tensor:
        if self.cfg.tie_embeddings:
            return T.matmul(hidden, T.transpose(self.store["emb.tok"], (1, 0)))
        return T.matmul(hidden, self.store[f"{name}.w"])

    def nat_layer_range(self) -> tuple[int, int]:
        return 0, self.cfg.n_dec_layers - self.cfg.k_mlm_layers

    def mlm_layer_range(self) -> tuple[int, int]:
        return self.cfg.n_dec_layers - self.cfg.k_mlm_layers, self.cfg.n_dec_layers

    # -- forwards --------------------------------------------------------------

    def encode(self, src_ids: np.ndarray, src_pad: np.ndarray,
               train: bool = False, rng=None) -> EncoderOutput:
        return encode(self.store, self.cfg, src_ids, src_pad, train, rng)

    def source_embeddings(self, src_ids_raw: np.ndarray) -> Tensor:
        """Embeddings of the bare source tokens (no length token prefix)."""
        return embed(self.store["emb.tok"], src_ids_raw, self.cfg.max_len)

    def target_embeddings(self, tgt_ids: np.ndarray) -> Tensor:
        return embed(self.store["emb.tok"], tgt_ids, self.cfg.max_len)

    def nat_forward(
        self,
        h: Tensor,
        enc: EncoderOutput,
        tgt_pad: Optional[np.ndarray] = None,
        train: bool = False,
        rng=None,
    ) -> tuple[Tensor, BatchPotential]:
        """Parallel sub-module pass: (B, T, d) copied inputs -> logits (B, T, V).

        Target-side positional encodings are added here: copied rows only carry
        (stretched) source positions, which collide whenever two target
        positions map to the same source index.
        """
        squeeze = h.data.ndim == 2
        if squeeze:
            h = T.reshape(h, (1,) + h.shape)
            tgt_pad = None if tgt_pad is None else np.asarray(tgt_pad)[None, :]
        self.counters["nat_forward"] += 1
        t_len = h.shape[1]
        x = T.add(h, sinusoidal_positions(self.cfg.max_len, self.cfg.d_model)[:t_len])
        lo, hi = self.nat_layer_range()
        x = decoder_stack(self.store, self.cfg, x, enc, lo, hi, causal=False,
                          tgt_pad=tgt_pad, train=train, rng=rng)
        x = T.layer_norm(x, self.store["nat.norm.g"], self.store["nat.norm.b"])
        logits = self._head(x, "nat.head")
        pot = _batch_potential(logits.data)
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return logits, pot

    def mlm_forward(
        self,
        y_prime: np.ndarray,
        enc: EncoderOutput,
        tgt_pad: Optional[np.ndarray] = None,
        train: bool = False,
        rng=None,
    ) -> Tensor:
        """Renewal sub-module pass over masked token ids (B, T) -> logits (B, T, V)."""
        y_prime = np.asarray(y_prime)
        squeeze = y_prime.ndim == 1
        if squeeze:
            y_prime = y_prime[None, :]
            tgt_pad = None if tgt_pad is None else np.asarray(tgt_pad)[None, :]
        self.counters["mlm_forward"] += 1
        x = embed(self.store["emb.tok"], y_prime, self.cfg.max_len)
        lo, hi = self.mlm_layer_range()
        x = decoder_stack(self.store, self.cfg, x, enc, lo, hi, causal=False,
                          tgt_pad=tgt_pad, train=train, rng=rng)
        x = T.layer_norm(x, self.store["mlm.norm.g"], self.store["mlm.norm.b"])
        logits = self._head(x, "mlm.head")
        if squeeze:
            logits = T.reshape(logits, logits.shape[1:])
        return logits

    def length_logits(self, enc: EncoderOutput) -> Tensor:
        """(B, 2C+1) offset-class logits from the length-token encoder state."""
        state = T.take_index(enc.states, 0, axis=1)
        state = T.layer_norm(state, self.store["len.norm.g"], self.store["len.norm.b"])
        return T.add(T.matmul(state, self.store["len.head.w"]), self.store["len.head.b"])


class VanillaNAT(RenewNAT):
    """Monolithic parallel baseline: all N decoder layers, no renewal."""

    arch = "nat"
    has_mlm = False

    def nat_layer_range(self) -> tuple[int, int]:
        return 0, self.cfg.n_dec_layers

    def mlm_forward(self, *args, **kwargs):  # pragma: no cover - guard
        raise ConfigError("vanilla parallel model has no renewal sub-module")


class Teacher:
    """Autoregressive transformer used for distillation and latency baselines."""

    arch = "teacher"

    def __init__(self, cfg: ModelConfig, seed: int = 0, store: Optional[ParameterStore] = None):
        self.cfg = cfg
        self.store = store if store is not None else self._init_params(cfg, seed)

    def _init_params(self, cfg: ModelConfig, seed: int) -> ParameterStore:
        store = ParameterStore()
        rng = named_rng(seed, "init")
        init_embedding(store, cfg, rng)
        init_encoder(store, cfg, rng)
        init_decoder_layers(store, cfg, rng)
        _init_norm(store, "out.norm", cfg.d_model)
        if not cfg.tie_embeddings:
            _init_linear(store, "out.head", cfg.d_model, cfg.vocab_size, rng, bias=False)
        return store

    def encode(self, src_ids: np.ndarray, src_pad: np.ndarray,
               train: bool = False, rng=None) -> EncoderOutput:
        return encode(self.store, self.cfg, src_ids, src_pad, train, rng)

    def decode_logits(
        self,
        tgt_in: np.ndarray,
        enc: EncoderOutput,
        tgt_pad: Optional[np.ndarray] = None,
        train: bool = False,
        rng=None,
    ) -> Tensor:
        """Causal decoder pass over (B, T) prefix ids -> logits (B, T, V)."""
        x = embed(self.store["emb.tok"], tgt_in, self.cfg.max_len)
        x = decoder_stack(self.store, self.cfg, x, enc, 0, self.cfg.n_dec_layers,
                          causal=True, tgt_pad=tgt_pad, train=train, rng=rng)
        x = T.layer_norm(x, self.store["out.norm.g"], self.store["out.norm.b"])
        if self.cfg.tie_embeddings:
            return T.matmul(x, T.transpose(self.store["emb.tok"], (1, 0)))
        return T.matmul(x, self.store["out.head.w"])


def _batch_potential(logits_data: np.ndarray) -> BatchPotential:
    """Tape-detached argmax tokens, confidences, and log-probs from raw logits."""
    shifted = logits_data - logits_data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = (shifted - logz).astype(np.float32)
    tokens = log_probs.argmax(axis=-1).astype(np.int64)
    confidence = np.exp(log_probs.max(axis=-1)).astype(np.float32)
    np.clip(confidence, np.finfo(np.float32).tiny, 1.0, out=confidence)
    return BatchPotential(tokens=tokens, confidence=confidence, log_probs=log_probs)


# -----------------------------------------------------------------------------
# Losses
# -----------------------------------------------------------------------------


def mlm_loss(logits: Tensor, y: np.ndarray, y_mask: np.ndarray) -> Tensor:
    """Mean NLL of reference tokens at masked positions only (no smoothing).

    Raises DegenerateBatchError when the mask is empty: callers treat that as
    a skip-batch signal.
    """
    return T.cross_entropy(logits, y, position_mask=y_mask, label_smoothing=0.0)


def length_classes(src_lens: np.ndarray, tgt_lens: np.ndarray) -> np.ndarray:
    """Offset classes for the length head, clamped to [-C, +C] around center C."""
    offset = np.clip(np.asarray(tgt_lens) - np.asarray(src_lens),
                     -LENGTH_OFFSET_CAP, LENGTH_OFFSET_CAP)
    return (offset + LENGTH_OFFSET_CAP).astype(np.int64)


def length_loss(model: RenewNAT, enc: EncoderOutput,
                src_lens: np.ndarray, tgt_lens: np.ndarray) -> Tensor:
    logits = model.length_logits(enc)
    return T.cross_entropy(logits, length_classes(src_lens, tgt_lens))


# -----------------------------------------------------------------------------
# Joint training step
# -----------------------------------------------------------------------------


class TrainRngs:
    """Per-purpose random streams so toggling one knob cannot shift another."""

    def __init__(self, seed: int):
        self.dropout = named_rng(seed, "dropout")
        self.mask = named_rng(seed, "mask")
        self.glance = named_rng(seed, "glance")
        self.mix = named_rng(seed, "mix")
        self.batch = named_rng(seed, "batch")


def _batched_uniform_mask(batch: Batch, rng: np.random.Generator) -> np.ndarray:
    """(B, T) bool mask; each row masks n ~ Uniform{1..T_b} of its real positions."""
    b, t_width = batch.tgt.shape
    mask = np.zeros((b, t_width), dtype=bool)
    for row in range(b):
        t = int(batch.tgt_lens[row])
        n = int(rng.integers(1, t + 1))
        mask[row, rng.choice(t, size=n, replace=False)] = True
    return mask


def _batched_mlm_tokens(
    batch: Batch,
    mask: np.ndarray,
    pot_tokens: Optional[np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Observed-position fill per strategy; masked positions become MASK."""
    if cfg.mlm_input == "target":
        observed = batch.tgt
    elif cfg.mlm_input == "output":
        assert pot_tokens is not None
        observed = np.where(batch.tgt_pad, batch.tgt, pot_tokens)
    else:  # mixed
        assert pot_tokens is not None
        take_pot = rng.random(batch.tgt.shape) < cfg.p_mix
        observed = np.where(take_pot & ~batch.tgt_pad, pot_tokens, batch.tgt)
    tokens = observed.copy()
    tokens[mask] = MASK_ID
    return tokens


def _batched_glance(
    h: Tensor,
    batch: Batch,
    pot_tokens: np.ndarray,
    y_emb: Tensor,
    ratio: float,
    rng: np.random.Generator,
) -> tuple[Tensor, np.ndarray]:
    b, t_width = batch.tgt.shape
    glanced = np.zeros((b, t_width), dtype=bool)
    mismatch = (batch.tgt != pot_tokens) & ~batch.tgt_pad
    for row in range(b):
        t = int(batch.tgt_lens[row])
        n = min(int(round(ratio * int(mismatch[row].sum()))), t)
        if n > 0:
            glanced[row, rng.choice(t, size=n, replace=False)] = True
    if not glanced.any():
        return h, glanced
    return T.where(glanced[:, :, None], y_emb, h), glanced


def train_step(
    model: RenewNAT,
    batch: Batch,
    cfg: TrainConfig,
    rngs: TrainRngs,
) -> LossBundle:
    """One joint update: potential + masked-LM + length losses, one backward.

    The first-pass output feeding "output"/"mixed" observed tokens and the
    glancing distance is detached: the renewal sub-module sees discrete
    tokens, so the two sub-modules couple only through the shared encoder.
    """
    store = model.store
    store.zero_grad()
    step = store.step_count + 1

    raw_src = batch.src[:, 1:]
    enc = model.encode(batch.src, batch.src_pad, train=True, rng=rngs.dropout)
    src_emb = model.source_embeddings(raw_src)
    h = copy_source_batch(src_emb, batch.src_lens, batch.tgt_lens,
                          mode=cfg.copy_mode, temperature=cfg.soft_copy_temp)

    contrib = ~batch.tgt_pad
    if cfg.glancing:
        with T.no_grad():
            _, first = model.nat_forward(h, enc, batch.tgt_pad, train=True, rng=rngs.dropout)
        pot_tokens = first.tokens
        y_emb = model.target_embeddings(batch.tgt)
        ratio = cfg.glancing_ratio(step)
        h, glanced = _batched_glance(h, batch, pot_tokens, y_emb, ratio, rngs.glance)
        contrib = contrib & ~glanced
        nat_logits, _ = model.nat_forward(h, enc, batch.tgt_pad, train=True, rng=rngs.dropout)
    else:
        nat_logits, first = model.nat_forward(h, enc, batch.tgt_pad, train=True,
                                              rng=rngs.dropout)
        pot_tokens = first.tokens

    l_pot = T.cross_entropy(nat_logits, batch.tgt, position_mask=contrib,
                            label_smoothing=cfg.label_smoothing)

    if model.has_mlm:
        mask = _batched_uniform_mask(batch, rngs.mask)
        y_prime = _batched_mlm_tokens(batch, mask, pot_tokens, cfg, rngs.mix)
        mlm_logits = model.mlm_forward(y_prime, enc, batch.tgt_pad, train=True,
                                       rng=rngs.dropout)
        l_mlm = mlm_loss(mlm_logits, batch.tgt, mask)
    else:
        l_mlm = None

    l_len = length_loss(model, enc, batch.src_lens, batch.tgt_lens)

    w_pot, w_mlm, w_len = cfg.loss_weights
    unit = cfg.loss_weights == (1.0, 1.0, 1.0)
    parts = [l_pot if unit else T.mul(l_pot, w_pot)]
    if l_mlm is not None:
        parts.append(l_mlm if unit else T.mul(l_mlm, w_mlm))
    parts.append(l_len if unit else T.mul(l_len, w_len))
    total = parts[0]
    for p in parts[1:]:
        total = T.add(total, p)

    bundle = LossBundle(
        l_pot=float(l_pot.data),
        l_mlm=float(l_mlm.data) if l_mlm is not None else 0.0,
        l_len=float(l_len.data),
        total=float(total.data),
    )
    if not math.isfinite(bundle.total):
        raise NonFiniteLossError(f"non-finite loss, step not applied: {bundle}")

    total.backward()
    lr = warmup_inverse_sqrt(step, cfg.lr, cfg.warmup_steps)
    store.adam_step(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return bundle


def teacher_train_step(
    model: Teacher,
    batch: Batch,
    cfg: TrainConfig,
    rngs: TrainRngs,
) -> LossBundle:
    """Standard causal cross-entropy step for the autoregressive teacher."""
    store = model.store
    store.zero_grad()
    step = store.step_count + 1

    b, t_width = batch.tgt.shape
    tgt_in = np.full((b, t_width + 1), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, t_width + 1), PAD_ID, dtype=np.int64)
    tgt_in[:, 0] = BOS_ID
    tgt_in[:, 1:] = batch.tgt
    tgt_out[:, :t_width] = batch.tgt
    tgt_out[np.arange(b), batch.tgt_lens] = EOS_ID
    in_pad = np.arange(t_width + 1)[None, :] >= (batch.tgt_lens + 1)[:, None]

    enc = model.encode(batch.src, batch.src_pad, train=True, rng=rngs.dropout)
    logits = model.decode_logits(tgt_in, enc, tgt_pad=in_pad, train=True, rng=rngs.dropout)
    loss = T.cross_entropy(logits, tgt_out, position_mask=~in_pad,
                           label_smoothing=cfg.label_smoothing)
    bundle = LossBundle(l_pot=float(loss.data), l_mlm=0.0, l_len=0.0, total=float(loss.data))
    if not math.isfinite(bundle.total):
        raise NonFiniteLossError(f"non-finite loss, step not applied: {bundle}")
    loss.backward()
    lr = warmup_inverse_sqrt(step, cfg.lr, cfg.warmup_steps)
    store.adam_step(lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return bundle
