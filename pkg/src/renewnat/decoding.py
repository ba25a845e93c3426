"""Single-pass renewal decoding, length-beam rescoring, and teacher beam search."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, LENGTH_ID, MASK_ID
from .model import (
    BatchPotential,
    PotentialTranslation,
    RenewNAT,
    Teacher,
    copy_source_batch,
)
from .tensor import Tensor, no_grad
from .transformer import ConfigError, EncoderOutput, LENGTH_OFFSET_CAP

log = logging.getLogger(__name__)


@dataclass
class DecodeConfig:
    alpha: float = 0.6  # confidence threshold: mask positions with conf < alpha
    delta: float = 0.3  # fixed-ratio alternative: mask floor(delta*T) lowest
    distinguish_mode: str = "threshold"  # threshold | ratio
    length_beam: int = 1
    copy_mode: str = "uniform"
    soft_copy_temp: float = 0.3
    max_len: int = 128
    npd_scoring: str = "self"  # self | teacher

    def __post_init__(self) -> None:
        if self.distinguish_mode not in ("threshold", "ratio"):
            raise ConfigError(f"bad distinguish_mode: {self.distinguish_mode}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must be in [0, 1]")
        if not 0.0 <= self.delta <= 1.0:
            raise ConfigError("delta must be in [0, 1]")
        if self.length_beam < 1:
            raise ConfigError("length_beam must be >= 1")
        if self.copy_mode not in ("uniform", "soft"):
            raise ConfigError(f"bad copy_mode: {self.copy_mode}")
        if self.npd_scoring not in ("self", "teacher"):
            raise ConfigError(f"bad npd_scoring: {self.npd_scoring}")


@dataclass
class DecodeResult:
    tokens: np.ndarray  # final output ids (T,)
    potential: np.ndarray  # first-pass ids (T,)
    renewed: np.ndarray  # positions re-predicted by the renewal pass
    score: float  # length-normalized log-probability of chosen tokens
    candidate_scores: list[tuple[int, float]] = field(default_factory=list)
    decode_time: float = 0.0

    def __post_init__(self) -> None:
        differs = np.flatnonzero(self.tokens != self.potential)
        if not np.isin(differs, self.renewed).all():
            raise ValueError("output differs from the potential outside renewed positions")


# -----------------------------------------------------------------------------
# Pipeline stages
# -----------------------------------------------------------------------------


def predict_length(model: RenewNAT, enc: EncoderOutput, src_len: int,
                   top_m: int) -> list[int]:
    """Top-m candidate target lengths, most probable first.

    Ties break toward the smaller |offset|, then the smaller offset, so runs
    are reproducible even under a flat length head.
    """
    logits = model.length_logits(enc).data[0]
    shifted = logits - logits.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    offsets = np.arange(len(probs)) - LENGTH_OFFSET_CAP
    order = sorted(range(len(probs)),
                   key=lambda c: (-probs[c], abs(int(offsets[c])), int(offsets[c])))
    return [int(np.clip(src_len + offsets[c], 1, model.cfg.max_len)) for c in order[:top_m]]


def select_mask_positions(pot: PotentialTranslation, cfg: DecodeConfig) -> np.ndarray:
    """Positions treated as incorrect: below-threshold or lowest-confidence."""
    if cfg.distinguish_mode == "threshold":
        return np.flatnonzero(pot.confidence < cfg.alpha)
    k = int(np.floor(cfg.delta * len(pot.tokens)))
    order = np.argsort(pot.confidence, kind="stable")  # ties -> lower index
    return np.sort(order[:k])


def renew(model: RenewNAT, pot: PotentialTranslation, positions: np.ndarray,
          enc: EncoderOutput) -> DecodeResult:
    """Mask the selected positions and re-predict them in one renewal pass.

    An empty selection skips the renewal forward entirely; the result is the
    potential translation.
    """
    positions = np.asarray(positions, dtype=np.int64)
    tokens = pot.tokens.copy()
    t_len = len(tokens)
    chosen_logp = pot.log_probs[np.arange(t_len), pot.tokens].astype(np.float64)
    if positions.size:
        y_prime = tokens.copy()
        y_prime[positions] = MASK_ID
        logits = model.mlm_forward(y_prime, enc, train=False)
        mlm_logp = _log_softmax(logits.data)
        tokens[positions] = mlm_logp[positions].argmax(axis=-1)
        chosen_logp[positions] = mlm_logp[positions, tokens[positions]]
    score = float(chosen_logp.sum() / max(1, t_len))
    return DecodeResult(tokens=tokens, potential=pot.tokens.copy(),
                        renewed=positions, score=score)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _decode_candidate(model: RenewNAT, enc: EncoderOutput, src_emb: Tensor,
                      src_len: int, tgt_len: int, cfg: DecodeConfig) -> DecodeResult:
    h = copy_source_batch(src_emb, np.array([src_len]), np.array([tgt_len]),
                          mode=cfg.copy_mode, temperature=cfg.soft_copy_temp)
    _, pot_batch = model.nat_forward(h, enc, train=False)
    pot = pot_batch.sentence(0, tgt_len)
    if model.has_mlm:
        positions = select_mask_positions(pot, cfg)
    else:
        positions = np.empty(0, dtype=np.int64)
    return renew(model, pot, positions, enc) if model.has_mlm else DecodeResult(
        tokens=pot.tokens.copy(), potential=pot.tokens.copy(),
        renewed=positions, score=float(
            pot.log_probs[np.arange(tgt_len), pot.tokens].sum() / max(1, tgt_len)),
    )


def _decode_lengths(model: RenewNAT, src_ids: np.ndarray, cfg: DecodeConfig,
                    top_m: int, teacher: Optional[Teacher]) -> DecodeResult:
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.size == 0:
        raise ValueError("cannot decode an empty source")
    start = time.perf_counter()
    with no_grad():
        src_row = np.concatenate(([LENGTH_ID], src_ids))[None, :]
        src_pad = np.zeros_like(src_row, dtype=bool)
        enc = model.encode(src_row, src_pad, train=False)
        src_emb = model.source_embeddings(src_ids[None, :])
        lengths = predict_length(model, enc, len(src_ids), top_m)
        candidates = [
            _decode_candidate(model, enc, src_emb, len(src_ids), t, cfg)
            for t in lengths
        ]
        if cfg.npd_scoring == "teacher" and top_m > 1:
            if teacher is None:
                raise ConfigError("teacher-scored length beam needs a teacher model")
            for cand in candidates:
                cand.score = teacher_force_score(teacher, src_ids, cand.tokens)
    best = min(range(len(candidates)),
               key=lambda i: (-candidates[i].score, len(candidates[i].tokens), i))
    result = candidates[best]
    result.candidate_scores = [(len(c.tokens), c.score) for c in candidates]
    result.decode_time = time.perf_counter() - start
    return result


def decode_single(model: RenewNAT, src_ids: np.ndarray, cfg: DecodeConfig) -> DecodeResult:
    """Full single-pass pipeline at the top-1 predicted length (batch size 1)."""
    return _decode_lengths(model, src_ids, cfg, top_m=1, teacher=None)


def decode_npd(model: RenewNAT, src_ids: np.ndarray, cfg: DecodeConfig,
               teacher: Optional[Teacher] = None) -> DecodeResult:
    """Independent single-pass decodes over the top-m lengths, then rescoring.

    Scores are length-normalized chosen-token log-probabilities (renewal
    probabilities at renewed positions, first-pass probabilities elsewhere);
    ties pick the shorter candidate. m=1 degenerates to decode_single.
    """
    return _decode_lengths(model, src_ids, cfg, top_m=cfg.length_beam, teacher=teacher)


# -----------------------------------------------------------------------------
# Autoregressive teacher decoding
# -----------------------------------------------------------------------------


def teacher_force_score(teacher: Teacher, src_ids: np.ndarray, tokens: np.ndarray) -> float:
    """Teacher log-probability of a candidate, normalized by its length."""
    with no_grad():
        src_row = np.concatenate(([LENGTH_ID], np.asarray(src_ids, dtype=np.int64)))[None, :]
        enc = teacher.encode(src_row, np.zeros_like(src_row, dtype=bool), train=False)
        tgt_in = np.concatenate(([BOS_ID], tokens))[None, :]
        logits = teacher.decode_logits(tgt_in, enc, train=False)
        logp = _log_softmax(logits.data[0])
        out = np.concatenate((tokens, [EOS_ID]))
        return float(logp[np.arange(len(out)), out].sum() / len(out))


def teacher_beam_search(
    teacher: Teacher,
    src_ids: np.ndarray,
    beam_size: int = 5,
    max_len: Optional[int] = None,
) -> np.ndarray:
    """Length-normalized beam search with EOS termination; beam 1 is greedy.

    Prefix re-forwarding (no incremental cache); all live hypotheses are
    batched per step. Hypotheses that never emit EOS are truncated at the
    length budget with a warning.
    """
    src_ids = np.asarray(src_ids, dtype=np.int64)
    if src_ids.size == 0:
        raise ValueError("cannot decode an empty source")
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    budget = (max_len or teacher.cfg.max_len) - 1
    with no_grad():
        src_row = np.concatenate(([LENGTH_ID], src_ids))[None, :]
        enc = teacher.encode(src_row, np.zeros_like(src_row, dtype=bool), train=False)
        live: list[tuple[tuple[int, ...], float]] = [((), 0.0)]
        finished: list[tuple[tuple[int, ...], float]] = []
        for _ in range(budget):
            prefix = np.array(
                [(BOS_ID,) + toks for toks, _ in live], dtype=np.int64
            )
            logits = teacher.decode_logits(prefix, enc, train=False)
            logp = _log_softmax(logits.data[:, -1, :])
            expansions: list[tuple[float, int, int]] = []  # (-cum, hyp_idx, token)
            for i, (_, cum) in enumerate(live):
                top = np.argsort(logp[i])[::-1][:beam_size]
                for tok in top:
                    expansions.append((-(cum + float(logp[i, tok])), i, int(tok)))
            expansions.sort()
            next_live = []
            for neg_cum, i, tok in expansions[:beam_size]:
                toks, _ = live[i]
                if tok == EOS_ID:
                    finished.append((toks, -neg_cum / (len(toks) + 1)))
                else:
                    next_live.append((toks + (tok,), -neg_cum))
            live = next_live
            if not live:
                break
        if not finished:
            log.warning("beam search hit the length budget without EOS; truncating")
            finished = [(toks, cum / max(1, len(toks))) for toks, cum in live]
    best = max(range(len(finished)), key=lambda i: (finished[i][1], -len(finished[i][0]), -i))
    return np.array(finished[best][0], dtype=np.int64)
