"""Vocabulary, corpora, synthetic tasks, batching, and distillation plumbing."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PAD_ID, UNK_ID, MASK_ID, LENGTH_ID, BOS_ID, EOS_ID = range(6)
RESERVED_TOKENS = ("<pad>", "<unk>", "<mask>", "<length>", "<bos>", "<eos>")


class CorpusError(ValueError):
    pass


class Vocabulary:
    """Token <-> id bijection with fixed reserved ids 0..5."""

    def __init__(self, tokens: Sequence[str]):
        self._id_to_token = list(RESERVED_TOKENS)
        self._token_to_id: dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for tok in tokens:
            if tok in self._token_to_id:
                raise CorpusError(f"duplicate or reserved token in vocabulary: {tok!r}")
            self._token_to_id[tok] = len(self._id_to_token)
            self._id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        """Tokens to ids; unknown tokens map to UNK here (and only here)."""
        return np.array([self._token_to_id.get(t, UNK_ID) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._id_to_token[int(i)] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self._id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if len(lines) < len(RESERVED_TOKENS) or tuple(lines[:6]) != RESERVED_TOKENS:
            raise CorpusError(f"not a vocabulary file (bad reserved lines): {path}")
        return cls(lines[6:])


def build_vocab(paths: Sequence[str | Path], min_count: int = 1) -> Vocabulary:
    """Frequency-sorted vocabulary (count desc, then lexicographic)."""
    counts: dict[str, int] = {}
    for path in paths:
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            for tok in line.split():
                counts[tok] = counts.get(tok, 0) + 1
    if not counts:
        raise CorpusError(f"empty corpus: {list(map(str, paths))}")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# -----------------------------------------------------------------------------
# Sentence pairs and corpus files
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SentencePair:
    src: tuple[str, ...]
    tgt: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.src or not self.tgt:
            raise CorpusError("sentence pair with an empty side")


def read_parallel(src_path: str | Path, tgt_path: str | Path) -> list[SentencePair]:
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise CorpusError(
            f"unaligned corpus: {len(src_lines)} source vs {len(tgt_lines)} target lines"
        )
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        s_toks, t_toks = tuple(s.split()), tuple(t.split())
        if not s_toks or not t_toks:
            raise CorpusError(f"empty sentence at line {i + 1}")
        pairs.append(SentencePair(s_toks, t_toks))
    return pairs


def write_parallel(pairs: Sequence[SentencePair], src_path: str | Path,
                   tgt_path: str | Path) -> None:
    Path(src_path).write_text("\n".join(" ".join(p.src) for p in pairs) + "\n", encoding="utf-8")
    Path(tgt_path).write_text("\n".join(" ".join(p.tgt) for p in pairs) + "\n", encoding="utf-8")


def load_split(data_dir: str | Path, split: str) -> list[SentencePair]:
    d = Path(data_dir)
    return read_parallel(d / f"{split}.src", d / f"{split}.tgt")


# -----------------------------------------------------------------------------
# Synthetic tasks
# -----------------------------------------------------------------------------


def _random_dedup_sort(tokens: Sequence[int], rng: np.random.Generator) -> list[int]:
    """Sort, then keep a random number of copies of each repeated value."""
    out: list[int] = []
    values, counts = np.unique(np.asarray(tokens), return_counts=True)
    for v, c in zip(values, counts):
        keep = int(rng.integers(1, c + 1)) if c > 1 else 1
        out.extend([int(v)] * keep)
    return out


def make_synthetic(
    task: str,
    vocab_size: int,
    length_range: tuple[int, int],
    n: int,
    seed: int,
) -> list[SentencePair]:
    """Generate a paired corpus for `task` in {copy, reverse, noisy_sort}.

    Tokens are decimal strings below `vocab_size`. noisy_sort draws sources
    from a small pool so the same source recurs with different random
    deduplications: several valid targets per source.
    """
    if vocab_size < 10:
        raise CorpusError("vocab_size must be >= 10")
    if task not in ("copy", "reverse", "noisy_sort"):
        raise CorpusError(f"unknown synthetic task: {task}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise CorpusError(f"bad length range {length_range}")
    rng = np.random.default_rng(seed)
    sources: list[list[int]]
    if task == "noisy_sort":
        pool = [
            list(rng.integers(0, vocab_size, size=int(rng.integers(lo, hi + 1))))
            for _ in range(max(1, n // 4))
        ]
        sources = [pool[int(rng.integers(0, len(pool)))] for _ in range(n)]
    else:
        sources = [
            list(rng.integers(0, vocab_size, size=int(rng.integers(lo, hi + 1))))
            for _ in range(n)
        ]
    pairs = []
    for src in sources:
        if task == "copy":
            tgt = list(src)
        elif task == "reverse":
            tgt = list(reversed(src))
        else:
            tgt = _random_dedup_sort(src, rng)
        pairs.append(SentencePair(tuple(str(t) for t in src), tuple(str(t) for t in tgt)))
    return pairs


# -----------------------------------------------------------------------------
# Batching
# -----------------------------------------------------------------------------


@dataclass
class Batch:
    """Padded id matrices; source rows start with the LENGTH id."""

    src: np.ndarray  # (B, S) int64, src[:, 0] == LENGTH_ID
    tgt: np.ndarray  # (B, T) int64
    src_pad: np.ndarray  # (B, S) bool
    tgt_pad: np.ndarray  # (B, T) bool
    src_lens: np.ndarray  # (B,) raw source lengths, excluding the length token
    tgt_lens: np.ndarray  # (B,)
    indices: np.ndarray  # (B,) positions in the original corpus

    @property
    def size(self) -> int:
        return self.src.shape[0]


def encode_pairs(pairs: Sequence[SentencePair], vocab: Vocabulary,
                 max_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    encoded = []
    for i, p in enumerate(pairs):
        if len(p.src) + 1 > max_len or len(p.tgt) > max_len:
            raise CorpusError(f"pair {i} exceeds max_len {max_len}")
        encoded.append((vocab.encode(p.src), vocab.encode(p.tgt)))
    return encoded


def make_batches(
    pairs: Sequence[SentencePair],
    vocab: Vocabulary,
    max_tokens: int = 4096,
    max_len: int = 128,
    rng: Optional[np.random.Generator] = None,
) -> list[Batch]:
    """Length-bucketed batches capped by padded token count; order shuffled by rng."""
    encoded = encode_pairs(pairs, vocab, max_len)
    order = sorted(range(len(pairs)), key=lambda i: (len(encoded[i][1]), len(encoded[i][0])))
    groups: list[list[int]] = []
    current: list[int] = []
    max_s = max_t = 0
    for i in order:
        s_len, t_len = len(encoded[i][0]) + 1, len(encoded[i][1])
        new_s, new_t = max(max_s, s_len), max(max_t, t_len)
        if current and (len(current) + 1) * (new_s + new_t) > max_tokens:
            groups.append(current)
            current, max_s, max_t = [i], s_len, t_len
        else:
            current.append(i)
            max_s, max_t = new_s, new_t
    if current:
        groups.append(current)
    if rng is not None:
        rng.shuffle(groups)
    batches = []
    for group in groups:
        b = len(group)
        s_width = max(len(encoded[i][0]) for i in group) + 1
        t_width = max(len(encoded[i][1]) for i in group)
        src = np.full((b, s_width), PAD_ID, dtype=np.int64)
        tgt = np.full((b, t_width), PAD_ID, dtype=np.int64)
        src_lens = np.zeros(b, dtype=np.int64)
        tgt_lens = np.zeros(b, dtype=np.int64)
        for row, i in enumerate(group):
            s_ids, t_ids = encoded[i]
            src[row, 0] = LENGTH_ID
            src[row, 1 : 1 + len(s_ids)] = s_ids
            tgt[row, : len(t_ids)] = t_ids
            src_lens[row] = len(s_ids)
            tgt_lens[row] = len(t_ids)
        src_pad = np.arange(s_width)[None, :] >= (src_lens + 1)[:, None]
        tgt_pad = np.arange(t_width)[None, :] >= tgt_lens[:, None]
        batches.append(
            Batch(src, tgt, src_pad, tgt_pad, src_lens, tgt_lens,
                  np.array(group, dtype=np.int64))
        )
    return batches


def unbatch(batches: Sequence[Batch], vocab: Vocabulary, n: int) -> list[SentencePair]:
    """Invert make_batches: strip padding and restore original corpus order."""
    out: list[Optional[SentencePair]] = [None] * n
    for b in batches:
        for row in range(b.size):
            src = vocab.decode(b.src[row, 1 : 1 + b.src_lens[row]])
            tgt = vocab.decode(b.tgt[row, : b.tgt_lens[row]])
            out[int(b.indices[row])] = SentencePair(tuple(src), tuple(tgt))
    if any(p is None for p in out):
        raise CorpusError("unbatch: missing pairs")
    return out  # type: ignore[return-value]


# -----------------------------------------------------------------------------
# Sequence-level distillation
# -----------------------------------------------------------------------------


def distill(
    pairs: Sequence[SentencePair],
    teacher_decode: Callable[[Sequence[str]], list[str]],
    beam: int = 5,
) -> list[SentencePair]:
    """Replace every target with the teacher's beam output for the same source.

    Sources are preserved bit-exactly. A failed or empty teacher decode keeps
    the original target and logs a warning.
    """
    del beam  # fixed into teacher_decode by the caller; kept for interface clarity
    out = []
    for i, p in enumerate(pairs):
        try:
            hyp = teacher_decode(p.src)
        except Exception as exc:  # noqa: BLE001 - single-line policy: keep and warn
            log.warning("distill: teacher failed on line %d (%s); keeping original", i + 1, exc)
            hyp = list(p.tgt)
        if not hyp:
            log.warning("distill: empty teacher output on line %d; keeping original", i + 1)
            hyp = list(p.tgt)
        out.append(SentencePair(p.src, tuple(hyp)))
    return out
