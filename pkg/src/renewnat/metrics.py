"""Corpus BLEU, repetition ratio, length buckets, and latency measurement."""

from __future__ import annotations

import math
import platform
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

Sentence = Sequence[str]


class MetricsError(ValueError):
    pass


@dataclass
class BleuResult:
    score: float  # 0..100
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int


def _ngram_counts(tokens: Sentence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sentence], references: Sequence[Sentence]) -> BleuResult:
    """Corpus BLEU-4: modified n-gram precisions, geometric mean, brevity penalty.

    Single reference per hypothesis; no smoothing (corpus-level counts); any
    vanishing precision gives a 0.0 score.
    """
    if len(hypotheses) == 0:
        raise MetricsError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise MetricsError(
            f"count mismatch: {len(hypotheses)} hypotheses vs {len(references)} references"
        )
    matched = [0] * 4
    total = [0] * 4
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            hyp_counts = _ngram_counts(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngram_counts(ref, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matched, total))
    if hyp_len == 0:
        raise MetricsError("all hypotheses are empty")
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / 4.0)
    return BleuResult(score=score, precisions=precisions, brevity_penalty=bp,
                      hyp_len=hyp_len, ref_len=ref_len)


def repetition_ratio(hypotheses: Sequence[Sentence]) -> float:
    """Fraction of tokens equal to their immediate predecessor (per sentence)."""
    total = sum(len(h) for h in hypotheses)
    if total == 0:
        raise MetricsError("empty corpus")
    repeats = sum(
        sum(1 for i in range(1, len(h)) if h[i] == h[i - 1]) for h in hypotheses
    )
    return repeats / total


# -----------------------------------------------------------------------------
# Length buckets
# -----------------------------------------------------------------------------

BUCKET_LABELS = ("1-10", "11-20", "21-40", "41-60", "61+")
_BUCKET_UPPER = (10, 20, 40, 60)


def bucket_index(length: int) -> int:
    for i, upper in enumerate(_BUCKET_UPPER):
        if length <= upper:
            return i
    return len(_BUCKET_UPPER)


def bucketed_bleu(
    hypotheses: Sequence[Sentence],
    references: Sequence[Sentence],
    lengths: Sequence[int],
) -> list[tuple[str, int, float]]:
    """Per-bucket corpus BLEU by the given lengths; empty buckets are omitted."""
    groups: dict[int, list[int]] = {}
    for i, length in enumerate(lengths):
        groups.setdefault(bucket_index(length), []).append(i)
    rows = []
    for b in sorted(groups):
        idx = groups[b]
        res = bleu([hypotheses[i] for i in idx], [references[i] for i in idx])
        rows.append((BUCKET_LABELS[b], len(idx), res.score))
    return rows


# -----------------------------------------------------------------------------
# Latency
# -----------------------------------------------------------------------------


def hardware_fingerprint() -> str:
    return f"{platform.platform()}/{platform.machine()}"


@dataclass
class LatencyStats:
    mean_seconds: float
    n: int
    fingerprint: str = field(default_factory=hardware_fingerprint)

    def speedup_over(self, baseline: "LatencyStats") -> float:
        return baseline.mean_seconds / self.mean_seconds


def measure_latency(
    decode_fn: Callable[[object], object],
    inputs: Sequence,
    warmup: int = 10,
) -> LatencyStats:
    """Mean wall-clock seconds per input at batch size 1; warmup runs excluded."""
    if not inputs:
        raise MetricsError("no inputs to time")
    for i in range(min(warmup, len(inputs)) or 1):
        decode_fn(inputs[i % len(inputs)])
    times = []
    for item in inputs:
        start = time.perf_counter()
        decode_fn(item)
        times.append(time.perf_counter() - start)
    return LatencyStats(mean_seconds=sum(times) / len(times), n=len(times))


# -----------------------------------------------------------------------------
# Report
# -----------------------------------------------------------------------------


@dataclass
class EvalReport:
    bleu_score: float
    repetition: float
    buckets: list[tuple[str, int, float]] = field(default_factory=list)
    bucket_by: str = "source"
    latency: Optional[LatencyStats] = None
    speedup: Optional[float] = None
    baseline_name: Optional[str] = None

    def csv_rows(self) -> list[tuple[str, str]]:
        rows = [("bleu", f"{self.bleu_score:.2f}"),
                ("repetition_ratio", f"{self.repetition:.4f}")]
        for label, count, score in self.buckets:
            rows.append((f"bleu_len_{label}[{self.bucket_by},n={count}]", f"{score:.2f}"))
        if self.latency is not None:
            rows.append(("mean_latency_s", f"{self.latency.mean_seconds:.6f}"))
            rows.append(("hardware", self.latency.fingerprint))
        if self.speedup is not None:
            rows.append((f"speedup_vs_{self.baseline_name or 'baseline'}",
                         f"{self.speedup:.2f}"))
        return rows
