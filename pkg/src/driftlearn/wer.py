"""Word-error-rate evaluation: Levenshtein alignment and bootstrap intervals.

WER is (substitutions + deletions + insertions) / reference length from a
minimum-edit-distance alignment; corpus WER pools error counts over
utterances (error-weighted, not a mean of per-utterance rates). The 95%
interval is a percentile bootstrap over utterance-level resamples whose
per-resample generators are split from one root seed, so results are
bit-identical regardless of execution order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError


@dataclass(frozen=True)
class AlignmentCounts:
    """Edit operations from aligning a hypothesis against a reference."""

    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    def __post_init__(self) -> None:
        for name in ("substitutions", "deletions", "insertions", "ref_len"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} must be non-negative")

    @property
    def total_edits(self) -> int:
        return self.substitutions + self.deletions + self.insertions

    def wer(self) -> float:
        if self.ref_len == 0:
            raise DataError("WER undefined for an empty reference")
        return self.total_edits / self.ref_len


@dataclass(frozen=True)
class UtteranceScore:
    """Per-utterance alignment counts, the unit of bootstrap resampling."""

    utterance_id: str
    counts: AlignmentCounts

    def __post_init__(self) -> None:
        if self.counts.ref_len < 1:
            raise DataError(
                f"scored utterance {self.utterance_id!r} needs a nonempty reference"
            )


@dataclass(frozen=True)
class CiReport:
    """Point WER with a percentile-bootstrap confidence interval."""

    point_wer: float
    lo: float
    hi: float
    level: float
    resamples: int
    seed: int

    def __post_init__(self) -> None:
        if not 0.0 < self.level < 1.0:
            raise ConfigurationError(f"level must be in (0, 1), got {self.level}")
        if self.lo > self.hi:
            raise DataError(f"interval bounds out of order: ({self.lo}, {self.hi})")


def _as_tokens(seq: Sequence) -> list:
    if isinstance(seq, np.ndarray):
        return seq.tolist()
    return list(seq)


def align(ref: Sequence, hyp: Sequence) -> AlignmentCounts:
    """Minimum-edit-distance counts with unit costs.

    Among cost-equal alignments the traceback prefers substitution over
    deletion over insertion, making the counts deterministic.
    """
    ref = _as_tokens(ref)
    hyp = _as_tokens(hyp)
    m, n = len(ref), len(hyp)
    prev = list(range(n + 1))
    rows = [prev]
    for i in range(1, m + 1):
        ri = ref[i - 1]
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            best = prev[j - 1] + (ri != hyp[j - 1])
            dele = prev[j] + 1
            if dele < best:
                best = dele
            ins = cur[j - 1] + 1
            if ins < best:
                best = ins
            cur[j] = best
        rows.append(cur)
        prev = cur

    subs = dels = inss = 0
    i, j = m, n
    while i > 0 or j > 0:
        here = rows[i][j]
        if i > 0 and j > 0 and rows[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]) == here:
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i -= 1
            j -= 1
        elif i > 0 and rows[i - 1][j] + 1 == here:
            dels += 1
            i -= 1
        else:
            inss += 1
            j -= 1
    return AlignmentCounts(subs, dels, inss, m)


def score_pair(utterance_id: str, ref: Sequence, hyp: Sequence) -> UtteranceScore:
    """Align one utterance and wrap the counts for corpus aggregation."""
    return UtteranceScore(utterance_id=utterance_id, counts=align(ref, hyp))


def score_lines(ref_lines: Sequence[str], hyp_lines: Sequence[str]) -> list[UtteranceScore]:
    """Score parallel whitespace-token lines; line i of each side is one utterance."""
    if len(ref_lines) != len(hyp_lines):
        raise DataError(
            f"line count mismatch: {len(ref_lines)} reference lines vs "
            f"{len(hyp_lines)} hypothesis lines"
        )
    if not ref_lines:
        raise DataError("no utterances to score")
    scores = []
    for i, (ref, hyp) in enumerate(zip(ref_lines, hyp_lines), start=1):
        try:
            scores.append(score_pair(f"line{i:06d}", ref.split(), hyp.split()))
        except DataError as exc:
            raise DataError(f"line {i}: {exc}") from exc
    return scores


def corpus_wer(scores: Sequence[UtteranceScore]) -> float:
    """Pooled WER: total edits over total reference length."""
    total_ref = sum(s.counts.ref_len for s in scores)
    if total_ref == 0:
        raise DataError("corpus WER undefined: total reference length is zero")
    total_edits = sum(s.counts.total_edits for s in scores)
    return total_edits / total_ref


def bootstrap_ci(
    scores: Sequence[UtteranceScore],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> CiReport:
    """Percentile bootstrap over utterance resamples, nearest-rank quantiles."""
    if not scores:
        raise DataError("bootstrap requires at least one scored utterance")
    if resamples < 100:
        raise ConfigurationError(f"resamples must be at least 100, got {resamples}")
    if not 0.0 < level < 1.0:
        raise ConfigurationError(f"level must be in (0, 1), got {level}")

    point = corpus_wer(scores)
    edits = np.array([s.counts.total_edits for s in scores], dtype=np.int64)
    refs = np.array([s.counts.ref_len for s in scores], dtype=np.int64)
    n = len(scores)

    # one independent child generator per resample: order-insensitive
    children = np.random.SeedSequence(seed).spawn(resamples)
    stats = np.empty(resamples)
    for b, child in enumerate(children):
        idx = np.random.default_rng(child).integers(0, n, size=n)
        stats[b] = edits[idx].sum() / refs[idx].sum()

    stats.sort()
    alpha = (1.0 - level) / 2.0
    lo_rank = int(np.ceil(alpha * resamples))
    hi_rank = int(np.ceil((1.0 - alpha) * resamples))
    lo = float(stats[max(lo_rank, 1) - 1])
    hi = float(stats[max(hi_rank, 1) - 1])
    return CiReport(
        point_wer=point, lo=lo, hi=hi, level=level, resamples=resamples, seed=seed
    )
