"""Corpus BLEU over atomic tokens (space-joined strings or id lists)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

from .errors import UsageError

MAX_ORDER = 4


@dataclass
class BleuStats:
    """Sufficient statistics; adding two stats pools their corpora."""

    matches: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    totals: list[int] = field(default_factory=lambda: [0] * MAX_ORDER)
    hyp_len: int = 0
    ref_len: int = 0

    def __add__(self, other: "BleuStats") -> "BleuStats":
        return BleuStats([a + b for a, b in zip(self.matches, other.matches)],
                         [a + b for a, b in zip(self.totals, other.totals)],
                         self.hyp_len + other.hyp_len, self.ref_len + other.ref_len)


@dataclass
class BleuReport:
    bleu: float
    precisions: list[float]
    bp: float
    hyp_len: int
    ref_len: int
    stats: BleuStats
    buckets: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"bleu": self.bleu, "precisions": self.precisions, "bp": self.bp,
                "hyp_len": self.hyp_len, "ref_len": self.ref_len, "buckets": self.buckets}


def _tokens(x) -> list:
    return x.split() if isinstance(x, str) else list(x)


def _ngrams(toks: list, n: int) -> Counter:
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def sentence_stats(hyp, ref) -> BleuStats:
    h, r = _tokens(hyp), _tokens(ref)
    st = BleuStats(hyp_len=len(h), ref_len=len(r))
    for n in range(1, MAX_ORDER + 1):
        hc, rc = _ngrams(h, n), _ngrams(r, n)
        st.matches[n - 1] = sum(min(c, rc[g]) for g, c in hc.items())
        st.totals[n - 1] = max(0, len(h) - n + 1)
    return st


def corpus_stats(hyps: Sequence, refs: Sequence) -> BleuStats:
    if len(hyps) != len(refs):
        raise UsageError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise UsageError("corpus_bleu needs at least one sentence")
    total = BleuStats()
    for h, r in zip(hyps, refs):
        total = total + sentence_stats(h, r)
    return total


def score_stats(st: BleuStats, smooth_floor: float | None = None) -> BleuReport:
    """BLEU = BP * exp(mean log p_n); zero if any p_n is zero (unless floor-smoothed).

    Orders with no hypothesis n-grams at all (every sentence shorter than n)
    are left out of the mean, so a short corpus scored against itself is 100.
    """
    precisions = []
    logs = []
    for m, t in zip(st.matches, st.totals):
        p = m / t if t else 0.0
        precisions.append(100.0 * p)
        if not t:
            continue
        if m == 0 and smooth_floor is not None:
            p = smooth_floor / t
        logs.append(math.log(p) if p > 0 else None)
    if st.hyp_len == 0:
        bp = 0.0
    else:
        bp = min(1.0, math.exp(1.0 - st.ref_len / st.hyp_len))
    if not logs or any(l is None for l in logs):
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(logs) / len(logs))
    return BleuReport(bleu, precisions, bp, st.hyp_len, st.ref_len, st)


def corpus_bleu(hyps: Sequence, refs: Sequence, smooth_floor: float | None = None) -> BleuReport:
    return score_stats(corpus_stats(hyps, refs), smooth_floor)
