"""Divergences and diversity measures.

All divergences are in nats.  Exact quantities come from enumeration tables;
the Monte-Carlo estimators mirror the sampling protocol used at scale and
are validated against the exact values in the test suite.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .constraints import ConstraintPredicate
from .errors import InvalidSequenceError
from .gold_model import FilteredModel, exact_kl
from .seq_core import EOS, AutoregressiveModel, DistTable, content_lengths


# ---------------------------------------------------------------------------
# Theorem-2 decomposition
# ---------------------------------------------------------------------------


@dataclass
class KlReport:
    kl_g_aprime: float
    kl_g_gprime: float
    kl_gprime_aprime: float
    neg_log_ar: float
    residual_pythagorean: float
    residual_ar: float
    absolutely_continuous: bool = True

    def to_dict(self) -> dict:
        return {k: (v if not (isinstance(v, float) and math.isinf(v)) else "inf")
                for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _resid(lhs: float, rhs: float) -> float:
    if math.isinf(lhs) and math.isinf(rhs):
        return 0.0
    return abs(lhs - rhs)


def theorem2_report(a: AutoregressiveModel, b: ConstraintPredicate, aprime: AutoregressiveModel,
                    fm: FilteredModel | None = None, fm_prime: FilteredModel | None = None) -> KlReport:
    """KL(g||a') = KL(g||g') + KL(g'||a') and KL(g'||a') = -log AR(a'), from exact tables."""
    fm = fm or FilteredModel(a, b)
    fm_prime = fm_prime or FilteredModel(aprime, b)
    g, gp = fm.gold, fm_prime.gold
    kl_ga = exact_kl(g, fm_prime.base_table)
    kl_ggp = exact_kl(g, gp)
    kl_gpa = exact_kl(gp, fm_prime.base_table)
    neg_log_ar = -fm_prime.log_z
    return KlReport(
        kl_g_aprime=kl_ga,
        kl_g_gprime=kl_ggp,
        kl_gprime_aprime=kl_gpa,
        neg_log_ar=neg_log_ar,
        residual_pythagorean=_resid(kl_ga, kl_ggp + kl_gpa),
        residual_ar=_resid(kl_gpa, neg_log_ar),
        absolutely_continuous=not math.isinf(kl_ga),
    )


def kl_gg_estimator(g_seqs, g_lengths, a: AutoregressiveModel, aprime: AutoregressiveModel,
                    Z: float, Zprime: float) -> tuple[float, float]:
    """Monte-Carlo KL(g||g') = E_g log a(y)/a'(y) - log Z/Z', with its standard error.

    ``g_seqs`` must be draws from g (e.g. rejection samples from a).  Returns
    ``(inf, nan)`` if a' gives zero mass to any sample.
    """
    if len(g_seqs) < 2:
        raise ValueError("need at least two samples")
    la = a.batch_logprob(g_seqs, g_lengths)
    lq = aprime.batch_logprob(g_seqs, g_lengths)
    if np.any(lq == -np.inf):
        return float("inf"), float("nan")
    d = la - lq
    value = float(d.mean() - (math.log(Z) - math.log(Zprime)))
    return value, float(d.std(ddof=1) / math.sqrt(len(d)))


# ---------------------------------------------------------------------------
# Self-BLEU
# ---------------------------------------------------------------------------


def _ngrams(seq: Sequence[int], n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _strip(seq) -> tuple:
    seq = tuple(int(t) for t in seq)
    return seq[:-1] if seq and seq[-1] == EOS else seq


@dataclass
class SelfBleu:
    value: float
    per_sample: list
    short_samples: int = 0


def bleu(hypothesis: Sequence[int], references: Sequence[Sequence[int]], n: int) -> float:
    """Multi-reference BLEU-n: geometric mean of clipped precisions 1..n times brevity penalty.

    A hypothesis shorter than ``n`` scores 0.  Clipping uses the maximum count
    of each n-gram in any single reference; the brevity penalty uses the
    reference length closest to the hypothesis length (shorter wins ties).
    """
    hyp = _strip(hypothesis)
    refs = [_strip(r) for r in references]
    if len(hyp) < n:
        return 0.0
    log_p = 0.0
    for k in range(1, n + 1):
        h = _ngrams(hyp, k)
        best = Counter()
        for r in refs:
            for gram, c in _ngrams(r, k).items():
                if c > best[gram]:
                    best[gram] = c
        matched = sum(min(c, best[gram]) for gram, c in h.items())
        if matched == 0:
            return 0.0
        log_p += math.log(matched / sum(h.values()))
    c = len(hyp)
    r = min((len(x) for x in refs), key=lambda x: (abs(x - c), x))
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p / n)


def self_bleu(samples: Sequence[Sequence[int]], n: int = 4) -> SelfBleu:
    """Average BLEU-n of each sample against the other K-1 as references."""
    samples = [_strip(s) for s in samples]
    K = len(samples)
    if K < 2:
        raise ValueError("self-BLEU needs at least two samples")
    scores = [bleu(samples[i], samples[:i] + samples[i + 1:], n) for i in range(K)]
    short = sum(len(s) < n for s in samples)
    return SelfBleu(float(np.mean(scores)), scores, short)


def self_bleu_table(samples, orders=(2, 3, 4, 5)) -> dict[int, float]:
    return {n: self_bleu(samples, n).value for n in orders}


# ---------------------------------------------------------------------------
# Positional histograms and projections
# ---------------------------------------------------------------------------


def first_occurrence(seqs: np.ndarray, keyword: Sequence[int]) -> np.ndarray:
    """1-based start of the first occurrence of ``keyword`` per row, 0 if absent."""
    seqs = np.asarray(seqs)
    kw = tuple(int(t) for t in keyword)
    k = len(kw)
    n, L = seqs.shape
    out = np.zeros(n, dtype=np.int64)
    for start in range(L - k, -1, -1):
        hit = np.all(seqs[:, start:start + k] == np.asarray(kw), axis=1)
        out[hit] = start + 1
    return out


def position_bins(seqs, lengths, keyword, n_bins: int = 10) -> np.ndarray:
    """Bin index of the keyword's first relative position pos / content length.

    Bin j covers (j/n, (j+1)/n]; computed in integer arithmetic so bin edges
    are exact.
    """
    kw = tuple(keyword) if isinstance(keyword, (tuple, list)) else (int(keyword),)
    pos = first_occurrence(seqs, kw)
    if np.any(pos == 0):
        raise InvalidSequenceError("keyword absent from a sample passed to the positional histogram")
    clen = content_lengths(np.asarray(seqs), np.asarray(lengths))
    return (pos * n_bins + clen - 1) // clen - 1


@dataclass
class PositionalHistogram:
    n_bins: int
    counts: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    @property
    def frequencies(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=np.float64)
        return c / c.sum() if c.sum() else c

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin", "lower", "upper", "count"])
        for j, c in enumerate(self.counts):
            w.writerow([j, f"{j / self.n_bins:.17g}", f"{(j + 1) / self.n_bins:.17g}", int(c)])
        return buf.getvalue()


def positional_histogram(seqs, lengths, keyword, n_bins: int = 10) -> PositionalHistogram:
    bins = position_bins(seqs, lengths, keyword, n_bins)
    return PositionalHistogram(n_bins, np.bincount(bins, minlength=n_bins).tolist())


def positional_push_forward(table: DistTable, keyword, n_bins: int = 10) -> np.ndarray:
    """Exact bin probabilities of a table under the first-occurrence projection."""
    seqs, lengths = table.batch()
    bins = position_bins(seqs, lengths, keyword, n_bins)
    return np.bincount(bins, weights=table.probs, minlength=n_bins)


Projection = Callable[[np.ndarray, np.ndarray], np.ndarray]


def position_projection(keyword, n_bins: int = 10) -> Projection:
    return lambda seqs, lengths: position_bins(seqs, lengths, keyword, n_bins)


def push_forward(table: DistTable, projection: Projection, n_bins: int) -> np.ndarray:
    bins = np.asarray(projection(*table.batch()), dtype=np.int64)
    return np.bincount(bins, weights=table.probs, minlength=n_bins)


def discrete_kl(p: np.ndarray, q: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    on = p > 0
    if np.any(q[on] <= 0):
        return float("inf")
    return max(float(np.sum(p[on] * (np.log(p[on]) - np.log(q[on])))), 0.0)


def projected_kl(p: DistTable, q: DistTable, projection: Projection, n_bins: int) -> float:
    """KL between the push-forwards of p and q; never exceeds KL(p||q)."""
    return discrete_kl(push_forward(p, projection, n_bins), push_forward(q, projection, n_bins))
