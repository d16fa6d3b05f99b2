"""Binary constraints over sequences.

Every predicate evaluates a whole padded batch at once through
``batch_evaluate(seqs, lengths)``; ``evaluate`` is the single-sequence
convenience wrapper returning 0 or 1.  Keywords are runs of token ids, matched
contiguously, and never include EOS.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .seq_core import EOS, DistTable, check_sequence, contains_subsequence, content_lengths, pack


class Scorer(ABC):
    @abstractmethod
    def batch_score(self, seqs: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Scores in [0, 1]."""

    def score(self, seq: Sequence[int], max_len: int | None = None) -> float:
        seq = tuple(seq)
        seqs, lengths = pack([seq], max_len or len(seq))
        return float(self.batch_score(seqs, lengths)[0])


@dataclass(frozen=True)
class RatioScorer(Scorer):
    """Fraction of positive among (positive + negative) tokens in the final window.

    The window is the last ``window`` non-EOS tokens.  A window holding neither
    kind scores 0.5.
    """

    positive: frozenset
    negative: frozenset
    window: int

    def __post_init__(self):
        object.__setattr__(self, "positive", frozenset(int(t) for t in self.positive))
        object.__setattr__(self, "negative", frozenset(int(t) for t in self.negative))
        if self.positive & self.negative:
            raise ValueError("positive and negative token sets overlap")
        if EOS in self.positive | self.negative:
            raise ValueError("EOS cannot carry sentiment")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def batch_score(self, seqs, lengths):
        seqs = np.asarray(seqs)
        clen = content_lengths(seqs, np.asarray(lengths))
        pos = np.arange(seqs.shape[1])[None, :]
        in_window = (pos < clen[:, None]) & (pos >= (clen - self.window)[:, None])
        n_pos = (np.isin(seqs, list(self.positive)) & in_window).sum(axis=1)
        n_neg = (np.isin(seqs, list(self.negative)) & in_window).sum(axis=1)
        total = n_pos + n_neg
        return np.where(total > 0, n_pos / np.maximum(total, 1), 0.5)


class ConstraintPredicate(ABC):
    kind = "abstract"

    @abstractmethod
    def batch_evaluate(self, seqs: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        """Boolean satisfaction mask for a padded batch."""

    def evaluate(self, seq: Sequence[int], max_len: int | None = None) -> int:
        seq = tuple(int(t) for t in seq)
        seqs, lengths = pack([seq], max_len or len(seq))
        return int(self.batch_evaluate(seqs, lengths)[0])

    __call__ = evaluate

    def table_mask(self, table: DistTable) -> np.ndarray:
        return self.batch_evaluate(*table.batch())


@dataclass(frozen=True)
class Constant(ConstraintPredicate):
    value: bool
    kind = "constant"

    def batch_evaluate(self, seqs, lengths):
        return np.full(len(seqs), bool(self.value))


@dataclass(frozen=True)
class ContainsKeyword(ConstraintPredicate):
    keyword: tuple
    kind = "contains"

    def __post_init__(self):
        object.__setattr__(self, "keyword", _keyword(self.keyword))

    def batch_evaluate(self, seqs, lengths):
        return contains_subsequence(seqs, self.keyword)


@dataclass(frozen=True)
class AvoidsKeyword(ConstraintPredicate):
    keyword: tuple
    kind = "avoids"

    def __post_init__(self):
        object.__setattr__(self, "keyword", _keyword(self.keyword))

    def batch_evaluate(self, seqs, lengths):
        return ~contains_subsequence(seqs, self.keyword)


@dataclass(frozen=True)
class PrefixRequired(ConstraintPredicate):
    prefix: tuple
    kind = "prefix"

    def __post_init__(self):
        object.__setattr__(self, "prefix", tuple(int(t) for t in self.prefix))

    def batch_evaluate(self, seqs, lengths):
        seqs = np.asarray(seqs)
        k = len(self.prefix)
        if k > seqs.shape[1]:
            return np.zeros(len(seqs), dtype=bool)
        return np.all(seqs[:, :k] == np.asarray(self.prefix, dtype=seqs.dtype), axis=1)


@dataclass(frozen=True)
class ThresholdScore(ConstraintPredicate):
    """Satisfied iff ``scorer(y) > tau`` (strict)."""

    scorer: Scorer
    tau: float
    kind = "threshold"

    def batch_evaluate(self, seqs, lengths):
        return self.scorer.batch_score(seqs, lengths) > self.tau


@dataclass(frozen=True)
class Conjunction(ConstraintPredicate):
    parts: tuple
    kind = "conjunction"

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        if not self.parts:
            raise ValueError("empty conjunction")

    def batch_evaluate(self, seqs, lengths):
        out = np.ones(len(seqs), dtype=bool)
        for part in self.parts:
            out &= part.batch_evaluate(seqs, lengths)
        return out


def _keyword(tokens) -> tuple:
    tokens = tuple(int(t) for t in (tokens if isinstance(tokens, (tuple, list)) else (tokens,)))
    if not tokens:
        raise ValueError("keyword must be non-empty")
    if EOS in tokens:
        raise ValueError("keyword cannot contain EOS")
    return tokens


def evaluate(b: ConstraintPredicate, y: Sequence[int], max_len: int | None = None) -> int:
    return b.evaluate(y, max_len)


def score(s: Scorer, y: Sequence[int], max_len: int | None = None) -> float:
    return s.score(y, max_len)


def satisfying_mass(b: ConstraintPredicate, table: DistTable) -> float:
    """Total table mass on sequences with b(y) = 1."""
    mask = b.table_mask(table)
    return float(table.probs[mask].sum())


def check_satisfied(b: ConstraintPredicate, seq, vocab_size: int, max_len: int) -> bool:
    return bool(b.evaluate(check_sequence(seq, vocab_size, max_len), max_len))
