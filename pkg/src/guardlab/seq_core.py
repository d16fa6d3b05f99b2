"""Finite-alphabet autoregressive sequence models.

A sequence space is made finite by a maximum length ``max_len``: a sequence
either ends with EOS (token id 0, appearing nowhere else) or has exactly
``max_len`` tokens and no EOS (forced termination).

Batches of sequences are carried as a pair ``(seqs, lengths)`` where ``seqs``
is an ``(n, max_len)`` int64 array right-padded with ``PAD`` (-1).  All
probabilities are handled in the log domain; ``-inf`` stands for zero mass.
"""

from __future__ import annotations

import csv
import itertools
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DeadEndError,
    EnumerationTooLargeError,
    InvalidPrefixError,
    InvalidSequenceError,
)

EOS = 0
PAD = -1
EOS_STRING = "<eos>"
BOS_STRING = "<s>"
DEFAULT_ENUMERATION_CAP = 10**7
NORMALIZATION_TOL = 1e-12
TABLE_TOL = 1e-9


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax that tolerates ``-inf`` entries."""
    x = np.asarray(x, dtype=np.float64)
    m = np.max(x, axis=-1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise DeadEndError("a context has no finite logit")
    z = x - m
    with np.errstate(divide="ignore"):
        return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def safe_log(p) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(p, dtype=np.float64))


# ---------------------------------------------------------------------------
# Vocabulary and sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    """Token id <-> string mapping; id 0 is always EOS."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        tokens = tuple(self.tokens)
        object.__setattr__(self, "tokens", tokens)
        if not tokens or tokens[0] != EOS_STRING:
            raise ValueError(f"vocabulary must start with {EOS_STRING!r}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        for t in tokens:
            if not t or any(c.isspace() for c in t) or "|" in t or t == BOS_STRING:
                raise ValueError(f"invalid token string {t!r}")

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        """Build a vocabulary with EOS prepended to ``words``."""
        return cls((EOS_STRING, *words))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise KeyError(f"token {token!r} not in vocabulary") from None

    def ids(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.id(t) for t in tokens)

    def decode(self, seq: Iterable[int]) -> str:
        return " ".join(self.tokens[int(t)] for t in seq)

    def encode(self, text: str) -> tuple[int, ...]:
        return self.ids(text.split())


def check_sequence(seq: Sequence[int], vocab_size: int, max_len: int) -> tuple[int, ...]:
    seq = tuple(int(t) for t in seq)
    if not seq:
        raise InvalidSequenceError("empty sequence")
    if len(seq) > max_len:
        raise InvalidSequenceError(f"sequence longer than max_len={max_len}")
    if any(t < 0 or t >= vocab_size for t in seq):
        raise InvalidSequenceError(f"token id out of range in {seq}")
    if EOS in seq[:-1]:
        raise InvalidSequenceError("EOS before the last position")
    if seq[-1] != EOS and len(seq) != max_len:
        raise InvalidSequenceError("sequence neither ends with EOS nor reaches max_len")
    return seq


def pack(seqs: Iterable[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Convert a list of token tuples to the padded ``(seqs, lengths)`` batch."""
    seqs = list(seqs)
    out = np.full((len(seqs), max_len), PAD, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
        lengths[i] = len(s)
    return out, lengths


def unpack(seqs: np.ndarray, lengths: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(t) for t in row[:n]) for row, n in zip(seqs, lengths)]


def content_lengths(seqs: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Number of non-EOS tokens in each sequence."""
    last = seqs[np.arange(len(seqs)), np.maximum(lengths - 1, 0)]
    return lengths - (last == EOS)


def check_batch(seqs: np.ndarray, lengths: np.ndarray, vocab_size: int, max_len: int) -> None:
    seqs = np.asarray(seqs)
    lengths = np.asarray(lengths)
    if seqs.ndim != 2 or seqs.shape[1] != max_len or len(lengths) != len(seqs):
        raise InvalidSequenceError("batch has the wrong shape")
    if len(seqs) == 0:
        return
    if np.any(lengths < 1) or np.any(lengths > max_len):
        raise InvalidSequenceError("sequence length out of range")
    pos = np.arange(max_len)[None, :]
    inside = pos < lengths[:, None]
    if np.any(seqs[~inside] != PAD):
        raise InvalidSequenceError("padding must be PAD")
    vals = seqs[inside]
    if np.any((vals < 0) | (vals >= vocab_size)):
        raise InvalidSequenceError("token id out of range")
    before_last = inside & (pos < (lengths[:, None] - 1))
    if np.any(seqs[before_last] == EOS):
        raise InvalidSequenceError("EOS before the last position")
    last = seqs[np.arange(len(seqs)), lengths - 1]
    if np.any((last != EOS) & (lengths != max_len)):
        raise InvalidSequenceError("sequence neither ends with EOS nor reaches max_len")


# ---------------------------------------------------------------------------
# Exact distribution tables
# ---------------------------------------------------------------------------


def _code_base(vocab_size: int, max_len: int) -> int:
    base = vocab_size + 1
    if base**max_len >= 2**62:
        raise EnumerationTooLargeError("sequence space too large to encode in int64")
    return base


def encode_batch(seqs: np.ndarray, vocab_size: int, max_len: int) -> np.ndarray:
    """Integer code whose numeric order is the lexicographic token-id order."""
    base = _code_base(vocab_size, max_len)
    digits = np.asarray(seqs, dtype=np.int64) + 1
    codes = np.zeros(len(digits), dtype=np.int64)
    for i in range(max_len):
        codes = codes * base + digits[:, i]
    return codes


def decode_codes(codes: np.ndarray, vocab_size: int, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    base = _code_base(vocab_size, max_len)
    codes = np.asarray(codes, dtype=np.int64).copy()
    digits = np.zeros((len(codes), max_len), dtype=np.int64)
    for i in range(max_len - 1, -1, -1):
        digits[:, i] = codes % base
        codes //= base
    seqs = digits - 1
    lengths = (seqs != PAD).sum(axis=1)
    return seqs, lengths


class DistTable:
    """An explicit probability table over a finite set of sequences.

    Entries are stored in canonical (lexicographic token-id) order as integer
    codes with log-probabilities.  Zero-probability entries are dropped.
    """

    def __init__(self, vocab: Vocabulary, max_len: int, codes, logp, *, normalize: bool = False):
        codes = np.asarray(codes, dtype=np.int64)
        logp = np.asarray(logp, dtype=np.float64)
        if codes.shape != logp.shape:
            raise ValueError("codes and logp must align")
        keep = logp > -np.inf
        codes, logp = codes[keep], logp[keep]
        order = np.argsort(codes, kind="stable")
        codes, logp = codes[order], logp[order]
        if len(codes) > 1 and np.any(np.diff(codes) == 0):
            raise ValueError("duplicate sequences in table")
        if np.any(np.isnan(logp)) or np.any(logp == np.inf) or (not normalize and np.any(logp > 1e-12)):
            raise ValueError("invalid log-probabilities")
        total = float(np.exp(logp).sum()) if len(logp) else 0.0
        if normalize:
            if total <= 0:
                raise ValueError("cannot normalize an empty table")
            logp = logp - np.log(total)
        elif abs(total - 1.0) > TABLE_TOL:
            raise ValueError(f"table mass {total!r} is not 1 within {TABLE_TOL}")
        self.vocab = vocab
        self.max_len = max_len
        self.codes = codes
        self.logp = logp
        self.codes.setflags(write=False)
        self.logp.setflags(write=False)

    @classmethod
    def from_batch(cls, vocab, max_len, seqs, lengths, logp, *, normalize=False) -> "DistTable":
        codes = encode_batch(seqs, len(vocab), max_len)
        return cls(vocab, max_len, codes, logp, normalize=normalize)

    @classmethod
    def from_mapping(cls, vocab, max_len, mapping: Mapping[tuple, float], *, normalize=False) -> "DistTable":
        keys = [check_sequence(s, len(vocab), max_len) for s in mapping]
        seqs, lengths = pack(keys, max_len)
        return cls.from_batch(vocab, max_len, seqs, lengths, safe_log(list(mapping.values())), normalize=normalize)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.logp)

    def __len__(self) -> int:
        return len(self.codes)

    def batch(self) -> tuple[np.ndarray, np.ndarray]:
        return decode_codes(self.codes, len(self.vocab), self.max_len)

    def sequences(self) -> list[tuple[int, ...]]:
        return unpack(*self.batch())

    def as_dict(self) -> dict[tuple[int, ...], float]:
        return dict(zip(self.sequences(), self.probs.tolist()))

    def lookup_logp(self, codes: np.ndarray) -> np.ndarray:
        """Log-probability of each code, ``-inf`` for codes outside the support."""
        codes = np.asarray(codes, dtype=np.int64)
        idx = np.searchsorted(self.codes, codes)
        idx = np.minimum(idx, max(len(self.codes) - 1, 0))
        out = np.full(len(codes), -np.inf)
        if len(self.codes):
            hit = self.codes[idx] == codes
            out[hit] = self.logp[idx[hit]]
        return out

    def prob(self, seq: Sequence[int]) -> float:
        seqs, _ = pack([check_sequence(seq, len(self.vocab), self.max_len)], self.max_len)
        code = encode_batch(seqs, len(self.vocab), self.max_len)
        return float(np.exp(self.lookup_logp(code)[0]))

    def restrict(self, mask: np.ndarray) -> "DistTable":
        """Condition on the entries selected by ``mask`` and renormalize."""
        mask = np.asarray(mask, dtype=bool)
        return DistTable(self.vocab, self.max_len, self.codes[mask], self.logp[mask], normalize=True)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.choice(len(self.codes), size=n, p=self.probs / self.probs.sum())
        return decode_codes(self.codes[idx], len(self.vocab), self.max_len)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sequence", "probability"])
            for seq, p in zip(self.sequences(), self.probs):
                writer.writerow([self.vocab.decode(seq), f"{p:.17g}"])

    @classmethod
    def from_csv(cls, path, vocab: Vocabulary, max_len: int) -> "DistTable":
        mapping = {}
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                mapping[vocab.encode(row["sequence"])] = float(row["probability"])
        return cls.from_mapping(vocab, max_len, mapping)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


class AutoregressiveModel(ABC):
    """A next-token distribution over ``vocab`` for prefixes shorter than ``max_len``.

    Subclasses implement :meth:`batch_next_logprobs` for a batch of equal-length
    prefixes; everything else (chain rule, sampling, enumeration) is built on it.
    Models are immutable once constructed.
    """

    variant = "abstract"

    def __init__(self, vocab: Vocabulary, max_len: int):
        if max_len < 1:
            raise ValueError("max_len must be positive")
        self.vocab = vocab
        self.max_len = int(max_len)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @abstractmethod
    def batch_next_logprobs(self, prefixes: np.ndarray) -> np.ndarray:
        """Normalized next-token log-probabilities, shape ``(n, vocab_size)``.

        ``prefixes`` is an ``(n, d)`` array of non-EOS token ids with ``d < max_len``.
        """

    def _check_prefix(self, prefix) -> np.ndarray:
        prefix = np.asarray(tuple(prefix), dtype=np.int64).reshape(1, -1)
        if prefix.shape[1] >= self.max_len:
            raise InvalidPrefixError(f"prefix length {prefix.shape[1]} >= max_len {self.max_len}")
        if np.any(prefix == EOS):
            raise InvalidPrefixError("prefix contains EOS")
        if np.any((prefix < 0) | (prefix >= self.vocab_size)):
            raise InvalidPrefixError("token id out of range")
        return prefix

    def next_token_logprobs(self, prefix=()) -> np.ndarray:
        return self.batch_next_logprobs(self._check_prefix(prefix))[0]

    def next_token_dist(self, prefix=()) -> np.ndarray:
        return np.exp(self.next_token_logprobs(prefix))

    def batch_logprob(self, seqs: np.ndarray, lengths: np.ndarray, *, check: bool = True) -> np.ndarray:
        seqs = np.asarray(seqs, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if check:
            check_batch(seqs, lengths, self.vocab_size, self.max_len)
        out = np.zeros(len(seqs))
        for t in range(self.max_len):
            rows = np.nonzero(lengths > t)[0]
            if len(rows) == 0:
                break
            cond = self.batch_next_logprobs(seqs[rows, :t])
            out[rows] += cond[np.arange(len(rows)), seqs[rows, t]]
        return out

    def sequence_logprob(self, seq: Sequence[int]) -> float:
        seq = check_sequence(seq, self.vocab_size, self.max_len)
        seqs, lengths = pack([seq], self.max_len)
        return float(self.batch_logprob(seqs, lengths, check=False)[0])

    def sample_batch(self, n: int, rng: np.random.Generator):
        """Ancestral sampling of ``n`` sequences.

        Returns ``(seqs, lengths, logp)`` where ``logp`` is the model
        log-probability of each drawn sequence.
        """
        seqs = np.full((n, self.max_len), PAD, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        logp = np.zeros(n)
        alive = np.arange(n)
        for t in range(self.max_len):
            if len(alive) == 0:
                break
            cond = self.batch_next_logprobs(seqs[alive, :t])
            tok = sample_categorical(np.exp(cond), rng)
            seqs[alive, t] = tok
            logp[alive] += cond[np.arange(len(alive)), tok]
            lengths[alive] = t + 1
            alive = alive[tok != EOS]
        return seqs, lengths, logp

    def sample_sequence(self, rng: np.random.Generator) -> tuple[int, ...]:
        seqs, lengths, _ = self.sample_batch(1, rng)
        return unpack(seqs, lengths)[0]

    def enumerate_support(self, cap: int = DEFAULT_ENUMERATION_CAP) -> DistTable:
        seqs, lengths, logp = enumerate_batch(self, cap)
        return DistTable.from_batch(self.vocab, self.max_len, seqs, lengths, logp)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row by inverse CDF; zero-probability entries are never chosen."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(len(probs))
    return (cdf <= u[:, None]).sum(axis=1)


def enumerate_batch(model: AutoregressiveModel, cap: int = DEFAULT_ENUMERATION_CAP):
    """All positive-probability sequences of ``model`` as a padded batch."""
    V, L = model.vocab_size, model.max_len
    prefixes = np.zeros((1, 0), dtype=np.int64)
    plogp = np.zeros(1)
    out_seqs, out_lengths, out_logp = [], [], []
    total = 0

    def emit(rows: np.ndarray, lp: np.ndarray):
        nonlocal total
        total += len(rows)
        if total > cap:
            raise EnumerationTooLargeError(f"support exceeds the enumeration cap of {cap}")
        block = np.full((len(rows), L), PAD, dtype=np.int64)
        block[:, : rows.shape[1]] = rows
        out_seqs.append(block)
        out_lengths.append(np.full(len(rows), rows.shape[1], dtype=np.int64))
        out_logp.append(lp)

    for d in range(L):
        if len(prefixes) == 0:
            break
        cond = model.batch_next_logprobs(prefixes)
        lp = plogp[:, None] + cond
        eos = lp[:, EOS] > -np.inf
        emit(np.column_stack([prefixes[eos], np.full(eos.sum(), EOS)]), lp[eos, EOS])
        rows, toks = np.nonzero(lp[:, 1:] > -np.inf)
        toks = toks + 1
        nxt = np.column_stack([prefixes[rows], toks])
        nlp = lp[rows, toks]
        if d + 1 == L:
            emit(nxt, nlp)
        else:
            if total + len(nxt) > cap:
                raise EnumerationTooLargeError(f"support exceeds the enumeration cap of {cap}")
            prefixes, plogp = nxt, nlp
    return np.concatenate(out_seqs), np.concatenate(out_lengths), np.concatenate(out_logp)


def enumerate_support(model: AutoregressiveModel, cap: int = DEFAULT_ENUMERATION_CAP) -> DistTable:
    return model.enumerate_support(cap)


# Context maps for table-backed models -------------------------------------


class FullContext:
    """Every distinct EOS-free prefix is its own context."""

    kind = "tabular"

    def __init__(self, vocab_size: int, max_len: int):
        self.vocab_size = vocab_size
        self.max_len = max_len
        k = vocab_size - 1
        self.offsets = np.cumsum([0] + [k**d for d in range(max_len)])
        self.n_contexts = int(self.offsets[-1])

    def ids(self, prefixes: np.ndarray) -> np.ndarray:
        n, d = prefixes.shape
        k = self.vocab_size - 1
        idx = np.zeros(n, dtype=np.int64)
        for i in range(d):
            idx = idx * k + (prefixes[:, i] - 1)
        return idx + self.offsets[d]

    def contexts(self):
        """Yield every prefix in context-id order."""
        for d in range(self.max_len):
            for prefix in itertools.product(range(1, self.vocab_size), repeat=d):
                yield prefix

    def depth_of(self, ids: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.offsets, ids, side="right") - 1


class NGramContext:
    """Context is the last ``order - 1`` tokens, left-padded with a BOS marker.

    BOS reuses digit 0 in the context encoding since EOS never occurs in a prefix.
    """

    kind = "ngram"

    def __init__(self, vocab_size: int, order: int):
        if order < 1:
            raise ValueError("n-gram order must be >= 1")
        self.vocab_size = vocab_size
        self.order = order
        self.n_contexts = vocab_size ** (order - 1)

    def ids(self, prefixes: np.ndarray) -> np.ndarray:
        n, d = prefixes.shape
        idx = np.zeros(n, dtype=np.int64)
        for j in range(self.order - 1):
            pos = d - (self.order - 1) + j
            col = prefixes[:, pos] if pos >= 0 else np.zeros(n, dtype=np.int64)
            idx = idx * self.vocab_size + col
        return idx

    def contexts(self):
        yield from itertools.product(range(self.vocab_size), repeat=self.order - 1)


class LogitTableModel(AutoregressiveModel):
    """A model whose conditionals are rows of a table indexed by a context map.

    Built either from unnormalized ``logits`` or from a row-stochastic ``probs``
    table.  When built from ``probs`` those exact values are kept for reporting
    so that text serialization round-trips bit-exactly.
    """

    def __init__(self, vocab, max_len, contexts, *, logits=None, probs=None):
        super().__init__(vocab, max_len)
        self.contexts = contexts
        shape = (contexts.n_contexts, len(vocab))
        if (logits is None) == (probs is None):
            raise ValueError("pass exactly one of logits or probs")
        if probs is not None:
            probs = np.array(probs, dtype=np.float64)
            if probs.shape != shape:
                raise ValueError(f"probability table must have shape {shape}")
            if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1) > NORMALIZATION_TOL):
                raise ValueError("every row must be a probability vector")
            self._logp = safe_log(probs)
            self._probs = probs
        else:
            logits = np.asarray(logits, dtype=np.float64)
            if logits.shape != shape:
                raise ValueError(f"logit table must have shape {shape}")
            if np.any(np.isnan(logits)) or np.any(logits == np.inf):
                raise ValueError("logits must be finite or -inf")
            self._logp = log_softmax(logits)
            self._probs = np.exp(self._logp)
        self._logp.setflags(write=False)
        self._probs.setflags(write=False)

    @property
    def variant(self) -> str:
        return self.contexts.kind

    @property
    def order(self):
        return getattr(self.contexts, "order", None)

    @property
    def logprob_table(self) -> np.ndarray:
        return self._logp

    @property
    def prob_table(self) -> np.ndarray:
        return self._probs

    def batch_next_logprobs(self, prefixes):
        return self._logp[self.contexts.ids(np.asarray(prefixes, dtype=np.int64))]


def tabular_model(vocab, max_len, *, logits=None, probs=None) -> LogitTableModel:
    return LogitTableModel(vocab, max_len, FullContext(len(vocab), max_len), logits=logits, probs=probs)


def ngram_model(vocab, max_len, order, *, logits=None, probs=None) -> LogitTableModel:
    return LogitTableModel(vocab, max_len, NGramContext(len(vocab), order), logits=logits, probs=probs)


def uniform_model(vocab, max_len) -> LogitTableModel:
    return ngram_model(vocab, max_len, 1, logits=np.zeros((1, len(vocab))))


def fit_ngram(corpus: Iterable[Sequence[str]], vocab: Vocabulary, order: int, max_len: int,
              smoothing: float = 0.0, weights: Iterable[float] | None = None) -> LogitTableModel:
    """Maximum-likelihood n-gram fit with optional additive smoothing.

    Each corpus sentence is terminated with EOS; ``weights`` gives optional
    per-sentence multiplicities.  Contexts never observed get a uniform
    distribution.
    """
    ctx = NGramContext(len(vocab), order)
    counts = np.zeros((ctx.n_contexts, len(vocab)))
    corpus = list(corpus)
    weights = [1.0] * len(corpus) if weights is None else list(weights)
    if len(weights) != len(corpus):
        raise ValueError("one weight per sentence required")
    for sentence, w in zip(corpus, weights):
        ids = list(vocab.ids(sentence)) + [EOS]
        seqs = np.asarray([ids], dtype=np.int64)
        for t, tok in enumerate(ids):
            counts[ctx.ids(seqs[:, :t])[0], tok] += w
    counts += smoothing
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, counts / np.where(totals > 0, totals, 1), 1.0 / len(vocab))
    return ngram_model(vocab, max_len, order, probs=probs)


def positional_model(vocab, max_len, step_probs) -> LogitTableModel:
    """Tabular model whose conditional depends only on the position."""
    step_probs = np.asarray(step_probs, dtype=np.float64)
    ctx = FullContext(len(vocab), max_len)
    depth = ctx.depth_of(np.arange(ctx.n_contexts))
    return LogitTableModel(vocab, max_len, ctx, probs=step_probs[depth])


def random_tabular_model(vocab, max_len, rng: np.random.Generator, concentration: float = 1.0,
                         zero_fraction: float = 0.0) -> LogitTableModel:
    """Dirichlet-random tabular model; ``zero_fraction`` of entries are zeroed out."""
    ctx = FullContext(len(vocab), max_len)
    probs = rng.dirichlet(np.full(len(vocab), concentration), size=ctx.n_contexts)
    if zero_fraction > 0:
        drop = rng.random(probs.shape) < zero_fraction
        drop[np.arange(len(probs)), probs.argmax(axis=1)] = False
        probs = np.where(drop, 0.0, probs)
        probs /= probs.sum(axis=1, keepdims=True)
    return LogitTableModel(vocab, max_len, ctx, probs=probs)


def table_model(table: DistTable) -> LogitTableModel:
    """The tabular model whose chain-rule distribution is exactly ``table``.

    Conditionals are prefix-mass ratios; unreachable prefixes get uniform rows.
    """
    V, L = len(table.vocab), table.max_len
    ctx = FullContext(V, L)
    mass = np.zeros((ctx.n_contexts, V))
    seqs, lengths = table.batch()
    p = table.probs
    for t in range(L):
        rows = np.nonzero(lengths > t)[0]
        np.add.at(mass, (ctx.ids(seqs[rows, :t]), seqs[rows, t]), p[rows])
    totals = mass.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, mass / np.where(totals > 0, totals, 1), 1.0 / V)
    probs /= probs.sum(axis=1, keepdims=True)
    return LogitTableModel(table.vocab, L, ctx, probs=probs)


# Composed models ----------------------------------------------------------


def contains_subsequence(seqs: np.ndarray, keyword: Sequence[int]) -> np.ndarray:
    """Row-wise test for a contiguous token run ``keyword`` (PAD never matches)."""
    seqs = np.asarray(seqs)
    n, width = seqs.shape
    k = len(keyword)
    if k == 0:
        return np.ones(n, dtype=bool)
    if width < k:
        return np.zeros(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for start in range(width - k + 1):
        m = np.ones(n, dtype=bool)
        for j, tok in enumerate(keyword):
            m &= seqs[:, start + j] == tok
        hit |= m
    return hit


class LogitBiasModel(AutoregressiveModel):
    """Adds a per-token bias to the base log-probabilities, then renormalizes.

    With ``until`` set to a keyword (token tuple) the bias is only applied while
    the keyword has not yet occurred in the prefix; afterwards the base
    conditionals are returned unchanged.
    """

    variant = "composed"

    def __init__(self, base: AutoregressiveModel, bias, until: Sequence[int] | None = None):
        super().__init__(base.vocab, base.max_len)
        vec = np.zeros(base.vocab_size)
        if isinstance(bias, Mapping):
            for tok, val in bias.items():
                vec[int(tok)] = val
        else:
            vec[:] = bias
        if not np.all(np.isfinite(vec)):
            raise ValueError("bias must be finite")
        self.base = base
        self.bias = vec
        self.until = tuple(until) if until is not None else None

    def batch_next_logprobs(self, prefixes):
        base = self.base.batch_next_logprobs(prefixes)
        active = np.ones(len(prefixes), dtype=bool)
        if self.until is not None:
            active = ~contains_subsequence(prefixes, self.until)
        if not active.any():
            return base
        out = base.copy()
        out[active] = log_softmax(base[active] + self.bias)
        return out


class TokenMaskModel(AutoregressiveModel):
    """Zeroes the banned tokens at every step and renormalizes."""

    variant = "composed"

    def __init__(self, base: AutoregressiveModel, banned: Iterable[int]):
        super().__init__(base.vocab, base.max_len)
        self.base = base
        self.banned = tuple(sorted({int(t) for t in banned}))

    def batch_next_logprobs(self, prefixes):
        lp = self.base.batch_next_logprobs(prefixes).copy()
        lp[:, list(self.banned)] = -np.inf
        dead = ~np.isfinite(lp.max(axis=1))
        if dead.any():
            bad = tuple(int(t) for t in np.asarray(prefixes)[np.argmax(dead)])
            raise DeadEndError(f"all mass banned at context {bad}")
        return log_softmax(lp)


class ForcedPrefixModel(AutoregressiveModel):
    """Emits ``prompt`` deterministically, then continues with ``base``."""

    variant = "composed"

    def __init__(self, base: AutoregressiveModel, prompt: Sequence[int]):
        super().__init__(base.vocab, base.max_len)
        prompt = tuple(int(t) for t in prompt)
        if EOS in prompt or len(prompt) >= base.max_len:
            raise ValueError("prompt must be EOS-free and shorter than max_len")
        self.base = base
        self.prompt = prompt

    def batch_next_logprobs(self, prefixes):
        d = prefixes.shape[1]
        if d < len(self.prompt):
            out = np.full((len(prefixes), self.vocab_size), -np.inf)
            out[:, self.prompt[d]] = 0.0
            return out
        return self.base.batch_next_logprobs(prefixes)


def apply_logit_bias(model, bias, until=None) -> LogitBiasModel:
    return LogitBiasModel(model, bias, until)


def apply_token_mask(model, banned) -> TokenMaskModel:
    return TokenMaskModel(model, banned)


def materialize(model: AutoregressiveModel) -> LogitTableModel:
    """Tabulate any model's conditionals over the full-context table."""
    if isinstance(model, LogitTableModel) and model.variant == "tabular":
        return model
    ctx = FullContext(model.vocab_size, model.max_len)
    rows = np.zeros((ctx.n_contexts, model.vocab_size))
    for d in range(model.max_len):
        lo, hi = ctx.offsets[d], ctx.offsets[d + 1]
        if d == 0:
            prefixes = np.zeros((1, 0), dtype=np.int64)
        else:
            grid = np.indices((model.vocab_size - 1,) * d).reshape(d, -1).T + 1
            prefixes = grid.astype(np.int64)
        rows[lo:hi] = model.batch_next_logprobs(prefixes)
    return LogitTableModel(model.vocab, model.max_len, ctx, logits=rows)


# ---------------------------------------------------------------------------
# Text serialization
# ---------------------------------------------------------------------------

FORMAT_MAGIC = "# guardlab-model v1"


def _context_label(vocab: Vocabulary, contexts, prefix) -> str:
    if contexts.kind == "tabular":
        return " ".join([BOS_STRING] + [vocab.tokens[t] for t in prefix])
    return " ".join(BOS_STRING if t == 0 else vocab.tokens[t] for t in prefix)


def _reachable_contexts(model: LogitTableModel) -> list[tuple[int, tuple]]:
    """(context id, prefix) for every prefix with positive mass, in id order."""
    seqs, lengths, _ = enumerate_batch(model)
    found = {}
    for d in range(model.max_len):
        rows = seqs[lengths > d, :d]
        if not len(rows):
            break
        rows = np.unique(rows, axis=0)
        for cid, prefix in zip(model.contexts.ids(rows), rows):
            found[int(cid)] = tuple(int(t) for t in prefix)
    return sorted(found.items())


def dumps_model(model: AutoregressiveModel, reachable_only: bool = False) -> str:
    """Render a model as text; composed models are materialized first.

    Probabilities are written with 17 significant digits, so ``loads_model``
    followed by ``dumps_model`` reproduces the text exactly.  With
    ``reachable_only`` a tabular model lists only prefixes of positive mass;
    the omitted contexts load back as uniform rows, which leaves the sequence
    distribution unchanged.
    """
    if not isinstance(model, LogitTableModel):
        model = materialize(model)
    sparse = reachable_only and model.variant == "tabular"
    lines = [
        FORMAT_MAGIC,
        "vocab = " + " ".join(model.vocab.tokens),
        f"max_len = {model.max_len}",
        f"variant = {model.variant}",
        f"order = {model.order if model.order is not None else 0}",
        f"contexts = {'reachable' if sparse else 'all'}",
        "---",
    ]
    if sparse:
        items = [(prefix, model.prob_table[cid]) for cid, prefix in _reachable_contexts(model)]
    else:
        items = zip(model.contexts.contexts(), model.prob_table)
    for prefix, row in items:
        probs = " ".join(f"{p:.17g}" for p in row)
        lines.append(f"{_context_label(model.vocab, model.contexts, prefix)} | {probs}")
    return "\n".join(lines) + "\n"


def _parse_label(vocab: Vocabulary, label: str) -> tuple:
    words = label.split()
    if not words or words[0] != BOS_STRING:
        raise ValueError(f"context label {label!r} must start with {BOS_STRING}")
    return tuple(vocab.id(w) for w in words[1:])


def loads_model(text: str) -> LogitTableModel:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_MAGIC:
        raise ValueError("not a guardlab model file")
    header = {}
    i = 1
    while lines[i].strip() != "---":
        key, _, value = lines[i].partition("=")
        header[key.strip()] = value.strip()
        i += 1
    vocab = Vocabulary(tuple(header["vocab"].split()))
    max_len = int(header["max_len"])
    variant = header["variant"]
    order = int(header["order"])
    mode = header.get("contexts", "all")
    if variant == "tabular":
        ctx = FullContext(len(vocab), max_len)
    elif variant == "ngram":
        ctx = NGramContext(len(vocab), order)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    rows = [ln for ln in lines[i + 1:] if ln.strip()]
    if mode == "reachable":
        if variant != "tabular":
            raise ValueError("reachable-context files must be tabular")
        probs = np.full((ctx.n_contexts, len(vocab)), 1.0 / len(vocab))
        for line in rows:
            label, _, values = line.partition("|")
            prefix = _parse_label(vocab, label.strip())
            if len(prefix) >= max_len or EOS in prefix:
                raise ValueError(f"invalid context {label.strip()!r}")
            cid = ctx.ids(np.asarray([prefix], dtype=np.int64).reshape(1, len(prefix)))[0]
            probs[cid] = [float(v) for v in values.split()]
        return LogitTableModel(vocab, max_len, ctx, probs=probs)
    if mode != "all":
        raise ValueError(f"unknown contexts mode {mode!r}")
    if len(rows) != ctx.n_contexts:
        raise ValueError(f"expected {ctx.n_contexts} context lines, found {len(rows)}")
    probs = np.zeros((ctx.n_contexts, len(vocab)))
    for j, (prefix, line) in enumerate(zip(ctx.contexts(), rows)):
        label, _, values = line.partition("|")
        if label.strip() != _context_label(vocab, ctx, prefix):
            raise ValueError(f"context line {j} is {label.strip()!r}, expected {_context_label(vocab, ctx, prefix)!r}")
        probs[j] = [float(v) for v in values.split()]
    return LogitTableModel(vocab, max_len, ctx, probs=probs)


def save_model(model: AutoregressiveModel, path, reachable_only: bool = False) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model, reachable_only))


def load_model(path) -> LogitTableModel:
    with open(path) as fh:
        return loads_model(fh.read())
