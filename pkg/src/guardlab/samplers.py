"""Guaranteed samplers over a proposal a'.

All samplers only ever return sequences that satisfy the constraint.  For each
sampler there is an exact companion that computes its output distribution by
enumeration, so tests can compare empirical draws to the exact law.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .constraints import ConstraintPredicate
from .errors import DrawBudgetExhausted
from .gold_model import FilteredModel
from .seq_core import (
    DEFAULT_ENUMERATION_CAP,
    EOS,
    AutoregressiveModel,
    DistTable,
    TokenMaskModel,
    apply_token_mask,
    content_lengths,
    contains_subsequence,
    encode_batch,
    enumerate_batch,
    unpack,
)

DEFAULT_MAX_DRAWS = 10**7
_CHUNK = 4096


@dataclass
class SamplerReport:
    draws: int
    accepts: int
    seed: int | None = None
    sampler: str = "guard"

    @property
    def ar_estimate(self) -> float:
        return self.accepts / self.draws if self.draws else 0.0

    @property
    def stderr(self) -> float:
        if not self.draws:
            return 0.0
        p = self.ar_estimate
        return float(np.sqrt(p * (1 - p) / self.draws))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ar_estimate"] = self.ar_estimate
        d["stderr"] = self.stderr
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _draw_until(proposal, accept_fn, n, rng, max_draws, report):
    """Draw proposal batches until ``n`` acceptances; returns the accepted batch.

    ``accept_fn(seqs, lengths, logq, rng)`` returns a boolean mask.  Draws past
    the n-th acceptance inside the last chunk are not counted in the report.
    """
    got_seqs, got_len = [], []
    need = n
    while need > 0:
        room = max_draws - report.draws
        if room <= 0:
            raise DrawBudgetExhausted(f"no acceptance within {max_draws} draws", report)
        est_ar = max(report.ar_estimate, 1e-3) if report.draws else 0.5
        size = int(min(room, max(_CHUNK, need / est_ar * 1.2)))
        seqs, lengths, logq = proposal.sample_batch(size, rng)
        ok = accept_fn(seqs, lengths, logq, rng)
        idx = np.nonzero(ok)[0]
        if len(idx) >= need:
            last = idx[need - 1]
            report.draws += int(last + 1)
            idx = idx[:need]
        else:
            report.draws += size
        report.accepts += len(idx)
        got_seqs.append(seqs[idx])
        got_len.append(lengths[idx])
        need -= len(idx)
    return np.concatenate(got_seqs), np.concatenate(got_len)


def guard_sample_batch(proposal: AutoregressiveModel, b: ConstraintPredicate, n: int,
                       rng: np.random.Generator, max_draws: int = DEFAULT_MAX_DRAWS, seed=None):
    """``n`` draws of rejection sampling: sample from a' until b(y) = 1.

    Returns ``(seqs, lengths, report)``; ``max_draws`` bounds the total number
    of proposal draws across all ``n`` samples.
    """
    report = SamplerReport(0, 0, seed, "guard")
    seqs, lengths = _draw_until(proposal, lambda s, l, q, r: b.batch_evaluate(s, l), n, rng,
                                max_draws, report)
    return seqs, lengths, report


def guard_sample(proposal, b, rng, max_draws: int = DEFAULT_MAX_DRAWS, seed=None):
    seqs, lengths, report = guard_sample_batch(proposal, b, 1, rng, max_draws, seed)
    return unpack(seqs, lengths)[0], report


def estimate_ar(proposal: AutoregressiveModel, b: ConstraintPredicate, n_draws: int,
                rng: np.random.Generator) -> tuple[float, float]:
    """Monte-Carlo acceptance rate E_{a'} b(y) with its binomial standard error."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    hits = 0
    done = 0
    while done < n_draws:
        size = min(1 << 16, n_draws - done)
        seqs, lengths, _ = proposal.sample_batch(size, rng)
        hits += int(b.batch_evaluate(seqs, lengths).sum())
        done += size
    ar = hits / n_draws
    return ar, float(np.sqrt(ar * (1 - ar) / n_draws))


# Quasi-rejection sampling ---------------------------------------------------


def _qrs_log_accept(log_p, log_q, log_beta):
    with np.errstate(invalid="ignore"):
        out = np.minimum(0.0, log_p - log_beta - log_q)
    return np.where(log_p == -np.inf, -np.inf, out)


def qrs_sample_batch(proposal, target: FilteredModel, beta: float, n: int, rng,
                     max_draws: int = DEFAULT_MAX_DRAWS, seed=None):
    """QRS: accept y ~ a' with probability min(1, P(y) / (beta a'(y)))."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    log_beta = np.log(beta)

    def accept(seqs, lengths, logq, r):
        la = _qrs_log_accept(target.log_potential_batch(seqs, lengths), logq, log_beta)
        return np.log(r.random(len(seqs))) < la

    report = SamplerReport(0, 0, seed, "qrs")
    seqs, lengths = _draw_until(proposal, accept, n, rng, max_draws, report)
    return seqs, lengths, report


def qrs_sample(proposal, target, beta, rng, max_draws: int = DEFAULT_MAX_DRAWS):
    seqs, lengths, report = qrs_sample_batch(proposal, target, beta, 1, rng, max_draws)
    return unpack(seqs, lengths)[0], report


def max_log_weight(proposal: AutoregressiveModel, target: FilteredModel,
                   cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """log max_y P(y) / a'(y) over the proposal support."""
    seqs, lengths, logq = enumerate_batch(proposal, cap)
    lw = target.log_potential_batch(seqs, lengths) - logq
    return float(lw.max())


def qrs_exact_dist(proposal, target: FilteredModel, beta: float,
                   cap: int = DEFAULT_ENUMERATION_CAP) -> tuple[DistTable, float]:
    """Exact QRS output table and acceptance rate."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    seqs, lengths, logq = enumerate_batch(proposal, cap)
    log_p = target.log_potential_batch(seqs, lengths)
    log_mass = logq + _qrs_log_accept(log_p, logq, np.log(beta))
    keep = log_mass > -np.inf
    if not keep.any():
        raise DrawBudgetExhausted("QRS never accepts under this proposal")
    m = log_mass[keep].max()
    log_ar = m + np.log(np.exp(log_mass[keep] - m).sum())
    table = DistTable.from_batch(proposal.vocab, proposal.max_len, seqs[keep], lengths[keep],
                                 log_mass[keep] - log_ar)
    return table, float(np.exp(log_ar))


def qrs_beta_for_rate(proposal, target: FilteredModel, rate: float, tol: float = 1e-12,
                      cap: int = DEFAULT_ENUMERATION_CAP) -> float:
    """Largest beta whose exact QRS acceptance rate is at least ``rate``.

    Bisection in log beta; the acceptance rate is nonincreasing in beta.
    """
    seqs, lengths, logq = enumerate_batch(proposal, cap)
    log_p = target.log_potential_batch(seqs, lengths)

    def ar(log_beta):
        return float(np.exp(logq + _qrs_log_accept(log_p, logq, log_beta)).sum())

    if rate > ar(np.log(1e-300)):
        raise ValueError("rate exceeds the rejection-sampling acceptance rate")
    lo, hi = np.log(1e-300), float(np.max(log_p - logq)) + 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ar(mid) >= rate:
            lo = mid
        else:
            hi = mid
    return float(np.exp(lo))


# Independent Metropolis-Hastings ---------------------------------------------


@dataclass
class ImhChainState:
    seq: tuple
    log_weight: float
    steps: int = 0
    accepted: int = 0


def imh_init(proposal, target: FilteredModel, rng, max_draws: int = DEFAULT_MAX_DRAWS) -> ImhChainState:
    """Start a chain from one rejection-sampled (constraint-satisfying) draw."""
    seqs, lengths, _ = guard_sample_batch(proposal, target.predicate, 1, rng, max_draws)
    lw = target.log_potential_batch(seqs, lengths) - proposal.batch_logprob(seqs, lengths)
    return ImhChainState(unpack(seqs, lengths)[0], float(lw[0]))


def imh_step(state: ImhChainState, proposal, target: FilteredModel, rng) -> ImhChainState:
    """One independent-proposal MH move targeting P; never leaves {b = 1}."""
    seqs, lengths, logq = proposal.sample_batch(1, rng)
    lw_new = float(target.log_potential_batch(seqs, lengths)[0] - logq[0])
    u = rng.random()
    if lw_new > -np.inf and np.log(u) < lw_new - state.log_weight:
        return ImhChainState(unpack(seqs, lengths)[0], lw_new, state.steps + 1, state.accepted + 1)
    return ImhChainState(state.seq, state.log_weight, state.steps + 1, state.accepted)


def imh_run(proposal, target, n_steps: int, rng, state: ImhChainState | None = None) -> ImhChainState:
    state = state or imh_init(proposal, target, rng)
    for _ in range(n_steps):
        state = imh_step(state, proposal, target, rng)
    return state


class ImhKernel:
    """The exact IMH transition matrix over S = {y : P(y) > 0, a'(y) > 0}."""

    def __init__(self, proposal, target: FilteredModel, cap: int = DEFAULT_ENUMERATION_CAP,
                 max_states: int = 20000):
        seqs, lengths, logq = enumerate_batch(proposal, cap)
        log_p = target.log_potential_batch(seqs, lengths)
        keep = log_p > -np.inf
        if keep.sum() > max_states:
            raise ValueError(f"{keep.sum()} chain states exceed max_states={max_states}")
        self.vocab = proposal.vocab
        self.max_len = proposal.max_len
        codes = encode_batch(seqs[keep], len(self.vocab), self.max_len)
        order = np.argsort(codes)
        self.codes = codes[order]
        self.logq = logq[keep][order]
        self.log_w = (log_p[keep] - logq[keep])[order]
        q = np.exp(self.logq)
        T = q[None, :] * np.exp(np.minimum(0.0, self.log_w[None, :] - self.log_w[:, None]))
        np.fill_diagonal(T, 0.0)
        T[np.diag_indices_from(T)] = 1.0 - T.sum(axis=1)
        self.T = T

    def align(self, table: DistTable) -> np.ndarray:
        """Probability vector of ``table`` in state order (mass must lie in S)."""
        idx = np.searchsorted(self.codes, table.codes)
        idx = np.minimum(idx, len(self.codes) - 1)
        if not np.all(self.codes[idx] == table.codes):
            raise ValueError("initial distribution has mass outside the chain's state space")
        out = np.zeros(len(self.codes))
        out[idx] = table.probs
        return out

    def table(self, vec: np.ndarray) -> DistTable:
        vec = np.clip(vec, 0.0, None)
        with np.errstate(divide="ignore"):
            return DistTable(self.vocab, self.max_len, self.codes, np.log(vec), normalize=True)

    def marginals(self, init: DistTable, steps):
        """Yield ``(n, init T^n)`` for each n in ``steps`` (ascending)."""
        vec = self.align(init)
        n = 0
        for target_n in sorted(steps):
            while n < target_n:
                vec = vec @ self.T
                n += 1
            yield n, self.table(vec)


def imh_exact_marginal(proposal, target: FilteredModel, n: int, init: DistTable,
                       cap: int = DEFAULT_ENUMERATION_CAP) -> DistTable:
    """init T^n for the exact IMH kernel."""
    kernel = ImhKernel(proposal, target, cap)
    for _, table in kernel.marginals(init, [n]):
        return table


# Heuristic constrained samplers --------------------------------------------


def heuristic_avoidance_model(base: AutoregressiveModel, banned_token: int) -> TokenMaskModel:
    """Per-step removal of the banned token with renormalization."""
    return apply_token_mask(base, {banned_token})


def enforce_at_end(seqs: np.ndarray, lengths: np.ndarray, keyword: int, max_len: int):
    """Force ``keyword`` as the final content token wherever it is missing.

    A sequence that would end (EOS or max_len) without the keyword gets the
    keyword as its last token instead: appended before EOS when there is room,
    otherwise overwriting the token at position max_len.
    """
    seqs = seqs.copy()
    lengths = lengths.copy()
    missing = ~contains_subsequence(seqs, (keyword,))
    clen = content_lengths(seqs, lengths)
    rows = np.nonzero(missing)[0]
    for i in rows:
        c = clen[i]
        if c < max_len:
            seqs[i, c] = keyword
            if c + 1 < max_len:
                seqs[i, c + 1] = EOS
                lengths[i] = c + 2
            else:
                lengths[i] = c + 1
        else:
            seqs[i, max_len - 1] = keyword
    return seqs, lengths


def heuristic_enforce_at_end(base: AutoregressiveModel, keyword: int, rng) -> tuple:
    seqs, lengths, _ = base.sample_batch(1, rng)
    s, l = enforce_at_end(seqs, lengths, keyword, base.max_len)
    return unpack(s, l)[0]


def enforce_at_end_batch(base, keyword: int, n: int, rng):
    seqs, lengths, _ = base.sample_batch(n, rng)
    return enforce_at_end(seqs, lengths, keyword, base.max_len)


def enforce_at_end_table(base: AutoregressiveModel, keyword: int,
                         cap: int = DEFAULT_ENUMERATION_CAP) -> DistTable:
    """Exact output law of the enforce-at-end heuristic (push-forward of base)."""
    seqs, lengths, logp = enumerate_batch(base, cap)
    s, l = enforce_at_end(seqs, lengths, keyword, base.max_len)
    codes = encode_batch(s, len(base.vocab), base.max_len)
    uniq, inv = np.unique(codes, return_inverse=True)
    mass = np.zeros(len(uniq))
    np.add.at(mass, inv, np.exp(logp))
    with np.errstate(divide="ignore"):
        return DistTable(base.vocab, base.max_len, uniq, np.log(mass), normalize=True)


def audit(b: ConstraintPredicate, seqs, lengths) -> int:
    """Number of constraint violations in a batch of emitted samples."""
    if len(seqs) == 0:
        return 0
    return int((~b.batch_evaluate(seqs, lengths)).sum())


__all__ = [
    "SamplerReport",
    "guard_sample",
    "guard_sample_batch",
    "estimate_ar",
    "qrs_sample",
    "qrs_sample_batch",
    "qrs_exact_dist",
    "max_log_weight",
    "ImhChainState",
    "ImhKernel",
    "imh_init",
    "imh_step",
    "imh_run",
    "imh_exact_marginal",
    "heuristic_avoidance_model",
    "heuristic_enforce_at_end",
    "enforce_at_end",
    "enforce_at_end_batch",
    "enforce_at_end_table",
    "audit",
]
