"""The filtered model g(y) = a(y) b(y) / Z, computed exactly by enumeration."""

from __future__ import annotations

import numpy as np

from .constraints import ConstraintPredicate
from .errors import ConstraintViolatingError, EmptyGoldSupportError
from .seq_core import (
    DEFAULT_ENUMERATION_CAP,
    AutoregressiveModel,
    DistTable,
    pack,
)


class FilteredModel:
    """The energy-based pair (base, predicate) with its exact gold table.

    Z and the gold table are computed eagerly at construction.  The same class
    represents (a', b) -> g' when ``base`` is a proposal.
    """

    def __init__(self, base: AutoregressiveModel, predicate: ConstraintPredicate,
                 cap: int = DEFAULT_ENUMERATION_CAP):
        self.base = base
        self.predicate = predicate
        self.base_table = base.enumerate_support(cap)
        self.mask = predicate.table_mask(self.base_table)
        sat_logp = self.base_table.logp[self.mask]
        if len(sat_logp) == 0:
            raise EmptyGoldSupportError("no sequence with positive base mass satisfies the constraint")
        m = sat_logp.max()
        self.log_z = float(m + np.log(np.exp(sat_logp - m).sum()))
        self.gold = DistTable(base.vocab, base.max_len, self.base_table.codes[self.mask],
                              sat_logp - self.log_z)

    @property
    def vocab(self):
        return self.base.vocab

    @property
    def max_len(self):
        return self.base.max_len

    @property
    def Z(self) -> float:
        return float(np.exp(self.log_z))

    def log_potential_batch(self, seqs, lengths) -> np.ndarray:
        """log a(y) + log b(y); never consults Z."""
        lp = self.base.batch_logprob(seqs, lengths)
        ok = self.predicate.batch_evaluate(seqs, lengths)
        return np.where(ok, lp, -np.inf)

    def potential(self, y) -> float:
        seqs, lengths = pack([tuple(y)], self.max_len)
        return float(np.exp(self.log_potential_batch(seqs, lengths)[0]))


def potential(fm: FilteredModel, y) -> float:
    return fm.potential(y)


def exact_partition(fm: FilteredModel) -> float:
    return fm.Z


def exact_gold(fm: FilteredModel) -> DistTable:
    return fm.gold


def exact_kl(p: DistTable, q) -> float:
    """KL(p || q) in nats with 0 log 0 = 0; ``inf`` if p is not absolutely continuous.

    ``q`` is either a ``DistTable`` or an ``AutoregressiveModel`` (evaluated on
    the support of ``p``).
    """
    if isinstance(q, DistTable):
        q_logp = q.lookup_logp(p.codes)
    else:
        seqs, lengths = p.batch()
        q_logp = q.batch_logprob(seqs, lengths, check=False)
    if np.any(q_logp == -np.inf):
        return float("inf")
    return max(float(np.sum(p.probs * (p.logp - q_logp))), 0.0)


def pythagorean_residual(p: DistTable, fm: FilteredModel) -> float:
    """|KL(p||a) - KL(p||g) - KL(g||a)| for a distribution p on the constraint set."""
    seqs, lengths = p.batch()
    if not np.all(fm.predicate.batch_evaluate(seqs, lengths)):
        raise ConstraintViolatingError("p puts mass on constraint-violating sequences")
    if np.any(fm.base_table.lookup_logp(p.codes) == -np.inf):
        raise ConstraintViolatingError("p puts mass outside the base support")
    kl_pa = exact_kl(p, fm.base_table)
    kl_pg = exact_kl(p, fm.gold)
    kl_ga = exact_kl(fm.gold, fm.base_table)
    return abs(kl_pa - kl_pg - kl_ga)

