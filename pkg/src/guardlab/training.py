"""Proposal training: CAP analog, SFT, DPG and warm-start DPG.

Policies are softmax tables of logits, one row per context.  The context map
is either the full prefix (tabular family) or the last k-1 tokens (n-gram
family).  All trainers consume exactly their declared sample budget and
record exact KL(g || pi) and AR(pi) at checkpoints.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .constraints import ConstraintPredicate
from .errors import DegenerateDatasetError, TrainingDivergedError
from .gold_model import FilteredModel, exact_kl
from .seq_core import (
    EOS,
    PAD,
    AutoregressiveModel,
    FullContext,
    LogitTableModel,
    NGramContext,
    apply_logit_bias,
    log_softmax,
    materialize,
    pack,
    sample_categorical,
)

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.1
DEFAULT_BATCH = 100
DEFAULT_MAX_UPDATE_NORM = 0.5
DEFAULT_FIT_LR = 1.0
DEFAULT_FIT_TOL = 1e-4
DEFAULT_FIT_STEPS = 5000
SMOOTHING_EPS = 1e-6
CHECKPOINT_FRACTION = 0.05
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_FLOOR = 0.01


# ---------------------------------------------------------------------------
# Policy parameters
# ---------------------------------------------------------------------------


class PolicyParams:
    """Mutable per-context logits of a softmax policy.

    ``-inf`` logits mark tokens outside the policy's support; they stay at
    ``-inf`` under every update because their gradient is exactly zero.
    """

    def __init__(self, vocab, max_len: int, contexts, logits):
        self.vocab = vocab
        self.max_len = max_len
        self.contexts = contexts
        self.logits = np.array(logits, dtype=np.float64)
        if self.logits.shape != (contexts.n_contexts, len(vocab)):
            raise ValueError(f"logits shape {self.logits.shape} does not match the context map")

    @classmethod
    def from_model(cls, model: AutoregressiveModel, family: str = "tabular", order: int | None = None):
        """Initialize logits to the conditionals of ``model`` in the given family.

        The tabular family represents any model exactly.  The n-gram family
        requires a model that is already an n-gram of the same order.
        """
        if family == "tabular":
            m = materialize(model)
            return cls(m.vocab, m.max_len, m.contexts, m.logprob_table)
        if family == "ngram":
            if not (isinstance(model, LogitTableModel) and model.variant == "ngram"
                    and model.order == order):
                raise ValueError(f"ngram family of order {order} needs a matching ngram init model")
            return cls(model.vocab, model.max_len, model.contexts, model.logprob_table)
        raise ValueError(f"unknown policy family {family!r}")

    @classmethod
    def uniform(cls, vocab, max_len: int, family: str = "tabular", order: int | None = None):
        if family == "tabular":
            ctx = FullContext(len(vocab), max_len)
        elif family == "ngram":
            ctx = NGramContext(len(vocab), order)
        else:
            raise ValueError(f"unknown policy family {family!r}")
        return cls(vocab, max_len, ctx, np.zeros((ctx.n_contexts, len(vocab))))

    @property
    def n_params(self) -> int:
        return self.logits.size

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.vocab, self.max_len, self.contexts, self.logits.copy())

    def snapshot(self) -> LogitTableModel:
        return LogitTableModel(self.vocab, self.max_len, self.contexts, logits=self.logits.copy())

    def row_logprobs(self, ids: np.ndarray) -> np.ndarray:
        return log_softmax(self.logits[ids])

    def sample(self, n: int, rng: np.random.Generator):
        """Ancestral sampling straight from the logits (no snapshot needed)."""
        L = self.max_len
        seqs = np.full((n, L), PAD, dtype=np.int64)
        lengths = np.zeros(n, dtype=np.int64)
        logq = np.zeros(n)
        alive = np.arange(n)
        for t in range(L):
            if not len(alive):
                break
            cond = self.row_logprobs(self.contexts.ids(seqs[alive, :t]))
            tok = sample_categorical(np.exp(cond), rng)
            seqs[alive, t] = tok
            logq[alive] += cond[np.arange(len(alive)), tok]
            lengths[alive] = t + 1
            alive = alive[tok != EOS]
        return seqs, lengths, logq

    def _steps(self, seqs, lengths, mask=None):
        """Flatten a batch into (row index, context id, token) triples."""
        rows, ids, toks = [], [], []
        for t in range(self.max_len):
            r = np.nonzero(lengths > t)[0]
            if mask is not None:
                r = r[mask[r]]
            if not len(r):
                break
            rows.append(r)
            ids.append(self.contexts.ids(seqs[r, :t]))
            toks.append(seqs[r, t])
        if not rows:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        return np.concatenate(rows), np.concatenate(ids), np.concatenate(toks)

    def logprob(self, seqs, lengths) -> np.ndarray:
        rows, ids, toks = self._steps(seqs, lengths)
        out = np.zeros(len(seqs))
        if len(rows):
            lp = self.row_logprobs(ids)[np.arange(len(ids)), toks]
            np.add.at(out, rows, lp)
        return out

    def weighted_grad(self, seqs, lengths, weights) -> tuple[np.ndarray, np.ndarray]:
        """sum_i weights[i] * grad log pi(y_i), as (context ids, dense rows).

        Per step, d log softmax(l)[y] / dl = onehot(y) - softmax(l).
        """
        weights = np.asarray(weights, dtype=np.float64)
        rows, ids, toks = self._steps(seqs, lengths, weights != 0)
        V = self.logits.shape[1]
        if not len(rows):
            return np.zeros(0, dtype=np.int64), np.zeros((0, V))
        u, inv = np.unique(ids, return_inverse=True)
        w = weights[rows]
        g = np.zeros((len(u), V))
        np.add.at(g, (inv, toks), w)
        wsum = np.zeros(len(u))
        np.add.at(wsum, inv, w)
        probs = np.exp(self.row_logprobs(u))
        g -= wsum[:, None] * probs
        return u, g

    def grad_log_prob(self, seq) -> np.ndarray:
        """Dense gradient of log pi(seq) with respect to all logits."""
        seqs, lengths = pack([tuple(seq)], self.max_len)
        u, g = self.weighted_grad(seqs, lengths, np.ones(1))
        out = np.zeros_like(self.logits)
        out[u] = g
        return out


def grad_log_prob(policy: PolicyParams, seq) -> np.ndarray:
    return policy.grad_log_prob(seq)


def finite_difference_grad(policy: PolicyParams, seq, h: float = 1e-6) -> np.ndarray:
    """Central differences of log pi(seq) over the logits of the visited contexts."""
    seqs, lengths = pack([tuple(seq)], policy.max_len)
    _, ids, _ = policy._steps(seqs, lengths)
    out = np.zeros_like(policy.logits)
    work = policy.copy()
    for c in np.unique(ids):
        for v in range(policy.logits.shape[1]):
            if not np.isfinite(policy.logits[c, v]):
                continue
            orig = work.logits[c, v]
            work.logits[c, v] = orig + h
            up = work.logprob(seqs, lengths)[0]
            work.logits[c, v] = orig - h
            down = work.logprob(seqs, lengths)[0]
            work.logits[c, v] = orig
            out[c, v] = (up - down) / (2 * h)
    return out


def exact_kl_gradient(policy: PolicyParams, gold) -> np.ndarray:
    """Gradient of KL(g || pi) w.r.t. the logits: -E_g grad log pi(y)."""
    seqs, lengths = gold.batch()
    u, g = policy.weighted_grad(seqs, lengths, gold.probs)
    out = np.zeros_like(policy.logits)
    out[u] = -g
    return out


# ---------------------------------------------------------------------------
# Budgets and learning curves
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainingBudget:
    total: int
    cap_phase: int = 0
    samples_per_step: int = DEFAULT_BATCH

    def __post_init__(self):
        if self.total < 0 or not 0 <= self.cap_phase <= self.total:
            raise ValueError("budget requires 0 <= cap_phase <= total")
        if self.samples_per_step < 1:
            raise ValueError("samples_per_step must be >= 1")

    @property
    def steps(self) -> int:
        return math.ceil((self.total - self.cap_phase) / self.samples_per_step)


@dataclass
class CurvePoint:
    samples: int
    kl: float
    ar: float
    wall_ms: float | None = None
    z_hat: float | None = None


@dataclass
class LearningCurve:
    method: str = ""
    points: list = field(default_factory=list)

    CSV_HEADER = ("samples", "kl_exact", "ar_exact", "wall_ms")

    def add(self, point: CurvePoint) -> None:
        if self.points and point.samples <= self.points[-1].samples:
            raise ValueError("curve samples must be strictly increasing")
        self.points.append(point)

    @property
    def samples(self) -> np.ndarray:
        return np.array([p.samples for p in self.points])

    @property
    def kl(self) -> np.ndarray:
        return np.array([p.kl for p in self.points])

    @property
    def ar(self) -> np.ndarray:
        return np.array([p.ar for p in self.points])

    @property
    def final(self) -> CurvePoint:
        return self.points[-1]

    def samples_to_reach(self, threshold: float) -> int | None:
        """First checkpoint sample count with KL <= threshold (None if never)."""
        for p in self.points:
            if p.kl <= threshold:
                return p.samples
        return None

    def to_csv(self) -> str:
        """CSV text; the wall-clock column is blank unless timing was recorded."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_HEADER)
        for p in self.points:
            w.writerow([p.samples, f"{p.kl:.17g}", f"{p.ar:.17g}",
                        "" if p.wall_ms is None else f"{p.wall_ms:.1f}"])
        return buf.getvalue()


def exact_ar(model: AutoregressiveModel, b: ConstraintPredicate) -> float:
    table = model.enumerate_support()
    return float(table.probs[b.table_mask(table)].sum())


class _Recorder:
    def __init__(self, fm: FilteredModel, method: str, record_time: bool):
        self.fm = fm
        self.curve = LearningCurve(method)
        self.t0 = time.perf_counter() if record_time else None

    def __call__(self, samples: int, policy: PolicyParams, z_hat=None) -> CurvePoint:
        m = policy.snapshot()
        wall = None if self.t0 is None else (time.perf_counter() - self.t0) * 1e3
        point = CurvePoint(samples, exact_kl(self.fm.gold, m), exact_ar(m, self.fm.predicate), wall, z_hat)
        self.curve.add(point)
        return point


def checkpoint_grid(total: int, start: int = 0) -> list[int]:
    """Sample counts in (start, total] at every 5% of ``total``, plus ``total``."""
    if total <= start:
        return []
    k = round(1 / CHECKPOINT_FRACTION)
    grid = {math.ceil(i * total / k) for i in range(1, k + 1)}
    return sorted(s for s in grid | {total} if s > start)


# ---------------------------------------------------------------------------
# CAP analog and cross-entropy fitting
# ---------------------------------------------------------------------------


def cap_model(base: AutoregressiveModel, keyword, bias: float) -> AutoregressiveModel:
    """Logit bias on the keyword tokens, switched off once the keyword appears."""
    kw = tuple(int(t) for t in (keyword if isinstance(keyword, (tuple, list)) else (keyword,)))
    if bias == 0:
        return base
    return apply_logit_bias(base, {t: bias for t in kw}, until=kw)


@dataclass
class FitInfo:
    steps: int
    grad_norm: float
    n_samples: int


def fit_cross_entropy(seqs: np.ndarray, lengths: np.ndarray, policy: PolicyParams, *,
                      steps: int = DEFAULT_FIT_STEPS, lr: float = DEFAULT_FIT_LR,
                      tol: float = DEFAULT_FIT_TOL, eps: float = SMOOTHING_EPS) -> FitInfo:
    """Full-batch gradient descent on the mean negative log-likelihood, in place.

    Counts get an add-``eps`` pseudo-count on every token the policy supports,
    so the optimum is the smoothed empirical conditional in each visited
    context.  Stops when the gradient's infinity norm drops to ``tol``.
    """
    if len(seqs) == 0:
        raise DegenerateDatasetError("cannot fit on an empty dataset")
    _, ids, toks = policy._steps(seqs, lengths)
    u, inv = np.unique(ids, return_inverse=True)
    counts = np.zeros((len(u), policy.logits.shape[1]))
    np.add.at(counts, (inv, toks), 1.0)
    counts += eps * np.isfinite(policy.logits[u])
    totals = counts.sum(axis=1)
    D = len(seqs)
    gn = float("inf")
    s = 0
    for s in range(steps + 1):
        p = np.exp(log_softmax(policy.logits[u]))
        grad = (totals[:, None] * p - counts) / D
        gn = float(np.abs(grad).max())
        if gn <= tol or s == steps:
            break
        policy.logits[u] -= lr * grad
    return FitInfo(s, gn, D)


def smoothed_conditionals(seqs, lengths, policy: PolicyParams, eps: float = SMOOTHING_EPS):
    """Closed-form optimum of ``fit_cross_entropy``: (context ids, conditionals)."""
    _, ids, toks = policy._steps(seqs, lengths)
    u, inv = np.unique(ids, return_inverse=True)
    counts = np.zeros((len(u), policy.logits.shape[1]))
    np.add.at(counts, (inv, toks), 1.0)
    counts += eps * np.isfinite(policy.logits[u])
    return u, counts / counts.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


def _init_policy(init, family, order):
    if isinstance(init, PolicyParams):
        return init.copy()
    return PolicyParams.from_model(init, family, order)


def sft_train(a: AutoregressiveModel, b: ConstraintPredicate, budget: int, rng: np.random.Generator, *,
              family: str = "tabular", order: int | None = None, fm: FilteredModel | None = None,
              fit_steps: int = DEFAULT_FIT_STEPS, fit_lr: float = DEFAULT_FIT_LR,
              fit_tol: float = DEFAULT_FIT_TOL, record_time: bool = False):
    """Filter ``budget`` draws from a and fit the family on the survivors.

    At each 5% checkpoint the policy is refit from a on all samples kept so
    far.  Checkpoints with no accepted sample yet keep the policy at a.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    fm = fm or FilteredModel(a, b)
    rec = _Recorder(fm, "sft", record_time)
    init = PolicyParams.from_model(a, family, order)
    rec(0, init)
    kept_s, kept_l = [], []
    policy = init
    drawn = 0
    for ck in checkpoint_grid(budget):
        seqs, lengths, _ = a.sample_batch(ck - drawn, rng)
        drawn = ck
        ok = b.batch_evaluate(seqs, lengths)
        kept_s.append(seqs[ok])
        kept_l.append(lengths[ok])
        data_s, data_l = np.concatenate(kept_s), np.concatenate(kept_l)
        if len(data_s):
            policy = init.copy()
            fit_cross_entropy(data_s, data_l, policy, steps=fit_steps, lr=fit_lr, tol=fit_tol)
        rec(ck, policy)
    if sum(len(s) for s in kept_s) == 0:
        raise DegenerateDatasetError(f"none of {budget} samples from a satisfied the constraint")
    return policy.snapshot(), rec.curve


@dataclass
class DpgState:
    """Running counters of the DPG loop: samples drawn and the Z estimate."""

    n: int = 0
    z_hat: float = 0.0


def dpg_weights(log_p: np.ndarray, log_q: np.ndarray, state: DpgState) -> np.ndarray:
    """Per-sample p(y)/pi(y) with the moving average Z updated draw by draw.

    Mutates ``state``.  Sample i uses the estimate that includes itself, as
    in the sequential form Z <- ((N-1) Z + P(y)/pi(y)) / N.
    """
    r = np.exp(log_p - log_q)
    n0 = state.n
    ns = n0 + np.arange(1, len(r) + 1)
    z = (state.z_hat * n0 + np.cumsum(r)) / ns
    state.n = int(ns[-1]) if len(r) else n0
    state.z_hat = float(z[-1]) if len(r) else state.z_hat
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(r > 0, r / np.where(z > 0, z, 1.0), 0.0)


def dpg_update(policy: PolicyParams, seqs, lengths, weights, alpha: float,
               max_update_norm: float | None = DEFAULT_MAX_UPDATE_NORM) -> float:
    """theta += alpha * mean_i w_i grad log pi(y_i), rescaled to an L2 cap."""
    u, g = policy.weighted_grad(seqs, lengths, weights)
    if not len(u):
        return 0.0
    upd = alpha * g / len(seqs)
    norm = float(np.sqrt(np.sum(upd**2)))
    if max_update_norm is not None and norm > max_update_norm:
        upd *= max_update_norm / norm
    policy.logits[u] += upd
    return norm


def _dpg_loop(policy, fm, budget, alpha, rng, rec, *, offset=0, batch=DEFAULT_BATCH,
              max_update_norm=DEFAULT_MAX_UPDATE_NORM, grid=None, kl0=None):
    state = DpgState()
    total = offset + budget
    grid = grid if grid is not None else checkpoint_grid(total, offset)
    limit = DIVERGENCE_FACTOR * max(kl0, DIVERGENCE_FLOOR) if kl0 is not None else None
    drawn = 0
    for ck in grid:
        while offset + drawn < ck:
            n = min(batch, ck - offset - drawn)
            seqs, lengths, logq = policy.sample(n, rng)
            log_p = fm.log_potential_batch(seqs, lengths)
            w = dpg_weights(log_p, logq, state)
            dpg_update(policy, seqs, lengths, w, alpha, max_update_norm)
            drawn += n
        point = rec(ck, policy, state.z_hat)
        if limit is not None and not point.kl <= limit:
            raise TrainingDivergedError(f"KL {point.kl:.4g} exceeded {limit:.4g} at {ck} samples")
    return state


def dpg_train(a: AutoregressiveModel, b: ConstraintPredicate, init, budget: int, alpha: float,
              rng: np.random.Generator, *, family: str = "tabular", order: int | None = None,
              batch: int = DEFAULT_BATCH, max_update_norm: float | None = DEFAULT_MAX_UPDATE_NORM,
              fm: FilteredModel | None = None, record_time: bool = False):
    """Cold-start DPG from ``init`` (a model or PolicyParams) for ``budget`` draws."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    fm = fm or FilteredModel(a, b)
    rec = _Recorder(fm, "dpg", record_time)
    policy = _init_policy(init, family, order)
    first = rec(0, policy)
    _dpg_loop(policy, fm, budget, alpha, rng, rec, batch=batch, max_update_norm=max_update_norm,
              kl0=first.kl)
    return policy.snapshot(), rec.curve


def warm_start_dpg(a: AutoregressiveModel, b: ConstraintPredicate, cap: AutoregressiveModel,
                   total: int, cap_budget: int, alpha: float, rng: np.random.Generator, *,
                   family: str = "tabular", order: int | None = None, batch: int = DEFAULT_BATCH,
                   max_update_norm: float | None = DEFAULT_MAX_UPDATE_NORM,
                   fm: FilteredModel | None = None, fit_steps: int = DEFAULT_FIT_STEPS,
                   fit_lr: float = DEFAULT_FIT_LR, fit_tol: float = DEFAULT_FIT_TOL,
                   record_time: bool = False):
    """CAP warm phase (``cap_budget`` draws, filter, fit from a) then DPG.

    The curve starts at KL(g || a), has a point after the fit, then DPG
    checkpoints on the 5% grid of ``total``.  With ``cap_budget == 0`` the run
    is exactly cold-start DPG, including its random stream.
    """
    if not 0 <= cap_budget <= total:
        raise ValueError("warm start requires 0 <= cap_budget <= total")
    fm = fm or FilteredModel(a, b)
    rec = _Recorder(fm, "warm_dpg", record_time)
    policy = PolicyParams.from_model(a, family, order)
    first = rec(0, policy)
    if cap_budget > 0:
        seqs, lengths, _ = cap.sample_batch(cap_budget, rng)
        ok = b.batch_evaluate(seqs, lengths)
        if ok.any():
            fit_cross_entropy(seqs[ok], lengths[ok], policy, steps=fit_steps, lr=fit_lr, tol=fit_tol)
        else:
            log.warning("CAP phase accepted 0 of %d samples; continuing as cold-start DPG", cap_budget)
        rec(cap_budget, policy)
    remaining = total - cap_budget
    if remaining > 0:
        grid = checkpoint_grid(total, cap_budget)
        _dpg_loop(policy, fm, remaining, alpha, rng, rec, offset=cap_budget, batch=batch,
                  max_update_norm=max_update_norm, grid=grid, kl0=first.kl)
    return policy.snapshot(), rec.curve


def smoothed(values, window: int = 5) -> np.ndarray:
    """Trailing moving average over ``window`` checkpoints."""
    values = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty(len(values))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
