import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_instance
from guardlab import training
from guardlab.constraints import ContainsKeyword
from guardlab.errors import DegenerateDatasetError, TrainingDivergedError
from guardlab.gold_model import FilteredModel, exact_kl
from guardlab.seq_core import Vocabulary, pack, positional_model, random_tabular_model, table_model
from guardlab.training import (
    CurvePoint,
    DpgState,
    LearningCurve,
    PolicyParams,
    TrainingBudget,
    checkpoint_grid,
    dpg_weights,
)


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.mark.parametrize("family", ["tabular", "ngram"])
def test_grad_matches_finite_differences(family):
    vocab = Vocabulary.from_words(["a", "b", "c"])
    rng = np.random.default_rng(0)
    if family == "tabular":
        policy = PolicyParams.from_model(random_tabular_model(vocab, 4, rng))
    else:
        policy = PolicyParams.uniform(vocab, 4, "ngram", 2)
        policy.logits[:] = rng.normal(size=policy.logits.shape)
    seqs, lengths, _ = policy.sample(20, rng)
    for i in range(len(seqs)):
        seq = tuple(seqs[i, :lengths[i]])
        assert _rel(policy.grad_log_prob(seq), training.finite_difference_grad(policy, seq)) <= 1e-6


def test_minus_inf_logits_have_zero_gradient(keyword_desk):
    policy = PolicyParams.from_model(keyword_desk.base, "ngram", 2)
    dead = ~np.isfinite(policy.logits)
    assert dead.any()
    seqs, lengths, _ = policy.sample(200, np.random.default_rng(1))
    u, g = policy.weighted_grad(seqs, lengths, np.ones(200))
    assert np.all(g[dead[u]] == 0)


def test_exact_kl_gradient_matches_finite_differences(two_position_fm):
    policy = PolicyParams.from_model(random_tabular_model(two_position_fm.vocab, 2, np.random.default_rng(3)))
    grad = training.exact_kl_gradient(policy, two_position_fm.gold)
    h = 1e-6
    fd = np.zeros_like(policy.logits)
    for idx in np.ndindex(policy.logits.shape):
        work = policy.copy()
        work.logits[idx] += h
        up = exact_kl(two_position_fm.gold, work.snapshot())
        work.logits[idx] -= 2 * h
        down = exact_kl(two_position_fm.gold, work.snapshot())
        fd[idx] = (up - down) / (2 * h)
    assert _rel(grad, fd) <= 1e-6


def test_policy_sampling_and_snapshot_agree(keyword_desk):
    policy = PolicyParams.from_model(keyword_desk.base)
    assert exact_kl(keyword_desk.base.enumerate_support(), policy.snapshot()) <= 1e-12
    seqs, lengths, logq = policy.sample(500, np.random.default_rng(2))
    assert np.allclose(logq, policy.snapshot().batch_logprob(seqs, lengths))
    assert np.allclose(logq, policy.logprob(seqs, lengths))


def test_ngram_family_needs_matching_init(keyword_desk):
    with pytest.raises(ValueError):
        PolicyParams.from_model(keyword_desk.base, "ngram", 3)
    with pytest.raises(ValueError):
        PolicyParams.from_model(keyword_desk.base, "lstm")


# DPG pieces ------------------------------------------------------------------


@given(st.lists(st.floats(-5, 2), min_size=1, max_size=30), st.integers(1, 10))
def test_dpg_weights_match_sequential_update(log_r, split_at):
    log_r = np.array(log_r)
    log_r[::4] = -np.inf
    state = DpgState()
    k = min(split_at, len(log_r))
    w = np.concatenate([dpg_weights(log_r[:k], np.zeros(k), state),
                        dpg_weights(log_r[k:], np.zeros(len(log_r) - k), state)])
    z, n, expected = 0.0, 0, []
    for lr in log_r:
        n += 1
        r = math.exp(lr)
        z = ((n - 1) * z + r) / n
        expected.append(r / z if r > 0 else 0.0)
    assert np.allclose(w, expected, rtol=1e-12)
    assert state.n == len(log_r)
    assert state.z_hat == pytest.approx(z, rel=1e-12)


def test_dpg_update_clips_to_max_norm(two_position_fm):
    policy = PolicyParams.from_model(positional_model(two_position_fm.vocab, 2, [[0, .5, .5]] * 2))
    seqs, lengths = pack([(2, 2)] * 10, 2)
    before = policy.logits.copy()
    raw = training.dpg_update(policy, seqs, lengths, np.full(10, 100.0), alpha=1.0, max_update_norm=0.5)
    assert raw > 0.5
    live = np.isfinite(before)
    assert np.linalg.norm(policy.logits[live] - before[live]) == pytest.approx(0.5)
    small = policy.copy()
    training.dpg_update(small, seqs, lengths, np.full(10, 1e-3), alpha=0.1, max_update_norm=0.5)
    _, g = policy.weighted_grad(seqs, lengths, np.full(10, 1e-3))
    step = np.linalg.norm(small.logits[live] - policy.logits[live])
    assert step == pytest.approx(0.1 * np.linalg.norm(g) / 10)


def test_dpg_reduces_kl_on_small_instance():
    vocab, a, b = small_instance(4, V=3, L=3)
    fm = FilteredModel(a, b)
    _, curve = training.dpg_train(a, b, a, 20000, 0.1, np.random.default_rng(0), fm=fm)
    assert curve.kl[0] == pytest.approx(-fm.log_z)
    assert curve.final.kl < 0.3 * curve.kl[0]
    assert curve.final.z_hat == pytest.approx(curve.points[-2].z_hat, rel=0.5)


def test_divergence_guard_aborts(two_position_fm):
    g_model = table_model(two_position_fm.gold)
    with pytest.raises(TrainingDivergedError):
        training.dpg_train(two_position_fm.base, two_position_fm.predicate,
                           positional_model(two_position_fm.vocab, 2, [[0, .6, .4]] * 2),
                           2000, alpha=1e4, rng=np.random.default_rng(0), batch=1,
                           max_update_norm=None, fm=FilteredModel(g_model, two_position_fm.predicate))


# SFT and fitting -------------------------------------------------------------


def test_fit_reaches_smoothed_conditionals(keyword_desk):
    rng = np.random.default_rng(0)
    seqs, lengths, _ = keyword_desk.base.sample_batch(3000, rng)
    ok = keyword_desk.predicate.batch_evaluate(seqs, lengths)
    seqs, lengths = seqs[ok], lengths[ok]
    policy = PolicyParams.from_model(keyword_desk.base)
    info = training.fit_cross_entropy(seqs, lengths, policy)
    assert info.steps <= training.DEFAULT_FIT_STEPS
    u, cond = training.smoothed_conditionals(seqs, lengths, policy)
    # grad = (n_ctx p - counts) / D, so the stopping rule bounds |p - cond| per context
    _, ids, _ = policy._steps(seqs, lengths)
    n_ctx = np.bincount(np.searchsorted(u, ids), minlength=len(u))
    gap = np.abs(np.exp(policy.row_logprobs(u)) - cond).max(axis=1)
    assert np.all(gap <= info.grad_norm * len(seqs) / n_ctx * (1 + 1e-9))


def test_fit_rejects_empty_dataset(two_position):
    with pytest.raises(DegenerateDatasetError):
        training.fit_cross_entropy(np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64),
                                   PolicyParams.from_model(two_position))


def test_sft_degenerate_dataset(ab_vocab):
    # b is satisfiable but with probability 1e-12, so 100 draws never hit it
    a = positional_model(ab_vocab, 2, [[0, 1 - 1e-12, 1e-12]] * 2)
    with pytest.raises(DegenerateDatasetError):
        training.sft_train(a, ContainsKeyword((2,)), 100, np.random.default_rng(0))


def test_sft_approaches_gold():
    vocab, a, b = small_instance(6, V=3, L=3)
    fm = FilteredModel(a, b)
    model, curve = training.sft_train(a, b, 20000, np.random.default_rng(0), fm=fm)
    assert list(curve.samples) == [0] + checkpoint_grid(20000)
    assert curve.final.kl < 0.05
    assert curve.final.ar > 0.99


# CAP and warm start ----------------------------------------------------------


def test_cap_zero_bias_is_base(keyword_desk):
    assert training.cap_model(keyword_desk.base, keyword_desk.keyword, 0) is keyword_desk.base


def test_cap_raises_ar_tenfold(keyword_desk, keyword_desk_fm):
    cap = training.cap_model(keyword_desk.base, keyword_desk.keyword, 6.0)
    assert training.exact_ar(cap, keyword_desk.predicate) >= 10 * keyword_desk_fm.Z


def test_warm_start_without_cap_phase_is_cold_start():
    vocab, a, b = small_instance(8, V=3, L=3)
    fm = FilteredModel(a, b)
    cap = training.cap_model(a, 1, 3.0)
    _, warm = training.warm_start_dpg(a, b, cap, 3000, 0, 0.1, np.random.default_rng(5), fm=fm)
    _, cold = training.dpg_train(a, b, a, 3000, 0.1, np.random.default_rng(5), fm=fm)
    assert warm.to_csv() == cold.to_csv()


def test_warm_start_zero_accepts_falls_back(ab_vocab, caplog):
    a = positional_model(ab_vocab, 2, [[0, 0.9, 0.1]] * 2)
    b = ContainsKeyword((2,))
    useless_cap = positional_model(ab_vocab, 2, [[0, 1.0, 0.0]] * 2)
    with caplog.at_level(logging.WARNING):
        _, curve = training.warm_start_dpg(a, b, useless_cap, 2000, 500, 0.1, np.random.default_rng(0))
    assert "continuing as cold-start" in caplog.text
    assert curve.points[1].samples == 500
    assert curve.points[1].kl == curve.points[0].kl


# Budgets and curves ----------------------------------------------------------


def test_checkpoint_grid():
    assert checkpoint_grid(200000) == list(range(10000, 200001, 10000))
    assert checkpoint_grid(200000, 10000) == list(range(20000, 200001, 10000))
    assert checkpoint_grid(7) == [1, 2, 3, 4, 5, 6, 7]
    assert checkpoint_grid(0) == []


def test_budget_validation():
    assert TrainingBudget(200000, 10000).steps == 1900
    with pytest.raises(ValueError):
        TrainingBudget(10, 11)
    with pytest.raises(ValueError):
        TrainingBudget(10, 0, 0)


def test_learning_curve():
    c = LearningCurve("x")
    c.add(CurvePoint(0, 2.0, 0.1))
    c.add(CurvePoint(10, 1.0, 0.5))
    c.add(CurvePoint(20, 0.5, 0.7))
    with pytest.raises(ValueError):
        c.add(CurvePoint(20, 0.1, 0.9))
    assert c.samples_to_reach(1.0) == 10
    assert c.samples_to_reach(0.1) is None
    lines = c.to_csv().splitlines()
    assert lines[0] == "samples,kl_exact,ar_exact,wall_ms"
    assert lines[1] == "0,2,0.10000000000000001,"


@settings(max_examples=30)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=30), st.integers(1, 6))
def test_smoothed_is_trailing_mean(values, window):
    out = training.smoothed(values, window)
    for i in range(len(values)):
        seg = values[max(0, i + 1 - window):i + 1]
        assert out[i] == pytest.approx(sum(seg) / len(seg), abs=1e-9)
