import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from guardlab.constraints import (
    AvoidsKeyword,
    Conjunction,
    Constant,
    ContainsKeyword,
    PrefixRequired,
    RatioScorer,
    ThresholdScore,
    satisfying_mass,
)
from guardlab.seq_core import EOS, pack

P, N, O = 1, 2, 3  # positive, negative, neutral token ids
scorer = RatioScorer({P}, {N}, window=3)

seq_strategy = st.lists(st.integers(1, 3), min_size=0, max_size=5).map(
    lambda c: tuple(c) + (EOS,) if len(c) < 5 else tuple(c))


def test_ratio_scorer_examples():
    assert scorer.score((P, P, P, EOS)) == 1.0
    assert scorer.score((P, N, EOS)) == 0.5
    assert scorer.score((P, P, N, EOS)) == pytest.approx(2 / 3)
    assert scorer.score((O, O, EOS)) == 0.5
    # only the last three content tokens count
    assert scorer.score((N, N, O, P, P, EOS)) == pytest.approx(1.0)


def test_ratio_scorer_rejects_overlap():
    with pytest.raises(ValueError):
        RatioScorer({1}, {1}, 2)
    with pytest.raises(ValueError):
        RatioScorer({EOS}, {1}, 2)


def test_threshold_is_strict():
    b = ThresholdScore(scorer, 0.5)
    assert b.evaluate((P, N, EOS)) == 0
    assert b.evaluate((P, P, N, EOS)) == 1


@given(seq_strategy, st.floats(0, 1), st.floats(0, 1))
def test_threshold_monotone(seq, t1, t2):
    lo, hi = sorted((t1, t2))
    if ThresholdScore(scorer, hi).evaluate(seq, 5):
        assert ThresholdScore(scorer, lo).evaluate(seq, 5)


@given(seq_strategy, st.lists(st.integers(1, 3), min_size=1, max_size=2))
def test_contains_avoids_duality(seq, kw):
    c = ContainsKeyword(tuple(kw)).evaluate(seq, 5)
    a = AvoidsKeyword(tuple(kw)).evaluate(seq, 5)
    assert c + a == 1
    # brute-force oracle for contiguous matching
    k = len(kw)
    assert c == any(seq[i:i + k] == tuple(kw) for i in range(len(seq) - k + 1))


@given(st.lists(seq_strategy, min_size=1, max_size=10))
def test_batch_matches_single_and_is_idempotent(seqs):
    b = Conjunction((ContainsKeyword((1,)), ThresholdScore(scorer, 0.4)))
    batch = pack(seqs, 5)
    first = b.batch_evaluate(*batch)
    assert np.array_equal(first, b.batch_evaluate(*batch))
    assert first.tolist() == [bool(b.evaluate(s, 5)) for s in seqs]


def test_keyword_validation():
    with pytest.raises(ValueError):
        ContainsKeyword(())
    with pytest.raises(ValueError):
        ContainsKeyword((1, EOS))
    with pytest.raises(ValueError):
        Conjunction(())


def test_prefix_required():
    b = PrefixRequired((1, 2))
    assert b.evaluate((1, 2, EOS)) == 1
    assert b.evaluate((1, EOS)) == 0
    assert b.evaluate((2, 1, EOS)) == 0


def test_satisfying_mass(two_position, ab_vocab):
    t = two_position.enumerate_support()
    assert satisfying_mass(Constant(True), t) == pytest.approx(1.0)
    assert satisfying_mass(Constant(False), t) == 0.0
    assert satisfying_mass(ContainsKeyword((ab_vocab.id("B"),)), t) == pytest.approx(0.51, abs=1e-12)
