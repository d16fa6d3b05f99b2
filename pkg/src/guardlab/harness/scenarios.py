"""Named desk-scale scenarios.

keyword-desk
    Six words plus EOS, an order-2 base model fitted to the bundled corpus
    (``data/keyword_desk_corpus.tsv``), L_max = 8, constraint "contains
    amazing".  The keyword is rare and mostly reachable after "very", so the
    base model has genuine bigram dependence and a small exact Z.

sentiment-desk
    The opening "the plot was awful" is forced, then an order-2 base model
    continues.  The constraint asks for a positive final window: the share of
    "good" among sentiment tokens in the last two tokens must exceed 0.5.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from importlib import resources

import numpy as np

from ..constraints import ConstraintPredicate, ContainsKeyword, RatioScorer, ThresholdScore
from ..seq_core import AutoregressiveModel, ForcedPrefixModel, Vocabulary, fit_ngram, ngram_model

KEYWORD_DESK = "keyword-desk"
SENTIMENT_DESK = "sentiment-desk"


@dataclass(frozen=True)
class Scenario:
    name: str
    base: AutoregressiveModel
    predicate: ConstraintPredicate
    keyword: int | None = None

    @property
    def vocab(self) -> Vocabulary:
        return self.base.vocab

    @property
    def max_len(self) -> int:
        return self.base.max_len


def read_weighted_corpus(text: str) -> tuple[list[list[str]], list[int]]:
    """Parse ``count<TAB>sentence`` lines."""
    sentences, weights = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        count, sep, sentence = line.partition("\t")
        if not sep:
            raise ValueError(f"corpus line {lineno}: expected count<TAB>sentence")
        sentences.append(sentence.split())
        weights.append(int(count))
    return sentences, weights


KEYWORD_WORDS = ("the", "film", "was", "very", "good", "amazing")


@functools.lru_cache(maxsize=None)
def keyword_desk_base() -> AutoregressiveModel:
    text = resources.files("guardlab.harness").joinpath("data/keyword_desk_corpus.tsv").read_text()
    sentences, weights = read_weighted_corpus(text)
    vocab = Vocabulary.from_words(KEYWORD_WORDS)
    return fit_ngram(sentences, vocab, order=2, max_len=8, weights=weights)


def keyword_desk() -> Scenario:
    base = keyword_desk_base()
    kw = base.vocab.id("amazing")
    return Scenario(KEYWORD_DESK, base, ContainsKeyword((kw,)), kw)


SENTIMENT_WORDS = ("the", "plot", "was", "awful", "but", "good")
SENTIMENT_PROMPT = ("the", "plot", "was", "awful")
SENTIMENT_DESIGN = {
    "<s>": {"the": 1.0},
    "the": {"plot": 0.9, "was": 0.1},
    "plot": {"was": 0.9, "<eos>": 0.1},
    "was": {"awful": 0.6, "good": 0.3, "<eos>": 0.1},
    "awful": {"<eos>": 0.6, "but": 0.25, "awful": 0.15},
    "but": {"the": 0.4, "awful": 0.3, "good": 0.3},
    "good": {"<eos>": 0.7, "but": 0.2, "good": 0.1},
}


@functools.lru_cache(maxsize=None)
def sentiment_desk_base() -> AutoregressiveModel:
    vocab = Vocabulary.from_words(SENTIMENT_WORDS)
    probs = np.zeros((len(vocab), len(vocab)))
    for ctx, row in SENTIMENT_DESIGN.items():
        c = 0 if ctx == "<s>" else vocab.id(ctx)
        for tok, p in row.items():
            probs[c, vocab.id(tok)] = p
    base = ngram_model(vocab, 8, 2, probs=probs)
    return ForcedPrefixModel(base, vocab.ids(SENTIMENT_PROMPT))


def sentiment_desk() -> Scenario:
    base = sentiment_desk_base()
    v = base.vocab
    scorer = RatioScorer(frozenset({v.id("good")}), frozenset({v.id("awful")}), window=2)
    return Scenario(SENTIMENT_DESK, base, ThresholdScore(scorer, 0.5))


SCENARIOS = {KEYWORD_DESK: keyword_desk, SENTIMENT_DESK: sentiment_desk}


def get_scenario(name: str) -> Scenario:
    try:
        return SCENARIOS[name]()
    except KeyError:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}") from None
