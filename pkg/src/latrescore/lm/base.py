"""Stateful language-model interface shared by N-gram and LSTM models."""

from __future__ import annotations

import math
from typing import Hashable, Iterable, NamedTuple, Sequence

from sklearn.base import BaseEstimator

from ..vocab import EOS_ID, UNK_ID, Vocabulary


class ZeroProbabilityError(ArithmeticError):
    pass


class LMScoreResult(NamedTuple):
    next_state: object
    logprob: float


class LanguageModel(BaseEstimator):
    """Base class for models scored one word at a time.

    States are immutable values; ``lm_score`` never mutates its input
    state. Subclasses set ``vocab_`` when fitted.
    """

    def lm_start(self):
        raise NotImplementedError

    def lm_score(self, state, word: int) -> LMScoreResult:
        raise NotImplementedError

    def state_key(self, state) -> Hashable:
        """Exact fingerprint used for hypothesis recombination."""
        return state

    def pool_states(self, states: Sequence, weights: Sequence[float]):
        raise TypeError(f"{type(self).__name__} states cannot be pooled")

    def score_unk(self, state) -> float:
        """Log probability of one specific OOV word: ln P(UNK|h) - ln N_UNK."""
        n_unk = self.vocab_.n_unk
        if n_unk < 1:
            raise ValueError("N_UNK must be >= 1")
        return self.lm_score(state, UNK_ID).logprob - math.log(n_unk)

    def word_logprob(self, state, word: int) -> LMScoreResult:
        """``lm_score`` with the UNK spreading rule applied."""
        res = self.lm_score(state, word)
        if word == UNK_ID:
            return LMScoreResult(res.next_state, res.logprob - math.log(self.vocab_.n_unk))
        return res

    def check_word(self, word: int) -> None:
        if not 0 <= word < len(self.vocab_):
            raise KeyError(f"word id {word} outside vocabulary; map OOVs to <unk> first")

    def sentence_logprob(self, words: Iterable[int], eos: bool = False) -> float:
        """Sum of stepwise log probabilities from the start state (exactly rounded)."""
        state = self.lm_start()
        terms = []
        for w in list(words) + ([EOS_ID] if eos else []):
            state, lp = self.word_logprob(state, w)
            terms.append(lp)
        return math.fsum(terms)

    def perplexity(self, sentences: Iterable[Sequence[int]]) -> float:
        return perplexity(self, sentences)

    def score(self, X, y=None) -> float:
        """Mean per-token log probability (higher is better)."""
        lp, n = _total_logprob(self, X)
        return lp / n


def _total_logprob(model: LanguageModel, sentences) -> tuple[float, int]:
    total, n = 0.0, 0
    for s in sentences:
        lp = model.sentence_logprob(s, eos=True)
        if lp == -math.inf:
            raise ZeroProbabilityError("zero-probability token in text")
        total += lp
        n += len(s) + 1
    if n == 0:
        raise ValueError("empty text")
    return total, n


def perplexity(model: LanguageModel, sentences: Iterable[Sequence[int]]) -> float:
    """exp of the mean negative log probability, ``</s>`` included per sentence."""
    total, n = _total_logprob(model, sentences)
    return math.exp(-total / n)


class UniformLM(LanguageModel):
    """Every word equally likely; a stateless baseline."""

    def __init__(self, vocab: Vocabulary | None = None):
        self.vocab = vocab

    def fit(self, X=None, y=None):
        if self.vocab is None:
            raise ValueError("UniformLM needs a vocabulary")
        self.vocab_ = self.vocab
        return self

    def lm_start(self):
        return ()

    def lm_score(self, state, word):
        self.check_word(word)
        return LMScoreResult(state, -math.log(len(self.vocab_)))
