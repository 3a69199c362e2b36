"""Synthetic topic-structured text for desk-scale experiments.

Segments are generated from a word-class Markov chain; every content word
is drawn from a topic-specific list with high probability, and the topic is
fixed for a whole segment. Short-context models see the topic only through
the last few words, so long-range models have something to gain.
"""

from __future__ import annotations

import bisect
import itertools
import random
from dataclasses import dataclass

import numpy as np

# class -> (next class, probability); "." ends a clause
_TRANSITIONS = {
    "START": [("DET", 1.0)],
    "DET": [("ADJ", 0.35), ("NOUN", 0.65)],
    "ADJ": [("NOUN", 0.85), ("ADJ", 0.15)],
    "NOUN": [("VERB", 0.5), ("PREP", 0.2), (".", 0.2), ("CONJ", 0.1)],
    "VERB": [("DET", 0.55), ("PREP", 0.2), ("ADV", 0.1), (".", 0.15)],
    "ADV": [(".", 0.6), ("PREP", 0.4)],
    "PREP": [("DET", 1.0)],
    "CONJ": [("DET", 1.0)],
    ".": [("DET", 1.0)],
}
_SHARED = {"DET": 5, "ADJ": 5, "NOUN": 10, "VERB": 8, "ADV": 4, "PREP": 6, "CONJ": 3}
_TOPICAL = {"ADJ": 6, "NOUN": 15, "VERB": 8, "ADV": 3}


@dataclass
class ToyLanguage:
    """Word lists and sampling tables of the generator."""

    n_topics: int = 6
    topic_prob: float = 0.9
    clause_end_prob: float = 0.12
    zipf: float = 2.0
    collocation_prob: float = 0.9
    n_collocates: int = 3
    seed: int = 1234

    def __post_init__(self):
        self.shared = {c: [f"{c.lower()}{i}" for i in range(n)] for c, n in _SHARED.items()}
        self.topical = {(c, z): [f"t{z}{c.lower()}{i}" for i in range(n)]
                        for c, n in _TOPICAL.items() for z in range(self.n_topics)}
        # governor word -> preferred dependents (objects of verbs/preps,
        # nouns after adjectives, verbs after subject nouns)
        rng = random.Random(self.seed)
        self.collocates = {}
        for z in range(self.n_topics):
            nouns = self.topical[("NOUN", z)] + self.shared["NOUN"]
            verbs = self.topical[("VERB", z)] + self.shared["VERB"]
            for g in self.topical[("VERB", z)] + self.topical[("ADJ", z)]:
                self.collocates[g] = rng.sample(nouns, self.n_collocates)
            for g in self.topical[("NOUN", z)]:
                self.collocates[g] = rng.sample(verbs, self.n_collocates)
        for g in self.shared["VERB"] + self.shared["PREP"] + self.shared["ADJ"]:
            for z in range(self.n_topics):
                nouns = self.topical[("NOUN", z)] + self.shared["NOUN"]
                self.collocates[(g, z)] = rng.sample(nouns, self.n_collocates)
        for g in self.shared["NOUN"]:
            for z in range(self.n_topics):
                verbs = self.topical[("VERB", z)] + self.shared["VERB"]
                self.collocates[(g, z)] = rng.sample(verbs, self.n_collocates)

    def words(self) -> list[str]:
        out = ["."]
        for ws in self.shared.values():
            out.extend(ws)
        for ws in self.topical.values():
            out.extend(ws)
        return out

    def _cdf(self, n):
        p = 1.0 / np.arange(1, n + 1) ** self.zipf
        return list(itertools.accumulate((p / p.sum()).tolist()))

    def generate(self, n_tokens: int, seed: int | None = None, mean_length: int = 60,
                 min_length: int = 1) -> list[list[str]]:
        """Segments totalling about ``n_tokens`` words (``</s>`` not included)."""
        rng = random.Random(self.seed if seed is None else seed)
        self._cdfs = {n: self._cdf(n) for n in {*_SHARED.values(), *_TOPICAL.values(), self.n_collocates}}
        segs = []
        total = 0
        # clause-end probability chosen so segments average ~mean_length words
        clause_len = 12.0
        p_end = min(1.0, clause_len / max(mean_length, clause_len))
        while total < n_tokens:
            z = rng.randrange(self.n_topics)
            seg = self._segment(rng, z, p_end)
            if len(seg) < min_length:
                continue
            segs.append(seg)
            total += len(seg)
        return segs

    def _segment(self, rng, topic, p_end):
        words = []
        cls = "START"
        gov = None
        while True:
            cls = _pick(rng, _TRANSITIONS[cls])
            if cls == ".":
                words.append(".")
                gov = None
                if rng.random() < p_end:
                    return words
                continue
            w = None
            if cls in ("NOUN", "VERB") and gov is not None and rng.random() < self.collocation_prob:
                pref = self.collocates.get(gov) or self.collocates.get((gov, topic))
                if pref:
                    w = pref[min(bisect.bisect(self._cdfs[len(pref)], rng.random()), len(pref) - 1)]
            if w is None:
                w = self._emit(rng, cls, topic)
            words.append(w)
            if cls in ("VERB", "PREP", "ADJ", "NOUN"):
                gov = w
            elif cls in ("CONJ", "ADV"):
                gov = None

    def _emit(self, rng, cls, topic):
        if (cls, topic) in self.topical and rng.random() < self.topic_prob:
            ws = self.topical[(cls, topic)]
        else:
            ws = self.shared[cls]
        cdf = self._cdfs[len(ws)]
        return ws[min(bisect.bisect(cdf, rng.random()), len(ws) - 1)]

    def confusions(self, word: str) -> list[str]:
        """Same-class words from other topics (plus shared words of the class)."""
        for (c, z), ws in self.topical.items():
            if word in ws:
                out = [w for (c2, z2), ws2 in self.topical.items() if c2 == c and z2 != z
                       for w in ws2]
                return out + self.shared[c]
        for c, ws in self.shared.items():
            if word in ws:
                out = [w for w in ws if w != word]
                for (c2, _), ws2 in self.topical.items():
                    if c2 == c:
                        out.extend(ws2)
                return out
        return []


def _pick(rng, options):
    u = rng.random()
    for c, p in options:
        u -= p
        if u < 0:
            return c
    return options[-1][0]
