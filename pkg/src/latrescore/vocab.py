"""Word vocabulary with reserved symbols."""

from __future__ import annotations

import json
from collections import Counter
from typing import Iterable, Sequence

EPSILON = "<eps>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
DEFAULT_NONSPEECH = ("<sil>", "<noise>")

EPS_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3


class UnknownWordError(KeyError):
    pass


class Vocabulary:
    """Bijection between word strings and dense integer ids.

    Ids 0-3 are always ``<eps>``, ``<s>``, ``</s>`` and ``<unk>``; the
    non-speech symbols follow, then ordinary words.

    Parameters
    ----------
    words : sequence of str
        Ordinary words, in the order they should receive ids.
    nonspeech : sequence of str
        Pause/noise symbols that language models treat as transparent.
    n_unk : int
        Number of distinct training words that were mapped to ``<unk>``.
        Always at least 1.
    """

    def __init__(self, words: Sequence[str] = (), nonspeech: Sequence[str] = DEFAULT_NONSPEECH,
                 n_unk: int = 1):
        reserved = [EPSILON, BOS, EOS, UNK, *nonspeech]
        if len(set(reserved)) != len(reserved):
            raise ValueError("reserved symbols must be distinct")
        self._words = list(reserved)
        self._index = {w: i for i, w in enumerate(self._words)}
        for w in words:
            if w in self._index:
                raise ValueError(f"duplicate word {w!r}")
            self._index[w] = len(self._words)
            self._words.append(w)
        if n_unk < 1:
            raise ValueError("n_unk must be >= 1")
        self.n_unk = int(n_unk)
        self.nonspeech = tuple(nonspeech)
        self.nonspeech_ids = frozenset(self._index[w] for w in nonspeech)

    @classmethod
    def build(cls, sentences: Iterable[Sequence[str]], max_size: int | None = None,
              min_count: int = 1, nonspeech: Sequence[str] = DEFAULT_NONSPEECH) -> "Vocabulary":
        """Build from tokenized text, most frequent words first.

        Words beyond ``max_size`` or below ``min_count`` map to ``<unk>``;
        their number of distinct types becomes ``n_unk``.
        """
        reserved = {EPSILON, BOS, EOS, UNK, *nonspeech}
        counts = Counter(w for s in sentences for w in s if w not in reserved)
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        kept = [w for w, c in ranked if c >= min_count]
        if max_size is not None:
            kept = kept[:max_size]
        n_unk = max(1, len(counts) - len(kept))
        return cls(kept, nonspeech=nonspeech, n_unk=n_unk)

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def __eq__(self, other) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (self._words == other._words and self.n_unk == other.n_unk
                and self.nonspeech == other.nonspeech)

    def __hash__(self):
        return hash((tuple(self._words), self.n_unk))

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)}, n_unk={self.n_unk})"

    @property
    def words(self) -> list[str]:
        return list(self._words)

    def id(self, word: str) -> int:
        try:
            return self._index[word]
        except KeyError:
            raise UnknownWordError(word) from None

    def word(self, idx: int) -> str:
        return self._words[idx]

    def encode(self, words: Iterable[str], map_unk: bool = True) -> list[int]:
        if map_unk:
            return [self._index.get(w, UNK_ID) for w in words]
        return [self.id(w) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self._words[i] for i in ids]

    def is_transparent(self, idx: int) -> bool:
        """True for epsilon and non-speech ids."""
        return idx == EPS_ID or idx in self.nonspeech_ids

    def to_json(self) -> str:
        return json.dumps({"words": self._words[4 + len(self.nonspeech):],
                           "nonspeech": list(self.nonspeech), "n_unk": self.n_unk})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        return cls(d["words"], nonspeech=d["nonspeech"], n_unk=d["n_unk"])
