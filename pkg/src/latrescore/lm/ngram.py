"""Backoff N-gram language model with interpolated Witten-Bell smoothing.

Tables are keyed by n-grams packed into integers (first word most
significant), which keeps memory flat for desk-scale corpora.
"""

from __future__ import annotations

import io
import math
import re
from collections import Counter
from typing import Sequence

import numpy as np

from ..vocab import BOS_ID, EOS_ID, Vocabulary
from .base import LanguageModel, LMScoreResult

_LN10 = math.log(10.0)
_ARPA_FLOOR = -99.0


def _as_id_corpus(X, vocab):
    if vocab is None:
        sents = [list(s) for s in X]
        vocab = Vocabulary.build(sents)
        return vocab, [vocab.encode(s) for s in sents]
    out = []
    for s in X:
        s = list(s)
        if s and isinstance(s[0], str):
            s = vocab.encode(s)
        out.append(s)
    return vocab, out


class NGramLM(LanguageModel):
    """Word N-gram model in backoff form.

    Parameters
    ----------
    order : int
        N; the model conditions on the previous N-1 words.
    vocab : Vocabulary, optional
        Built from the training text when omitted.
    smoothing : {"witten_bell", "ml"}
        ``"ml"`` gives unsmoothed maximum-likelihood estimates, which can
        assign zero probability.
    """

    def __init__(self, order: int = 3, vocab: Vocabulary | None = None,
                 smoothing: str = "witten_bell"):
        self.order = order
        self.vocab = vocab
        self.smoothing = smoothing

    # -- estimation ---------------------------------------------------------

    def fit(self, X, y=None):
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if self.smoothing not in ("witten_bell", "ml"):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")
        vocab, sents = _as_id_corpus(X, self.vocab)
        if not sents or sum(len(s) + 1 for s in sents) == 0:
            raise ValueError("empty corpus")
        self.vocab_ = vocab
        self._setup_packing()
        counts = self._count(sents)
        self._estimate(counts)
        return self

    def _setup_packing(self):
        self.bits_ = max(1, math.ceil(math.log2(len(self.vocab_))))
        self._mask = (1 << self.bits_) - 1

    def _pack(self, ids) -> int:
        k = 0
        for w in ids:
            k = (k << self.bits_) | w
        return k

    def _count(self, sents) -> list[Counter]:
        N = self.order
        counts = [Counter() for _ in range(N + 1)]
        b = self.bits_
        use_np = N * b <= 62
        for n in range(1, N + 1):
            if use_np:
                chunks = []
                for s in sents:
                    seq = np.asarray([BOS_ID, *s, EOS_ID], dtype=np.int64)
                    if len(seq) < n or (n == 1 and len(seq) < 2):
                        continue
                    # targets start at position 1 (BOS is never predicted)
                    lo = max(1, n - 1)
                    m = len(seq) - lo
                    if m <= 0:
                        continue
                    key = np.zeros(m, dtype=np.int64)
                    for j in range(n):
                        key = (key << b) | seq[lo - (n - 1) + j: lo - (n - 1) + j + m]
                    chunks.append(key)
                if chunks:
                    keys, cnt = np.unique(np.concatenate(chunks), return_counts=True)
                    counts[n] = Counter(dict(zip(keys.tolist(), cnt.tolist())))
            else:
                c = counts[n]
                for s in sents:
                    seq = [BOS_ID, *s, EOS_ID]
                    for i in range(max(1, n - 1), len(seq)):
                        c[self._pack(seq[i - n + 1:i + 1])] += 1
        return counts

    def _estimate(self, counts):
        V = len(self.vocab_)
        wb = self.smoothing == "witten_bell"
        b, mask = self.bits_, self._mask
        self.probs_ = [dict() for _ in range(self.order + 1)]
        self.bows_ = [dict() for _ in range(self.order + 1)]
        uni = np.zeros(V)
        for k, c in counts[1].items():
            uni[k] = c
        total, types = uni.sum(), float((uni > 0).sum())
        with np.errstate(divide="ignore"):
            if wb:
                p1 = (uni + types / V) / (total + types)
            else:
                p1 = uni / total
            lp1 = np.log(p1)
        self.probs_[1] = dict(enumerate(lp1.tolist()))
        for n in range(2, self.order + 1):
            ctx_c, ctx_t = Counter(), Counter()
            for k, c in counts[n].items():
                h = k >> b
                ctx_c[h] += c
                ctx_t[h] += 1
            table = self.probs_[n]
            lower_mask = (1 << (b * (n - 1))) - 1
            for k, c in counts[n].items():
                h = k >> b
                if wb:
                    lower = math.exp(self._lookup(k & lower_mask, n - 1))
                    p = (c + ctx_t[h] * lower) / (ctx_c[h] + ctx_t[h])
                else:
                    p = c / ctx_c[h]
                table[k] = math.log(p)
            bows = self.bows_[n - 1]
            for h, c in ctx_c.items():
                if wb:
                    bows[h] = math.log(ctx_t[h] / (c + ctx_t[h]))
                else:
                    bows[h] = -math.inf

    # -- scoring ------------------------------------------------------------

    def _lookup(self, key: int, n: int) -> float:
        """Natural-log probability of the packed n-gram ``key`` of order ``n``."""
        b = self.bits_
        acc = 0.0
        while True:
            lp = self.probs_[n].get(key)
            if lp is not None:
                return acc + lp
            if n == 1:
                return -math.inf
            acc += self.bows_[n - 1].get(key >> b, 0.0)
            n -= 1
            key &= (1 << (b * n)) - 1

    def logprob(self, context: Sequence[int], word: int) -> float:
        ctx = tuple(context)[-(self.order - 1):] if self.order > 1 else ()
        return self._lookup(self._pack((*ctx, word)), len(ctx) + 1)

    def lm_start(self):
        return (BOS_ID,) if self.order > 1 else ()

    def lm_score(self, state, word: int) -> LMScoreResult:
        self.check_word(word)
        lp = self._lookup(self._pack((*state, word)), len(state) + 1)
        if self.order > 1:
            nxt = (*state, word)[-(self.order - 1):]
        else:
            nxt = ()
        return LMScoreResult(nxt, lp)

    def num_ngrams(self) -> list[int]:
        return [len(t) for t in self.probs_[1:]]

    # -- ARPA ---------------------------------------------------------------

    def _unpack(self, key: int, n: int) -> list[int]:
        out = []
        for _ in range(n):
            out.append(key & self._mask)
            key >>= self.bits_
        return out[::-1]

    def to_arpa(self) -> str:
        fh = io.StringIO()
        fh.write("\n\\data\\\n")
        for n in range(1, self.order + 1):
            fh.write(f"ngram {n}={len(self.probs_[n])}\n")
        for n in range(1, self.order + 1):
            fh.write(f"\n\\{n}-grams:\n")
            bows = self.bows_[n] if n < self.order else {}
            rows = sorted(self.probs_[n].items(), key=lambda kv: self._unpack(kv[0], n))
            for k, lp in rows:
                words = " ".join(self.vocab_.decode(self._unpack(k, n)))
                line = f"{_to_log10(lp):.10f}\t{words}"
                bw = bows.get(k)
                if bw is not None:
                    line += f"\t{_to_log10(bw):.10f}"
                fh.write(line + "\n")
        fh.write("\n\\end\\\n")
        return fh.getvalue()

    @classmethod
    def from_arpa(cls, text: str, vocab: Vocabulary | None = None) -> "NGramLM":
        """Load an ARPA model. Without ``vocab``, one is built from the unigrams."""
        sections = {}
        counts = {}
        cur = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            m = re.match(r"ngram (\d+)=(\d+)$", line)
            if m:
                counts[int(m.group(1))] = int(m.group(2))
                continue
            m = re.match(r"\\(\d+)-grams:$", line)
            if m:
                cur = int(m.group(1))
                sections[cur] = []
                continue
            if line in ("\\data\\", "\\end\\"):
                cur = None
                continue
            if cur is None:
                raise ValueError(f"unexpected ARPA line {line!r}")
            parts = line.split()
            sections[cur].append(parts)
        order = max(sections)
        if vocab is None:
            reserved = set(Vocabulary().words)
            vocab = Vocabulary([p[1] for p in sections[1] if p[1] not in reserved])
        model = cls(order=order, vocab=vocab)
        model.vocab_ = vocab
        model._setup_packing()
        model.probs_ = [dict() for _ in range(order + 1)]
        model.bows_ = [dict() for _ in range(order + 1)]
        for n, rows in sections.items():
            if counts.get(n, len(rows)) != len(rows):
                raise ValueError(f"ARPA header count mismatch for order {n}")
            for parts in rows:
                ids = vocab.encode(parts[1:1 + n], map_unk=False)
                k = model._pack(ids)
                model.probs_[n][k] = _from_log10(float(parts[0]))
                if len(parts) == n + 2:
                    model.bows_[n][k] = _from_log10(float(parts[n + 1]))
        return model


def _to_log10(lp: float) -> float:
    return lp / _LN10 if lp > -math.inf else _ARPA_FLOOR


def _from_log10(x: float) -> float:
    return -math.inf if x <= _ARPA_FLOOR else x * _LN10
