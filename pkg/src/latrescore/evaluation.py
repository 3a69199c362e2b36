"""WER scoring, synthetic lattices and the rescoring experiment driver."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .graph import best_path, expand_ngram, prune_density
from .lattice import Arc, Lattice, topo_sort
from .lm.base import LanguageModel
from .lm.ngram import NGramLM
from .rescoring import RescoreConfig, ScoringPolicy, rescore
from .vocab import BOS_ID, EPS_ID, Vocabulary


class WerResult(NamedTuple):
    sub: int
    ins: int
    dels: int
    wer: float

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dels


def wer(reference: Sequence, hypothesis: Sequence) -> WerResult:
    """Unit-cost edit distance with its substitution/insertion/deletion split.

    Among minimum-distance alignments the one with the most substitutions
    wins, so a substitution is never reported as an insertion plus a
    deletion.
    """
    ref, hyp = list(reference), list(hypothesis)
    if not ref:
        raise ValueError("reference is empty")
    n, m = len(ref), len(hyp)
    # cell = (errors, -substitutions, insertions); lexicographic min
    prev = [(j, 0, j) for j in range(m + 1)]
    for i in range(1, n + 1):
        cur = [(i, 0, 0)]
        for j in range(1, m + 1):
            e, ns, ni = prev[j - 1]
            if ref[i - 1] == hyp[j - 1]:
                diag = (e, ns, ni)
            else:
                diag = (e + 1, ns - 1, ni)
            e, ns, ni = prev[j]
            dele = (e + 1, ns, ni)
            e, ns, ni = cur[j - 1]
            ins = (e + 1, ns, ni + 1)
            cur.append(min(diag, dele, ins))
        prev = cur
    e, ns, ni = prev[m]
    s = -ns
    d = e - s - ni
    return WerResult(s, ni, d, e / n)


# -- synthetic lattices --------------------------------------------------------------


@dataclass
class SyntheticLatticeSpec:
    """Knobs of the first-pass stand-in.

    Each reference word gets ``n_confusions`` competing words. Reference
    arcs draw acoustic costs around ``ref_am``, competitors around
    ``conf_am``, both with spread ``am_noise``.
    """

    references: list
    n_confusions: int = 3
    skip_prob: float = 0.05
    insert_prob: float = 0.05
    nonspeech_prob: float = 0.05
    ref_am: float = 2.0
    conf_am: float = 2.6
    am_noise: float = 1.5
    first_pass_order: int | None = None
    density: float = 20.0
    seed: int = 0


def find_word_path(lattice: Lattice, words: Sequence[int], transparent=frozenset({EPS_ID}),
                   scale: float = 1.0) -> tuple | None:
    """Cheapest arc path whose non-transparent words equal ``words`` (or None)."""
    words = tuple(words)
    best = {(lattice.start, 0): (0.0, ())}
    for q in topo_sort(lattice):
        for pos in range(len(words) + 1):
            cur = best.get((q, pos))
            if cur is None:
                continue
            for i in lattice.out_arcs[q]:
                a = lattice.arcs[i]
                if a.word in transparent:
                    nxt = pos
                elif pos < len(words) and a.word == words[pos]:
                    nxt = pos + 1
                else:
                    continue
                c = cur[0] + a.am + scale * a.lm
                key = (a.dst, nxt)
                if key not in best or c < best[key][0]:
                    best[key] = (c, cur[1] + (i,))
    ends = [best[(f, len(words))] for f in sorted(lattice.finals) if (f, len(words)) in best]
    if not ends:
        return None
    return min(ends, key=lambda t: t[0])[1]


def random_confusions(vocab: Vocabulary) -> Callable[[int], list]:
    """Every ordinary word is confusable with every other."""
    first = 4 + len(vocab.nonspeech)
    pool = list(range(first, len(vocab)))
    return lambda w: [v for v in pool if v != w]


def class_confusions(classes: Callable[[str], list], vocab: Vocabulary) -> Callable[[int], list]:
    """Lift a string-level confusion function (e.g. ``ToyLanguage.confusions``) to ids."""
    def f(w):
        out = [vocab.id(c) for c in classes(vocab.word(w)) if c in vocab]
        return [v for v in out if v != w] or random_confusions(vocab)(w)
    return f


def _sausage(ref, spec, confuse, rng, nonspeech_id) -> Lattice:
    arcs = []
    n = len(ref)
    next_node = n + 1

    def am(mean):
        return float(max(0.0, rng.normal(mean, spec.am_noise)))

    for i, w in enumerate(ref):
        slot = [(w, am(spec.ref_am))]
        cands = confuse(w)
        k = min(spec.n_confusions, len(cands))
        if k:
            for c in rng.choice(len(cands), size=k, replace=False):
                slot.append((cands[int(c)], am(spec.conf_am)))
        if rng.random() < spec.skip_prob:
            slot.append((EPS_ID, am(spec.conf_am)))
        arcs.extend(Arc(i, i + 1, word, c, 0.0) for word, c in slot)
        extra = []
        if rng.random() < spec.insert_prob and cands:
            extra.append((cands[int(rng.integers(len(cands)))], am(spec.conf_am)))
        if nonspeech_id is not None and rng.random() < spec.nonspeech_prob:
            extra.append((nonspeech_id, am(spec.ref_am * 0.5)))
        for word, c in extra:
            x = next_node
            next_node += 1
            arcs.append(Arc(i, x, word, c, 0.0))
            arcs.extend(Arc(x, i + 1, ww, cc, 0.0) for ww, cc in slot)
    return Lattice(0, [n], arcs)


def assign_ngram_costs(lattice: Lattice, ngram: NGramLM, transparent) -> Lattice:
    """Expand to the model's order and put its costs on every word arc."""
    lat, hist = expand_ngram(lattice, ngram.order, transparent=transparent, return_histories=True)
    n = ngram.order - 1
    costs = []
    for a in lat.arcs:
        if a.word in transparent:
            costs.append(0.0)
            continue
        h = hist[a.src]
        ctx = h if len(h) == n else (BOS_ID, *h)
        costs.append(-ngram.logprob(ctx, a.word))
    return lat.replace_lm(costs)


def gen_lattices(spec: SyntheticLatticeSpec, ngram: NGramLM,
                 confusions: Callable[[int], list] | None = None) -> tuple[list, list]:
    """One pruned first-pass lattice per reference sentence.

    Returns ``(lattices, references)``. Every lattice contains its reference
    path.
    """
    vocab = ngram.vocab_
    if spec.first_pass_order is not None and spec.first_pass_order != ngram.order:
        raise ValueError("first_pass_order does not match the N-gram model")
    confuse = confusions or random_confusions(vocab)
    transparent = frozenset({EPS_ID}) | vocab.nonspeech_ids
    nonspeech_id = min(vocab.nonspeech_ids) if vocab.nonspeech_ids else None
    rng = np.random.default_rng(spec.seed)
    lats, refs = [], []
    for idx, ref in enumerate(spec.references):
        ref = list(ref)
        if not ref:
            raise ValueError(f"reference {idx} is empty")
        if spec.n_confusions == 0 and spec.skip_prob == 0 and spec.insert_prob == 0:
            base = _sausage(ref, spec, lambda w: [], rng, None)
        else:
            base = _sausage(ref, spec, confuse, rng, nonspeech_id)
        lat = assign_ngram_costs(base, ngram, transparent)
        ref_path = find_word_path(lat, ref, transparent)
        lat = prune_density(lat, spec.density, ref_len=len(ref), protect=ref_path or ())
        lat = Lattice(lat.start, lat.finals, lat.arcs, id=f"seg{idx:04d}").validate()
        lats.append(lat)
        refs.append(tuple(ref))
    return lats, refs


# -- experiments -------------------------------------------------------------------------


@dataclass
class EvalResult:
    """Outcome of one system on one lattice set."""

    name: str
    first_pass_order: int | None
    hypotheses: list
    sub: int
    ins: int
    dels: int
    ref_words: int
    total_cost: float
    seconds: float
    lm_calls: int = 0

    @property
    def wer(self) -> float:
        return (self.sub + self.ins + self.dels) / self.ref_words

    @property
    def tokens_per_second(self) -> float:
        return self.ref_words / self.seconds if self.seconds > 0 else math.inf


def score_hypotheses(name, order, hyps, refs, costs, seconds, lm_calls=0) -> EvalResult:
    s = i = d = 0
    for h, r in zip(hyps, refs, strict=True):
        res = wer(r, h)
        s += res.sub
        i += res.ins
        d += res.dels
    return EvalResult(name, order, list(hyps), s, i, d, sum(len(r) for r in refs),
                      math.fsum(costs), seconds, lm_calls)


def first_pass(lattices, refs, transparent, order=None) -> EvalResult:
    t = time.perf_counter()
    res = [best_path(lat, skip=transparent) for lat in lattices]
    return score_hypotheses("first pass", order, [r.words for r in res], refs,
                            [r.cost for r in res], time.perf_counter() - t)


def evaluate(name, lattices, refs, lm, config: RescoreConfig, order=None) -> EvalResult:
    policy = ScoringPolicy.for_model(lm, config.nonspeech_cost)
    t = time.perf_counter()
    out = [rescore(lat, lm, config, policy) for lat in lattices]
    dt = time.perf_counter() - t
    return score_hypotheses(name, order, [r.words for r in out], refs, [r.cost for r in out],
                            dt, sum(r.stats.get("lm_calls", 0) for r in out))


@dataclass
class ExperimentConfig:
    """Sweep definition. ``lattice_sets`` maps first-pass order -> (lattices, references)."""

    lattice_sets: dict
    ks: tuple = (1, 10, 50)
    expand_orders: tuple = (2, 3, 4)
    weightings: tuple = ("uniform", "max_prob", "sum_prob")
    kbest_size: int = 100
    arc_beam: bool = True
    lm_scale: float = 1.0
    wip: float = 0.0
    nonspeech_cost: str = "zero"

    def systems(self) -> list[tuple[str, RescoreConfig]]:
        common = dict(lm_scale=self.lm_scale, wip=self.wip, nonspeech_cost=self.nonspeech_cost)
        rows = [(f"kbest K={self.kbest_size}",
                 RescoreConfig("kbest", kbest_size=self.kbest_size, **common))]
        rows += [(f"push_forward k={k}", RescoreConfig("push_forward", k=k, **common))
                 for k in self.ks]
        rows += [(f"expand N={n} push_forward k=1",
                  RescoreConfig("push_forward", k=1, expand_order=n, **common))
                 for n in self.expand_orders]
        rows += [(f"state_pool {w}", RescoreConfig("state_pool", pool_weighting=w, **common))
                 for w in self.weightings]
        if self.arc_beam:
            rows.append(("arc_beam", RescoreConfig("arc_beam", **common)))
        return rows


@dataclass
class ExperimentReport:
    results: list = field(default_factory=list)

    def get(self, name: str, order: int | None = None) -> EvalResult:
        for r in self.results:
            if r.name == name and (order is None or r.first_pass_order == order):
                return r
        raise KeyError(name)

    def to_tsv(self) -> str:
        head = "first_pass_order\tsystem\twer\tsub\tins\tdel\tref_words\ttotal_cost\tseconds\tlm_calls\ttokens_per_sec"
        lines = [head]
        for r in self.results:
            lines.append(f"{r.first_pass_order}\t{r.name}\t{r.wer:.6f}\t{r.sub}\t{r.ins}\t{r.dels}\t"
                         f"{r.ref_words}\t{r.total_cost:.6f}\t{r.seconds:.3f}\t{r.lm_calls}\t"
                         f"{r.tokens_per_second:.1f}")
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        orders = sorted({r.first_pass_order for r in self.results}, key=lambda o: (o is None, o))
        names = list(dict.fromkeys(r.name for r in self.results))
        cols = [f"{o}-gram" for o in orders]
        width = max(len(n) for n in names) + 2
        lines = ["WER (%) by first-pass LM order",
                 "system".ljust(width) + "".join(c.rjust(10) for c in cols)]
        for n in names:
            cells = []
            for o in orders:
                try:
                    cells.append(f"{100 * self.get(n, o).wer:10.2f}")
                except KeyError:
                    cells.append(" " * 10)
            lines.append(n.ljust(width) + "".join(cells))
        return "\n".join(lines)


def run_experiment(config: ExperimentConfig, lm: LanguageModel) -> ExperimentReport:
    """First pass plus every system of ``config`` on every lattice set."""
    if not config.lattice_sets:
        raise ValueError("no lattice sets given")
    if lm is None:
        raise ValueError("no rescoring model given")
    transparent = frozenset({EPS_ID}) | lm.vocab_.nonspeech_ids
    report = ExperimentReport()
    for order in sorted(config.lattice_sets):
        lats, refs = config.lattice_sets[order]
        if not lats:
            raise ValueError(f"lattice set for order {order} is empty")
        report.results.append(first_pass(lats, refs, transparent, order))
        for name, rc in config.systems():
            report.results.append(evaluate(name, lats, refs, lm, rc, order))
    return report


# -- perplexity ------------------------------------------------------------------------


class PplRow(NamedTuple):
    name: str
    perplexity: float
    parameters: int


def parameter_count(model) -> int:
    if hasattr(model, "num_ngrams"):
        return int(sum(model.num_ngrams()))
    if hasattr(model, "num_parameters"):
        return int(model.num_parameters())
    return 0


def ppl_report(models: dict, heldout) -> list[PplRow]:
    """Perplexity of each model on the same held-out text.

    All models must share one vocabulary.
    """
    if not models:
        raise ValueError("no models given")
    vocabs = [m.vocab_ for m in models.values()]
    if any(v != vocabs[0] for v in vocabs[1:]):
        raise ValueError("models do not share a vocabulary")
    vocab = vocabs[0]
    sents = [vocab.encode(s) if s and isinstance(s[0], str) else list(s) for s in heldout]
    return [PplRow(name, m.perplexity(sents), parameter_count(m)) for name, m in models.items()]


def format_ppl(rows: Sequence[PplRow]) -> str:
    width = max(len(r.name) for r in rows) + 2
    lines = ["model".ljust(width) + "parameters".rjust(14) + "perplexity".rjust(12)]
    lines += [r.name.ljust(width) + f"{r.parameters:14d}{r.perplexity:12.3f}" for r in rows]
    return "\n".join(lines)
