"""Lattice rescoring with a stateful language model.

All algorithms walk the lattice in topological order and carry LM states
that have consumed every word up to the current node. Scoring an arc asks
the state for the arc word's probability and advances it by that word.
Transparent arcs (epsilon and non-speech) pass the state through unchanged.

Every algorithm goes through :func:`score_arc_word` and :func:`_extend`,
so on lattices where each node has a single incoming arc they produce
bit-identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .graph import expand_ngram, forward_weights, kbest_arc_paths
from .lattice import Arc, Lattice, topo_sort
from .lm.base import LanguageModel
from .vocab import EPS_ID

ALGORITHMS = ("push_forward", "state_pool", "arc_beam", "kbest")
POOL_WEIGHTINGS = ("uniform", "max_prob", "sum_prob")
NONSPEECH_COSTS = ("zero", "keep")


@dataclass(frozen=True)
class ScoringPolicy:
    """How transparent arcs are scored.

    ``transparent`` ids copy the LM state across the arc. Their lm cost is
    0 under ``nonspeech_cost="zero"`` and the first-pass cost under
    ``"keep"``.
    """

    transparent: frozenset = frozenset({EPS_ID})
    nonspeech_cost: str = "zero"

    def __post_init__(self):
        if self.nonspeech_cost not in NONSPEECH_COSTS:
            raise ValueError(f"nonspeech_cost must be one of {NONSPEECH_COSTS}")
        object.__setattr__(self, "transparent", frozenset(self.transparent) | {EPS_ID})

    @classmethod
    def for_model(cls, lm: LanguageModel, nonspeech_cost: str = "zero") -> "ScoringPolicy":
        return cls(frozenset(lm.vocab_.nonspeech_ids), nonspeech_cost)


@dataclass(frozen=True)
class RescoreConfig:
    algorithm: str = "push_forward"
    k: int = 1
    expand_order: int = 0
    pool_weighting: str = "max_prob"
    kbest_size: int = 100
    lm_scale: float = 1.0
    wip: float = 0.0
    nonspeech_cost: str = "zero"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.pool_weighting not in POOL_WEIGHTINGS:
            raise ValueError(f"pool_weighting must be one of {POOL_WEIGHTINGS}")
        if self.nonspeech_cost not in NONSPEECH_COSTS:
            raise ValueError(f"nonspeech_cost must be one of {NONSPEECH_COSTS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.kbest_size < 1:
            raise ValueError("kbest_size must be >= 1")
        if self.expand_order < 0:
            raise ValueError("expand_order must be >= 0")


@dataclass(eq=False, slots=True)
class Hypothesis:
    """Beam element: LM state after the path so far, its total cost and last-arc lm cost."""

    state: object
    word: int
    cost: float
    parent: "Hypothesis | None" = None
    arc: int | None = None
    node: int | None = None
    seq: int = 0
    step_lm: float = 0.0

    def chain(self) -> list["Hypothesis"]:
        """Hypotheses from the first extension to this one."""
        out = []
        h = self
        while h.parent is not None:
            out.append(h)
            h = h.parent
        return out[::-1]

    def arcs(self) -> list[int]:
        return [h.arc for h in self.chain()]


@dataclass
class RescoreResult:
    """Best hypothesis of one rescored lattice.

    ``words`` excludes transparent tokens. ``cost`` is ``am + scale*lm``
    summed over ``path`` (arc indices into ``lattice``), plus word
    insertion penalties. ``lattice`` carries the new lm costs; for
    K-best rescoring it is ``None``.
    """

    words: tuple
    cost: float
    am: float
    lm: float
    path: tuple
    lattice: Lattice | None
    lm_costs: np.ndarray | None = None
    stats: dict = field(default_factory=dict)


def score_arc_word(lm: LanguageModel, state, arc: Arc, policy: ScoringPolicy):
    """LM cost of ``arc`` from ``state`` and the state after it.

    Returns ``(lm_cost, next_state)``. Transparent arcs keep the state
    object itself. ``<unk>`` is scored with the OOV spreading rule.
    """
    if arc.word in policy.transparent:
        return (arc.lm if policy.nonspeech_cost == "keep" else 0.0), state
    nxt, lp = lm.word_logprob(state, arc.word)
    return -lp, nxt


def _extend(cost: float, arc: Arc, lm_cost: float, scale: float, wip: float) -> float:
    step = arc.am + scale * lm_cost
    if arc.word != EPS_ID:
        step += wip
    return cost + step


def _words(lattice: Lattice, path, policy: ScoringPolicy) -> tuple:
    return tuple(lattice.arcs[i].word for i in path if lattice.arcs[i].word not in policy.transparent)


def _path_totals(lattice: Lattice, path, lm_costs) -> tuple[float, float]:
    am = math.fsum(lattice.arcs[i].am for i in path)
    lmc = math.fsum(lm_costs[i] for i in path)
    return am, lmc


# -- push-forward ---------------------------------------------------------------


def push_forward(lattice: Lattice, lm: LanguageModel, k: int = 1,
                 policy: ScoringPolicy | None = None, scale: float = 1.0,
                 wip: float = 0.0) -> RescoreResult:
    """Beam search keeping the ``k`` cheapest hypotheses per node.

    Hypotheses at a node with the same LM state fingerprint and previous
    word are recombined (the cheaper survives). The rescored lattice has
    one node per surviving hypothesis; an extension that did not survive
    at its destination is redirected to the destination's best hypothesis.
    With ``k=1`` the output has the input's nodes and arcs with new lm
    costs.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    policy = policy or ScoringPolicy.for_model(lm)
    order = topo_sort(lattice)
    arcs = lattice.arcs
    pending = {q: [] for q in order}
    root = Hypothesis(lm.lm_start(), EPS_ID, 0.0, node=lattice.start)
    pending[lattice.start].append(root)
    survivors = {}
    redirect = {}
    # (source hypothesis, arc index, lm cost, extension)
    emitted = []
    seq = 0
    n_scored = 0
    for q in order:
        merged = {}
        losers = []
        for h in pending.pop(q):
            key = (lm.state_key(h.state), h.word)
            cur = merged.get(key)
            if cur is None:
                merged[key] = h
            elif h.cost < cur.cost:
                merged[key] = h
                losers.append((cur, key))
            else:
                losers.append((h, key))
        for h, key in losers:
            redirect[id(h)] = merged[key]
        ranked = sorted(merged.values(), key=lambda h: (h.cost, h.seq))
        keep = ranked[:k]
        survivors[q] = keep
        for h in keep:
            for i in lattice.out_arcs[q]:
                a = arcs[i]
                lm_cost, nxt = score_arc_word(lm, h.state, a, policy)
                n_scored += 1
                seq += 1
                word = h.word if a.word in policy.transparent else a.word
                h2 = Hypothesis(nxt, word, _extend(h.cost, a, lm_cost, scale, wip), h, i,
                                a.dst, seq, lm_cost)
                pending[a.dst].append(h2)
                emitted.append((h, i, lm_cost, h2))

    finals = [h for f in sorted(lattice.finals) for h in survivors.get(f, [])]
    if not finals:
        raise ValueError("no hypothesis reached a final node")
    best = min(finals, key=lambda h: h.cost)
    chain = best.chain()
    path = tuple(h.arc for h in chain)
    am = math.fsum(arcs[i].am for i in path)
    lmc = math.fsum(h.step_lm for h in chain)
    out_lat = _backpointer_lattice(lattice, survivors, emitted, redirect)
    return RescoreResult(_words(lattice, path, policy), best.cost, am, lmc, path,
                         out_lat, stats={"lm_calls": n_scored})


def _backpointer_lattice(lattice, survivors, emitted, redirect) -> Lattice:
    node_id = {}
    nxt = max(lattice.nodes) + 1
    for q in sorted(survivors):
        for r, h in enumerate(survivors[q]):
            if r == 0:
                node_id[id(h)] = q
            else:
                node_id[id(h)] = nxt
                nxt += 1
    rank = {id(h): r for hs in survivors.values() for r, h in enumerate(hs)}
    rows = []
    for h, i, lm_cost, h2 in emitted:
        if id(h2) in node_id:
            dst = node_id[id(h2)]
        else:
            target = redirect.get(id(h2))
            if target is not None and id(target) in node_id:
                dst = node_id[id(target)]
            else:
                dst = lattice.arcs[i].dst
        a = lattice.arcs[i]
        rows.append(((i, rank[id(h)]), Arc(node_id[id(h)], dst, a.word, a.am, lm_cost)))
    rows.sort(key=lambda r: r[0])
    finals = [node_id[id(h)] for f in lattice.finals for h in survivors.get(f, [])]
    return Lattice(lattice.start, finals, [a for _, a in rows], id=lattice.id)


def expand_then_push(lattice: Lattice, lm: LanguageModel, order: int,
                     policy: ScoringPolicy | None = None, scale: float = 1.0,
                     wip: float = 0.0) -> RescoreResult:
    """Expand to unique ``order-1`` word histories, then push forward with k=1."""
    policy = policy or ScoringPolicy.for_model(lm)
    expanded = expand_ngram(lattice, order, transparent=policy.transparent)
    return push_forward(expanded, lm, 1, policy, scale, wip)


# -- state pooling ----------------------------------------------------------------


def _normalize_log(logw: Sequence[float]) -> list[float]:
    m = max(logw)
    if m == -math.inf:
        return [0.0] * len(logw)
    w = [math.exp(x - m) for x in logw]
    s = sum(w)
    return [x / s for x in w]


def pooling_weights(lattice: Lattice, weighting: str, scale: float = 1.0) -> dict:
    """Map arc index -> share of the destination's pooled state.

    A predecessor node's share is its forward weight normalized over the
    destination's predecessors (or ``1/|Pred|`` for ``"uniform"``). When
    several arcs join the same node pair, the pair's share is split among
    them by first-pass arc probability (evenly for ``"uniform"``).
    """
    if weighting not in POOL_WEIGHTINGS:
        raise ValueError(f"weighting must be one of {POOL_WEIGHTINGS}")
    if weighting != "uniform":
        fw = forward_weights(lattice, scale)
        node_logw = fw.log_max if weighting == "max_prob" else fw.log_sum
    out = {}
    for q in lattice.nodes:
        inc = lattice.in_arcs[q]
        if not inc:
            continue
        preds = lattice.preds(q)
        if weighting == "uniform":
            pred_share = [1.0 / len(preds)] * len(preds)
        else:
            pred_share = _normalize_log([node_logw[p] for p in preds])
        for p, share in zip(preds, pred_share):
            par = [i for i in inc if lattice.arcs[i].src == p]
            if weighting == "uniform":
                split = [1.0 / len(par)] * len(par)
            else:
                split = _normalize_log([-(lattice.arcs[i].am + scale * lattice.arcs[i].lm)
                                        for i in par])
            for i, s in zip(par, split):
                out[i] = share * s if len(par) > 1 else share
    return out


def pool_rescore(lattice: Lattice, lm: LanguageModel, weighting: str = "max_prob",
                 policy: ScoringPolicy | None = None, scale: float = 1.0,
                 wip: float = 0.0) -> RescoreResult:
    """One pooled LM state per node; the lattice structure is kept.

    Each arc advances its source node's state by the arc word; the state
    at a node is the weighted sum of the advanced states of its incoming
    arcs. Node costs follow the cheapest incoming arc.
    """
    policy = policy or ScoringPolicy.for_model(lm)
    weights = pooling_weights(lattice, weighting, scale)
    order = topo_sort(lattice)
    arcs = lattice.arcs
    state = {lattice.start: lm.lm_start()}
    cost = {lattice.start: 0.0}
    back = {}
    incoming = {q: ([], []) for q in order}
    lm_costs = np.zeros(len(arcs))
    n_scored = 0
    for q in order:
        if q != lattice.start:
            sts, ws = incoming.pop(q)
            pairs = [(s, w) for s, w in zip(sts, ws) if w > 0.0]
            if not pairs:
                continue  # unreachable under the weighting
            state[q] = lm.pool_states([s for s, _ in pairs], [w for _, w in pairs])
        h = state[q]
        for i in lattice.out_arcs[q]:
            a = arcs[i]
            lm_cost, nxt = score_arc_word(lm, h, a, policy)
            n_scored += 1
            lm_costs[i] = lm_cost
            c = _extend(cost[q], a, lm_cost, scale, wip)
            if c < cost.get(a.dst, math.inf):
                cost[a.dst] = c
                back[a.dst] = i
            incoming[a.dst][0].append(nxt)
            incoming[a.dst][1].append(weights[i])
    return _node_result(lattice, cost, back, lm_costs, policy, n_scored)


def _node_result(lattice, cost, back, lm_costs, policy, n_scored) -> RescoreResult:
    reach = [f for f in sorted(lattice.finals) if f in cost]
    if not reach:
        raise ValueError("no final node reachable")
    end = min(reach, key=lambda f: cost[f])
    path = []
    q = end
    while q != lattice.start:
        i = back[q]
        path.append(i)
        q = lattice.arcs[i].src
    path = tuple(reversed(path))
    am, lmc = _path_totals(lattice, path, lm_costs)
    return RescoreResult(_words(lattice, path, policy), cost[end], am, lmc, path,
                         lattice.replace_lm(lm_costs), lm_costs, {"lm_calls": n_scored})


# -- arc beam -----------------------------------------------------------------------


def arc_beam(lattice: Lattice, lm: LanguageModel, policy: ScoringPolicy | None = None,
             scale: float = 1.0, wip: float = 0.0) -> RescoreResult:
    """Each arc picks the incoming edge whose state gives it the lowest cost.

    Edges are keyed by incoming arc (``None`` is the dummy edge into the
    start node). Two arcs leaving one node may continue different
    histories.
    """
    policy = policy or ScoringPolicy.for_model(lm)
    order = topo_sort(lattice)
    arcs = lattice.arcs
    edge_state = {None: lm.lm_start()}
    edge_cost = {None: 0.0}
    chosen = {}
    lm_costs = np.zeros(len(arcs))
    n_scored = 0
    for q in order:
        if q == lattice.start:
            edges = [None]
        else:
            edges = sorted(lattice.in_arcs[q], key=lambda j: (arcs[j].src, j))
            edges = [e for e in edges if e in edge_cost]
        if not edges:
            continue
        for i in lattice.out_arcs[q]:
            a = arcs[i]
            best = None
            for e in edges:
                lm_cost, nxt = score_arc_word(lm, edge_state[e], a, policy)
                n_scored += 1
                c = _extend(edge_cost[e], a, lm_cost, scale, wip)
                if best is None or c < best[0]:
                    best = (c, e, lm_cost, nxt)
            c, e, lm_cost, nxt = best
            lm_costs[i] = lm_cost
            edge_state[i] = nxt
            edge_cost[i] = c
            chosen[i] = e
    best_arc, cost = None, math.inf
    if lattice.start in lattice.finals:
        cost = 0.0
    for f in sorted(lattice.finals):
        for i in sorted(lattice.in_arcs[f], key=lambda j: (arcs[j].src, j)):
            if i in edge_cost and edge_cost[i] < cost:
                best_arc, cost = i, edge_cost[i]
    if cost == math.inf:
        raise ValueError("no final node reachable")
    path = []
    e = best_arc
    while e is not None:
        path.append(e)
        e = chosen[e]
    path = tuple(reversed(path))
    am, lmc = _path_totals(lattice, path, lm_costs)
    return RescoreResult(_words(lattice, path, policy), cost, am, lmc, path,
                         lattice.replace_lm(lm_costs), lm_costs, {"lm_calls": n_scored})


# -- K-best -----------------------------------------------------------------------


def kbest_rescore(lattice: Lattice, lm: LanguageModel, K: int = 100,
                  policy: ScoringPolicy | None = None, scale: float = 1.0,
                  wip: float = 0.0) -> RescoreResult:
    """Rescore the ``K`` best unique word sequences of the first pass.

    Ties in the new cost keep the first-pass ranking.
    """
    policy = policy or ScoringPolicy.for_model(lm)
    nbest = kbest_arc_paths(lattice, K, scale, wip, skip=policy.transparent)
    best = None
    n_scored = 0
    for _, _, path in nbest:
        state = lm.lm_start()
        cost = 0.0
        lm_total = []
        for i in path:
            a = lattice.arcs[i]
            lm_cost, state = score_arc_word(lm, state, a, policy)
            n_scored += 1
            lm_total.append(lm_cost)
            cost = _extend(cost, a, lm_cost, scale, wip)
        if best is None or cost < best[0]:
            best = (cost, path, lm_total)
    cost, path, lm_total = best
    am = math.fsum(lattice.arcs[i].am for i in path)
    return RescoreResult(_words(lattice, path, policy), cost, am, math.fsum(lm_total),
                         tuple(path), None, stats={"lm_calls": n_scored, "list_size": len(nbest)})


# -- dispatch -----------------------------------------------------------------------


def rescore(lattice: Lattice, lm: LanguageModel, config: RescoreConfig | None = None,
            policy: ScoringPolicy | None = None) -> RescoreResult:
    config = config or RescoreConfig()
    policy = policy or ScoringPolicy.for_model(lm, config.nonspeech_cost)
    lat = lattice
    if config.expand_order > 0:
        lat = expand_ngram(lat, config.expand_order, transparent=policy.transparent)
    s, w = config.lm_scale, config.wip
    if config.algorithm == "push_forward":
        return push_forward(lat, lm, config.k, policy, s, w)
    if config.algorithm == "state_pool":
        return pool_rescore(lat, lm, config.pool_weighting, policy, s, w)
    if config.algorithm == "arc_beam":
        return arc_beam(lat, lm, policy, s, w)
    return kbest_rescore(lat, lm, config.kbest_size, policy, s, w)


class LatticeRescorer(BaseEstimator):
    """Estimator wrapper around :func:`rescore`.

    ``fit`` only validates the configuration; the language model must be
    trained already. ``predict`` returns best word-id sequences and
    ``transform`` the rescored lattices.

    Examples
    --------
    >>> rescorer = LatticeRescorer(lm, algorithm="push_forward", k=10).fit()  # doctest: +SKIP
    >>> rescorer.predict(lattices)  # doctest: +SKIP
    """

    def __init__(self, lm: LanguageModel | None = None, algorithm: str = "push_forward",
                 k: int = 1, expand_order: int = 0, pool_weighting: str = "max_prob",
                 kbest_size: int = 100, lm_scale: float = 1.0, wip: float = 0.0,
                 nonspeech_cost: str = "zero"):
        self.lm = lm
        self.algorithm = algorithm
        self.k = k
        self.expand_order = expand_order
        self.pool_weighting = pool_weighting
        self.kbest_size = kbest_size
        self.lm_scale = lm_scale
        self.wip = wip
        self.nonspeech_cost = nonspeech_cost

    def fit(self, X=None, y=None):
        if self.lm is None or not hasattr(self.lm, "vocab_"):
            raise ValueError("LatticeRescorer needs a trained language model")
        self.config_ = RescoreConfig(self.algorithm, self.k, self.expand_order,
                                     self.pool_weighting, self.kbest_size, self.lm_scale,
                                     self.wip, self.nonspeech_cost)
        self.policy_ = ScoringPolicy.for_model(self.lm, self.nonspeech_cost)
        return self

    def _check_fitted(self):
        if not hasattr(self, "config_"):
            self.fit()

    def rescore(self, lattices) -> list[RescoreResult]:
        self._check_fitted()
        if isinstance(lattices, Lattice):
            lattices = [lattices]
        return [rescore(lat, self.lm, self.config_, self.policy_) for lat in lattices]

    def predict(self, X) -> list[tuple]:
        return [r.words for r in self.rescore(X)]

    def transform(self, X) -> list[Lattice]:
        if self.algorithm == "kbest":
            raise ValueError("K-best rescoring does not produce a lattice")
        return [r.lattice for r in self.rescore(X)]
