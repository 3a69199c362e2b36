"""Shortest paths, K-best, forward-backward weights, pruning and N-gram expansion."""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .lattice import Arc, Lattice, LatticeError, arc_cost, topo_sort, trim
from .vocab import EPS_ID

_EPS_ONLY = frozenset({EPS_ID})


class PathResult(NamedTuple):
    words: tuple
    cost: float


def best_path_arcs(lattice: Lattice, scale: float = 1.0, wip: float = 0.0):
    """Viterbi over the DAG. Returns ``(arc indices, cost)``.

    Ties go to the incoming arc with the lowest ``(source node, arc index)``.
    """
    order = topo_sort(lattice)
    dist = {lattice.start: 0.0}
    back = {}
    arcs = lattice.arcs
    for q in order:
        if q == lattice.start:
            continue
        best, best_arc = math.inf, None
        for i in sorted(lattice.in_arcs[q], key=lambda j: (arcs[j].src, j)):
            d = dist.get(arcs[i].src)
            if d is None:
                continue
            c = d + arc_cost(arcs[i], scale, wip)
            if c < best:
                best, best_arc = c, i
        if best_arc is not None:
            dist[q] = best
            back[q] = best_arc
    reachable = sorted(f for f in lattice.finals if f in dist)
    if not reachable:
        raise LatticeError("no final node reachable")
    end = min(reachable, key=lambda f: dist[f])
    path = []
    q = end
    while q != lattice.start:
        i = back[q]
        path.append(i)
        q = arcs[i].src
    return tuple(reversed(path)), dist[end]


def best_path(lattice: Lattice, scale: float = 1.0, wip: float = 0.0,
              skip=_EPS_ONLY) -> PathResult:
    """Lowest ``sum(am + scale*lm) + wip*words`` path as (words, cost)."""
    path, cost = best_path_arcs(lattice, scale, wip)
    words = tuple(lattice.arcs[i].word for i in path if lattice.arcs[i].word not in skip)
    return PathResult(words, cost)


def backward_costs(lattice: Lattice, scale: float = 1.0, wip: float = 0.0) -> dict:
    """Min cost from each node to any final node (inf when none)."""
    beta = {}
    for q in reversed(topo_sort(lattice)):
        b = 0.0 if q in lattice.finals else math.inf
        for i in lattice.out_arcs[q]:
            a = lattice.arcs[i]
            b = min(b, arc_cost(a, scale, wip) + beta[a.dst])
        beta[q] = b
    return beta


def forward_costs(lattice: Lattice, scale: float = 1.0, wip: float = 0.0) -> dict:
    alpha = {}
    for q in topo_sort(lattice):
        if q == lattice.start:
            alpha[q] = 0.0
            continue
        a_min = math.inf
        for i in lattice.in_arcs[q]:
            a = lattice.arcs[i]
            a_min = min(a_min, alpha[a.src] + arc_cost(a, scale, wip))
        alpha[q] = a_min
    return alpha


def kbest_arc_paths(lattice: Lattice, K: int, scale: float = 1.0, wip: float = 0.0,
                    skip=_EPS_ONLY):
    """Up to ``K`` cheapest paths with distinct word sequences.

    Best-first search with the exact backward cost as heuristic, so complete
    paths pop in cost order. A partial path reaching a node with a word
    sequence already seen there is dominated and dropped.

    Returns a list of ``(words, cost, arc indices)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    beta = backward_costs(lattice, scale, wip)
    arcs = lattice.arcs
    counter = 0
    heap = [(beta[lattice.start], counter, lattice.start, 0.0, (), ())]
    done_partial = set()
    emitted = set()
    results = []
    FINAL = None
    while heap and len(results) < K:
        f, _, q, g, words, path = heapq.heappop(heap)
        if q is FINAL:
            if words not in emitted:
                emitted.add(words)
                results.append((words, g, path))
            continue
        key = (q, words)
        if key in done_partial:
            continue
        done_partial.add(key)
        if q in lattice.finals:
            counter += 1
            heapq.heappush(heap, (g, counter, FINAL, g, words, path))
        for i in lattice.out_arcs[q]:
            a = arcs[i]
            b = beta[a.dst]
            if b == math.inf:
                continue
            g2 = g + arc_cost(a, scale, wip)
            w2 = words if a.word in skip else words + (a.word,)
            counter += 1
            heapq.heappush(heap, (g2 + b, counter, a.dst, g2, w2, path + (i,)))
    return results


def kbest_paths(lattice: Lattice, K: int, scale: float = 1.0, wip: float = 0.0,
                skip=_EPS_ONLY) -> list[PathResult]:
    """K-best unique word sequences sorted by ascending cost."""
    return [PathResult(w, c) for w, c, _ in kbest_arc_paths(lattice, K, scale, wip, skip)]


@dataclass(frozen=True)
class NodeWeights:
    """Per-node path weights in the log domain.

    ``log_max[q]`` is the log probability of the best start-to-q path and
    ``log_sum[q]`` the log of the total probability of all such paths.
    """

    log_max: dict
    log_sum: dict

    def max_weight(self, q) -> float:
        return math.exp(self.log_max[q])

    def sum_weight(self, q) -> float:
        return math.exp(self.log_sum[q])


def forward_weights(lattice: Lattice, scale: float = 1.0) -> NodeWeights:
    log_max, log_sum = {}, {}
    for q in topo_sort(lattice):
        if q == lattice.start:
            log_max[q] = log_sum[q] = 0.0
            continue
        terms_max, terms_sum = [], []
        for i in lattice.in_arcs[q]:
            a = lattice.arcs[i]
            c = a.am + scale * a.lm
            terms_max.append(log_max[a.src] - c)
            terms_sum.append(log_sum[a.src] - c)
        if terms_max:
            log_max[q] = max(terms_max)
            log_sum[q] = float(logsumexp(terms_sum))
        else:
            log_max[q] = log_sum[q] = -math.inf
    return NodeWeights(log_max, log_sum)


def prune_density(lattice: Lattice, density: float, ref_len: int | None = None,
                  scale: float = 1.0, wip: float = 0.0, protect=()) -> Lattice:
    """Forward-backward pruning to at most ``density * ref_len`` word arcs.

    Arcs are ranked by the cost of the best complete path through them.
    Epsilon arcs do not count toward the budget. The best path and the
    arcs in ``protect`` always survive, even beyond the budget.
    ``ref_len`` defaults to the best path's word count.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    alpha = forward_costs(lattice, scale, wip)
    beta = backward_costs(lattice, scale, wip)
    best_arcs, _ = best_path_arcs(lattice, scale, wip)
    if ref_len is None:
        ref_len = sum(1 for i in best_arcs if lattice.arcs[i].word != EPS_ID)
    budget = int(math.floor(density * max(ref_len, 1)))
    scores = np.array([alpha[a.src] + arc_cost(a, scale, wip) + beta[a.dst]
                       for a in lattice.arcs])
    order = np.lexsort((np.arange(len(scores)), scores))
    keep = set(best_arcs) | set(protect)
    n_words = sum(1 for i in keep if lattice.arcs[i].word != EPS_ID)
    threshold = -math.inf
    for i in order:
        i = int(i)
        if i in keep:
            threshold = max(threshold, scores[i])
            continue
        if lattice.arcs[i].word == EPS_ID:
            continue
        if n_words >= budget:
            break
        keep.add(i)
        n_words += 1
        threshold = scores[i]
    for i, a in enumerate(lattice.arcs):
        if a.word == EPS_ID and scores[i] <= threshold:
            keep.add(i)
    if len(keep) == len(lattice.arcs):
        return lattice
    return trim(lattice, keep)


def expand_ngram(lattice: Lattice, order: int, transparent=_EPS_ONLY,
                 return_histories: bool = False):
    """Split nodes so every path into a node ends in the same ``order-1`` words.

    Words in ``transparent`` (epsilon, non-speech) do not enter the history.
    The weighted path set is unchanged. Node ids of the result are assigned
    in original topological order, then by history.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    n = order - 1
    topo = topo_sort(lattice)
    states = {q: set() for q in lattice.nodes}
    states[lattice.start].add(())
    trans = []
    for q in topo:
        for h in sorted(states[q]):
            for i in lattice.out_arcs[q]:
                a = lattice.arcs[i]
                if a.word in transparent or n == 0:
                    h2 = h
                else:
                    h2 = (h + (a.word,))[-n:]
                states[a.dst].add(h2)
                trans.append(((q, h), i, (a.dst, h2)))
    ids = {}
    for q in topo:
        for h in sorted(states[q]):
            ids[(q, h)] = len(ids)
    arcs = []
    for s, i, d in trans:
        a = lattice.arcs[i]
        arcs.append(Arc(ids[s], ids[d], a.word, a.am, a.lm))
    finals = [ids[(f, h)] for f in lattice.finals for h in states[f]]
    out = Lattice(ids[(lattice.start, ())], finals, arcs, id=lattice.id)
    if return_histories:
        hist = {v: k[1] for k, v in ids.items()}
        return out, hist
    return out
