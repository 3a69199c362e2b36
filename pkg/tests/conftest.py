import math
import random

import numpy as np
import pytest

from latrescore.lattice import Arc, Lattice
from latrescore.lm.lstm import LstmLM
from latrescore.vocab import Vocabulary

WORDS = [f"w{i}" for i in range(8)]

# filled by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_vocab():
    return Vocabulary(WORDS, n_unk=3)


@pytest.fixture(scope="session")
def tiny_lstm(small_vocab):
    """Random, untrained two-layer LSTM over ``small_vocab``."""
    m = LstmLM(small_vocab, embed_dim=5, hidden_dim=7, proj_dim=4, num_layers=2,
               init_scale=0.8, alpha=0.01)
    return m.initialize(seed=3)


def random_lattice(rng: random.Random, vocab: Vocabulary, n_nodes: int = 8,
                   max_out: int = 3, p_eps: float = 0.0, p_nonspeech: float = 0.0,
                   max_paths: int | None = None) -> Lattice:
    """Random DAG over nodes 0..n-1 (0 start, n-1 final).

    Every node lies on a start-final path: each node gets an arc from an
    earlier node and an arc to a later node.
    """
    first_word = 4 + len(vocab.nonspeech)
    words = list(range(first_word, len(vocab)))
    ns = sorted(vocab.nonspeech_ids)

    def word():
        u = rng.random()
        if u < p_eps:
            return 0
        if u < p_eps + p_nonspeech and ns:
            return rng.choice(ns)
        return rng.choice(words)

    def arc(s, d):
        return Arc(s, d, word(), round(rng.uniform(0, 3), 6), round(rng.uniform(0, 3), 6))

    while True:
        arcs = []
        for d in range(1, n_nodes):
            arcs.append(arc(rng.randrange(0, d), d))
        for s in range(0, n_nodes - 1):
            arcs.append(arc(s, rng.randrange(s + 1, n_nodes)))
            for _ in range(rng.randrange(0, max_out)):
                arcs.append(arc(s, rng.randrange(s + 1, n_nodes)))
        lat = Lattice(0, [n_nodes - 1], arcs).validate()
        if max_paths is None or count_paths(lat) <= max_paths:
            return lat


def count_paths(lat: Lattice) -> int:
    from latrescore.lattice import topo_sort

    n = {lat.start: 1}
    for q in topo_sort(lat):
        for i in lat.out_arcs[q]:
            a = lat.arcs[i]
            n[a.dst] = n.get(a.dst, 0) + n.get(q, 0)
    return sum(n.get(f, 0) for f in lat.finals)


def random_tree(rng: random.Random, vocab: Vocabulary, n_nodes: int = 10,
                p_nonspeech: float = 0.0) -> Lattice:
    """Every node except the start has exactly one incoming arc."""
    first_word = 4 + len(vocab.nonspeech)
    words = list(range(first_word, len(vocab)))
    ns = sorted(vocab.nonspeech_ids)
    arcs = []
    for d in range(1, n_nodes):
        w = rng.choice(ns) if ns and rng.random() < p_nonspeech else rng.choice(words)
        arcs.append(Arc(rng.randrange(0, d), d, w, round(rng.uniform(0, 3), 6),
                        round(rng.uniform(0, 3), 6)))
    has_out = {a.src for a in arcs}
    leaves = [q for q in range(n_nodes) if q not in has_out]
    return Lattice(0, leaves, arcs).validate()


def brute_force_best(lat, lm, scale=1.0, skip=None):
    """Enumerate every path and score its word sequence from scratch."""
    from latrescore.lattice import enumerate_paths

    skip = skip if skip is not None else ({0} | set(lm.vocab_.nonspeech_ids))
    best = None
    for path in enumerate_paths(lat):
        words = [lat.arcs[i].word for i in path if lat.arcs[i].word not in skip]
        lp = lm.sentence_logprob(words) if words else 0.0
        am = math.fsum(lat.arcs[i].am for i in path)
        cost = am - scale * lp
        if best is None or cost < best[0]:
            best = (cost, tuple(words), path)
    return best


@pytest.fixture
def np_rng():
    return np.random.default_rng(0)
