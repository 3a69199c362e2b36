"""Weighted word lattices: representation, validation and text I/O.

Costs are negative natural-log probabilities. A lattice is a DAG with a
single start node and a set of final nodes; final nodes carry no weight.
"""

from __future__ import annotations

import heapq
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, NamedTuple

from .vocab import EPS_ID, UNK_ID, UnknownWordError, Vocabulary


class LatticeError(ValueError):
    """Raised for structurally invalid or unparsable lattices."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class Arc(NamedTuple):
    src: int
    dst: int
    word: int
    am: float
    lm: float


@dataclass(frozen=True)
class Lattice:
    """Immutable word lattice.

    Arc order is significant: arc indices are used to break ties.
    """

    start: int
    finals: frozenset
    arcs: tuple
    id: str = "lat"
    extra_nodes: frozenset = field(default=frozenset(), repr=False)

    def __post_init__(self):
        object.__setattr__(self, "finals", frozenset(self.finals))
        object.__setattr__(self, "arcs", tuple(Arc(*a) for a in self.arcs))
        for a in self.arcs:
            if not (math.isfinite(a.am) and math.isfinite(a.lm)):
                raise LatticeError(f"non-finite cost on arc {a}")

    @cached_property
    def nodes(self) -> frozenset:
        ns = {self.start, *self.finals, *self.extra_nodes}
        for a in self.arcs:
            ns.add(a.src)
            ns.add(a.dst)
        return frozenset(ns)

    @cached_property
    def out_arcs(self) -> dict:
        """Map node -> list of arc indices leaving it, in index order."""
        out = {q: [] for q in self.nodes}
        for i, a in enumerate(self.arcs):
            out[a.src].append(i)
        return out

    @cached_property
    def in_arcs(self) -> dict:
        inc = {q: [] for q in self.nodes}
        for i, a in enumerate(self.arcs):
            inc[a.dst].append(i)
        return inc

    def preds(self, q: int) -> list[int]:
        """Distinct predecessor nodes of ``q`` in first-arc order."""
        seen = {}
        for i in self.in_arcs[q]:
            seen.setdefault(self.arcs[i].src, None)
        return list(seen)

    @property
    def num_arcs(self) -> int:
        return len(self.arcs)

    def replace_lm(self, lm_costs) -> "Lattice":
        """Copy with per-arc lm costs replaced (same structure)."""
        arcs = tuple(a._replace(lm=float(c)) for a, c in zip(self.arcs, lm_costs, strict=True))
        return Lattice(self.start, self.finals, arcs, id=self.id)

    def validate(self) -> "Lattice":
        """Check acyclicity, start and reachability; return self."""
        if self.in_arcs[self.start]:
            raise LatticeError("start node has incoming arcs")
        if not self.finals:
            raise LatticeError("lattice has no final nodes")
        topo_sort(self)
        fwd = _reach(self.start, self.out_arcs, self.arcs, "dst")
        bwd = set()
        for f in self.finals:
            bwd |= _reach(f, self.in_arcs, self.arcs, "src")
        dead = self.nodes - (fwd & bwd)
        if dead:
            raise LatticeError(f"nodes not on any start-final path: {sorted(dead)[:10]}")
        return self


def _reach(q0, adj, arcs, attr) -> set:
    seen = {q0}
    stack = [q0]
    while stack:
        q = stack.pop()
        for i in adj[q]:
            n = getattr(arcs[i], attr)
            if n not in seen:
                seen.add(n)
                stack.append(n)
    return seen


def topo_sort(lattice: Lattice) -> list[int]:
    """Topological node order; ties resolved by lowest node id.

    Raises
    ------
    LatticeError
        If the lattice contains a cycle.
    """
    indeg = {q: 0 for q in lattice.nodes}
    for a in lattice.arcs:
        indeg[a.dst] += 1
    ready = [q for q, d in indeg.items() if d == 0]
    # start must come first even when other sources exist
    if lattice.start in ready:
        ready.remove(lattice.start)
        order_prefix = [lattice.start]
        for i in lattice.out_arcs[lattice.start]:
            d = lattice.arcs[i].dst
            indeg[d] -= 1
            if indeg[d] == 0:
                ready.append(d)
    else:
        order_prefix = []
    heapq.heapify(ready)
    order = order_prefix
    while ready:
        q = heapq.heappop(ready)
        order.append(q)
        for i in lattice.out_arcs[q]:
            d = lattice.arcs[i].dst
            indeg[d] -= 1
            if indeg[d] == 0:
                heapq.heappush(ready, d)
    if len(order) != len(indeg):
        raise LatticeError("lattice contains a cycle")
    return order


def arc_cost(arc: Arc, scale: float = 1.0, wip: float = 0.0) -> float:
    return arc.am + scale * arc.lm + (wip if arc.word != EPS_ID else 0.0)


def enumerate_paths(lattice: Lattice) -> Iterator[tuple[int, ...]]:
    """Yield every start-to-final path as a tuple of arc indices.

    Exponential; meant for oracles on small lattices.
    """
    out = lattice.out_arcs
    finals = lattice.finals

    def walk(q, prefix):
        if q in finals:
            yield prefix
        for i in out[q]:
            yield from walk(lattice.arcs[i].dst, prefix + (i,))

    yield from walk(lattice.start, ())


def path_words(lattice: Lattice, path: Iterable[int], skip=frozenset({EPS_ID})) -> tuple[int, ...]:
    return tuple(lattice.arcs[i].word for i in path if lattice.arcs[i].word not in skip)


def path_cost(lattice: Lattice, path: Iterable[int], scale: float = 1.0, wip: float = 0.0) -> float:
    return math.fsum(arc_cost(lattice.arcs[i], scale, wip) for i in path)


def trim(lattice: Lattice, keep=None) -> Lattice:
    """Keep the given arc indices (all by default) that lie on a start-final path.

    Nodes are renumbered densely in topological order.
    """
    idx = range(len(lattice.arcs)) if keep is None else sorted(keep)
    arcs = [lattice.arcs[i] for i in idx]
    sub = Lattice(lattice.start, lattice.finals, arcs, id=lattice.id)
    fwd = _reach(sub.start, sub.out_arcs, sub.arcs, "dst")
    bwd = set()
    for f in sub.finals:
        if f in fwd:
            bwd |= _reach(f, sub.in_arcs, sub.arcs, "src")
    live = fwd & bwd
    if sub.start not in live:
        raise LatticeError("no final node reachable after trimming")
    arcs = [a for a in sub.arcs if a.src in live and a.dst in live]
    sub = Lattice(sub.start, [f for f in sub.finals if f in live], arcs, id=lattice.id)
    return renumber(sub)


def renumber(lattice: Lattice) -> Lattice:
    order = topo_sort(lattice)
    m = {q: i for i, q in enumerate(order)}
    arcs = [Arc(m[a.src], m[a.dst], a.word, a.am, a.lm) for a in lattice.arcs]
    return Lattice(m[lattice.start], [m[f] for f in lattice.finals], arcs, id=lattice.id)


# -- text format -------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_lattice(lattice: Lattice, vocab: Vocabulary, fh=None) -> str | None:
    """Serialize one lattice. Returns the text when ``fh`` is None."""
    own = fh is None
    if own:
        fh = io.StringIO()
    fh.write(f"lattice {lattice.id} start={lattice.start}\n")
    for a in lattice.arcs:
        fh.write(f"{a.src} {a.dst} {vocab.word(a.word)} {_fmt(a.am)} {_fmt(a.lm)}\n")
    for f in sorted(lattice.finals):
        fh.write(f"final {f}\n")
    return fh.getvalue() if own else None


def write_lattices(lattices: Iterable[Lattice], vocab: Vocabulary, fh) -> None:
    for lat in lattices:
        write_lattice(lat, vocab, fh)


def read_lattices(text: str, vocab: Vocabulary, map_unk: bool = False) -> list[Lattice]:
    """Parse all lattices in ``text``.

    Unknown words are an error unless ``map_unk`` is set, in which case
    they become ``<unk>``.
    """
    lattices = []
    cur = None

    def close(line_no):
        if cur is None:
            return
        lid, start, arcs, finals, hdr_line = cur
        if not arcs:
            raise LatticeError(f"lattice {lid}: no arcs", hdr_line)
        lat = Lattice(start, finals, arcs, id=lid)
        try:
            lat.validate()
        except LatticeError as e:
            raise LatticeError(f"lattice {lid}: {e}", hdr_line) from None
        lattices.append(lat)

    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "lattice":
            close(n)
            if len(parts) != 3 or not parts[2].startswith("start="):
                raise LatticeError("malformed header", n)
            try:
                start = int(parts[2][6:])
            except ValueError:
                raise LatticeError("malformed start node", n) from None
            cur = (parts[1], start, [], [], n)
        elif cur is None:
            raise LatticeError("content before lattice header", n)
        elif parts[0] == "final":
            if len(parts) != 2:
                raise LatticeError("malformed final line", n)
            try:
                cur[3].append(int(parts[1]))
            except ValueError:
                raise LatticeError("malformed final node", n) from None
        else:
            if len(parts) != 5:
                raise LatticeError("arc line needs 5 fields", n)
            try:
                src, dst = int(parts[0]), int(parts[1])
                am, lm = float(parts[3]), float(parts[4])
            except ValueError:
                raise LatticeError("malformed arc fields", n) from None
            if not (math.isfinite(am) and math.isfinite(lm)):
                raise LatticeError("non-finite cost", n)
            try:
                w = vocab.id(parts[2])
            except UnknownWordError:
                if not map_unk:
                    raise LatticeError(f"unknown word {parts[2]!r}", n) from None
                w = UNK_ID
            cur[2].append(Arc(src, dst, w, am, lm))
    close(None)
    if not lattices:
        raise LatticeError("no lattice found")
    return lattices


def read_lattice(text: str, vocab: Vocabulary, map_unk: bool = False) -> Lattice:
    lats = read_lattices(text, vocab, map_unk)
    if len(lats) != 1:
        raise LatticeError(f"expected one lattice, found {len(lats)}")
    return lats[0]
