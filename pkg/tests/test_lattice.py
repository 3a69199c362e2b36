import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latrescore.lattice import (Arc, Lattice, LatticeError, enumerate_paths, path_cost,
                                read_lattice, read_lattices, renumber, topo_sort, trim,
                                write_lattice, write_lattices)
from latrescore.vocab import (BOS_ID, EOS_ID, EPS_ID, UNK_ID, UnknownWordError,
                              Vocabulary)

from conftest import random_lattice

SAMPLE = """\
# two arcs
lattice utt1 start=0
0 1 w1 1.5 0.25
1 2 w2 0.5 2.0
final 2
"""


# -- vocabulary ---------------------------------------------------------------

def test_reserved_ids(small_vocab):
    assert small_vocab.id("<eps>") == EPS_ID
    assert small_vocab.id("<s>") == BOS_ID
    assert small_vocab.id("</s>") == EOS_ID
    assert small_vocab.id("<unk>") == UNK_ID
    assert small_vocab.nonspeech_ids == {4, 5}
    assert small_vocab.id("w0") == 6


def test_encode_maps_oov_to_unk(small_vocab):
    assert small_vocab.encode(["w1", "zzz"]) == [7, UNK_ID]
    with pytest.raises(UnknownWordError):
        small_vocab.encode(["zzz"], map_unk=False)


def test_build_counts_unk_types():
    v = Vocabulary.build([["a", "b", "a"], ["c", "d", "a", "b"]], max_size=2)
    assert v.words[-2:] == ["a", "b"]
    assert v.n_unk == 2


def test_build_without_oov_keeps_n_unk_one():
    assert Vocabulary.build([["a"]]).n_unk == 1


def test_vocab_json_round_trip(small_vocab):
    assert Vocabulary.from_json(small_vocab.to_json()) == small_vocab


def test_vocab_rejects_duplicates():
    with pytest.raises(ValueError):
        Vocabulary(["a", "a"])
    with pytest.raises(ValueError):
        Vocabulary(["a"], n_unk=0)


def test_transparent_ids(small_vocab):
    assert small_vocab.is_transparent(EPS_ID)
    assert small_vocab.is_transparent(small_vocab.id("<sil>"))
    assert not small_vocab.is_transparent(small_vocab.id("w0"))


# -- parsing ------------------------------------------------------------------

def test_read_sample(small_vocab):
    lat = read_lattice(SAMPLE, small_vocab)
    assert lat.id == "utt1"
    assert lat.num_arcs == 2
    assert lat.arcs[0] == Arc(0, 1, small_vocab.id("w1"), 1.5, 0.25)
    assert lat.finals == {2}


def test_final_only_lattice_has_no_arcs(small_vocab):
    with pytest.raises(LatticeError, match="no arcs"):
        read_lattice("lattice x start=0\nfinal 0\n", small_vocab)


@pytest.mark.parametrize("text, line", [
    ("lattice x start=0\n0 1 w1 1.0\nfinal 1\n", 2),
    ("lattice x start=0\n0 1 nope 1.0 2.0\nfinal 1\n", 2),
    ("lattice x start=0\n0 1 w1 1.0 abc\nfinal 1\n", 2),
    ("0 1 w1 1.0 1.0\n", 1),
    ("lattice x\n", 1),
    ("lattice x start=0\n0 1 w1 1.0 1.0\nfinal\n", 3),
    ("lattice x start=0\n0 1 w1 nan 1.0\nfinal 1\n", 2),
])
def test_parse_errors_name_the_line(small_vocab, text, line):
    with pytest.raises(LatticeError) as exc:
        read_lattice(text, small_vocab)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value)


def test_cycle_is_reported_with_header_line(small_vocab):
    text = "# c\nlattice x start=0\n0 1 w1 1 1\n1 2 w1 1 1\n2 1 w1 1 1\n2 3 w2 1 1\nfinal 3\n"
    with pytest.raises(LatticeError, match="cycle") as exc:
        read_lattice(text, small_vocab)
    assert exc.value.line == 2


def test_unknown_word_can_map_to_unk(small_vocab):
    lat = read_lattice("lattice x start=0\n0 1 nope 1 1\nfinal 1\n", small_vocab, map_unk=True)
    assert lat.arcs[0].word == UNK_ID


def test_multiple_lattices(small_vocab):
    lats = read_lattices(SAMPLE + SAMPLE.replace("utt1", "utt2"), small_vocab)
    assert [l.id for l in lats] == ["utt1", "utt2"]
    with pytest.raises(LatticeError):
        read_lattice(SAMPLE + SAMPLE, small_vocab)


def test_costs_keep_full_precision(small_vocab):
    lat = Lattice(0, [1], [Arc(0, 1, 6, 1 / 3, math.pi)])
    back = read_lattice(write_lattice(lat, small_vocab), small_vocab)
    assert back.arcs == lat.arcs


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 9))
def test_write_read_round_trip(small_vocab, seed, n):
    lat = random_lattice(random.Random(seed), small_vocab, n, p_eps=0.2, p_nonspeech=0.2)
    lat = Lattice(lat.start, lat.finals, lat.arcs, id=f"s{seed}")
    back = read_lattice(write_lattice(lat, small_vocab), small_vocab)
    assert back == lat


def test_write_lattices_stream(small_vocab, tmp_path):
    lat = read_lattice(SAMPLE, small_vocab)
    p = tmp_path / "l.txt"
    with open(p, "w") as fh:
        write_lattices([lat, lat], small_vocab, fh)
    assert len(read_lattices(p.read_text(), small_vocab)) == 2


# -- structure ----------------------------------------------------------------

def test_validate_rejects_bad_structure():
    with pytest.raises(LatticeError, match="incoming"):
        Lattice(0, [1], [Arc(0, 1, 6, 0, 0), Arc(1, 0, 6, 0, 0)]).validate()
    with pytest.raises(LatticeError, match="no final"):
        Lattice(0, [], [Arc(0, 1, 6, 0, 0)]).validate()
    with pytest.raises(LatticeError, match="not on any"):
        Lattice(0, [1], [Arc(0, 1, 6, 0, 0), Arc(0, 2, 6, 0, 0)]).validate()
    with pytest.raises(LatticeError, match="non-finite"):
        Lattice(0, [1], [Arc(0, 1, 6, math.inf, 0)])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6), st.integers(2, 12))
def test_topo_order_respects_arcs(small_vocab, seed, n):
    lat = random_lattice(random.Random(seed), small_vocab, n)
    pos = {q: i for i, q in enumerate(topo_sort(lat))}
    assert pos[lat.start] == 0
    assert all(pos[a.src] < pos[a.dst] for a in lat.arcs)


def test_topo_ties_prefer_low_ids():
    lat = Lattice(0, [9], [Arc(0, 5, 6, 0, 0), Arc(0, 3, 6, 0, 0), Arc(5, 9, 6, 0, 0),
                           Arc(3, 9, 6, 0, 0)])
    assert topo_sort(lat) == [0, 3, 5, 9]


def test_trim_drops_dead_arcs_and_renumbers():
    lat = Lattice(10, [30], [Arc(10, 20, 6, 1, 0), Arc(20, 30, 7, 1, 0),
                             Arc(10, 30, 8, 5, 0)])
    sub = trim(lat, keep=[0, 2])
    assert sub.start == 0
    assert [(a.src, a.dst, a.word) for a in sub.arcs] == [(0, 1, 8)]


def test_renumber_keeps_paths():
    lat = Lattice(7, [3], [Arc(7, 5, 6, 1, 0), Arc(5, 3, 7, 2, 0)])
    r = renumber(lat)
    assert (r.start, set(r.finals)) == (0, {2})
    assert [path_cost(r, p) for p in enumerate_paths(r)] == [3.0]


def test_replace_lm_keeps_structure():
    lat = Lattice(0, [1], [Arc(0, 1, 6, 1.0, 2.0)])
    assert lat.replace_lm([5.0]).arcs[0] == Arc(0, 1, 6, 1.0, 5.0)
    with pytest.raises(ValueError):
        lat.replace_lm([1.0, 2.0])
