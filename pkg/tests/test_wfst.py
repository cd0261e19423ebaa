import itertools
import math

import numpy as np
import pytest

from ctc_crf import (Alphabet, DataError, LOG, TROPICAL, ONE, Wfst,
                     build_ctc_topology, build_decoding_graph,
                     build_denominator_graph, build_lexicon_fst, compose,
                     estimate, identity_acceptor, lm_to_fst, map_b,
                     read_fst_text, trim, write_fst_text)
from ctc_crf.semiring import ZERO, log_add
from ctc_crf.symbols import SymbolTable

from oracles import (acceptor_mass, collapse_reference, transducer_outputs,
                     weighted_language)


def pi_to_fst_ids(pi):
    return [s + 1 for s in pi]


# ---------------------------------------------------------------------------
# map_b
# ---------------------------------------------------------------------------

def test_map_b_examples(ab2):
    assert map_b([1, 1, 0, 2], ab2) == [1, 2]
    assert map_b([0, 1, 0, 1], ab2) == [1, 1]
    assert map_b([], ab2) == []


def test_map_b_out_of_range(ab2):
    with pytest.raises(DataError):
        map_b([3], ab2)
    with pytest.raises(DataError):
        map_b([-1], ab2)


def test_map_b_agrees_with_independent_collapse(ab2, rng):
    for _ in range(200):
        pi = rng.integers(0, 3, size=rng.integers(0, 8)).tolist()
        assert map_b(pi, ab2) == collapse_reference(pi)


# ---------------------------------------------------------------------------
# alphabet
# ---------------------------------------------------------------------------

def test_alphabet_id_layout(ab2):
    assert ab2.num_state_symbols == 3
    assert ab2.state_id("a") == 1 and ab2.state_id("b") == 2
    assert ab2.state_name(0) == "<blk>"
    assert list(ab2.pi_symbol_table()) == ["<eps>", "<blk>", "a", "b"]
    assert list(ab2.label_symbol_table()) == ["<eps>", "a", "b"]


def test_alphabet_validation():
    with pytest.raises(DataError):
        Alphabet(["a", "a"])
    with pytest.raises(DataError):
        Alphabet(["a", ""])
    with pytest.raises(DataError):
        Alphabet(["<blk>"])
    with pytest.raises(DataError):
        Alphabet(["<s>"])


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------

def test_topology_size_two_labels(ab2):
    t = build_ctc_topology(ab2)
    assert t.num_states == 3
    assert t.num_arcs == 9
    assert t.start == 0
    assert set(t.finals) == {0, 1, 2}
    assert all(w == ONE for w in t.finals.values())
    assert all(arc.weight == ONE for s in t.states() for arc in t.arcs(s))


def test_topology_empty_alphabet_rejected():
    with pytest.raises(DataError):
        Alphabet([])


def test_topology_path_examples(ab2):
    t = build_ctc_topology(ab2)
    # "a a <blk> a" -> "a a"
    outs = transducer_outputs(t, pi_to_fst_ids([1, 1, 0, 1]))
    assert outs == {(1, 1)}
    # all-blank maps to the empty string
    assert transducer_outputs(t, pi_to_fst_ids([0, 0])) == {()}


@pytest.mark.parametrize("n_labels", [1, 2, 3])
def test_topology_exhaustive_matches_map_b(n_labels):
    alphabet = Alphabet([f"l{i}" for i in range(n_labels)])
    t = build_ctc_topology(alphabet)
    width = alphabet.num_state_symbols
    for length in range(0, 6):
        for pi in itertools.product(range(width), repeat=length):
            outs = transducer_outputs(t, pi_to_fst_ids(pi))
            assert outs == {tuple(map_b(list(pi), alphabet))}, pi


# ---------------------------------------------------------------------------
# trim
# ---------------------------------------------------------------------------

def _chain(weights, semiring=LOG):
    syms = SymbolTable(["<eps>", "x"])
    fst = Wfst(semiring, syms, syms)
    states = [fst.add_state() for _ in range(len(weights) + 1)]
    fst.set_start(states[0])
    for i, w in enumerate(weights):
        fst.add_arc(states[i], 1, 1, w, states[i + 1])
    fst.set_final(states[-1], ONE)
    return fst


def test_trim_removes_unreachable():
    fst = _chain([-1.0, -2.0])
    dead = fst.add_state()
    fst.add_arc(dead, 1, 1, ONE, 0)
    trimmed = trim(fst)
    assert trimmed.num_states == 3
    assert trimmed == _chain([-1.0, -2.0])


def test_trim_no_final_reachable_gives_empty():
    syms = SymbolTable(["<eps>", "x"])
    fst = Wfst(LOG, syms, syms)
    a, b = fst.add_state(), fst.add_state()
    fst.set_start(a)
    fst.add_arc(a, 1, 1, ONE, b)  # no finals anywhere
    trimmed = trim(fst)
    assert trimmed.is_empty()
    assert trimmed.num_states == 0


def test_trim_idempotent():
    fst = _chain([-0.5])
    once = trim(fst)
    assert once == fst
    assert trim(once) == once


def test_trim_preserves_weighted_language(rng):
    syms = SymbolTable(["<eps>", "x", "y"])
    for trial in range(20):
        fst = Wfst(LOG, syms, syms)
        n = int(rng.integers(2, 8))
        for _ in range(n):
            fst.add_state()
        fst.set_start(0)
        for _ in range(int(rng.integers(1, 12))):
            fst.add_arc(int(rng.integers(0, n)), int(rng.integers(0, 3)),
                        int(rng.integers(0, 3)), float(-rng.random()),
                        int(rng.integers(0, n)))
        fst.set_final(int(rng.integers(0, n)), ONE)
        trimmed = trim(fst)
        before = weighted_language(fst, 6, log_add)
        after = weighted_language(trimmed, 6, log_add)
        assert before.keys() == after.keys()
        for key in before:
            assert before[key] == pytest.approx(after[key], abs=1e-12)


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------

def test_compose_identity(ab2):
    t = build_ctc_topology(ab2)
    ident = identity_acceptor(t.osyms, LOG)
    composed = compose(t, ident)
    lang_t = weighted_language(t, 5, log_add)
    lang_c = weighted_language(composed, 5, log_add)
    assert lang_t.keys() == lang_c.keys()
    for key in lang_t:
        assert lang_t[key] == pytest.approx(lang_c[key], abs=1e-12)


def test_compose_symbol_table_mismatch(ab2):
    t = build_ctc_topology(ab2)
    other = identity_acceptor(SymbolTable(["<eps>", "q"]), LOG)
    with pytest.raises(DataError):
        compose(t, other)


def test_compose_two_linear_chains():
    syms = SymbolTable(["<eps>", "x"])
    a = _chain([-1.0, -2.0])
    b = _chain([-0.25, -0.5])
    c = compose(a, b)
    lang = weighted_language(c, 4, log_add)
    assert set(lang) == {((1, 1), (1, 1))}
    assert lang[((1, 1), (1, 1))] == pytest.approx(-3.75, abs=1e-12)


def test_compose_topology_with_unigram_matches_direct_scoring(ab2, unigram_ab):
    t = build_ctc_topology(ab2)
    g = lm_to_fst(unigram_ab, LOG)
    tg = compose(t, g)
    for length in range(0, 4):
        for pi in itertools.product(range(3), repeat=length):
            got = acceptor_mass(tg, pi_to_fst_ids(pi))
            want = acceptor_mass(g, map_b(list(pi), ab2))
            if math.isinf(want):
                assert math.isinf(got)
            else:
                assert got == pytest.approx(want, abs=1e-10), pi


def _random_dag_machine(rng, isyms, osyms, max_states=5):
    """Acyclic machine with epsilons; its weighted language is finite, so
    bounded enumeration is exhaustive."""
    fst = Wfst(LOG, isyms, osyms)
    n = int(rng.integers(2, max_states + 1))
    for _ in range(n):
        fst.add_state()
    fst.set_start(0)
    n_i, n_o = len(isyms), len(osyms)
    for _ in range(int(rng.integers(2, 9))):
        src = int(rng.integers(0, n - 1))
        dst = int(rng.integers(src + 1, n))
        fst.add_arc(src, int(rng.integers(0, n_i)), int(rng.integers(0, n_o)),
                    float(-rng.random()), dst)
    for _ in range(int(rng.integers(1, 3))):
        fst.set_final(int(rng.integers(0, n)), float(-rng.random()))
    return fst


def test_compose_associativity(rng):
    sx = SymbolTable(["<eps>", "x1", "x2"])
    sy = SymbolTable(["<eps>", "y1", "y2"])
    sz = SymbolTable(["<eps>", "z1", "z2"])
    sw = SymbolTable(["<eps>", "w1", "w2"])
    for trial in range(30):
        a = _random_dag_machine(rng, sx, sy)
        b = _random_dag_machine(rng, sy, sz)
        c = _random_dag_machine(rng, sz, sw)
        left = compose(compose(a, b), c)
        right = compose(a, compose(b, c))
        lang_l = weighted_language(left, 16, log_add)
        lang_r = weighted_language(right, 16, log_add)
        assert lang_l.keys() == lang_r.keys(), trial
        for key in lang_l:
            assert lang_l[key] == pytest.approx(lang_r[key], abs=1e-10), trial


def test_compose_no_epsilon_path_double_counting(rng):
    """A machine with an epsilon-output arc composed against one with an
    epsilon-input arc: the joint path must be counted exactly once."""
    sx = SymbolTable(["<eps>", "x"])
    sy = SymbolTable(["<eps>", "y"])
    sz = SymbolTable(["<eps>", "z"])
    a = Wfst(LOG, sx, sy)
    a0, a1, a2 = a.add_state(), a.add_state(), a.add_state()
    a.set_start(a0)
    a.add_arc(a0, 1, 1, math.log(0.5), a1)
    a.add_arc(a1, 1, 0, math.log(0.25), a2)  # output epsilon
    a.set_final(a2, ONE)
    b = Wfst(LOG, sy, sz)
    b0, b1, b2 = b.add_state(), b.add_state(), b.add_state()
    b.set_start(b0)
    b.add_arc(b0, 1, 1, math.log(0.5), b1)
    b.add_arc(b1, 0, 1, math.log(0.125), b2)  # input epsilon
    b.set_final(b2, ONE)
    c = compose(a, b)
    lang = weighted_language(c, 6, log_add)
    key = ((1, 1), (1, 1))
    assert set(lang) == {key}
    assert lang[key] == pytest.approx(math.log(0.5 * 0.25 * 0.5 * 0.125), abs=1e-12)


# ---------------------------------------------------------------------------
# denominator graph
# ---------------------------------------------------------------------------

def test_denominator_graph_unigram_brute_force(ab2, unigram_ab):
    tden = build_denominator_graph(ab2, unigram_ab)
    g = lm_to_fst(unigram_ab, LOG)
    # total mass over all length-2 state sequences with unit node potentials
    total = ZERO
    for pi in itertools.product(range(3), repeat=2):
        total = log_add(total, acceptor_mass(g, map_b(list(pi), ab2)))
    got = ZERO
    for pi in itertools.product(range(3), repeat=2):
        got = log_add(got, acceptor_mass(tden, pi_to_fst_ids(pi)))
    assert got == pytest.approx(total, abs=1e-10)


def test_denominator_graph_input_alphabet_is_state_symbols():
    alphabet = Alphabet([f"l{i}" for i in range(5)])
    corpus = [[f"l{(i + j) % 5}" for j in range(4)] for i in range(6)]
    lm = estimate(corpus, order=3, discount=0.5, vocab=list(alphabet.labels))
    tden = build_denominator_graph(alphabet, lm)
    assert list(tden.isyms) == ["<eps>", "<blk>", "l0", "l1", "l2", "l3", "l4"]
    used = {arc.ilabel for s in tden.states() for arc in tden.arcs(s)}
    assert used <= set(range(0, 7))
    assert set(range(1, 7)) <= used


def test_denominator_graph_wrong_vocabulary(ab2):
    lm = estimate([["a", "c"]], order=1, discount=0.5)
    with pytest.raises(DataError):
        build_denominator_graph(ab2, lm)


# ---------------------------------------------------------------------------
# decoding graph
# ---------------------------------------------------------------------------

def test_decoding_graph_lexicon_free(ab2, unigram_ab):
    graph = build_decoding_graph(ab2, unigram_ab)
    assert graph.semiring.kind == "tropical"
    assert list(graph.isyms) == ["<eps>", "<blk>", "a", "b"]
    assert list(graph.osyms) == ["<eps>", "a", "b"]


def test_decoding_graph_lexicon_transduction(ab2):
    # pseudo-lexicon: word "go" spelled with labels a, b
    word_lm = estimate([["go"]], order=1, discount=0.5)
    lexicon = {"go": [["a", "b"]]}
    graph = build_decoding_graph(ab2, word_lm, lexicon)
    # state path "a a <blk> b" should transduce to the word "go"
    a, b = 1, 2
    outs = transducer_outputs(graph, pi_to_fst_ids([a, a, 0, b]))
    go = graph.osyms.find("go")
    assert (go,) in outs


def test_decoding_graph_missing_pronunciation(ab2):
    word_lm = estimate([["go"], ["stop"]], order=1, discount=0.5)
    with pytest.raises(DataError, match="stop"):
        build_decoding_graph(ab2, word_lm, {"go": [["a"]]})


def test_lexicon_fst_rejects_empty_pronunciation(ab2):
    syms = SymbolTable(["<eps>", "go"])
    with pytest.raises(DataError):
        build_lexicon_fst(ab2, {"go": [[]]}, syms, TROPICAL)


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

def test_fst_text_round_trip(tmp_path, ab2, unigram_ab):
    tden = build_denominator_graph(ab2, unigram_ab)
    path = tmp_path / "den.fst"
    write_fst_text(tden, path)
    back = read_fst_text(path, LOG, tden.isyms, tden.osyms)
    assert back.num_states == tden.num_states
    assert back.num_arcs == tden.num_arcs
    assert back.start == 0
    lang_a = weighted_language(tden, 4, log_add)
    lang_b = weighted_language(back, 4, log_add)
    assert lang_a.keys() == lang_b.keys()
    for key in lang_a:
        assert lang_a[key] == pytest.approx(lang_b[key], abs=1e-7)


def test_fst_text_deterministic_bytes(tmp_path, ab2, unigram_ab):
    tden = build_denominator_graph(ab2, unigram_ab)
    p1, p2 = tmp_path / "a.fst", tmp_path / "b.fst"
    write_fst_text(tden, p1)
    write_fst_text(tden, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_symbol_table_round_trip(tmp_path, ab2):
    syms = ab2.pi_symbol_table()
    path = tmp_path / "syms.txt"
    syms.write(path)
    assert SymbolTable.read(path) == syms
    text = path.read_text()
    assert text.splitlines()[0] == "<eps>\t0"
