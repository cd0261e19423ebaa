import math

import numpy as np
import pytest

from ctc_crf import (Alphabet, DataError, DenominatorTable, LOG, NGramModel,
                     NumericalError, PosteriorMatrix, SymbolTable,
                     batch_crf_loss, build_denominator_graph, crf_loss,
                     denominator_forward, estimate, flatten_denominator,
                     lm_to_fst, numerator_forward, score_sequence)
from ctc_crf.semiring import ZERO
from ctc_crf.wfst import Wfst

from oracles import (brute_denominator, brute_numerator, finite_difference,
                     random_log_softmax)


def uniform_post(frames, width):
    return np.full((frames, width), math.log(1.0 / width))


def degenerate_lm(labels):
    """A hand-built model assigning probability one to every sequence."""
    vocab = SymbolTable(["<eps>", *labels, "<s>", "</s>"])
    entries = {(vocab.find(l),): (0.0, None) for l in labels}
    entries[(vocab.find("</s>"),)] = (0.0, None)
    return NGramModel(1, vocab, entries)


# ---------------------------------------------------------------------------
# PosteriorMatrix
# ---------------------------------------------------------------------------

def test_posterior_matrix_validation(rng):
    post = PosteriorMatrix(random_log_softmax(rng, 4, 3))
    post.assert_log_softmax()
    assert post.frames == 4 and post.width == 3
    with pytest.raises(DataError):
        PosteriorMatrix(np.array([[0.0, np.nan]]))
    skewed = PosteriorMatrix(np.zeros((2, 3)))
    with pytest.raises(DataError):
        skewed.assert_log_softmax()


def test_posterior_matrix_allows_neg_inf():
    post = PosteriorMatrix(np.array([[0.0, ZERO], [ZERO, 0.0]]))
    post.assert_log_softmax()


# ---------------------------------------------------------------------------
# numerator
# ---------------------------------------------------------------------------

def test_numerator_uniform_single_label():
    post = uniform_post(2, 2)
    res = numerator_forward(post, [1], log_pl=0.0)
    assert res.feasible
    assert res.score == pytest.approx(math.log(0.75), abs=1e-12)


def test_numerator_empty_reference():
    post = uniform_post(3, 2)
    res = numerator_forward(post, [], log_pl=-0.7)
    assert res.score == pytest.approx(-0.7 + 3 * math.log(0.5), abs=1e-12)
    assert np.allclose(res.occupancy[:, 0], 1.0)


def test_numerator_too_short_flagged():
    post = uniform_post(1, 3)
    res = numerator_forward(post, [1, 2], log_pl=0.0)
    assert not res.feasible
    assert res.score == ZERO
    assert np.all(res.occupancy == 0.0)


def test_numerator_repeat_needs_separator():
    # "a a" needs at least 3 frames (a, blank, a)
    res = numerator_forward(uniform_post(2, 2), [1, 1], log_pl=0.0)
    assert not res.feasible
    res3 = numerator_forward(uniform_post(3, 2), [1, 1], log_pl=0.0)
    assert res3.feasible


def test_numerator_bad_label(ab2):
    with pytest.raises(DataError):
        numerator_forward(uniform_post(2, 3), [5], log_pl=0.0)


def test_numerator_matches_enumeration(rng):
    for _ in range(40):
        frames = int(rng.integers(1, 6))
        width = int(rng.integers(2, 4))
        post = random_log_softmax(rng, frames, width)
        n_ref = int(rng.integers(0, 4))
        labels = [int(rng.integers(1, width)) for _ in range(n_ref)]
        log_pl = float(rng.normal())
        want = brute_numerator(post, labels, log_pl)
        got = numerator_forward(post, labels, log_pl)
        if want == ZERO:
            assert not got.feasible
        else:
            assert got.score == pytest.approx(want, abs=1e-9)
            assert np.allclose(got.occupancy.sum(axis=1), 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# denominator
# ---------------------------------------------------------------------------

def test_denominator_degenerate_lm_uniform_posterior(ab1):
    table = flatten_denominator(build_denominator_graph(ab1, degenerate_lm(["a"])))
    res = denominator_forward(uniform_post(2, 2), table)
    assert res.score == pytest.approx(0.0, abs=1e-12)  # log 4 + 2 log 0.5


def test_denominator_unigram_matches_enumeration(ab2, unigram_ab):
    g = lm_to_fst(unigram_ab, LOG)
    table = flatten_denominator(build_denominator_graph(ab2, unigram_ab))
    post = uniform_post(2, 3)
    want = brute_denominator(post, g)
    got = denominator_forward(post, table)
    assert got.score == pytest.approx(want, abs=1e-9)


def test_denominator_occupancy_rows_sum_to_one(ab2, bigram_ab, rng):
    table = flatten_denominator(build_denominator_graph(ab2, bigram_ab))
    for _ in range(20):
        frames = int(rng.integers(1, 7))
        post = random_log_softmax(rng, frames, 3)
        res = denominator_forward(post, table)
        assert res.feasible
        assert np.allclose(res.occupancy.sum(axis=1), 1.0, atol=1e-6)


def test_denominator_width_mismatch(den_table_ab):
    with pytest.raises(DataError):
        denominator_forward(uniform_post(2, 5), den_table_ab)


def test_denominator_matches_enumeration_randomized(rng):
    for _ in range(30):
        n_labels = int(rng.integers(1, 3))
        alphabet = Alphabet([f"l{i}" for i in range(n_labels)])
        order = int(rng.integers(1, 3))
        corpus = [[f"l{int(rng.integers(0, n_labels))}"
                   for _ in range(int(rng.integers(1, 4)))]
                  for _ in range(int(rng.integers(2, 5)))]
        lm = estimate(corpus, order=order, discount=0.5,
                      vocab=list(alphabet.labels))
        g = lm_to_fst(lm, LOG)
        table = flatten_denominator(build_denominator_graph(alphabet, lm))
        frames = int(rng.integers(1, 5))
        post = random_log_softmax(rng, frames, alphabet.num_state_symbols)
        want = brute_denominator(post, g)
        got = denominator_forward(post, table)
        assert got.score == pytest.approx(want, abs=1e-9)


# ---------------------------------------------------------------------------
# flattening
# ---------------------------------------------------------------------------

def test_flatten_no_epsilons_is_transcription(ab1):
    # hand-build an epsilon-free log acceptor over state symbols
    isyms = ab1.pi_symbol_table()
    fst = Wfst(LOG, isyms, isyms)
    s0, s1 = fst.add_state(), fst.add_state()
    fst.set_start(s0)
    fst.add_arc(s0, 1, 1, -0.5, s1)   # blank
    fst.add_arc(s1, 2, 2, -1.0, s0)   # label a
    fst.set_final(s0, -0.1)
    table = flatten_denominator(fst)
    assert table.num_transitions == 2
    assert table.num_states == 2
    assert sorted(table.label.tolist()) == [0, 1]
    assert table.final[table.start] == pytest.approx(-0.1)


def test_flatten_folds_backoff_mass(ab2, bigram_ab):
    graph = build_denominator_graph(ab2, bigram_ab)
    table = flatten_denominator(graph)
    # path mass for length T preserved against the unflattened machine
    for frames in (1, 2, 3, 4):
        post = np.zeros((frames, 3))  # unit node potentials
        got = denominator_forward(post, table).score
        want = _graph_length_mass(graph, frames)
        assert got == pytest.approx(want, abs=1e-9), frames


def test_flatten_zero_weight_epsilon_loop_diverges(ab1):
    isyms = ab1.pi_symbol_table()
    fst = Wfst(LOG, isyms, isyms)
    s0 = fst.add_state()
    fst.set_start(s0)
    fst.add_arc(s0, 0, 0, 0.0, s0)  # epsilon self-loop, mass one
    fst.add_arc(s0, 1, 0, 0.0, s0)
    fst.set_final(s0, 0.0)
    with pytest.raises(NumericalError, match="divergent"):
        flatten_denominator(fst)


def test_flatten_negative_epsilon_cycle_converges(ab1):
    isyms = ab1.pi_symbol_table()
    fst = Wfst(LOG, isyms, isyms)
    s0 = fst.add_state()
    fst.set_start(s0)
    fst.add_arc(s0, 0, 0, math.log(0.5), s0)  # epsilon loop, mass half
    fst.add_arc(s0, 1, 0, math.log(0.25), s0)
    fst.set_final(s0, 0.0)
    table = flatten_denominator(fst)
    # geometric series: closure mass 1/(1-0.5) = 2
    res = denominator_forward(np.zeros((1, 2)), table)
    assert res.score == pytest.approx(math.log(2 * 0.25 * 2), abs=1e-12)


def test_denominator_no_complete_path_flagged(ab1):
    # a strict 3-arc chain cannot realize a 2-frame utterance
    isyms = ab1.pi_symbol_table()
    fst = Wfst(LOG, isyms, isyms)
    states = [fst.add_state() for _ in range(4)]
    fst.set_start(states[0])
    for i in range(3):
        fst.add_arc(states[i], 1 + (i % 2), 0, -0.1, states[i + 1])
    fst.set_final(states[3], 0.0)
    table = flatten_denominator(fst)
    res = denominator_forward(uniform_post(2, 2), table)
    assert not res.feasible
    assert res.score == ZERO
    assert np.all(res.occupancy == 0.0)


def test_table_save_load_round_trip(tmp_path, den_table_ab):
    path = tmp_path / "den.fst"
    den_table_ab.save(path)
    back = DenominatorTable.load(path)
    assert back.num_states == den_table_ab.num_states
    assert back.num_labels == den_table_ab.num_labels
    post = uniform_post(3, 3)
    assert denominator_forward(post, back).score == pytest.approx(
        denominator_forward(post, den_table_ab).score, abs=1e-7)


def test_table_round_trip_with_nonzero_start_state(tmp_path, ab1):
    # flattening renumbers so the start lands at state 0 on disk
    isyms = ab1.pi_symbol_table()
    fst = Wfst(LOG, isyms, isyms)
    s0, s1, s2 = fst.add_state(), fst.add_state(), fst.add_state()
    fst.set_start(s2)
    fst.add_arc(s2, 1, 0, -0.3, s0)
    fst.add_arc(s0, 2, 0, -0.7, s2)
    fst.set_final(s2, -0.1)
    table = flatten_denominator(fst)
    assert table.start == 0
    path = tmp_path / "t.fst"
    table.save(path)
    back = DenominatorTable.load(path)
    post = uniform_post(2, 2)
    assert denominator_forward(post, back).score == pytest.approx(
        denominator_forward(post, table).score, abs=1e-9)
    assert denominator_forward(post, table).score == pytest.approx(
        math.log(0.5 * 0.5) + (-0.3 - 0.7 - 0.1), abs=1e-9)


def _graph_length_mass(graph, frames):
    """Total complete-path mass for exactly ``frames`` labeled arcs, walking
    the unflattened graph directly (epsilons free)."""
    from ctc_crf.wfst import EPS

    terms = []
    budget = graph.num_states + 1

    def visit(state, used, left, acc):
        if used == frames:
            f = graph.final_weight(state)
            if f != ZERO:
                terms.append(acc + f)
        for arc in graph.arcs(state):
            if arc.ilabel == EPS:
                if left > 0:
                    visit(arc.nextstate, used, left - 1, acc + arc.weight)
            elif used < frames:
                visit(arc.nextstate, used + 1, budget, acc + arc.weight)

    visit(graph.start, 0, budget, 0.0)
    arr = np.array(terms)
    m = arr.max()
    return float(m + np.log(np.exp(arr - m).sum()))


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------

def test_loss_alpha_zero_uniform_example(ab1):
    table = flatten_denominator(build_denominator_graph(ab1, degenerate_lm(["a"])))
    post = uniform_post(2, 2)
    res = crf_loss(post, [1], log_pl=0.0, den=table, alpha=0.0)
    assert res.objective == pytest.approx(math.log(0.75), abs=1e-12)
    assert res.objective == res.numerator - res.denominator


def test_loss_alpha_combines_parts(ab2, bigram_ab, den_table_ab, rng):
    post = random_log_softmax(rng, 4, 3)
    labels = [1, 2]
    log_pl = score_sequence(bigram_ab, ["a", "b"])
    num = numerator_forward(post, labels, log_pl)
    den = denominator_forward(post, den_table_ab)
    res = crf_loss(post, labels, log_pl, den_table_ab, alpha=0.1)
    want = (num.score - den.score) + 0.1 * (num.score - log_pl)
    assert res.objective == pytest.approx(want, abs=1e-12)
    assert res.aux == pytest.approx(num.score - log_pl, abs=1e-12)


def test_loss_gradient_matches_finite_differences(rng):
    ab = Alphabet(["a", "b"])
    lm = estimate([["a", "b"], ["b"]], order=2, discount=0.5,
                  vocab=list(ab.labels))
    table = flatten_denominator(build_denominator_graph(ab, lm))
    log_pl = score_sequence(lm, ["a"])
    for alpha in (0.0, 0.1):
        post = random_log_softmax(rng, 3, 3)
        res = crf_loss(post, [1], log_pl, table, alpha=alpha)

        def objective(mat):
            return crf_loss(mat, [1], log_pl, table, alpha=alpha).objective

        fd = finite_difference(objective, post.copy(), step=1e-4)
        assert np.allclose(fd, res.grad, atol=1e-6), alpha


def test_loss_gradient_rows_sum_to_zero_at_alpha_zero(ab2, den_table_ab, rng):
    post = random_log_softmax(rng, 5, 3)
    res = crf_loss(post, [2, 1], log_pl=-1.0, den=den_table_ab, alpha=0.0)
    assert np.allclose(res.grad.sum(axis=1), 0.0, atol=1e-6)


def test_loss_degenerate_zero_gradient(den_table_ab):
    post = uniform_post(1, 3)
    res = crf_loss(post, [1, 2], log_pl=0.0, den=den_table_ab, alpha=0.1)
    assert res.degenerate
    assert res.objective == ZERO
    assert np.all(res.grad == 0.0)


def test_numerator_bounded_by_denominator(rng):
    for _ in range(40):
        n_labels = int(rng.integers(1, 3))
        ab = Alphabet([f"l{i}" for i in range(n_labels)])
        corpus = [[f"l{int(rng.integers(0, n_labels))}"
                   for _ in range(int(rng.integers(1, 4)))]
                  for _ in range(3)]
        lm = estimate(corpus, order=int(rng.integers(1, 3)), discount=0.5,
                      vocab=list(ab.labels))
        table = flatten_denominator(build_denominator_graph(ab, lm))
        frames = int(rng.integers(1, 6))
        post = random_log_softmax(rng, frames, ab.num_state_symbols)
        labels = [int(rng.integers(1, n_labels + 1))
                  for _ in range(int(rng.integers(0, 3)))]
        log_pl = score_sequence(lm, [ab.state_name(l) for l in labels])
        res = crf_loss(post, labels, log_pl, table, alpha=0.0)
        if res.degenerate:
            continue
        assert res.numerator <= res.denominator + 1e-9
        assert res.objective <= 1e-9


def test_loss_long_utterance_stable(den_table_ab, rng):
    post = random_log_softmax(rng, 1000, 3)
    labels = [1, 2] * 30
    res = crf_loss(post, labels, log_pl=-50.0, den=den_table_ab, alpha=0.1)
    assert np.isfinite(res.objective)
    assert np.isfinite(res.grad).all()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

def _make_batch(rng, den, count=3, lengths=(2, 4, 7)):
    batch = []
    for frames in lengths[:count]:
        post = random_log_softmax(rng, frames, 3)
        labels = [int(rng.integers(1, 3))]
        batch.append((post, labels, -1.0))
    return batch


def test_batch_of_one_equals_single(den_table_ab, rng):
    batch = _make_batch(rng, den_table_ab, count=1)
    out = batch_crf_loss(batch, den_table_ab, alpha=0.1)
    single = crf_loss(*batch[0], den=den_table_ab, alpha=0.1)
    assert out.results[0].objective == single.objective
    assert np.array_equal(out.results[0].grad, single.grad)


def test_batch_matches_sequential(den_table_ab, rng):
    batch = _make_batch(rng, den_table_ab)
    out = batch_crf_loss(batch, den_table_ab, alpha=0.1)
    for item, got in zip(batch, out.results):
        want = crf_loss(*item, den=den_table_ab, alpha=0.1)
        assert got.objective == want.objective
        assert np.array_equal(got.grad, want.grad)


def test_batch_isolates_degenerate(den_table_ab, rng):
    batch = _make_batch(rng, den_table_ab)
    # one utterance too short for its labels
    batch[1] = (uniform_post(1, 3), [1, 2, 1], 0.0)
    out = batch_crf_loss(batch, den_table_ab, alpha=0.1)
    assert out.degenerate_count == 1
    assert out.results[1].degenerate
    for i in (0, 2):
        want = crf_loss(*batch[i], den=den_table_ab, alpha=0.1)
        assert out.results[i].objective == want.objective


def test_batch_worker_pool_matches_serial(den_table_ab, rng):
    batch = _make_batch(rng, den_table_ab)
    serial = batch_crf_loss(batch, den_table_ab, alpha=0.1, workers=1)
    pooled = batch_crf_loss(batch, den_table_ab, alpha=0.1, workers=2)
    for a, b in zip(serial.results, pooled.results):
        assert a.objective == b.objective
        assert np.array_equal(a.grad, b.grad)


def test_batch_width_mismatch_rejected(den_table_ab, rng):
    batch = [(random_log_softmax(rng, 2, 3), [1], 0.0),
             (random_log_softmax(rng, 2, 4), [1], 0.0)]
    with pytest.raises(DataError):
        batch_crf_loss(batch, den_table_ab)
