"""Self-checks against brute-force enumeration and finite differences.

Everything here scores paths by direct enumeration over the raw machines
(never through composition, flattening, or the forward-backward recursions),
so agreement is meaningful evidence that the fast paths are right.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .lm import NGramModel, estimate, lm_to_fst, score_sequence
from .loss import DenominatorTable, crf_loss, flatten_denominator
from .semiring import LOG, ZERO, logsumexp
from .symbols import Alphabet
from .wfst import EPS, Wfst, build_denominator_graph, map_b


def acceptor_sequence_mass(g: Wfst, seq: list[int]) -> float:
    """Log path mass of an acceptor for one exact symbol sequence, epsilon
    arcs included, by exhaustive path recursion."""
    weights: list[float] = []
    eps_budget = g.num_states + 1

    def walk(state: int, pos: int, budget: int, acc: float):
        if pos == len(seq):
            f = g.final_weight(state)
            if f != ZERO:
                weights.append(acc + f)
        for arc in g.arcs(state):
            if arc.ilabel == EPS:
                if budget > 0:
                    walk(arc.nextstate, pos, budget - 1, acc + arc.weight)
            elif pos < len(seq) and arc.ilabel == seq[pos]:
                walk(arc.nextstate, pos + 1, eps_budget, acc + arc.weight)

    if g.start is not None:
        walk(g.start, 0, eps_budget, 0.0)
    return logsumexp(weights) if weights else ZERO


def enumerate_numerator(post: np.ndarray, labels: list[int],
                        log_pl: float, alphabet: Alphabet) -> float:
    """Sum over all state sequences collapsing to the reference."""
    t_frames, width = post.shape
    target = list(labels)
    terms = []
    for pi in itertools.product(range(width), repeat=t_frames):
        if map_b(pi, alphabet) == target:
            terms.append(sum(post[t, s] for t, s in enumerate(pi)))
    return log_pl + logsumexp(terms) if terms else ZERO


def enumerate_denominator(post: np.ndarray, g: Wfst,
                          alphabet: Alphabet) -> float:
    """Sum over all state sequences of LM mass of the collapsed sequence
    times the node potentials."""
    t_frames, width = post.shape
    mass_cache: dict[tuple[int, ...], float] = {}
    terms = []
    for pi in itertools.product(range(width), repeat=t_frames):
        collapsed = tuple(map_b(pi, alphabet))
        mass = mass_cache.get(collapsed)
        if mass is None:
            mass = acceptor_sequence_mass(g, list(collapsed))
            mass_cache[collapsed] = mass
        if mass == ZERO:
            continue
        terms.append(mass + sum(post[t, s] for t, s in enumerate(pi)))
    return logsumexp(terms) if terms else ZERO


@dataclass
class RandomCase:
    alphabet: Alphabet
    lm: NGramModel
    graph: Wfst
    table: DenominatorTable
    posterior: np.ndarray
    labels: list[int]
    log_pl: float


def random_log_softmax(rng, frames: int, width: int) -> np.ndarray:
    logits = rng.normal(0.0, 2.0, size=(frames, width))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def random_case(rng, max_frames: int = 5, max_labels: int = 2) -> RandomCase:
    n_labels = int(rng.integers(1, max_labels + 1))
    alphabet = Alphabet([f"l{i}" for i in range(n_labels)])
    order = int(rng.integers(1, 3))
    corpus = []
    for _ in range(int(rng.integers(2, 6))):
        length = int(rng.integers(1, 4))
        corpus.append([f"l{int(rng.integers(0, n_labels))}" for _ in range(length)])
    lm = estimate(corpus, order=order, discount=0.5, vocab=list(alphabet.labels))
    graph = build_denominator_graph(alphabet, lm)
    table = flatten_denominator(graph)

    frames = int(rng.integers(1, max_frames + 1))
    post = random_log_softmax(rng, frames, alphabet.num_state_symbols)
    ref_len = int(rng.integers(0, min(frames, 3) + 1))
    labels = [int(rng.integers(1, n_labels + 1)) for _ in range(ref_len)]
    names = [alphabet.state_name(l) for l in labels]
    log_pl = score_sequence(lm, names)
    return RandomCase(alphabet, lm, lm_to_fst(lm, LOG), table, post, labels,
                      log_pl)


def check_oracle_equivalence(trials: int, seed: int = 0,
                             tol: float = 1e-9) -> tuple[float, int]:
    """Max absolute score error and failure count over randomized trials."""
    from .loss import denominator_forward, numerator_forward

    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for _ in range(trials):
        case = random_case(rng)
        den = denominator_forward(case.posterior, case.table)
        den_ref = enumerate_denominator(case.posterior, case.graph,
                                        case.alphabet)
        num = numerator_forward(case.posterior, case.labels, case.log_pl)
        num_ref = enumerate_numerator(case.posterior, case.labels,
                                      case.log_pl, case.alphabet)
        for got, want in ((den.score, den_ref), (num.score, num_ref)):
            if got == ZERO and want == ZERO:
                continue
            err = abs(got - want)
            worst = max(worst, err)
            if not err <= tol:
                failures += 1
    return worst, failures


def check_gradients(trials: int, seed: int = 0, tol: float = 1e-4,
                    step: float = 1e-4, alpha: float = 0.0) -> tuple[float, int]:
    """Max relative error of the analytic gradient against central finite
    differences, over randomized trials."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    failures = 0
    for _ in range(trials):
        case = random_case(rng, max_frames=4)
        base = crf_loss(case.posterior, case.labels, case.log_pl, case.table,
                        alpha=alpha)
        if base.degenerate:
            continue
        frames, width = case.posterior.shape
        for t in range(frames):
            for s in range(width):
                bumped = case.posterior.copy()
                bumped[t, s] += step
                hi = crf_loss(bumped, case.labels, case.log_pl, case.table,
                              alpha=alpha).objective
                bumped[t, s] -= 2 * step
                lo = crf_loss(bumped, case.labels, case.log_pl, case.table,
                              alpha=alpha).objective
                fd = (hi - lo) / (2 * step)
                an = base.grad[t, s]
                err = abs(fd - an) / max(1.0, abs(fd), abs(an))
                worst = max(worst, err)
                if not err <= tol:
                    failures += 1
    return worst, failures
