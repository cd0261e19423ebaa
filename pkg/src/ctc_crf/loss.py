"""The sequence-CRF objective with blank-collapsing topology.

The objective for one utterance is

    objective = (numerator - denominator) + alpha * aux

where the numerator sums, over every length-T state sequence collapsing to
the reference labels, the sequence-level LM score plus per-frame node
potentials; the denominator sums the same potential over all state sequences
via the flattened denominator graph; and ``aux`` is the plain alignment
log-likelihood (the numerator without the LM constant).  All passes run in
the log domain.  Gradients are with respect to the node potentials: the
difference between the reference-conditioned and unconstrained per-frame
symbol occupancies.
"""
from __future__ import annotations

import multiprocessing
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, NumericalError
from .semiring import ZERO
from .wfst import EPS, Wfst

NEG_INF = ZERO


class PosteriorMatrix:
    """T x |state alphabet| matrix of log-softmax node potentials."""

    def __init__(self, values):
        arr = np.ascontiguousarray(values, dtype=np.float64)
        if arr.ndim != 2:
            raise DataError("posterior matrix must be 2-D")
        if np.isnan(arr).any() or (arr == np.inf).any():
            raise DataError("posterior matrix contains NaN or +inf")
        self.values = arr

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def assert_log_softmax(self, tol: float = 1e-5) -> None:
        row_mass = np.log(np.sum(np.exp(self.values), axis=1))
        if np.max(np.abs(row_mass)) > tol:
            raise DataError("rows are not normalized log-probabilities")

    def __array__(self, dtype=None, copy=None):
        if dtype is not None and dtype != self.values.dtype:
            return self.values.astype(dtype)
        return self.values


def _as_matrix(posterior) -> np.ndarray:
    if isinstance(posterior, PosteriorMatrix):
        return posterior.values
    arr = np.ascontiguousarray(posterior, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError("posterior matrix must be 2-D")
    if np.isnan(arr).any() or (arr == np.inf).any():
        raise DataError("posterior matrix contains NaN or +inf")
    return arr


class ForwardResult(NamedTuple):
    score: float
    occupancy: np.ndarray  # T x width, rows sum to 1 when feasible
    feasible: bool


@dataclass
class LossResult:
    """Objective plus its gradient with respect to the node potentials."""
    objective: float
    grad: np.ndarray
    numerator: float
    denominator: float
    aux: float
    degenerate: bool = False


# ---------------------------------------------------------------------------
# Denominator table
# ---------------------------------------------------------------------------

class DenominatorTable:
    """Flattened denominator graph: labeled transitions only.

    Arrays are parallel over transitions; labels are state-symbol ids that
    index posterior columns.  Immutable and shared read-only by workers.
    """

    def __init__(self, num_states: int, start: int, from_state, to_state,
                 label, weight, final, num_labels: int):
        self.num_states = int(num_states)
        self.start = int(start)
        self.from_state = np.ascontiguousarray(from_state, dtype=np.int64)
        self.to_state = np.ascontiguousarray(to_state, dtype=np.int64)
        self.label = np.ascontiguousarray(label, dtype=np.int64)
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        self.final = np.ascontiguousarray(final, dtype=np.float64)
        self.num_labels = int(num_labels)
        n = len(self.from_state)
        if not (len(self.to_state) == len(self.label) == len(self.weight) == n):
            raise DataError("transition arrays have mismatched lengths")
        if len(self.final) != self.num_states:
            raise DataError("final-weight array does not match state count")
        if n and (self.label.min() < 0 or self.label.max() >= self.num_labels):
            raise DataError("transition label out of range")

    @property
    def num_transitions(self) -> int:
        return len(self.from_state)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"labels\t{self.num_labels}\n")
            for i in range(self.num_transitions):
                f.write(f"{self.from_state[i]}\t{self.to_state[i]}\t"
                        f"{self.label[i]}\t{self.weight[i]:.9g}\n")
            for s in range(self.num_states):
                if self.final[s] != NEG_INF:
                    f.write(f"{s}\t{self.final[s]:.9g}\n")

    @classmethod
    def load(cls, path) -> "DenominatorTable":
        num_labels = None
        trans, finals = [], []
        max_state = -1
        with open(path, encoding="utf-8") as f:
            for ln, line in enumerate(f, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if parts[0] == "labels" and len(parts) == 2:
                    num_labels = int(parts[1])
                elif len(parts) == 4:
                    trans.append((int(parts[0]), int(parts[1]), int(parts[2]),
                                  float(parts[3])))
                    max_state = max(max_state, int(parts[0]), int(parts[1]))
                elif len(parts) == 2:
                    finals.append((int(parts[0]), float(parts[1])))
                    max_state = max(max_state, int(parts[0]))
                else:
                    raise DataError(f"{path}: bad table line {ln}")
        if num_labels is None:
            raise DataError(f"{path}: missing labels header")
        n = max_state + 1
        final = np.full(n, NEG_INF)
        for s, w in finals:
            final[s] = w
        return cls(n, 0, [t[0] for t in trans], [t[1] for t in trans],
                   [t[2] for t in trans], [t[3] for t in trans], final,
                   num_labels)


def flatten_denominator(den_fst: Wfst) -> DenominatorTable:
    """Eliminate epsilon-input arcs by weighted closure and emit flat arrays.

    Backoff epsilons are folded into their successor transitions; closure
    masses are computed exactly by solving the linear system of the epsilon
    subgraph (a geometric series), which requires total epsilon-cycle mass
    below one — a zero-weight epsilon loop is rejected as divergent.
    """
    if den_fst.semiring.kind != "log":
        raise DataError("denominator graph must be in the log semiring")
    if den_fst.start is None:
        raise DataError("denominator graph is empty")
    num_labels = len(den_fst.isyms) - 1

    eps_arcs: list[tuple[int, int, float]] = []
    for q in den_fst.states():
        for arc in den_fst.arcs(q):
            if arc.ilabel == EPS:
                eps_arcs.append((q, arc.nextstate, arc.weight))

    # closure[q] -> list of (state, natural-log mass) pairs, q itself included
    closure: dict[int, list[tuple[int, float]]] = {}
    if eps_arcs:
        involved = sorted({q for q, _, _ in eps_arcs} | {r for _, r, _ in eps_arcs})
        idx = {q: i for i, q in enumerate(involved)}
        n = len(involved)
        mass = np.zeros((n, n))
        for q, r, w in eps_arcs:
            mass[idx[q], idx[r]] += np.exp(w)
        eig = np.max(np.abs(np.linalg.eigvals(mass)))
        if eig >= 1.0 - 1e-10:
            raise NumericalError(
                f"divergent epsilon closure: cycle mass {eig:.6g} >= 1")
        total = np.linalg.solve(np.eye(n) - mass, np.eye(n))
        for q in involved:
            row = total[idx[q]]
            pairs = [(involved[j], float(np.log(row[j])))
                     for j in range(n) if row[j] > 0.0]
            closure[q] = pairs

    def closure_of(q: int) -> list[tuple[int, float]]:
        return closure.get(q, [(q, 0.0)])

    from_s, to_s, labels, weights = [], [], [], []
    final = np.full(den_fst.num_states, NEG_INF)
    for q in den_fst.states():
        fw = NEG_INF
        for r, d in closure_of(q):
            for arc in den_fst.arcs(r):
                if arc.ilabel != EPS:
                    from_s.append(q)
                    to_s.append(arc.nextstate)
                    labels.append(arc.ilabel - 1)
                    weights.append(d + arc.weight)
            f = den_fst.final_weight(r)
            if f != NEG_INF:
                fw = np.logaddexp(fw, d + f)
        final[q] = fw

    # keep states reachable from the start and able to reach a final weight
    fwd = {den_fst.start}
    frontier = [den_fst.start]
    succ: dict[int, list[int]] = {}
    pred: dict[int, list[int]] = {}
    for i in range(len(from_s)):
        succ.setdefault(from_s[i], []).append(to_s[i])
        pred.setdefault(to_s[i], []).append(from_s[i])
    while frontier:
        q = frontier.pop()
        for r in succ.get(q, ()):
            if r not in fwd:
                fwd.add(r)
                frontier.append(r)
    bwd = {q for q in range(den_fst.num_states) if final[q] != NEG_INF}
    frontier = list(bwd)
    while frontier:
        q = frontier.pop()
        for r in pred.get(q, ()):
            if r not in bwd:
                bwd.add(r)
                frontier.append(r)
    if den_fst.start not in (fwd & bwd):
        raise DataError("denominator graph has no complete path")
    # canonical numbering: start first, then original order (save/load
    # relies on the start being state 0)
    keep = sorted(fwd & bwd, key=lambda s: (s != den_fst.start, s))
    remap = {old: new for new, old in enumerate(keep)}

    sel = [i for i in range(len(from_s))
           if from_s[i] in remap and to_s[i] in remap]
    return DenominatorTable(
        num_states=len(keep),
        start=remap[den_fst.start],
        from_state=[remap[from_s[i]] for i in sel],
        to_state=[remap[to_s[i]] for i in sel],
        label=[labels[i] for i in sel],
        weight=[weights[i] for i in sel],
        final=final[keep],
        num_labels=num_labels,
    )


# ---------------------------------------------------------------------------
# Numerator: forward-backward on the extended label lattice
# ---------------------------------------------------------------------------

def _extended_labels(labels: Sequence[int], width: int) -> np.ndarray:
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    for i, lab in enumerate(labels):
        if not 1 <= lab < width:
            raise DataError(f"label id {lab} outside the state alphabet")
        ext[2 * i + 1] = lab
    return ext


def numerator_forward(posterior, labels: Sequence[int],
                      log_pl: float = 0.0) -> ForwardResult:
    """Reference-conditioned score and per-frame occupancy.

    ``score`` is ``log_pl`` plus the log-sum over all length-T state
    sequences collapsing to ``labels`` of the summed node potentials;
    ``occupancy[t][s]`` is the probability that such a sequence emits ``s``
    at frame ``t``.  The LM term is an additive constant with zero gradient.
    Too few frames for the label sequence yields -inf and is flagged.
    """
    post = _as_matrix(posterior)
    t_frames, width = post.shape
    labels = list(labels)
    ext = _extended_labels(labels, width)
    s_len = len(ext)

    # positions reachable by a skip: non-blank and different from u-2
    skip_ok = np.zeros(s_len, dtype=bool)
    if s_len > 2:
        skip_ok[2:] = (ext[2:] != 0) & (ext[2:] != ext[:-2])

    alpha = np.full((t_frames, s_len), NEG_INF)
    alpha[0, 0] = post[0, ext[0]]
    if s_len > 1:
        alpha[0, 1] = post[0, ext[1]]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        step = prev.copy()
        step[1:] = np.logaddexp(step[1:], prev[:-1])
        step[2:][skip_ok[2:]] = np.logaddexp(step[2:][skip_ok[2:]],
                                             prev[:-2][skip_ok[2:]])
        alpha[t] = step + post[t, ext]

    tail = alpha[t_frames - 1, s_len - 1]
    if s_len > 1:
        tail = np.logaddexp(tail, alpha[t_frames - 1, s_len - 2])
    path_mass = float(tail)
    if path_mass == NEG_INF:
        return ForwardResult(NEG_INF, np.zeros((t_frames, width)), False)

    beta = np.full((t_frames, s_len), NEG_INF)
    beta[t_frames - 1, s_len - 1] = 0.0
    if s_len > 1:
        beta[t_frames - 1, s_len - 2] = 0.0
    for t in range(t_frames - 2, -1, -1):
        nxt = beta[t + 1] + post[t + 1, ext]
        step = nxt.copy()
        step[:-1] = np.logaddexp(step[:-1], nxt[1:])
        step[:-2][skip_ok[2:]] = np.logaddexp(step[:-2][skip_ok[2:]], nxt[2:][skip_ok[2:]])
        beta[t] = step

    with np.errstate(over="ignore", under="ignore"):
        gamma = np.exp(alpha + beta - path_mass)
    occupancy = np.zeros((t_frames, width))
    for u in range(s_len):
        occupancy[:, ext[u]] += gamma[:, u]
    return ForwardResult(log_pl + path_mass, occupancy, True)


# ---------------------------------------------------------------------------
# Denominator: forward-backward over the flattened graph
# ---------------------------------------------------------------------------

def denominator_forward(posterior, den: DenominatorTable) -> ForwardResult:
    """Unconstrained score and per-frame occupancy over the denominator
    graph.  Exact for the flattened machine; any utterance length is
    supported because the transition table is time-invariant."""
    post = _as_matrix(posterior)
    t_frames, width = post.shape
    if width != den.num_labels:
        raise DataError(
            f"posterior width {width} != denominator alphabet {den.num_labels}")
    if den.num_transitions == 0:
        return ForwardResult(NEG_INF, np.zeros((t_frames, width)), False)

    src, dst, lab, w = den.from_state, den.to_state, den.label, den.weight
    alpha = np.full((t_frames + 1, den.num_states), NEG_INF)
    alpha[0, den.start] = 0.0
    for t in range(t_frames):
        contrib = alpha[t, src] + w + post[t, lab]
        np.logaddexp.at(alpha[t + 1], dst, contrib)

    score = _masked_lse(alpha[t_frames] + den.final)
    if score == NEG_INF:
        return ForwardResult(NEG_INF, np.zeros((t_frames, width)), False)

    beta = np.full((t_frames + 1, den.num_states), NEG_INF)
    beta[t_frames] = den.final
    for t in range(t_frames - 1, -1, -1):
        contrib = beta[t + 1, dst] + w + post[t, lab]
        np.logaddexp.at(beta[t], src, contrib)

    occupancy = np.zeros((t_frames, width))
    with np.errstate(over="ignore", under="ignore"):
        for t in range(t_frames):
            arc_post = np.exp(alpha[t, src] + w + post[t, lab]
                              + beta[t + 1, dst] - score)
            np.add.at(occupancy[t], lab, arc_post)
    return ForwardResult(score, occupancy, True)


def _masked_lse(values: np.ndarray) -> float:
    m = float(np.max(values)) if values.size else NEG_INF
    if m == NEG_INF:
        return NEG_INF
    return m + float(np.log(np.sum(np.exp(values - m))))


# ---------------------------------------------------------------------------
# Combined objective
# ---------------------------------------------------------------------------

def crf_loss(posterior, labels: Sequence[int], log_pl: float,
             den: DenominatorTable, alpha: float = 0.0) -> LossResult:
    """Full objective and gradient for one utterance.

    ``alpha`` weights the auxiliary alignment log-likelihood (the numerator
    with the LM constant removed).  Maximization convention; trainers
    negate.  An infeasible numerator against a finite denominator marks the
    utterance degenerate: -inf objective, zero gradient.
    """
    if alpha < 0:
        raise DataError("auxiliary weight must be >= 0")
    post = _as_matrix(posterior)
    num = numerator_forward(post, labels, log_pl)
    den_res = denominator_forward(post, den)
    if not num.feasible or not den_res.feasible:
        return LossResult(NEG_INF, np.zeros_like(post), num.score,
                          den_res.score, NEG_INF, degenerate=True)
    aux = num.score - log_pl
    objective = (num.score - den_res.score) + alpha * aux
    grad = (1.0 + alpha) * num.occupancy - den_res.occupancy
    return LossResult(objective, grad, num.score, den_res.score, aux)


@dataclass
class BatchLossResult:
    results: list[LossResult]
    mean_frame_objective: float
    degenerate_count: int


def _one_loss(args):
    post, labels, log_pl, den, alpha = args
    return crf_loss(post, labels, log_pl, den, alpha)


def batch_crf_loss(batch: Sequence[tuple], den: DenominatorTable,
                   alpha: float = 0.0, workers: int = 1) -> BatchLossResult:
    """Losses for a batch of (posterior, labels, log_pl) triples.

    Every utterance is processed at its own length; results are ordered by
    input index regardless of worker scheduling, and a degenerate utterance
    is flagged without poisoning the rest.
    """
    widths = {_as_matrix(p).shape[1] for p, _, _ in batch}
    if len(widths) > 1:
        raise DataError("posteriors in a batch must share their width")
    jobs = [(p, list(l), lp, den, alpha) for p, l, lp in batch]
    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_one_loss, jobs)
    else:
        results = [_one_loss(j) for j in jobs]
    valid = [(r.objective / _as_matrix(b[0]).shape[0], r)
             for b, r in zip(batch, results) if not r.degenerate]
    mean = float(np.mean([v for v, _ in valid])) if valid else NEG_INF
    return BatchLossResult(results, mean, sum(r.degenerate for r in results))
