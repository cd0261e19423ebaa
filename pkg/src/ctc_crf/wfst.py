"""Weighted finite-state transducers: data model, composition, trimming,
the blank-collapsing topology transducer, and graph assembly.

Machines are built mutably and treated as immutable afterwards; nothing here
mutates a machine it did not create, so constructed graphs are safe to share
across worker processes.
"""
from __future__ import annotations

from collections import deque
from typing import NamedTuple, Sequence

from .errors import DataError
from .semiring import LOG, ONE, Semiring
from .symbols import EPS, Alphabet, SymbolTable


class Arc(NamedTuple):
    ilabel: int
    olabel: int
    weight: float
    nextstate: int


class Wfst:
    """A transducer with per-state arc lists, explicit per-state final
    weights, and symbol tables carried alongside."""

    def __init__(self, semiring: Semiring, isyms: SymbolTable, osyms: SymbolTable):
        self.semiring = semiring
        self.isyms = isyms
        self.osyms = osyms
        self._arcs: list[list[Arc]] = []
        self.start: int | None = None
        self.finals: dict[int, float] = {}

    # -- construction -----------------------------------------------------

    def add_state(self) -> int:
        self._arcs.append([])
        return len(self._arcs) - 1

    def add_arc(self, state: int, ilabel: int, olabel: int, weight: float,
                nextstate: int) -> None:
        if not 0 <= nextstate < len(self._arcs):
            raise DataError(f"arc target {nextstate} does not exist")
        if not 0 <= ilabel < len(self.isyms):
            raise DataError(f"input label {ilabel} not in symbol table")
        if not 0 <= olabel < len(self.osyms):
            raise DataError(f"output label {olabel} not in symbol table")
        self._arcs[state].append(Arc(ilabel, olabel, float(weight), nextstate))

    def set_start(self, state: int) -> None:
        self.start = state

    def set_final(self, state: int, weight: float = ONE) -> None:
        self.finals[state] = float(weight)

    # -- inspection --------------------------------------------------------

    @property
    def num_states(self) -> int:
        return len(self._arcs)

    @property
    def num_arcs(self) -> int:
        return sum(len(a) for a in self._arcs)

    def arcs(self, state: int) -> Sequence[Arc]:
        return self._arcs[state]

    def states(self) -> range:
        return range(len(self._arcs))

    def final_weight(self, state: int) -> float:
        return self.finals.get(state, self.semiring.zero)

    def is_empty(self) -> bool:
        return self.start is None or not self.finals

    def __eq__(self, other):
        return (isinstance(other, Wfst)
                and self.semiring.kind == other.semiring.kind
                and self.start == other.start
                and self.finals == other.finals
                and self._arcs == other._arcs
                and self.isyms == other.isyms
                and self.osyms == other.osyms)

    def __repr__(self):
        return (f"Wfst({self.semiring.kind}, states={self.num_states}, "
                f"arcs={self.num_arcs}, finals={len(self.finals)})")


def _empty_like(semiring, isyms, osyms) -> Wfst:
    return Wfst(semiring, isyms, osyms)


# ---------------------------------------------------------------------------
# Blank-collapsing topology
# ---------------------------------------------------------------------------

def map_b(pi: Sequence[int], alphabet: Alphabet) -> list[int]:
    """Collapse runs of identical state symbols, then drop blanks.

    Reference implementation of the state-to-label mapping; the topology
    transducer built below must agree with it on every input.
    """
    out = []
    prev = None
    for sym in pi:
        if not 0 <= sym < alphabet.num_state_symbols:
            raise DataError(f"state symbol {sym} out of range")
        if sym != prev and sym != 0:
            out.append(sym)
        prev = sym
    return out


def build_ctc_topology(alphabet: Alphabet, semiring: Semiring = LOG) -> Wfst:
    """Transducer realizing the blank-collapsing map with |labels|+1 states.

    State 0 is start and keeps a blank self-loop; each label owns one state
    with an emitting entry arc from 0, a non-emitting self-loop, a blank arc
    back to 0, and emitting cross arcs to every other label state.  All states
    are final and every arc carries weight one, so path weights are decided
    entirely by whatever the topology is composed with.
    """
    n = len(alphabet)
    fst = Wfst(semiring, alphabet.pi_symbol_table(), alphabet.label_symbol_table())
    for _ in range(n + 1):
        fst.add_state()
    fst.set_start(0)
    for s in range(n + 1):
        fst.set_final(s, ONE)

    blank_il = 1  # fst id of <blk> (state symbol 0)

    fst.add_arc(0, blank_il, EPS, ONE, 0)
    for i in range(1, n + 1):
        # label i occupies state i; fst ilabel i+1, olabel i
        fst.add_arc(0, i + 1, i, ONE, i)
    for i in range(1, n + 1):
        fst.add_arc(i, i + 1, EPS, ONE, i)
        fst.add_arc(i, blank_il, EPS, ONE, 0)
        for j in range(1, n + 1):
            if j != i:
                fst.add_arc(i, j + 1, j, ONE, j)
    return fst


# ---------------------------------------------------------------------------
# Trimming
# ---------------------------------------------------------------------------

def trim(a: Wfst) -> Wfst:
    """Drop states that are not on any start-to-final path.

    State numbering of the surviving states is preserved in order, so
    trimming an already-trim machine returns an identical machine.
    """
    if a.start is None:
        return _empty_like(a.semiring, a.isyms, a.osyms)

    reachable = set()
    queue = deque([a.start])
    reachable.add(a.start)
    while queue:
        q = queue.popleft()
        for arc in a.arcs(q):
            if arc.nextstate not in reachable:
                reachable.add(arc.nextstate)
                queue.append(arc.nextstate)

    rev: dict[int, list[int]] = {}
    for q in a.states():
        for arc in a.arcs(q):
            rev.setdefault(arc.nextstate, []).append(q)
    coaccessible = set(a.finals)
    queue = deque(a.finals)
    while queue:
        q = queue.popleft()
        for p in rev.get(q, ()):
            if p not in coaccessible:
                coaccessible.add(p)
                queue.append(p)

    keep = sorted(reachable & coaccessible)
    if a.start not in coaccessible:
        return _empty_like(a.semiring, a.isyms, a.osyms)

    remap = {old: new for new, old in enumerate(keep)}
    out = Wfst(a.semiring, a.isyms, a.osyms)
    for _ in keep:
        out.add_state()
    out.set_start(remap[a.start])
    for old in keep:
        for arc in a.arcs(old):
            if arc.nextstate in remap:
                out.add_arc(remap[old], arc.ilabel, arc.olabel, arc.weight,
                            remap[arc.nextstate])
        if old in a.finals:
            out.set_final(remap[old], a.finals[old])
    return out


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

# Composition filter states.  Runs of left-alone / right-alone epsilon moves
# may not alternate, and a simultaneous epsilon move is only taken from the
# neutral state; otherwise path pairs through epsilons would be counted more
# than once (or, with a naive sequential scheme, dropped).
_F_NEUTRAL, _F_LEFT, _F_RIGHT = 0, 1, 2


def compose(a: Wfst, b: Wfst) -> Wfst:
    """Compose two machines sharing an inner symbol table.

    Epsilon output arcs of ``a`` and epsilon input arcs of ``b`` are handled
    with a three-state composition filter so that every pair of compatible
    paths contributes exactly once.  The result is trimmed.
    """
    if a.semiring.kind != b.semiring.kind:
        raise DataError(
            f"semiring mismatch: {a.semiring.kind} vs {b.semiring.kind}")
    if a.osyms.digest != b.isyms.digest:
        raise DataError("symbol table mismatch between left output and right input")

    sr = a.semiring
    out = Wfst(sr, a.isyms, b.osyms)
    if a.start is None or b.start is None:
        return out

    b_by_ilabel: dict[int, dict[int, list[Arc]]] = {}

    def b_arcs_for(qb: int) -> dict[int, list[Arc]]:
        idx = b_by_ilabel.get(qb)
        if idx is None:
            idx = {}
            for arc in b.arcs(qb):
                idx.setdefault(arc.ilabel, []).append(arc)
            b_by_ilabel[qb] = idx
        return idx

    start_key = (a.start, b.start, _F_NEUTRAL)
    state_ids = {start_key: out.add_state()}
    out.set_start(0)
    queue = deque([start_key])

    def state_for(key):
        sid = state_ids.get(key)
        if sid is None:
            sid = out.add_state()
            state_ids[key] = sid
            queue.append(key)
        return sid

    while queue:
        key = queue.popleft()
        qa, qb, f = key
        src = state_ids[key]
        b_idx = b_arcs_for(qb)
        b_eps = b_idx.get(EPS, ())

        for arc_a in a.arcs(qa):
            if arc_a.olabel != EPS:
                for arc_b in b_idx.get(arc_a.olabel, ()):
                    dst = state_for((arc_a.nextstate, arc_b.nextstate, _F_NEUTRAL))
                    out.add_arc(src, arc_a.ilabel, arc_b.olabel,
                                sr.times(arc_a.weight, arc_b.weight), dst)
            else:
                if f != _F_RIGHT:
                    dst = state_for((arc_a.nextstate, qb, _F_LEFT))
                    out.add_arc(src, arc_a.ilabel, EPS, arc_a.weight, dst)
                if f == _F_NEUTRAL:
                    for arc_b in b_eps:
                        dst = state_for((arc_a.nextstate, arc_b.nextstate, _F_NEUTRAL))
                        out.add_arc(src, arc_a.ilabel, arc_b.olabel,
                                    sr.times(arc_a.weight, arc_b.weight), dst)
        if f != _F_LEFT:
            for arc_b in b_eps:
                dst = state_for((qa, arc_b.nextstate, _F_RIGHT))
                out.add_arc(src, EPS, arc_b.olabel, arc_b.weight, dst)

        if qa in a.finals and qb in b.finals:
            out.set_final(src, sr.times(a.finals[qa], b.finals[qb]))

    return trim(out)


def identity_acceptor(syms: SymbolTable, semiring: Semiring = LOG) -> Wfst:
    """Single-state acceptor looping over every non-epsilon symbol with
    weight one; the identity element of composition."""
    fst = Wfst(semiring, syms, syms)
    s = fst.add_state()
    fst.set_start(s)
    fst.set_final(s, ONE)
    for sym_id in range(1, len(syms)):
        fst.add_arc(s, sym_id, sym_id, ONE, s)
    return fst


# ---------------------------------------------------------------------------
# Graph assembly
# ---------------------------------------------------------------------------

def build_denominator_graph(alphabet: Alphabet, lm) -> Wfst:
    """Compose the topology transducer with the label LM acceptor.

    The result is a log-semiring machine whose complete length-T paths carry
    the LM mass of the collapsed label sequence; summed against per-frame
    node potentials it yields the normalizer of the sequence posterior.
    """
    from .lm import lm_to_fst  # local import to avoid a module cycle

    g = lm_to_fst(lm, semiring=LOG)
    if g.isyms.digest != alphabet.label_symbol_table().digest:
        raise DataError("label LM vocabulary does not match the alphabet")
    t = build_ctc_topology(alphabet, semiring=LOG)
    return trim(compose(t, g))


def build_lexicon_fst(alphabet: Alphabet, lexicon: dict[str, list[list[str]]],
                      word_syms: SymbolTable,
                      semiring: Semiring) -> Wfst:
    """Closure of per-word label chains: first label emits the word, the rest
    emit epsilon.  Words are required to have at least one pronunciation."""
    label_syms = alphabet.label_symbol_table()
    fst = Wfst(semiring, label_syms, word_syms)
    root = fst.add_state()
    fst.set_start(root)
    fst.set_final(root, ONE)
    for word_id in range(1, len(word_syms)):
        word = word_syms.name(word_id)
        prons = lexicon.get(word)
        if not prons:
            raise DataError(f"word {word!r} has no pronunciation")
        for pron in prons:
            if not pron:
                raise DataError(f"word {word!r} has an empty pronunciation")
            cur = root
            for i, label in enumerate(pron):
                lab_id = label_syms.find(label)
                last = i == len(pron) - 1
                dst = root if last else fst.add_state()
                fst.add_arc(cur, lab_id, word_id if i == 0 else EPS, ONE, dst)
                cur = dst
    return fst


def build_decoding_graph(alphabet: Alphabet, word_lm,
                         lexicon: dict[str, list[list[str]]] | None = None) -> Wfst:
    """Tropical-semiring search graph: topology o (lexicon o word LM).

    Without a lexicon the labels themselves are the words.  Input labels are
    state symbols, output labels are words.
    """
    from .lm import lm_to_fst

    from .semiring import TROPICAL

    g = lm_to_fst(word_lm, semiring=TROPICAL)
    if len(g.isyms) <= 1:
        raise DataError("word LM has an empty vocabulary")
    if lexicon is None:
        if g.isyms.digest != alphabet.label_symbol_table().digest:
            raise DataError("lexicon-free decoding needs a word LM over the labels")
        lg = g
    else:
        lex = build_lexicon_fst(alphabet, lexicon, g.isyms, TROPICAL)
        lg = compose(lex, g)
    t = build_ctc_topology(alphabet, semiring=TROPICAL)
    return trim(compose(t, lg))


# ---------------------------------------------------------------------------
# Text format
# ---------------------------------------------------------------------------

def write_fst_text(fst: Wfst, path) -> None:
    """One arc per line ``src dst ilabel olabel weight`` (tab separated),
    final states as ``state weight``; state 0 is the start state."""
    order = list(fst.states())
    if fst.start is not None and fst.start != 0:
        order[0], order[fst.start] = order[fst.start], order[0]
    remap = {old: new for new, old in enumerate(order)}
    with open(path, "w", encoding="utf-8") as f:
        for old in order:
            src = remap[old]
            for arc in fst.arcs(old):
                f.write(f"{src}\t{remap[arc.nextstate]}\t{arc.ilabel}\t"
                        f"{arc.olabel}\t{arc.weight:.9g}\n")
        for old in order:
            if old in fst.finals:
                f.write(f"{remap[old]}\t{fst.finals[old]:.9g}\n")


def read_fst_text(path, semiring: Semiring, isyms: SymbolTable,
                  osyms: SymbolTable) -> Wfst:
    arcs = []
    finals = []
    max_state = -1
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) == 5:
                src, dst, il, ol = (int(p) for p in parts[:4])
                arcs.append((src, dst, il, ol, float(parts[4])))
                max_state = max(max_state, src, dst)
            elif len(parts) == 2:
                state = int(parts[0])
                finals.append((state, float(parts[1])))
                max_state = max(max_state, state)
            else:
                raise DataError(f"{path}: bad fst line {ln}: {line!r}")
    fst = Wfst(semiring, isyms, osyms)
    if max_state < 0:
        return fst
    for _ in range(max_state + 1):
        fst.add_state()
    fst.set_start(0)
    for src, dst, il, ol, w in arcs:
        fst.add_arc(src, il, ol, w, dst)
    for state, w in finals:
        fst.set_final(state, w)
    return fst
