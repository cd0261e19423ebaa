"""Backoff n-gram language models: estimation, ARPA round-trip, sentence
scoring, and conversion to a WFST acceptor.

Entries are stored in log10 per the ARPA convention; everything leaving this
module (scores, arc weights) is natural log.
"""
from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

from .errors import ArpaError, DataError
from .semiring import LOG, ONE, Semiring
from .symbols import EPS_NAME, SymbolTable
from .wfst import EPS, Wfst

BOS = "<s>"
EOS = "</s>"
LN10 = math.log(10.0)

# log10 probability conventionally assigned to <s>, which is never predicted
BOS_LOG10 = -99.0


class NGramModel:
    """Backoff n-gram model over a closed vocabulary.

    ``entries`` maps an id tuple to ``(log10 prob, log10 backoff or None)``.
    ``vocab`` is a symbol table with <eps> at 0 and the boundary symbols
    <s>, </s> occupying the two highest ids, so that dropping them yields the
    symbol table of the event alphabet.
    """

    def __init__(self, order: int, vocab: SymbolTable,
                 entries: dict[tuple[int, ...], tuple[float, float | None]]):
        if order < 1:
            raise DataError("n-gram order must be >= 1")
        names = list(vocab)
        if names[-2:] != [BOS, EOS]:
            raise DataError("vocabulary must end with <s>, </s>")
        self.order = order
        self.vocab = vocab
        self.entries = dict(entries)
        self.bos = vocab.find(BOS)
        self.eos = vocab.find(EOS)
        # conditioning contexts: short-enough stored n-grams plus every
        # proper prefix of a stored n-gram (prefixes may lack own entries)
        self._contexts = {()}
        for g in self.entries:
            if len(g) < order and g[-1] != self.eos:
                self._contexts.add(g)
            p = g[:-1]
            if p and p[-1] != self.eos:
                self._contexts.add(p)

    # -- lookups ------------------------------------------------------------

    def ids(self, names: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.vocab.find(n) for n in names)

    def backoff_log10(self, context: tuple[int, ...]) -> float:
        entry = self.entries.get(context)
        if entry is None or entry[1] is None:
            return 0.0
        return entry[1]

    def conditional_log10(self, context: tuple[int, ...], word: int) -> float:
        """log10 p(word | context) via the backoff recursion."""
        context = context[-(self.order - 1):] if self.order > 1 else ()
        total = 0.0
        while True:
            entry = self.entries.get(context + (word,))
            if entry is not None:
                return total + entry[0]
            if not context:
                raise DataError(
                    f"symbol {self.vocab.name(word)!r} not covered by the model")
            total += self.backoff_log10(context)
            context = context[1:]

    def event_symbols(self) -> list[str]:
        """Vocabulary without the boundary symbols, in id order."""
        return [s for s in self.vocab if s not in (EPS_NAME, BOS, EOS)]

    def fst_symbol_table(self) -> SymbolTable:
        return SymbolTable([EPS_NAME, *self.event_symbols()])

    def __eq__(self, other):
        return (isinstance(other, NGramModel) and self.order == other.order
                and self.vocab == other.vocab and self.entries == other.entries)


# ---------------------------------------------------------------------------
# Estimation
# ---------------------------------------------------------------------------

def _as_tokens(sentence) -> list[str]:
    if isinstance(sentence, str):
        return sentence.split()
    return list(sentence)


def estimate(corpus: Sequence, order: int, discount: float = 0.5,
             vocab: Sequence[str] | None = None) -> NGramModel:
    """Absolute-discounting backoff model from a corpus of sentences.

    Interpolated form: at each level the discounted mass is spread over the
    lower level, and at the unigram level uniformly over the vocabulary, so
    every context distribution sums to one exactly.  The result is stored in
    standard backoff (ARPA) form.  ``vocab`` fixes a closed vocabulary and
    its symbol order; by default the vocabulary is the sorted set of corpus
    tokens.
    """
    if not corpus:
        raise DataError("empty corpus")
    if order < 1:
        raise DataError("n-gram order must be >= 1")
    if not 0.0 < discount < 1.0:
        raise DataError("discount must be in (0, 1)")

    sentences = [_as_tokens(s) for s in corpus]
    seen = sorted({tok for sent in sentences for tok in sent})
    for tok in seen:
        if tok in (BOS, EOS, EPS_NAME):
            raise DataError(f"corpus token {tok!r} is reserved")
    if vocab is None:
        names = seen
    else:
        names = list(vocab)
        missing = set(seen) - set(names)
        if missing:
            raise DataError(f"corpus tokens outside vocabulary: {sorted(missing)}")
    table = SymbolTable([EPS_NAME, *names, BOS, EOS])
    bos, eos = table.find(BOS), table.find(EOS)
    event_ids = [table.find(n) for n in names] + [eos]

    counts: list[Counter] = [Counter() for _ in range(order + 1)]
    for sent in sentences:
        padded = [bos] + [table.find(t) for t in sent] + [eos]
        for i, tok in enumerate(padded):
            if tok == bos:
                continue
            for n in range(1, order + 1):
                if i - n + 1 >= 0:
                    counts[n][tuple(padded[i - n + 1:i + 1])] += 1

    # interpolated conditional probabilities, built bottom-up
    uni_total = sum(counts[1].values())
    uni_types = len(counts[1])
    uni_reserve = discount * uni_types / uni_total
    probs: dict[tuple[int, ...], float] = {}
    for w in event_ids:
        c = counts[1].get((w,), 0)
        probs[(w,)] = max(c - discount, 0.0) / uni_total + uni_reserve / len(event_ids)

    bows: dict[tuple[int, ...], float] = {}
    for n in range(2, order + 1):
        ctx_totals: Counter = Counter()
        ctx_types: Counter = Counter()
        for gram, c in counts[n].items():
            ctx_totals[gram[:-1]] += c
            ctx_types[gram[:-1]] += 1
        for ctx, total in ctx_totals.items():
            bows[ctx] = discount * ctx_types[ctx] / total
        for gram, c in counts[n].items():
            ctx = gram[:-1]
            # suffix windows of counted windows are themselves counted
            probs[gram] = (c - discount) / ctx_totals[ctx] + bows[ctx] * probs[gram[1:]]

    entries: dict[tuple[int, ...], tuple[float, float | None]] = {}
    for gram, p in probs.items():
        bow = bows.get(gram)
        bow10 = math.log10(bow) if bow is not None else None
        entries[gram] = (math.log10(p), bow10)
    bos_bow = bows.get((bos,))
    entries[(bos,)] = (BOS_LOG10,
                       math.log10(bos_bow) if bos_bow is not None else None)
    return NGramModel(order, table, entries)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def score_sequence(lm: NGramModel, labels: Sequence[str]) -> float:
    """Natural-log probability of the sequence with implicit sentence
    boundaries."""
    for name in labels:
        if name not in lm.vocab or name in (BOS, EOS, EPS_NAME):
            raise DataError(f"label {name!r} not in LM vocabulary")
    history = (lm.bos,)
    total = 0.0
    for word in list(lm.ids(labels)) + [lm.eos]:
        total += lm.conditional_log10(history, word)
        history = (history + (word,))[-(lm.order - 1):] if lm.order > 1 else ()
    return total * LN10


# ---------------------------------------------------------------------------
# ARPA serialization
# ---------------------------------------------------------------------------

def parse_arpa(source) -> NGramModel:
    """Parse an ARPA model from a string, an open file, or a line iterable."""
    if isinstance(source, str):
        lines = source.splitlines()
    elif hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = [ln.rstrip("\n") for ln in source]

    pos = 0

    def next_nonblank():
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            return None, len(lines)
        pos += 1
        return lines[pos - 1].strip(), pos

    line, ln = next_nonblank()
    if line != "\\data\\":
        raise ArpaError("expected \\data\\ header", ln)
    declared: dict[int, int] = {}
    while True:
        line, ln = next_nonblank()
        if line is None:
            raise ArpaError("unexpected end of file in \\data\\ section", ln)
        if line.startswith("ngram "):
            try:
                n_str, count_str = line[len("ngram "):].split("=")
                declared[int(n_str)] = int(count_str)
            except ValueError:
                raise ArpaError(f"bad count line: {line!r}", ln) from None
        else:
            break
    if not declared:
        raise ArpaError("no ngram counts declared", ln)
    order = max(declared)
    if sorted(declared) != list(range(1, order + 1)):
        raise ArpaError("non-contiguous ngram orders declared", ln)

    raw: dict[int, list[tuple[float, tuple[str, ...], float | None]]] = {}
    for n in range(1, order + 1):
        if line != f"\\{n}-grams:":
            raise ArpaError(f"expected \\{n}-grams: section, got {line!r}", ln)
        grams = []
        for _ in range(declared[n]):
            line, ln = next_nonblank()
            if line is None or line.startswith("\\"):
                raise ArpaError(
                    f"\\{n}-grams: section declares {declared[n]} entries "
                    f"but lists {len(grams)}", ln)
            parts = line.split()
            if len(parts) == n + 1:
                prob, words, bow = parts[0], parts[1:], None
            elif len(parts) == n + 2:
                prob, words, bow = parts[0], parts[1:-1], parts[-1]
            else:
                raise ArpaError(f"bad {n}-gram line: {line!r}", ln)
            try:
                grams.append((float(prob), tuple(words),
                              float(bow) if bow is not None else None))
            except ValueError:
                raise ArpaError(f"bad number on line: {line!r}", ln) from None
        raw[n] = grams
        line, ln = next_nonblank()
    if line != "\\end\\":
        raise ArpaError("missing \\end\\ marker", ln)

    names = []
    saw_eos = False
    for _, words, _ in raw[1]:
        w = words[0]
        if w == EOS:
            saw_eos = True
        elif w == EPS_NAME:
            raise ArpaError(f"reserved symbol {w!r} in unigrams")
        elif w != BOS:
            names.append(w)
    if not saw_eos:
        raise ArpaError(f"model lacks {EOS!r}")
    table = SymbolTable([EPS_NAME, *names, BOS, EOS])

    entries: dict[tuple[int, ...], tuple[float, float | None]] = {}
    for n in range(1, order + 1):
        for prob, words, bow in raw[n]:
            try:
                gram = tuple(table.find(w) for w in words)
            except DataError:
                raise ArpaError(f"{n}-gram uses unknown symbol: {words}") from None
            entries[gram] = (prob, bow)
    return NGramModel(order, table, entries)


def emit_arpa(lm: NGramModel) -> str:
    """Serialize to ARPA text; deterministic, entries sorted by symbol id."""
    by_order: dict[int, list[tuple[tuple[int, ...], tuple[float, float | None]]]] = {}
    for gram, entry in lm.entries.items():
        by_order.setdefault(len(gram), []).append((gram, entry))
    out = ["\\data\\"]
    for n in range(1, lm.order + 1):
        out.append(f"ngram {n}={len(by_order.get(n, []))}")
    for n in range(1, lm.order + 1):
        out.append("")
        out.append(f"\\{n}-grams:")
        for gram, (prob, bow) in sorted(by_order.get(n, [])):
            words = " ".join(lm.vocab.name(i) for i in gram)
            if bow is None:
                out.append(f"{prob:.6f}\t{words}")
            else:
                out.append(f"{prob:.6f}\t{words}\t{bow:.6f}")
    out.append("")
    out.append("\\end\\")
    out.append("")
    return "\n".join(out)


# ---------------------------------------------------------------------------
# WFST conversion
# ---------------------------------------------------------------------------

def lm_to_fst(lm: NGramModel, semiring: Semiring = LOG) -> Wfst:
    """Acceptor with one state per context and epsilon backoff arcs.

    Every stored n-gram becomes a weighted arc from its context state to the
    longest stored suffix context; backoff weights ride on epsilon arcs to
    the shortened context.  End-of-sentence probabilities become final
    weights.  Because backoff uses plain epsilon (not failure) arcs, path
    sums can slightly exceed true probability mass where an explicit n-gram
    coexists with its backoff route; the best path through a sequence seen
    verbatim matches the backoff-recursion score.
    """
    syms = lm.fst_symbol_table()
    fst = Wfst(semiring, syms, syms)

    contexts = sorted(lm._contexts, key=lambda c: (len(c), c))
    state_of = {ctx: fst.add_state() for ctx in contexts}

    def suffix_state(gram: tuple[int, ...]) -> int:
        limit = lm.order - 1
        for k in range(min(len(gram), limit), -1, -1):
            ctx = gram[len(gram) - k:]
            if ctx in state_of:
                return state_of[ctx]
        return state_of[()]

    bos_ctx = (lm.bos,)
    if bos_ctx in state_of:
        start = state_of[bos_ctx]
    else:
        start = fst.add_state()
        bow = lm.backoff_log10(bos_ctx)
        fst.add_arc(start, EPS, EPS, bow * LN10, state_of[()])
    fst.set_start(start)

    for ctx in contexts:
        if not ctx:
            continue
        bow = lm.backoff_log10(ctx)
        fst.add_arc(state_of[ctx], EPS, EPS, bow * LN10, suffix_state(ctx[1:]))

    for gram, (prob, _) in sorted(lm.entries.items()):
        word = gram[-1]
        src_ctx = gram[:-1]
        if src_ctx not in state_of:
            continue  # unreachable context (degenerate hand-built model)
        src = state_of[src_ctx]
        if word == lm.eos:
            fst.set_final(src, prob * LN10)
        elif word == lm.bos:
            continue
        else:
            # event ids coincide in the model vocabulary and the fst table
            fst.add_arc(src, word, word, prob * LN10, suffix_state(gram))

    if not lm.entries:
        fst.set_final(state_of[()], ONE)
    return fst
