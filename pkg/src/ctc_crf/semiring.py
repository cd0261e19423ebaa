"""Log and tropical semirings over natural-log weights.

Weights are plain floats in natural log. The additive identity is a genuine
-inf (never a large negative stand-in), so ``plus(ZERO, w) == w`` exactly.
"""
from __future__ import annotations

import math

import numpy as np

ZERO = float("-inf")
ONE = 0.0


def log_add(a: float, b: float) -> float:
    """Stable log(exp(a) + exp(b)); exact when either operand is -inf."""
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def logsumexp(values) -> float:
    """Stable log-sum-exp of a 1-D array; -inf for an all-ZERO input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return ZERO
    m = float(np.max(arr))
    if m == ZERO:
        return ZERO
    return m + float(np.log(np.sum(np.exp(arr - m))))


class Semiring:
    """Operations for combining path weights: plus along alternatives, times
    along a path."""

    kind: str = ""
    zero = ZERO
    one = ONE

    @staticmethod
    def plus(a: float, b: float) -> float:
        raise NotImplementedError

    @staticmethod
    def times(a: float, b: float) -> float:
        return a + b

    def __repr__(self):
        return f"Semiring({self.kind})"


class _LogSemiring(Semiring):
    kind = "log"

    @staticmethod
    def plus(a: float, b: float) -> float:
        return log_add(a, b)


class _TropicalSemiring(Semiring):
    kind = "tropical"

    @staticmethod
    def plus(a: float, b: float) -> float:
        return a if a >= b else b


LOG = _LogSemiring()
TROPICAL = _TropicalSemiring()
