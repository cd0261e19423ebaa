import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ctc_crf import (Alphabet, build_denominator_graph, estimate,
                     flatten_denominator)


@pytest.fixture
def ab2():
    return Alphabet(["a", "b"])


@pytest.fixture
def ab1():
    return Alphabet(["a"])


@pytest.fixture
def unigram_ab(ab2):
    """Uniform-ish unigram over {a, b} from a balanced corpus."""
    return estimate([["a"], ["b"]], order=1, discount=0.5,
                    vocab=list(ab2.labels))


@pytest.fixture
def bigram_ab(ab2):
    return estimate([["a", "b"], ["b", "a"], ["a"]], order=2, discount=0.5,
                    vocab=list(ab2.labels))


@pytest.fixture
def den_table_ab(ab2, bigram_ab):
    return flatten_denominator(build_denominator_graph(ab2, bigram_ab))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
