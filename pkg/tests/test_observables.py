import math
from fractions import Fraction

import numpy as np
import pytest

from edglab.kernels import make_product_kernel
from edglab.observables import (
    empirical_measure,
    empirical_measure_exact,
    moment,
    pair_with,
    size_biased_measure,
)
from edglab.particle import CountState


@pytest.fixture
def state():
    # L = 10 sites: five empty, three singletons, one pair, one triple
    return CountState(make_product_kernel(1.0), 10, {1: 3, 2: 1, 3: 1})


def test_empirical_measure_normalized(state):
    f = empirical_measure(state)
    assert f.f_hat == {0: 0.5, 1: 0.3, 2: 0.1, 3: 0.1}
    assert math.fsum(f.f_hat.values()) == 1.0
    arr = f.as_array()
    assert arr.shape == (4,)
    assert arr.sum() == pytest.approx(1.0)
    padded = f.as_array(kmax=6)
    assert padded.shape == (7,)
    assert padded[4:].sum() == 0.0


def test_size_biased_measure(state):
    p = size_biased_measure(state)
    # N = 8 particles: 3 on singletons, 2 on the pair, 3 on the triple
    assert p.p_hat == {1: 3 / 8, 2: 2 / 8, 3: 3 / 8}
    assert math.fsum(p.p_hat.values()) == pytest.approx(1.0)


def test_size_biased_needs_particles():
    empty = CountState(make_product_kernel(1.0), 4, {})
    with pytest.raises(ValueError):
        size_biased_measure(empty)


def test_moments(state):
    # direct: (3*1 + 1*4 + 1*9) / 10 for n = 2
    assert moment(state, 0) == pytest.approx(0.5)   # occupied fraction
    assert moment(state, 1) == pytest.approx(0.8)   # density
    assert moment(state, 2) == pytest.approx(1.6)


def test_pair_with(state):
    f = empirical_measure(state)
    assert pair_with(f, lambda k: 1.0) == pytest.approx(1.0)
    assert pair_with(f, lambda k: float(k)) == pytest.approx(moment(state, 1))
    assert pair_with(f, lambda k: float(k == 0)) == pytest.approx(0.5)


def test_exact_rationals(state):
    f = empirical_measure_exact(state)
    assert f[0] == Fraction(1, 2)
    assert sum(f.values()) == Fraction(1)
