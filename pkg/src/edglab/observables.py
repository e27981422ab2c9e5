"""Empirical functionals of a configuration: F_k, size-biased P_k, moments."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np


@dataclass
class EmpiricalMeasure:
    """Fraction of sites at each occupancy; sums to 1 exactly (rationals n_k/L)."""

    f_hat: dict
    L: int
    N: int

    def as_array(self, kmax=None):
        km = max(self.f_hat) if kmax is None else kmax
        arr = np.zeros(km + 1)
        for k, v in self.f_hat.items():
            if k <= km:
                arr[k] = v
        return arr


@dataclass
class SizeBiasedMeasure:
    """Fraction of particles on sites of each occupancy; charges k >= 1 only."""

    p_hat: dict
    L: int
    N: int


def _counts_with_empty(state):
    counts = state.counts_dict()
    occupied = sum(counts.values())
    n0 = state.L - occupied
    return counts, n0


def empirical_measure(state) -> EmpiricalMeasure:
    """F_k = n_k / L, including the implicit count of empty sites."""
    counts, n0 = _counts_with_empty(state)
    f = {k: n / state.L for k, n in counts.items()}
    if n0 > 0:
        f[0] = n0 / state.L
    return EmpiricalMeasure(f_hat=f, L=state.L, N=state.N)


def size_biased_measure(state) -> SizeBiasedMeasure:
    """P_k = k n_k / N; undefined for N = 0."""
    if state.N < 1:
        raise ValueError("size-biased measure needs at least one particle")
    counts, _ = _counts_with_empty(state)
    p = {k: k * n / state.N for k, n in counts.items()}
    return SizeBiasedMeasure(p_hat=p, L=state.L, N=state.N)


def moment(state, n: int) -> float:
    """n-th occupancy moment (1/L) sum_x eta_x^n, via compensated summation."""
    counts, _ = _counts_with_empty(state)
    total = 0.0
    comp = 0.0
    for k in sorted(counts):
        term = float(k) ** n * counts[k]
        y = term - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total / state.L


def pair_with(measure: EmpiricalMeasure, h) -> float:
    """Pairing <F, h> = sum_k F_k h(k) over the measure's support."""
    return math.fsum(v * h(k) for k, v in measure.f_hat.items())


def empirical_measure_exact(state) -> dict:
    """F_k as exact rationals n_k/L (for invariant tests)."""
    counts, n0 = _counts_with_empty(state)
    f = {k: Fraction(n, state.L) for k, n in counts.items()}
    f[0] = Fraction(n0, state.L)
    return f
