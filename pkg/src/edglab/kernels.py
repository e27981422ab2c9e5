"""Exchange kernels c(k, l): construction, evaluation and validation.

A kernel gives the rate at which a cluster of size k hands one monomer to a
cluster of size l.  All kernels here are symmetric, vanish when either
argument is 0, and carry caller-declared growth metadata (mu, nu, C) for the
superlinear bound c(k,l) <= C(k^mu l^nu + k^nu l^mu).  The metadata is
verified exhaustively by :func:`verify_kernel`, never inferred from samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


def size_powers(kmax: int, gamma: float) -> np.ndarray:
    """Array [k^gamma for k = 0..kmax] with the convention 0^gamma = 0."""
    p = np.zeros(kmax + 1)
    if kmax >= 1:
        p[1:] = np.arange(1, kmax + 1, dtype=float) ** gamma
    return p


@dataclass(frozen=True)
class Kernel:
    """Symmetric exchange rate with growth metadata.

    ``rate(k, l)`` is pure and total for built-in kernels; table-backed
    kernels raise on queries beyond their range rather than extrapolating.
    Instances are immutable and safe to share across threads.
    """

    rate: Callable[[int, int], float]
    growth_mu: float
    growth_nu: float
    growth_C: float
    separable_gamma: Optional[float] = None
    table: Optional[np.ndarray] = None

    def __call__(self, k: int, l: int) -> float:
        return self.rate(k, l)

    def rate_matrix(self, kmax: int) -> np.ndarray:
        """Dense matrix [c(k,l)] for 0 <= k, l <= kmax."""
        if self.separable_gamma is not None:
            p = size_powers(kmax, self.separable_gamma)
            return np.outer(p, p)
        if self.table is not None:
            if kmax >= self.table.shape[0]:
                raise IndexError(
                    f"table kernel covers sizes < {self.table.shape[0]}, "
                    f"requested {kmax}"
                )
            return self.table[: kmax + 1, : kmax + 1].copy()
        m = np.zeros((kmax + 1, kmax + 1))
        for k in range(1, kmax + 1):
            for l in range(k, kmax + 1):
                m[k, l] = m[l, k] = self.rate(k, l)
        return m


def make_product_kernel(gamma: float) -> Kernel:
    """Product kernel c(k,l) = (kl)^gamma for k,l >= 1, zero on the boundary.

    Growth metadata is mu = nu = gamma, C = 1/2, which is exact:
    (kl)^gamma = (k^gamma l^gamma + k^gamma l^gamma) / 2.
    """
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    g = float(gamma)

    def rate(k: int, l: int) -> float:
        if k <= 0 or l <= 0:
            return 0.0
        # k^g * l^g, not (k*l)**g, so scalar and matrix paths agree bitwise
        return float(k) ** g * float(l) ** g

    return Kernel(
        rate=rate,
        growth_mu=g,
        growth_nu=g,
        growth_C=0.5,
        separable_gamma=g,
    )


def make_table_kernel(
    table, growth_mu: float, growth_nu: float, growth_C: float
) -> Kernel:
    """Kernel backed by an explicit rate table.

    Only the upper triangle (k <= l) of ``table`` is read; the kernel is
    symmetric by construction.  Row/column 0 must be zero, entries must be
    nonnegative and strictly positive for 1 <= k <= l within range.
    Out-of-range queries raise IndexError.
    """
    t = np.asarray(table, dtype=float)
    if t.ndim != 2 or t.shape[0] != t.shape[1]:
        raise ValueError("table must be square")
    n = t.shape[0]
    full = np.zeros_like(t)
    for k in range(n):
        for l in range(k, n):
            full[k, l] = full[l, k] = t[k, l]
    if np.any(full < 0):
        raise ValueError("negative rate in table")
    if np.any(full[0, :] != 0) or np.any(full[:, 0] != 0):
        raise ValueError("rates involving empty sites must be zero")
    if n > 1 and np.any(full[1:, 1:] == 0):
        raise ValueError("rates must be strictly positive for k, l >= 1")

    def rate(k: int, l: int) -> float:
        if k < 0 or l < 0:
            raise IndexError(f"negative cluster size ({k}, {l})")
        if k >= n or l >= n:
            raise IndexError(f"({k}, {l}) outside table range (< {n})")
        return float(full[k, l])

    return Kernel(
        rate=rate,
        growth_mu=float(growth_mu),
        growth_nu=float(growth_nu),
        growth_C=float(growth_C),
        table=full,
    )


def load_table_kernel(
    path, growth_mu: float, growth_nu: float, growth_C: float
) -> Kernel:
    """Load a table kernel from CSV with header ``k,l,rate`` (upper triangle)."""
    entries = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != [
            "k",
            "l",
            "rate",
        ]:
            raise ValueError(f"expected header 'k,l,rate' in {path}")
        for row in reader:
            k, l = int(row["k"]), int(row["l"])
            if k > l:
                raise ValueError(f"lower-triangle entry ({k},{l}) in {path}")
            entries[(k, l)] = float(row["rate"])
    if not entries:
        raise ValueError(f"no rates in {path}")
    n = max(max(k, l) for k, l in entries) + 1
    table = np.zeros((n, n))
    for (k, l), r in entries.items():
        table[k, l] = r
    return make_table_kernel(table, growth_mu, growth_nu, growth_C)


@dataclass
class KernelReport:
    symmetry_ok: bool
    positivity_ok: bool
    bound_ok: bool
    worst_ratio: float


def verify_kernel(kernel: Kernel, k_max: int) -> KernelReport:
    """Exhaustively check symmetry, positivity and the growth bound on
    0 <= k, l <= k_max.

    worst_ratio is max over k, l >= 1 of c(k,l) / (C (k^mu l^nu + k^nu l^mu)).
    Failures are reported, not raised.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    c = kernel.rate_matrix(k_max)
    symmetry_ok = bool(np.array_equal(c, c.T))
    positivity_ok = bool(
        np.all(c[0, :] == 0)
        and np.all(c[:, 0] == 0)
        and np.all(c[1:, 1:] > 0)
    )
    ks = np.arange(k_max + 1, dtype=float)
    pmu = np.zeros(k_max + 1)
    pnu = np.zeros(k_max + 1)
    pmu[1:] = ks[1:] ** kernel.growth_mu
    pnu[1:] = ks[1:] ** kernel.growth_nu
    envelope = kernel.growth_C * (np.outer(pmu, pnu) + np.outer(pnu, pmu))
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(envelope[1:, 1:] > 0, c[1:, 1:] / envelope[1:, 1:], np.inf)
    worst = float(ratio.max()) if ratio.size else 0.0
    bound_ok = bool(worst <= 1.0 + 1e-12)
    return KernelReport(symmetry_ok, positivity_ok, bound_ok, worst)
