"""Exact event-driven simulation of complete-graph exchange dynamics.

The configuration is reduced to occupation counts n_k (number of sites
holding exactly k particles), which is a sufficient statistic on the
complete graph.  Each exchange event moves one monomer from a donor site of
size k to an occupied recipient site of size l at rate c(k,l)/(L-1) per
ordered site pair; ordered same-size pairs contribute n_k(n_k - 1), handled
exactly.

Event selection is inverse-CDF over a canonical ordering of ordered site
pairs (donor size, donor site copy, recipient size).  The site-level engine
in :mod:`edglab.sites` uses the same ordering, so the two engines consume a
shared uniform stream identically; for integer-valued kernels the cumulative
weights agree bit for bit and the trajectories coincide exactly.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .kernels import Kernel, size_powers
from .records import TrajectoryRecord

AUDIT_EVERY = 100_000  # full cache recomputation interval (events)


def replica_seed(master_seed: int, replica: int) -> np.random.SeedSequence:
    """Deterministic per-replica seed: SeedSequence(master, spawn_key=(i,))."""
    return np.random.SeedSequence(master_seed, spawn_key=(replica,))


class RandomStream:
    """Uniform decision stream backed by a seeded PCG64 generator.

    Only ``uniform()`` is exposed so that two engines can be driven by one
    shared stream, or by a recorded stream, for equivalence testing.
    """

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def uniform(self) -> float:
        return self._rng.random()


class CountState:
    """Occupancy-count state with cached rate aggregates.

    Mutable and confined to a single thread.  ``rate_divisor`` defaults to
    L - 1 (complete-graph pair weight); the tagged-particle engine overrides
    it when simulating the background lattice.
    """

    def __init__(self, kernel: Kernel, L: int, counts, time: float = 0.0,
                 rate_divisor: Optional[int] = None,
                 audit_every: int = AUDIT_EVERY):
        if L < 2:
            raise ValueError(f"need at least 2 sites, got L={L}")
        self.kernel = kernel
        self.L = int(L)
        self.time = float(time)
        self.rate_divisor = float(rate_divisor if rate_divisor is not None else L - 1)
        self.audit_every = audit_every
        self._events_since_audit = 0
        self.events = 0

        if isinstance(counts, dict):
            kmax = max(counts) if counts else 0
            arr = np.zeros(kmax + 1, dtype=np.int64)
            for k, n in counts.items():
                if k < 0 or n < 0:
                    raise ValueError("counts must map sizes >=0 to n_k >= 0")
                arr[k] = n
        else:
            arr = np.asarray(counts, dtype=np.int64).copy()
        cap = max(16, 2 * len(arr))
        self.counts = np.zeros(cap, dtype=np.int64)
        self.counts[: len(arr)] = arr
        occupied_given = int(self.counts[1:].sum())
        # implicit empty sites
        self.counts[0] = self.L - occupied_given
        if self.counts[0] < 0:
            raise ValueError("more occupied sites than L")
        self.kmax = int(np.max(np.nonzero(self.counts)[0])) if occupied_given else 0
        self.N = int(np.dot(np.arange(len(self.counts)), self.counts))
        self._occupied = occupied_given
        self._rebuild_caches()

    # -- caches ---------------------------------------------------------

    def _rebuild_caches(self):
        cap = len(self.counts)
        if self.kernel.separable_gamma is not None:
            self._pow = size_powers(cap - 1, self.kernel.separable_gamma)
            self._M = float(np.dot(self._pow, self.counts))
            self._S2 = float(np.dot(self._pow * self._pow, self.counts))
            self._cmat = None
        else:
            self._cmat = self.kernel.rate_matrix(cap - 1)
            self._diag = np.diagonal(self._cmat).copy()
            self._R = self._cmat @ self.counts.astype(float)
        self._events_since_audit = 0

    def _grow(self, need: int):
        cap = max(2 * len(self.counts), need + 1)
        new = np.zeros(cap, dtype=np.int64)
        new[: len(self.counts)] = self.counts
        self.counts = new
        self._rebuild_caches()

    def audit(self) -> float:
        """Recompute caches from scratch; return relative drift of the
        total event weight before the rebuild."""
        before = self._total_weight()
        self._rebuild_caches()
        after = self._total_weight()
        scale = max(abs(after), 1.0)
        return abs(before - after) / scale

    def _total_weight(self) -> float:
        """Sum over ordered site pairs of c(eta_x, eta_y), i.e.
        sum_{k,l} c(k,l) n_k (n_l - delta_{kl})."""
        if self.kernel.separable_gamma is not None:
            return self._M * self._M - self._S2
        c = self.counts.astype(float)
        return float(np.dot(c, self._R) - np.dot(self._diag, c))

    @property
    def total_rate(self) -> float:
        return max(self._total_weight(), 0.0) / self.rate_divisor

    @property
    def absorbed(self) -> bool:
        """True once a single site holds everything (or N <= 1)."""
        return self._occupied <= 1

    def counts_dict(self) -> dict:
        ks = np.nonzero(self.counts[1:])[0] + 1
        return {int(k): int(self.counts[k]) for k in ks}

    def copy(self) -> "CountState":
        c = CountState(self.kernel, self.L, self.counts_dict(), time=self.time,
                       rate_divisor=self.rate_divisor, audit_every=self.audit_every)
        return c

    # -- events ---------------------------------------------------------

    def sample_event(self, u: float):
        """Map one uniform to an event (donor size k, recipient size l).

        Inverse CDF over the canonical pair order; probability of (k, l)
        is proportional to c(k,l) n_k (n_l - delta_{kl}).
        """
        if self.absorbed:
            raise RuntimeError("sample_event on an absorbed state")
        kk = self.kmax
        n = self.counts[1 : kk + 1].astype(float)
        if self.kernel.separable_gamma is not None:
            p = self._pow[1 : kk + 1]
            row = p * self._M - p * p          # row[k-1] = sum_l c(k,l)(n_l - d)
            w = n * row
        else:
            row = self._R[1 : kk + 1] - self._diag[1 : kk + 1]
            w = n * row
        cum = np.cumsum(w)
        total = cum[-1]
        target = u * total
        i = int(np.searchsorted(cum, target, side="right"))
        i = min(i, kk - 1)
        k = i + 1
        resid = target - (cum[i - 1] if i > 0 else 0.0)
        # within the donor-size block: which site copy, then recipient size
        if self.kernel.separable_gamma is not None:
            v = self._pow[k] * (self._pow[1 : kk + 1] * n)
        else:
            v = self._cmat[k, 1 : kk + 1] * n
        v = v.copy()
        v[k - 1] -= (self._pow[k] ** 2 if self.kernel.separable_gamma is not None
                     else self._diag[k])
        rowsum = row[i]
        if rowsum > 0:
            resid -= math.floor(resid / rowsum) * rowsum
        cumv = np.cumsum(v)
        j = int(np.searchsorted(cumv, resid, side="right"))
        j = min(j, kk - 1)
        l = j + 1
        return k, l

    def apply_exchange(self, k: int, l: int) -> None:
        """Move one monomer from a size-k site to a size-l site (l >= 1)."""
        if k < 1 or l < 1:
            raise ValueError("donor and recipient sizes must be >= 1")
        if self.counts[k] < 1 or self.counts[l] < (2 if k == l else 1):
            raise ValueError(
                f"event ({k},{l}) impossible: n_{k}={self.counts[k]}, "
                f"n_{l}={self.counts[l]}"
            )
        if l + 1 >= len(self.counts):
            self._grow(l + 1)
        self.counts[k] -= 1
        self.counts[k - 1] += 1
        self.counts[l] -= 1
        self.counts[l + 1] += 1
        if k == 1:
            self._occupied -= 1
        if l + 1 > self.kmax:
            self.kmax = l + 1
        while self.kmax > 0 and self.counts[self.kmax] == 0:
            self.kmax -= 1
        # incremental cache update, audited periodically
        if self.kernel.separable_gamma is not None:
            p = self._pow
            self._M += p[k - 1] + p[l + 1] - p[k] - p[l]
            self._S2 += (p[k - 1] ** 2 + p[l + 1] ** 2 - p[k] ** 2 - p[l] ** 2)
        else:
            self._R += (self._cmat[:, k - 1] + self._cmat[:, l + 1]
                        - self._cmat[:, k] - self._cmat[:, l])
        self.events += 1
        self._events_since_audit += 1
        if self._events_since_audit >= self.audit_every:
            self._rebuild_caches()

    def interaction_sum(self, size: int) -> float:
        """sum_{k>=1} c(k, size) n_k, the aggregate rate against an external
        site of the given occupancy."""
        if size <= 0:
            return 0.0
        if self.kernel.separable_gamma is not None:
            g = self.kernel.separable_gamma
            pw = self._pow[size] if size < len(self._pow) else float(size) ** g
            return pw * self._M
        if size < len(self._R):
            return float(self._R[size])
        c = self.counts[1 : self.kmax + 1].astype(float)
        return float(sum(self.kernel(k, size) * c[k - 1]
                         for k in range(1, self.kmax + 1)))

    def move_site(self, old: int, new: int) -> None:
        """Reclassify one site from occupancy ``old`` to ``new``.

        Used by the tagged engine, where the background lattice exchanges
        monomers with the (externally tracked) tagged site; mass is not
        conserved within this state alone, so N is adjusted.
        """
        if old < 0 or new < 0 or self.counts[old] < 1:
            raise ValueError(f"cannot move a site from size {old} to {new}")
        if new >= len(self.counts):
            self._grow(new)
        self.counts[old] -= 1
        self.counts[new] += 1
        self.N += new - old
        if old == 0 and new > 0:
            self._occupied += 1
        elif old > 0 and new == 0:
            self._occupied -= 1
        if new > self.kmax:
            self.kmax = new
        while self.kmax > 0 and self.counts[self.kmax] == 0:
            self.kmax -= 1
        if self.kernel.separable_gamma is not None:
            p = self._pow
            self._M += p[new] - p[old]
            self._S2 += p[new] ** 2 - p[old] ** 2
        else:
            self._R += self._cmat[:, new] - self._cmat[:, old]
        self.events += 1
        self._events_since_audit += 1
        if self._events_since_audit >= self.audit_every:
            self._rebuild_caches()

    def step(self, stream) -> float:
        """Advance by one event; returns the exponential waiting time."""
        if self.absorbed:
            raise RuntimeError("step on an absorbed state")
        rate = self.total_rate
        u_t = stream.uniform()
        dt = -math.log1p(-u_t) / rate
        k, l = self.sample_event(stream.uniform())
        self.apply_exchange(k, l)
        self.time += dt
        return dt


def init_iid(kernel: Kernel, L: int, N: int, seed) -> CountState:
    """Place N particles uniformly and independently on L sites.

    In the thermodynamic limit the marginal occupancy is Poisson(N/L).
    Deterministic given the seed.
    """
    if L < 2:
        raise ValueError(f"need at least 2 sites, got L={L}")
    if N < 0:
        raise ValueError("N must be nonnegative")
    rng = np.random.default_rng(seed)
    occ = np.bincount(rng.integers(0, L, size=N), minlength=L)
    counts = np.bincount(occ)
    return CountState(kernel, L, counts)


def run_until(state: CountState, t_end: float, grid=None,
              stream=None, seed=None, replica: int = 0,
              max_events: Optional[int] = None,
              observers=None) -> TrajectoryRecord:
    """Advance the chain to t_end (or absorption), sampling on a time grid.

    Grid observations are cadlag: the state recorded at grid time g is the
    state after the last event at or before g.  Observers, if given, are
    called as observer(t, state) at each grid time.
    """
    if t_end < state.time:
        raise ValueError("t_end before current state time")
    if stream is None:
        stream = RandomStream(seed if seed is not None else 0)
    if grid is None:
        grid = [t_end]
    grid = sorted(float(g) for g in grid)
    record = TrajectoryRecord(L=state.L, N=state.N, replica=replica,
                              seed=seed if isinstance(seed, int) else None)

    def observe(t):
        record.append(t, state.counts_dict())
        if observers:
            for obs in observers:
                obs(t, state)

    gi = 0
    while gi < len(grid) and grid[gi] < state.time:
        gi += 1
    nevents = 0
    while True:
        if state.absorbed:
            if record.absorbed_at is None and state.N > 1:
                record.absorbed_at = state.time
            break
        rate = state.total_rate
        u_t = stream.uniform()
        dt = -math.log1p(-u_t) / rate
        t_next = state.time + dt
        while gi < len(grid) and grid[gi] < t_next:
            observe(grid[gi])
            gi += 1
        if t_next > t_end:
            state.time = t_end
            break
        k, l = state.sample_event(stream.uniform())
        state.apply_exchange(k, l)
        state.time = t_next
        if state.absorbed:
            record.absorbed_at = state.time
        nevents += 1
        if max_events is not None and nevents >= max_events:
            break
    while gi < len(grid):
        observe(grid[gi])
        gi += 1
    return record
