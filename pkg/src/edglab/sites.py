"""Site-level reference engine: direct simulation over explicit occupancies.

This is the O(L^2)-per-event oracle used to validate the count-based engine.
In canonical mode, event selection is inverse-CDF over ordered site pairs
sorted by (donor occupancy, donor site, recipient occupancy); this matches
the canonical ordering of the count engine, so both engines driven by a
shared uniform stream produce identical trajectories for integer-valued
kernels.  A factorized O(L) path is provided for product kernels so that
large ensembles (propagation-of-chaos tests) stay tractable.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .kernels import Kernel
from .particle import RandomStream
from .records import TrajectoryRecord

SITE_ENGINE_MAX_L = 1000  # guard rail: this engine is an oracle, not a workhorse


class SiteSystem:
    """Explicit configuration (eta_x : x < L) evolving by monomer exchange."""

    def __init__(self, kernel: Kernel, eta, time: float = 0.0,
                 canonical: bool = False):
        self.kernel = kernel
        self.eta = np.asarray(eta, dtype=np.int64).copy()
        self.L = len(self.eta)
        if self.L < 2:
            raise ValueError("need at least 2 sites")
        if self.L > SITE_ENGINE_MAX_L:
            raise ValueError(
                f"site engine is capped at L={SITE_ENGINE_MAX_L} (oracle scale)"
            )
        self.time = float(time)
        self.N = int(self.eta.sum())
        self.canonical = canonical
        self._cmat = None
        self._cmat_size = -1

    def _matrix(self, kmax: int) -> np.ndarray:
        if kmax > self._cmat_size:
            self._cmat = self.kernel.rate_matrix(max(kmax, 2 * self._cmat_size, 8))
            self._cmat_size = self._cmat.shape[0] - 1
        return self._cmat

    @property
    def absorbed(self) -> bool:
        return int(np.count_nonzero(self.eta)) <= 1

    def total_rate(self) -> float:
        kmax = int(self.eta.max(initial=0))
        c = self._matrix(kmax)
        w = c[np.ix_(self.eta, self.eta)]
        np.fill_diagonal(w, 0.0)
        return float(w.sum()) / (self.L - 1)

    def counts_dict(self) -> dict:
        occ = np.bincount(self.eta)
        return {int(k): int(n) for k, n in enumerate(occ) if k >= 1 and n > 0}

    # -- event selection ------------------------------------------------

    def _step_canonical(self, stream) -> float:
        order = np.argsort(self.eta, kind="stable")
        es = self.eta[order]
        c = self._matrix(int(es[-1]))
        w = c[np.ix_(es, es)]
        np.fill_diagonal(w, 0.0)
        flat = np.cumsum(w.ravel())
        total = flat[-1]
        rate = total / (self.L - 1)
        u_t = stream.uniform()
        dt = -math.log1p(-u_t) / rate
        target = stream.uniform() * total
        idx = int(np.searchsorted(flat, target, side="right"))
        idx = min(idx, self.L * self.L - 1)
        i, j = divmod(idx, self.L)
        x, y = order[i], order[j]
        self.eta[x] -= 1
        self.eta[y] += 1
        self.time += dt
        return dt

    def _step_separable(self, stream) -> float:
        g = self.kernel.separable_gamma
        ws = self.eta.astype(float) ** g
        ws[self.eta == 0] = 0.0
        s = ws.sum()
        donor_w = ws * (s - ws)
        cum = np.cumsum(donor_w)
        total = cum[-1]
        rate = total / (self.L - 1)
        u_t = stream.uniform()
        dt = -math.log1p(-u_t) / rate
        x = int(np.searchsorted(cum, stream.uniform() * total, side="right"))
        x = min(x, self.L - 1)
        recip = ws.copy()
        recip[x] = 0.0
        cr = np.cumsum(recip)
        y = int(np.searchsorted(cr, stream.uniform() * cr[-1], side="right"))
        y = min(y, self.L - 1)
        self.eta[x] -= 1
        self.eta[y] += 1
        self.time += dt
        return dt

    def step(self, stream) -> float:
        if self.absorbed:
            raise RuntimeError("step on an absorbed state")
        if not self.canonical and self.kernel.separable_gamma is not None:
            return self._step_separable(stream)
        return self._step_canonical(stream)

    def run_until(self, t_end: float, grid=None, stream=None, seed=None,
                  replica: int = 0) -> TrajectoryRecord:
        """Cadlag grid sampling, same conventions as particle.run_until."""
        if stream is None:
            stream = RandomStream(seed if seed is not None else 0)
        if grid is None:
            grid = [t_end]
        grid = sorted(float(g) for g in grid)
        record = TrajectoryRecord(L=self.L, N=self.N, replica=replica,
                                  seed=seed if isinstance(seed, int) else None)
        gi = 0
        while gi < len(grid) and grid[gi] < self.time:
            gi += 1
        while not self.absorbed:
            t_before = self.time
            dt = self._peek_dt(stream)
            t_next = t_before + dt
            while gi < len(grid) and grid[gi] < t_next:
                record.append(grid[gi], self.counts_dict())
                gi += 1
            if t_next > t_end:
                self.time = t_end
                break
            self._apply_pending(stream)
            self.time = t_next
            if self.absorbed:
                record.absorbed_at = self.time
        while gi < len(grid):
            record.append(grid[gi], self.counts_dict())
            gi += 1
        return record

    # run_until needs the waiting time before committing to the event;
    # _peek_dt caches the prepared selection for _apply_pending.
    def _peek_dt(self, stream) -> float:
        if not self.canonical and self.kernel.separable_gamma is not None:
            g = self.kernel.separable_gamma
            ws = self.eta.astype(float) ** g
            ws[self.eta == 0] = 0.0
            s = ws.sum()
            donor_w = ws * (s - ws)
            cum = np.cumsum(donor_w)
            self._pending = ("sep", ws, cum)
            rate = cum[-1] / (self.L - 1)
        else:
            order = np.argsort(self.eta, kind="stable")
            es = self.eta[order]
            c = self._matrix(int(es[-1]))
            w = c[np.ix_(es, es)]
            np.fill_diagonal(w, 0.0)
            flat = np.cumsum(w.ravel())
            self._pending = ("canon", order, flat)
            rate = flat[-1] / (self.L - 1)
        return -math.log1p(-stream.uniform()) / rate

    def _apply_pending(self, stream):
        kind = self._pending[0]
        if kind == "sep":
            _, ws, cum = self._pending
            x = min(int(np.searchsorted(cum, stream.uniform() * cum[-1],
                                        side="right")), self.L - 1)
            recip = ws.copy()
            recip[x] = 0.0
            cr = np.cumsum(recip)
            y = min(int(np.searchsorted(cr, stream.uniform() * cr[-1],
                                        side="right")), self.L - 1)
        else:
            _, order, flat = self._pending
            idx = min(int(np.searchsorted(flat, stream.uniform() * flat[-1],
                                          side="right")), self.L * self.L - 1)
            i, j = divmod(idx, self.L)
            x, y = order[i], order[j]
        self.eta[x] -= 1
        self.eta[y] += 1
        self._pending = None


def iid_occupancies(L: int, N: int, seed) -> np.ndarray:
    """N particles placed uniformly at random on L sites."""
    rng = np.random.default_rng(seed)
    return np.bincount(rng.integers(0, L, size=N), minlength=L)


def site_reference_run(kernel: Kernel, L: int, N: int, seed, t_end: float,
                       grid=None, canonical: bool = False) -> TrajectoryRecord:
    """i.i.d. initial placement, then the site-level chain to t_end."""
    if L > SITE_ENGINE_MAX_L:
        raise ValueError(f"site engine is capped at L={SITE_ENGINE_MAX_L}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_seq, run_seq = seq.spawn(2)
    eta = iid_occupancies(L, N, init_seq)
    sys = SiteSystem(kernel, eta, canonical=canonical)
    return sys.run_until(t_end, grid=grid, stream=RandomStream(run_seq))
