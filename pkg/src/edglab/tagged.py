"""Tagged-particle dynamics: exact finite-L chain and the mean-field limit.

At finite L the joint configuration is reduced to (background counts over
the other L-1 sites, tagged-site occupancy W).  Treating the tagged site as
its own singleton partition keeps the multiplicity accounting exact: every
diagonal 1/(L-1) correction of the finite-L tagged generator falls out of
the construction instead of being patched in.  A direct site-level (eta, X)
oracle is provided for cross-checking.

The limiting chain is time-inhomogeneous with birth rate mu_W(t), death rate
((W-1)/W) mu_W(t) and relocation jumps W -> k+1 at rate c(W,k) f_k(t) / W,
driven by a mean-field trajectory; it is simulated exactly by Poisson
thinning with per-interval rate envelopes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import Kernel, size_powers
from .particle import CountState, RandomStream
from .meanfield import MeanFieldTrajectory, mu_of

ENVELOPE_MARGIN = 1.1


@dataclass
class TaggedCountState:
    """Background counts (L-1 sites) plus the tagged site's occupancy W."""

    kernel: Kernel
    L: int
    W: int
    bg: CountState
    time: float = 0.0

    @property
    def N(self) -> int:
        return self.bg.N + self.W

    def counts_dict(self) -> dict:
        counts = self.bg.counts_dict()
        counts[self.W] = counts.get(self.W, 0) + 1
        return counts


@dataclass
class TaggedRates:
    """Exact finite-L event rates for the tagged site."""

    birth: float
    death_stay: float
    relocate: dict            # target background size l -> rate; new W = l + 1
    background: float

    @property
    def total(self) -> float:
        return self.birth + self.death_stay + sum(self.relocate.values()) \
            + self.background


def init_tagged(state: CountState, rule="uniform", seed=None) -> TaggedCountState:
    """Add a tagged particle to a configuration of untagged ones.

    rule: "uniform" (site chosen uniformly at random), ("size", s) (a site
    currently of size s), or "max-occupied".  The max-occupied rule grows
    logarithmically with L and is outside the admissible initial-condition
    class; it is exposed for experiments with a warning.
    """
    L = state.L
    counts = state.counts_dict()
    n0 = L - sum(counts.values())
    if rule == "uniform":
        rng = np.random.default_rng(seed)
        u = rng.integers(0, L)
        s = 0
        acc = n0
        if u >= acc:
            for k in sorted(counts):
                acc += counts[k]
                if u < acc:
                    s = k
                    break
    elif isinstance(rule, tuple) and rule[0] == "size":
        s = int(rule[1])
        have = n0 if s == 0 else counts.get(s, 0)
        if have < 1:
            raise ValueError(f"no site of size {s} to tag")
    elif rule == "max-occupied":
        warnings.warn(
            "max-occupied tagged placement violates the admissible "
            "initial-condition class (tagged occupancy grows with L)",
            stacklevel=2,
        )
        s = max(counts) if counts else 0
    else:
        raise ValueError(f"unknown tagging rule {rule!r}")

    bg_counts = dict(counts)
    if s > 0:
        bg_counts[s] -= 1
        if bg_counts[s] == 0:
            del bg_counts[s]
    bg = CountState(state.kernel, L - 1, bg_counts, rate_divisor=L - 1)
    return TaggedCountState(kernel=state.kernel, L=L, W=s + 1, bg=bg,
                            time=state.time)


def tagged_event_rates(ts: TaggedCountState) -> TaggedRates:
    """Rate table of the joint chain, split by how the tagged site is touched."""
    L, W, bg = ts.L, ts.W, ts.bg
    div = L - 1
    background = max(bg._total_weight(), 0.0) / div
    s = bg.interaction_sum(W)          # sum_k c(k, W) n_k over background
    birth = s / div
    death_stay = (W - 1) / W * s / div
    relocate = {}
    for l, n in bg.counts_dict().items():
        r = ts.kernel(W, l) * n / (W * div)
        if r > 0:
            relocate[l] = r
    return TaggedRates(birth=birth, death_stay=death_stay,
                       relocate=relocate, background=background)


def run_tagged(ts: TaggedCountState, t_end: float, grid=None, stream=None,
               seed=None):
    """Advance the joint chain to t_end; cadlag (t, W) samples on the grid."""
    if stream is None:
        stream = RandomStream(seed if seed is not None else 0)
    if grid is None:
        grid = [t_end]
    grid = sorted(float(g) for g in grid)
    times, ws = [], []
    gi = 0
    while gi < len(grid) and grid[gi] < ts.time:
        gi += 1
    while True:
        bg_w = max(ts.bg._total_weight(), 0.0)
        s = ts.bg.interaction_sum(ts.W)
        if bg_w + 2.0 * s <= 0.0:
            break
        rate = (bg_w + 2.0 * s) / (ts.L - 1)
        dt = -math.log1p(-stream.uniform()) / rate
        t_next = ts.time + dt
        while gi < len(grid) and grid[gi] < t_next:
            times.append(grid[gi])
            ws.append(ts.W)
            gi += 1
        if t_next > t_end:
            ts.time = t_end
            break
        _apply_tagged_event(ts, stream, bg_w, s)
        ts.time = t_next
    while gi < len(grid):
        times.append(grid[gi])
        ws.append(ts.W)
        gi += 1
    return np.array(times), np.array(ws, dtype=np.int64)


def _apply_tagged_event(ts: TaggedCountState, stream, bg_w: float, s: float):
    bg = ts.bg
    total_w = bg_w + 2.0 * s
    u = stream.uniform() * total_w
    if u < bg_w:
        k, l = bg.sample_event(u / bg_w)
        bg.apply_exchange(k, l)
        return
    kk = bg.kmax
    n = bg.counts[1 : kk + 1].astype(float)
    if bg.kernel.separable_gamma is not None:
        pw = bg._pow[ts.W] if ts.W < len(bg._pow) \
            else float(ts.W) ** bg.kernel.separable_gamma
        w = bg._pow[1 : kk + 1] * pw * n
    else:
        w = np.array([ts.kernel(k, ts.W) for k in range(1, kk + 1)]) * n
    cum = np.cumsum(w)
    if u < bg_w + s:
        frac = (u - bg_w) / s
        k = min(int(np.searchsorted(cum, frac * cum[-1], side="right")), kk - 1) + 1
        bg.move_site(k, k - 1)
        ts.W += 1
    else:
        frac = (u - bg_w - s) / s
        l = min(int(np.searchsorted(cum, frac * cum[-1], side="right")), kk - 1) + 1
        if stream.uniform() < (ts.W - 1) / ts.W:
            bg.move_site(l, l + 1)
            ts.W -= 1
        else:
            bg.move_site(l, ts.W - 1)
            ts.W = l + 1


# -- site-level joint oracle -------------------------------------------


class TaggedSiteSystem:
    """Direct (eta, X) simulation of the joint generator; oracle scale only."""

    def __init__(self, kernel: Kernel, eta, x: int, time: float = 0.0):
        self.kernel = kernel
        self.eta = np.asarray(eta, dtype=np.int64).copy()
        self.L = len(self.eta)
        if self.L > 50:
            raise ValueError("tagged site oracle is capped at L=50")
        self.x = int(x)
        if self.eta[self.x] < 1:
            raise ValueError("tagged site must be occupied")
        self.time = float(time)

    @property
    def W(self) -> int:
        return int(self.eta[self.x])

    def total_rate(self) -> float:
        kmax = int(self.eta.max())
        c = self.kernel.rate_matrix(kmax)
        w = c[np.ix_(self.eta, self.eta)]
        np.fill_diagonal(w, 0.0)
        return float(w.sum()) / (self.L - 1)

    def step(self, stream) -> float:
        kmax = int(self.eta.max())
        c = self.kernel.rate_matrix(kmax)
        w = c[np.ix_(self.eta, self.eta)]
        np.fill_diagonal(w, 0.0)
        flat = np.cumsum(w.ravel())
        total = flat[-1]
        if total <= 0:
            raise RuntimeError("absorbed")
        dt = -math.log1p(-stream.uniform()) / (total / (self.L - 1))
        idx = min(int(np.searchsorted(flat, stream.uniform() * total,
                                      side="right")), self.L * self.L - 1)
        y, z = divmod(idx, self.L)
        self.eta[y] -= 1
        self.eta[z] += 1
        if y == self.x:
            # tagged site donated: the tagged particle moves with prob 1/W
            w_old = self.eta[y] + 1
            if stream.uniform() >= (w_old - 1) / w_old:
                self.x = z
        self.time += dt
        return dt

    def run(self, t_end: float, stream) -> None:
        while True:
            kmax = int(self.eta.max())
            c = self.kernel.rate_matrix(kmax)
            w = c[np.ix_(self.eta, self.eta)]
            np.fill_diagonal(w, 0.0)
            flat = np.cumsum(w.ravel())
            total = flat[-1]
            if total <= 0:
                self.time = t_end
                return
            dt = -math.log1p(-stream.uniform()) / (total / (self.L - 1))
            if self.time + dt > t_end:
                self.time = t_end
                return
            idx = min(int(np.searchsorted(flat, stream.uniform() * total,
                                          side="right")), self.L * self.L - 1)
            y, z = divmod(idx, self.L)
            self.eta[y] -= 1
            self.eta[z] += 1
            if y == self.x:
                w_old = self.eta[y] + 1
                if stream.uniform() >= (w_old - 1) / w_old:
                    self.x = z
            self.time += dt


# -- limiting chain ----------------------------------------------------


@dataclass
class LimitTaggedRates:
    birth: float
    death: float
    relocate: dict             # new state k (>= 1) -> rate

    @property
    def total(self) -> float:
        return self.birth + self.death + sum(self.relocate.values())


def limit_tagged_rates(W: int, f, kernel: Kernel, t: Optional[float] = None
                       ) -> LimitTaggedRates:
    """Rates of the limiting chain at state W given the driver profile f.

    Birth mu_W, death ((W-1)/W) mu_W, relocation to k at rate
    c(W, k-1) f_{k-1} / W.  The total relocation rate telescopes to mu_W / W.
    """
    if W < 1:
        raise ValueError("W must be >= 1")
    fa = np.asarray(f.f if hasattr(f, "f") else f, dtype=float)
    mu = mu_of(fa, kernel, W)
    relocate = {}
    for j in range(len(fa)):
        r = kernel(W, j) * fa[j] / W
        if r > 0:
            relocate[j + 1] = r
    return LimitTaggedRates(birth=mu, death=(W - 1) / W * mu, relocate=relocate)


class TrajectoryDriver:
    """Read-only view of a mean-field trajectory for the limit chain.

    f(t) is linear between grid states; mu_W(t) beyond the stored truncation
    uses the product-kernel closed form when available, else zero padding
    (with a one-time warning).
    """

    def __init__(self, traj: MeanFieldTrajectory, kernel: Kernel):
        self.traj = traj
        self.kernel = kernel
        self.times = np.asarray(traj.times)
        self._warned = False
        if kernel.separable_gamma is not None:
            self._mg = traj.m_gamma_series(kernel.separable_gamma)
        else:
            self._mg = None

    def K_at(self, t: float) -> int:
        i = min(int(np.searchsorted(self.times, t, side="right")),
                len(self.times) - 1)
        return len(self.traj.fs[i]) - 1

    def f(self, t: float) -> np.ndarray:
        return self.traj.f_at(t)

    def mu(self, W: int, t: float) -> float:
        if self.kernel.separable_gamma is not None:
            g = self.kernel.separable_gamma
            mg = float(np.interp(t, self.times, self._mg))
            return float(W) ** g * mg
        fa = self.f(t)
        if W >= len(fa) and not self._warned:
            warnings.warn("tagged state beyond driver truncation; "
                          "zero-padding the profile", stacklevel=2)
            self._warned = True
        return float(sum(self.kernel(W, l) * fa[l] for l in range(1, len(fa))))


def simulate_limit_tagged(W0: int, driver, t_end: float, stream=None,
                          seed=None, kernel: Optional[Kernel] = None):
    """Exact thinning simulation of the limiting chain on [0, t_end].

    driver is a TrajectoryDriver (or a MeanFieldTrajectory, with kernel
    given).  Returns the jump path as (times, states) arrays, starting at
    (0, W0).  Raises if an envelope is violated (stale rate bound).
    """
    if isinstance(driver, MeanFieldTrajectory):
        if kernel is None:
            raise ValueError("kernel required when passing a bare trajectory")
        driver = TrajectoryDriver(driver, kernel)
    if stream is None:
        stream = RandomStream(seed if seed is not None else 0)
    kern = driver.kernel
    t = 0.0
    W = int(W0)
    if W < 1:
        raise ValueError("W0 must be >= 1")
    jump_t = [0.0]
    jump_w = [W]
    cells = driver.times
    ci = max(int(np.searchsorted(cells, t, side="right")) - 1, 0)
    while t < t_end:
        cell_end = min(float(cells[ci + 1]) if ci + 1 < len(cells) else t_end,
                       t_end)
        # total rate is 2 mu_W(t); linear in t within a cell, so the
        # endpoint maximum bounds the interior
        env = ENVELOPE_MARGIN * 2.0 * max(driver.mu(W, t),
                                          driver.mu(W, cell_end))
        if env <= 0.0:
            t = cell_end
            if ci + 1 < len(cells) - 1:
                ci += 1
            if cell_end >= t_end:
                break
            continue
        dt = -math.log1p(-stream.uniform()) / env
        if t + dt >= cell_end:
            t = cell_end
            if ci + 1 < len(cells) - 1:
                ci += 1
            if cell_end >= t_end:
                break
            continue
        t += dt
        mu = driver.mu(W, t)
        total = 2.0 * mu
        if total > env * (1.0 + 1e-9):
            raise RuntimeError(
                f"thinning envelope violated at t={t:.6g}: {total} > {env}"
            )
        if stream.uniform() * env >= total:
            continue  # thinned proposal
        u = stream.uniform() * total
        if u < mu:
            W += 1
        elif u < mu + (W - 1) / W * mu:
            W -= 1
        else:
            # relocation: new state j+1 with weight c(W,j) f_j(t)
            fa = driver.f(t)
            wts = np.array([kern(W, j) * fa[j] for j in range(len(fa))])
            cum = np.cumsum(wts)
            if cum[-1] <= 0:
                continue
            j = min(int(np.searchsorted(cum, stream.uniform() * cum[-1],
                                        side="right")), len(fa) - 1)
            W = j + 1
        jump_t.append(t)
        jump_w.append(W)
    return np.array(jump_t), np.array(jump_w, dtype=np.int64)


def state_at(jump_t, jump_w, t: float) -> int:
    """Cadlag evaluation of a jump path."""
    i = int(np.searchsorted(jump_t, t, side="right")) - 1
    return int(jump_w[max(i, 0)])


def compare_tagged_laws(w_samples, p) -> float:
    """Total-variation distance between an empirical law of W and p_k."""
    w = np.asarray(w_samples, dtype=np.int64)
    pa = np.asarray(p.p if hasattr(p, "p") else p, dtype=float)
    kmax = max(int(w.max()), len(pa) - 1)
    emp = np.bincount(w, minlength=kmax + 1) / len(w)
    ref = np.zeros(kmax + 1)
    ref[: len(pa)] = pa
    ref[0] = 0.0
    return 0.5 * float(np.abs(emp - ref).sum())
