"""Statistical verification layer over ensembles and mean-field runs."""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .kernels import Kernel, size_powers
from .particle import CountState, RandomStream, init_iid, replica_seed, run_until
from .sites import SiteSystem, iid_occupancies
from .meanfield import MeanFieldTrajectory, mu_vec, coarsening_scale
from .records import TrajectoryRecord


def tv_distance(p, q) -> float:
    """Total variation between two finitely supported distributions."""
    pa = np.asarray(p, dtype=float)
    qa = np.asarray(q, dtype=float)
    n = max(len(pa), len(qa))
    a = np.zeros(n)
    b = np.zeros(n)
    a[: len(pa)] = pa
    b[: len(qa)] = qa
    return 0.5 * float(np.abs(a - b).sum())


@dataclass
class EnsembleSummary:
    """Per-time ensemble means/variances of the empirical observables."""

    times: np.ndarray
    f_mean: np.ndarray          # [T, kmax+1], includes k = 0
    f_var: np.ndarray
    moments_mean: dict          # n -> [T]
    ell_mean: np.ndarray
    replicas: int
    L: int
    N: int
    seeds: list = field(default_factory=list)


def summarize_ensemble(records, moments=(0, 1, 2, 3)) -> EnsembleSummary:
    """Collapse replica trajectory records into an EnsembleSummary.

    All records must share the grid.  F_k entries include the implicit
    empty-site fraction, so each per-time mean row sums to 1.
    """
    if not records:
        raise ValueError("empty ensemble")
    times = np.asarray(records[0].times)
    for r in records[1:]:
        if len(r.times) != len(times) or not np.allclose(r.times, times):
            raise ValueError("replica grids do not match")
    L = records[0].L
    kmax = 0
    for r in records:
        for c in r.counts:
            if c:
                kmax = max(kmax, max(c))
    T = len(times)
    R = len(records)
    F = np.zeros((R, T, kmax + 1))
    for ri, r in enumerate(records):
        for ti, c in enumerate(r.counts):
            occupied = 0
            for k, n in c.items():
                F[ri, ti, k] = n / L
                occupied += n
            F[ri, ti, 0] = (L - occupied) / L
    f_mean = F.mean(axis=0)
    f_var = F.var(axis=0)
    ks = np.arange(kmax + 1, dtype=float)
    moments_mean = {n: (F * ks**n).sum(axis=2).mean(axis=0) for n in moments}
    m1 = (F * ks).sum(axis=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        ell = np.where(F[:, :, 0] < 1.0, m1 / (1.0 - F[:, :, 0]), np.nan)
    return EnsembleSummary(
        times=times,
        f_mean=f_mean,
        f_var=f_var,
        moments_mean=moments_mean,
        ell_mean=np.nanmean(ell, axis=0),
        replicas=R,
        L=L,
        N=records[0].N,
        seeds=[r.seed for r in records],
    )


def run_ensemble(kernel: Kernel, L: int, N: int, t_end: float, grid,
                 replicas: int, master_seed: int) -> list:
    """Independent seeded replicas of the count engine on a shared grid."""
    records = []
    for i in range(replicas):
        seq = replica_seed(master_seed, i)
        init_seq, run_seq = seq.spawn(2)
        state = init_iid(kernel, L, N, init_seq)
        rec = run_until(state, t_end, grid=grid, stream=RandomStream(run_seq),
                        replica=i)
        rec.seed = master_seed
        records.append(rec)
    return records


# -- law of large numbers ----------------------------------------------


def lln_distance(ensemble: EnsembleSummary, mf: MeanFieldTrajectory) -> dict:
    """Per-time sup_k and l1 gaps between mean F_k and the mean-field f_k."""
    ts = np.asarray(mf.times)
    if len(ts) != len(ensemble.times) or not np.allclose(ts, ensemble.times):
        raise ValueError("ensemble and mean-field grids do not match")
    sup_gap = np.empty(len(ts))
    l1_gap = np.empty(len(ts))
    for i in range(len(ts)):
        fe = ensemble.f_mean[i]
        fm = mf.fs[i]
        n = max(len(fe), len(fm))
        a = np.zeros(n)
        b = np.zeros(n)
        a[: len(fe)] = fe
        b[: len(fm)] = fm
        sup_gap[i] = float(np.abs(a - b).max())
        l1_gap[i] = float(np.abs(a - b).sum())
    return {"t": ts, "sup_gap": sup_gap, "l1_gap": l1_gap}


def weak_form_residual(ensemble: EnsembleSummary, kernel: Kernel, h, t: float
                       ) -> float:
    """|<F(t),h> - <F(0),h> - integral of the collision term| via trapezoid.

    The integrand is sum_{k>=1} mu_k(F(s)) (h(k+1) - 2h(k) + h(k-1)) F_k(s)
    with the empirical mean in place of f.
    """
    times = ensemble.times
    it = int(np.argmin(np.abs(times - t)))
    if abs(times[it] - t) > 1e-9:
        raise ValueError(f"t={t} not on the ensemble grid")
    kmax = ensemble.f_mean.shape[1] - 1
    hv = np.array([h(k) for k in range(kmax + 2)])
    d2h = np.zeros(kmax + 1)
    # second difference with h(-1) irrelevant: k = 0 never enters (mu weights
    # F_k for k >= 1 only)
    d2h[1:] = hv[2 : kmax + 2] - 2.0 * hv[1 : kmax + 1] + hv[0:kmax]
    integrand = np.empty(it + 1)
    for i in range(it + 1):
        fbar = ensemble.f_mean[i]
        mu = mu_vec(fbar, kernel)
        integrand[i] = float(np.dot(mu[1:] * d2h[1:], fbar[1:]))
    integral = float(np.trapezoid(integrand, times[: it + 1])) if it > 0 else 0.0
    pair_t = float(np.dot(ensemble.f_mean[it], hv[: kmax + 1]))
    pair_0 = float(np.dot(ensemble.f_mean[0], hv[: kmax + 1]))
    return abs(pair_t - pair_0 - integral)


def moment_growth_check(ensemble: EnsembleSummary, n: int,
                        gamma: Optional[float] = None) -> dict:
    """Fitted exponential growth rate of m_n(t)/m_n(0); optionally the
    polynomial-bound fit m_n^{(3-2 gamma)/n} ~ affine in t for product
    kernels with n > gamma > 1."""
    if n < 1:
        raise ValueError("n >= 1 required")
    t = ensemble.times
    m = ensemble.moments_mean.get(n)
    if m is None:
        ks = np.arange(ensemble.f_mean.shape[1], dtype=float)
        m = (ensemble.f_mean * ks**n).sum(axis=1)
    ratio = m / m[0]
    mask = ratio > 0
    rate = float(np.polyfit(t[mask], np.log(ratio[mask]), 1)[0]) if mask.sum() > 1 else 0.0
    out = {"exp_rate": rate, "m_n": m, "t": t}
    if gamma is not None and n > gamma > 1:
        expn = (3.0 - 2.0 * gamma) / n
        y = m**expn
        coef = np.polyfit(t, y, 1)
        resid = y - np.polyval(coef, t)
        ss_tot = float(((y - y.mean()) ** 2).sum())
        out["poly_slope"] = float(coef[0])
        out["poly_r2"] = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return out


def moment_convergence_check(ensemble: EnsembleSummary,
                             mf: MeanFieldTrajectory, n: int) -> np.ndarray:
    """Per-time weighted gap sum_k k^n |mean F_k - f_k|."""
    ts = np.asarray(mf.times)
    if not np.allclose(ts, ensemble.times):
        raise ValueError("grids do not match")
    gaps = np.empty(len(ts))
    for i in range(len(ts)):
        fe = ensemble.f_mean[i]
        fm = mf.fs[i]
        m = max(len(fe), len(fm))
        a = np.zeros(m)
        b = np.zeros(m)
        a[: len(fe)] = fe
        b[: len(fm)] = fm
        ks = np.arange(m, dtype=float)
        gaps[i] = float(np.dot(ks**n, np.abs(a - b)))
    return gaps


# -- coarsening --------------------------------------------------------


class InsufficientDynamicRange(ValueError):
    """The coarsening scale has not grown enough for a trustworthy fit."""


@dataclass
class CoarseningFit:
    beta_hat: float
    regime: str
    r2: float
    window: tuple
    expected_beta: Optional[float] = None
    t_gel: Optional[float] = None


def _linfit(x, y):
    coef = np.polyfit(x, y, 1)
    resid = y - np.polyval(coef, x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


LEAK_TRUST_FRAC = 0.05  # gelation fits trust ell while <= 5% of mass has leaked


def fit_coarsening(times, ell=None, gamma: float = None, leaks=None,
                   rho0: float = 1.0) -> CoarseningFit:
    """Fit the growth law of the coarsening scale for a product kernel.

    Accepts either (trajectory, gamma) with a MeanFieldTrajectory, or raw
    (times, ell, gamma) series.  gamma < 3/2: power law, slope of log ell
    vs log t on the last decade of ell growth, expected 1/(3-2 gamma).
    gamma = 3/2: exponential, slope of log ell vs t.  3/2 < gamma < 2:
    log ell vs log(T_gel - t) with T_gel a fitted parameter, expected
    slope 1/(3-2 gamma) < 0; the fit window keeps only samples taken
    while the truncation leak is below LEAK_TRUST_FRAC of the mass (ell
    uses the live mass, but a heavily leaked system is no longer the
    system whose divergence is being measured).
    """
    if hasattr(times, "ell_series"):  # a MeanFieldTrajectory
        traj = times
        if ell is not None and gamma is None:
            gamma = ell
        if gamma is None:
            gamma = traj.gamma
        leaks = traj.leaks
        rho0 = traj.rho
        ell = traj.ell_series()
        times = traj.times
    t = np.asarray(times, dtype=float)
    el = np.asarray(ell, dtype=float)
    lk = None if leaks is None else np.asarray(leaks, dtype=float)
    good = np.isfinite(el) & (el > 0) & (t > 0)
    if lk is not None and gamma is not None and gamma > 1.5:
        good &= lk <= LEAK_TRUST_FRAC * rho0
    t, el = t[good], el[good]
    if len(t) < 4:
        raise InsufficientDynamicRange("too few usable points")
    min_ratio = 3.0 if gamma > 1.5 else 10.0
    if el.max() < min_ratio * el.min():
        raise InsufficientDynamicRange(
            f"ell grew only x{el.max() / el.min():.2f}; need x{min_ratio:g}"
        )
    if gamma >= 2.0:
        raise ValueError("no mean-field solution for gamma >= 2")
    if gamma < 1.5:
        window = el >= el.max() / 10.0
        slope, r2 = _linfit(np.log(t[window]), np.log(el[window]))
        return CoarseningFit(
            beta_hat=slope, regime="power", r2=r2,
            window=(float(t[window][0]), float(t[window][-1])),
            expected_beta=1.0 / (3.0 - 2.0 * gamma),
        )
    if gamma == 1.5:
        window = el >= el.max() / 10.0
        slope, r2 = _linfit(t[window], np.log(el[window]))
        return CoarseningFit(
            beta_hat=slope, regime="exponential", r2=r2,
            window=(float(t[window][0]), float(t[window][-1])),
        )
    # gelation regime: scan T_gel > t[-1], linear fit inside; the window
    # keeps the last factor-2 of growth, where divergence dominates the
    # pre-asymptotic transient
    window = el >= el.max() / 2.0
    tw, ew = t[window], np.log(el[window])

    def badness(tg):
        x = np.log(tg - tw)
        slope, r2 = _linfit(x, ew)
        return 1.0 - r2

    span = tw[-1] - tw[0]
    res = optimize.minimize_scalar(
        badness, bounds=(t[-1] * (1.0 + 1e-6), t[-1] + 10.0 * span),
        method="bounded", options={"xatol": 1e-10 * max(t[-1], 1.0)},
    )
    tg = float(res.x)
    slope, r2 = _linfit(np.log(tg - tw), ew)
    return CoarseningFit(
        beta_hat=slope, regime="gelation", r2=r2,
        window=(float(tw[0]), float(tw[-1])),
        expected_beta=1.0 / (3.0 - 2.0 * gamma),
        t_gel=tg,
    )


# -- propagation of chaos ----------------------------------------------


def two_site_chaos_check(kernel: Kernel, L: int, N: int, t: float,
                         replicas: int, master_seed: int = 0) -> dict:
    """Two-site law vs product of marginals on the site-level engine.

    Sites are exchangeable (i.i.d. initial placement), so the joint law of
    a site pair is estimated by pooling all L(L-1) ordered pairs of each
    replica: joint(a,b) = E[n_a (n_b - delta_ab)] / (L(L-1)).  Pooling
    beats the two-fixed-sites estimator by a factor ~L in variance, which
    is what makes the O(1/L) chaoticity defect visible above the sampling
    floor.  Reports the product-law TV and the worst two-site covariance
    of the occupation-number indicators.
    """
    kcap = 1
    joint_acc = np.zeros((kcap + 1, kcap + 1))
    marg_acc = np.zeros(kcap + 1)
    for i in range(replicas):
        seq = replica_seed(master_seed, i)
        init_seq, run_seq = seq.spawn(2)
        eta = iid_occupancies(L, N, init_seq)
        sys = SiteSystem(kernel, eta)
        stream = RandomStream(run_seq)
        while not sys.absorbed:
            t_before = sys.time
            dt = sys._peek_dt(stream)
            if t_before + dt > t:
                break
            sys._apply_pending(stream)
            sys.time = t_before + dt
        n = np.bincount(sys.eta)
        if len(n) - 1 > kcap:
            newcap = len(n) - 1
            ja = np.zeros((newcap + 1, newcap + 1))
            ja[: kcap + 1, : kcap + 1] = joint_acc
            joint_acc = ja
            ma = np.zeros(newcap + 1)
            ma[: kcap + 1] = marg_acc
            marg_acc = ma
            kcap = newcap
        nn = np.zeros(kcap + 1)
        nn[: len(n)] = n
        joint_acc[: kcap + 1, : kcap + 1] += np.outer(nn, nn) - np.diag(nn)
        marg_acc += nn
    joint = joint_acc / (replicas * L * (L - 1))
    marg = marg_acc / (replicas * L)
    product = np.outer(marg, marg)
    tv = 0.5 * float(np.abs(joint - product).sum())
    cov = joint - product
    return {
        "product_tv": tv,
        "max_cov": float(np.abs(cov).max()),
        "marginal": marg,
        "joint": joint,
    }


# -- absorption --------------------------------------------------------


def absorption_study(kernel: Kernel, L_values, rho: float, replicas: int,
                     master_seed: int = 0, wall_clock_cap: float = 60.0
                     ) -> dict:
    """Median/quartile absorption times per L; wall-clock censored runs are
    reported, never silently dropped."""
    out = {}
    for L in L_values:
        N = round(rho * L)
        times = []
        censored = 0
        for i in range(replicas):
            seq = np.random.SeedSequence(master_seed, spawn_key=(L, i))
            init_seq, run_seq = seq.spawn(2)
            state = init_iid(kernel, L, N, init_seq)
            attempt = 0
            while state.absorbed:  # condition on starting unabsorbed
                attempt += 1
                state = init_iid(kernel, L, N,
                                 np.random.SeedSequence(master_seed,
                                                        spawn_key=(L, i, attempt)))
            stream = RandomStream(run_seq)
            t0 = _time.monotonic()
            capped = False
            while not state.absorbed:
                state.step(stream)
                if _time.monotonic() - t0 > wall_clock_cap:
                    capped = True
                    break
            if capped:
                censored += 1
            else:
                times.append(state.time)
        arr = np.array(times)
        out[L] = {
            "median": float(np.median(arr)) if len(arr) else math.nan,
            "q25": float(np.percentile(arr, 25)) if len(arr) else math.nan,
            "q75": float(np.percentile(arr, 75)) if len(arr) else math.nan,
            "censored": censored,
            "completed": len(arr),
        }
    ms = [out[L]["median"] for L in L_values]
    out["nondecreasing"] = all(a <= b + 1e-12 for a, b in zip(ms, ms[1:]))
    return out
