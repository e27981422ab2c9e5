"""Truncated mean-field hierarchy for the limiting cluster-size distribution.

The hierarchy df_k/dt = mu_{k+1} f_{k+1} + mu_{k-1} f_{k-1} - 2 mu_k f_k
(with mu_k = sum_l c(k,l) f_l, f_{-1} = 0) is integrated with an embedded
Dormand-Prince 5(4) pair.  The truncation boundary f_{K+1} = 0 leaks mass at
rate (K+1) mu_K f_K; the leak is co-integrated and reported.  K grows
automatically while coarsening pushes mass to larger sizes.  Step-size
collapse or a runaway second moment is reported as a structured blow-up
flag, not an exception: near gelation we want the explicit stepper to fail
loudly rather than an implicit solver to mask divergence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .kernels import Kernel, size_powers

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                187 / 2100, 1 / 40])

DT_BLOWUP = 1e-12
M2_CEILING = 1e6
TAIL_THRESHOLD = 1e-10
K_CAP_DEFAULT = 2 ** 14
# truncation-leak fraction of the initial mass that declares blow-up: a
# bounded system keeps m_2 <= K rho and its step size bounded below, so a
# gelling solution reveals itself by pushing mass through every finite K
LEAK_BLOWUP_FRAC = 1e-3


class IntegrationAbort(RuntimeError):
    """Raised when per-step negativity exceeds what roundoff can explain."""


@dataclass
class MeanFieldState:
    """Truncated probability vector f_0..f_K with leak accounting."""

    f: np.ndarray
    t: float = 0.0
    rho: float = 0.0
    leak: float = 0.0

    @property
    def K(self) -> int:
        return len(self.f) - 1


@dataclass
class SizeBiasedState:
    """Size-biased probability vector p_1..p_K (index 0 kept zero)."""

    p: np.ndarray
    t: float = 0.0


def poisson_profile(rho: float, K: int) -> np.ndarray:
    """Poisson(rho) pmf truncated at K (not renormalized; tail mass leaks)."""
    k = np.arange(K + 1)
    logp = k * math.log(rho) - rho - np.array([math.lgamma(i + 1) for i in k])
    return np.exp(logp)


def mu_vec(f: np.ndarray, kernel: Kernel, cmat: Optional[np.ndarray] = None
           ) -> np.ndarray:
    """Interaction rates mu_k = sum_{l>=1} c(k,l) f_l for k = 0..K."""
    K = len(f) - 1
    if kernel.separable_gamma is not None:
        kp = size_powers(K, kernel.separable_gamma)
        return kp * float(np.dot(kp, f))
    if cmat is None:
        cmat = kernel.rate_matrix(K)
    return cmat @ f


def mu_of(f, kernel, k: int) -> float:
    """Single-entry mu_k (mu_0 = 0 since c(0,.) = 0)."""
    fa = f.f if isinstance(f, MeanFieldState) else np.asarray(f)
    if k == 0:
        return 0.0
    if kernel.separable_gamma is not None:
        g = kernel.separable_gamma
        kp = size_powers(len(fa) - 1, g)
        return float(k) ** g * float(np.dot(kp, fa))
    return float(sum(kernel(k, l) * fa[l] for l in range(1, len(fa))))


def _stencil(g: np.ndarray) -> np.ndarray:
    """g_{k+1} + g_{k-1} - 2 g_k with g_{-1} = g_{K+1} = 0."""
    out = -2.0 * g
    out[:-1] += g[1:]
    out[1:] += g[:-1]
    return out


def edg_rhs(f, kernel: Kernel, cmat: Optional[np.ndarray] = None) -> np.ndarray:
    """Right-hand side of the truncated hierarchy (general kernel)."""
    fa = f.f if isinstance(f, MeanFieldState) else np.asarray(f, dtype=float)
    mu = mu_vec(fa, kernel, cmat)
    return _stencil(mu * fa)


def edg_rhs_product(f, gamma: float) -> np.ndarray:
    """Product-kernel fast path: one aggregate m_gamma, then the stencil."""
    fa = f.f if isinstance(f, MeanFieldState) else np.asarray(f, dtype=float)
    kp = size_powers(len(fa) - 1, gamma)
    m_gamma = float(np.dot(kp, fa))
    return _stencil(m_gamma * (kp * fa))


def boundary_flux(f, kernel: Kernel, cmat=None):
    """(number flux, mass flux) lost through the truncation boundary."""
    fa = f.f if isinstance(f, MeanFieldState) else np.asarray(f, dtype=float)
    K = len(fa) - 1
    muK = mu_vec(fa, kernel, cmat)[K]
    return muK * fa[K], (K + 1) * muK * fa[K]


def sbm_rhs(p, f, kernel: Kernel, cmat: Optional[np.ndarray] = None
            ) -> np.ndarray:
    """Size-biased master equation coupled to the driver f.

    Gain: birth from k-1, death from k+1 (weight k/(k+1)), and relocation
    landing on a size-(k-1) site.  Loss: birth + death + relocation out,
    three parts kept verbatim; the k = 1 component is the boundary line
    with loss 2 mu_1 p_1.
    """
    pa = p.p if isinstance(p, SizeBiasedState) else np.asarray(p, dtype=float)
    fa = f.f if isinstance(f, MeanFieldState) else np.asarray(f, dtype=float)
    K = len(fa) - 1
    karr = np.arange(K + 1, dtype=float)
    mu = mu_vec(fa, kernel, cmat)
    q = np.zeros(K + 1)
    q[1:] = pa[1:] / karr[1:]
    if kernel.separable_gamma is not None:
        g = kernel.separable_gamma
        kp = size_powers(K, g)
        s = kp * float(np.dot(kp, q))          # s_j = sum_l c(l,j) q_l
        murel = kp * float(np.dot(kp[:K], fa[:K]))
    else:
        if cmat is None:
            cmat = kernel.rate_matrix(K)
        s = cmat @ q
        murel = cmat[:, :K] @ fa[:K]           # sum_{j<K} c(k,j) f_j

    rhs = np.zeros(K + 1)
    gp = mu * pa
    # birth gain mu_{k-1} p_{k-1}
    rhs[2:] += gp[1:-1]
    # death gain (k/(k+1)) mu_{k+1} p_{k+1}
    rhs[1:-1] += (karr[1:-1] / (karr[1:-1] + 1.0)) * gp[2:]
    # relocation gain f_{k-1} sum_l c(l,k-1) p_l / l
    rhs[1:] += fa[:-1] * s[:-1]
    # loss, k >= 2: (mu_k + ((k-1)/k) mu_k + murel_k / k) p_k
    loss = np.zeros(K + 1)
    loss[2:] = (mu[2:] + (karr[2:] - 1.0) / karr[2:] * mu[2:]
                + murel[2:] / karr[2:]) * pa[2:]
    loss[1] = 2.0 * mu[1] * pa[1]
    rhs -= loss
    rhs[0] = 0.0
    return rhs


def coarsening_scale(f) -> float:
    """Mean occupied-site cluster size: (live first moment) / (1 - f_0)."""
    fa = f.f if isinstance(f, MeanFieldState) else np.asarray(f, dtype=float)
    if fa[0] >= 1.0:
        raise ValueError("fully condensed state: f_0 = 1")
    rho_live = float(np.dot(np.arange(len(fa)), fa))
    return rho_live / (1.0 - fa[0])


@dataclass
class MeanFieldTrajectory:
    """Dense-grid output of an integration run."""

    times: list = field(default_factory=list)
    fs: list = field(default_factory=list)
    ps: Optional[list] = None
    leaks: list = field(default_factory=list)
    rho: float = 0.0
    gamma: Optional[float] = None
    blown_up: bool = False
    t_blowup: Optional[float] = None
    annotations: list = field(default_factory=list)

    def f_at(self, t: float) -> np.ndarray:
        """Linear interpolation between stored grid states (zero-padded)."""
        ts = self.times
        if t <= ts[0]:
            return self.fs[0].copy()
        if t >= ts[-1]:
            return self.fs[-1].copy()
        i = int(np.searchsorted(ts, t, side="right")) - 1
        f0, f1 = self.fs[i], self.fs[i + 1]
        n = max(len(f0), len(f1))
        a = np.zeros(n)
        b = np.zeros(n)
        a[: len(f0)] = f0
        b[: len(f1)] = f1
        w = (t - ts[i]) / (ts[i + 1] - ts[i])
        return (1.0 - w) * a + w * b

    def m_gamma_series(self, gamma: float) -> np.ndarray:
        out = np.empty(len(self.times))
        for i, f in enumerate(self.fs):
            out[i] = float(np.dot(size_powers(len(f) - 1, gamma), f))
        return out

    def moment_series(self, n: int) -> np.ndarray:
        out = np.empty(len(self.times))
        for i, f in enumerate(self.fs):
            out[i] = float(np.dot(np.arange(len(f), dtype=float) ** n, f))
        return out

    def ell_series(self) -> np.ndarray:
        return np.array([coarsening_scale(f) for f in self.fs])

    def summary(self) -> dict:
        t = np.array(self.times)
        out = {
            "t": t,
            "m0": self.moment_series(0),
            "m1": self.moment_series(1),
            "m2": self.moment_series(2),
            "f0": np.array([f[0] for f in self.fs]),
            "ell": self.ell_series(),
            "leak": np.array(self.leaks),
        }
        if self.gamma is not None:
            out["m_gamma"] = self.m_gamma_series(self.gamma)
        return out


def _initial_K(f0: np.ndarray, rho: float) -> int:
    support = int(np.max(np.nonzero(f0)[0])) if np.any(f0) else 1
    return 4 * max(int(math.ceil(4 * rho)), support)


def integrate(f0, kernel: Kernel, t_end: float, *,
              grid=None, rtol: float = 1e-8, atol: float = 1e-12,
              k_cap: int = K_CAP_DEFAULT, grow: bool = True,
              m2_ceiling: float = M2_CEILING,
              track_sizebias: bool = False, p0=None,
              stop_on_blowup: bool = True) -> MeanFieldTrajectory:
    """Adaptive integration of the truncated hierarchy to t_end.

    f0 must be normalized to 1 within 1e-6.  The density rho is read off as
    the first moment of f0.  With track_sizebias, the size-biased master
    equation is co-integrated (default p(0) = k f(0) / rho).  A blow-up
    (dt underflow, m_2 beyond the ceiling, or truncation leak beyond
    LEAK_BLOWUP_FRAC of the mass) sets the flag and, unless
    stop_on_blowup=False, terminates the run; with stop_on_blowup=False
    the leaky truncated system is integrated on to t_end, which is how the
    post-flag sol phase is studied (the escaping tail plays the gel).
    """
    f = np.asarray(f0, dtype=float).copy()
    if abs(f.sum() - 1.0) > 1e-6:
        raise ValueError(f"f0 not normalized: sum = {f.sum()!r}")
    if np.any(f < 0):
        raise ValueError("f0 has negative entries")
    rho = float(np.dot(np.arange(len(f)), f))
    if rho <= 0:
        raise ValueError("f0 carries no mass")

    K = max(_initial_K(f, rho), len(f) - 1)
    K = min(K, k_cap)
    fvec = np.zeros(K + 1)
    fvec[: len(f)] = f[: K + 1]
    gamma = kernel.separable_gamma

    if track_sizebias:
        if p0 is None:
            pvec = np.arange(K + 1, dtype=float) * fvec / rho
        else:
            pvec = np.zeros(K + 1)
            src = np.asarray(p0, dtype=float)
            pvec[: len(src)] = src[: K + 1]
            pvec[0] = 0.0
    else:
        pvec = None

    traj = MeanFieldTrajectory(rho=rho, gamma=gamma,
                               ps=[] if track_sizebias else None)
    if gamma is not None and gamma > 2:
        traj.annotations.append(
            "gamma > 2: no mean-field solution exists on any time interval; "
            "output is a truncation artifact"
        )

    if grid is None:
        grid = np.linspace(0.0, t_end, 101)
    grid = np.asarray(sorted(float(g) for g in grid))

    cmat = None if gamma is not None else kernel.rate_matrix(K)
    kp = size_powers(K, gamma) if gamma is not None else None

    def rebuild(newK):
        nonlocal K, cmat, kp, fvec, pvec
        newK = min(newK, k_cap)
        if newK <= K:
            return False
        nf = np.zeros(newK + 1)
        nf[: K + 1] = fvec
        fvec = nf
        if pvec is not None:
            np_ = np.zeros(newK + 1)
            np_[: K + 1] = pvec
            pvec = np_
        K = newK
        if gamma is not None:
            kp = size_powers(K, gamma)
        else:
            cmat = kernel.rate_matrix(K)
        return True

    def pack():
        if pvec is None:
            return np.concatenate([fvec, [leak]])
        return np.concatenate([fvec, pvec, [leak]])

    def unpack(y):
        nonlocal fvec, pvec, leak
        fvec = y[: K + 1].copy()
        if pvec is not None:
            pvec = y[K + 1 : 2 * K + 2].copy()
            pvec[0] = 0.0
        leak = float(y[-1])

    def rhs(y):
        fv = y[: K + 1]
        if gamma is not None:
            m_g = float(np.dot(kp, fv))
            mu = kp * m_g
        else:
            mu = cmat @ fv
        df = _stencil(mu * fv)
        dleak = (K + 1) * mu[K] * fv[K]
        if pvec is None:
            return np.concatenate([df, [dleak]])
        pv = y[K + 1 : 2 * K + 2]
        dp = sbm_rhs(pv, fv, kernel, cmat)
        return np.concatenate([df, dp, [dleak]])

    leak = 0.0
    t = 0.0
    record_idx = 0

    def record_up_to(tcur):
        nonlocal record_idx
        while record_idx < len(grid) and grid[record_idx] <= tcur + 1e-15:
            traj.times.append(float(grid[record_idx]))
            traj.fs.append(fvec.copy())
            traj.leaks.append(leak)
            if traj.ps is not None:
                traj.ps.append(pvec.copy())
            record_idx += 1

    record_up_to(t)
    y = pack()
    dt = min(1e-4, t_end if t_end > 0 else 1e-4)
    nstage = 7
    karr = np.arange(K + 1, dtype=float)

    while t < t_end - 1e-14:
        t_target = grid[record_idx] if record_idx < len(grid) else t_end
        hit_target = dt >= t_target - t
        dt_try = (t_target - t) if hit_target else dt
        ks = [None] * nstage
        ks[0] = rhs(y)
        for i in range(1, nstage):
            yi = y + dt_try * sum(a * ks[j] for j, a in enumerate(_A[i]))
            ks[i] = rhs(yi)
        y5 = y + dt_try * sum(b * ks[i] for i, b in enumerate(_B5) if b != 0.0)
        y4 = y + dt_try * sum(b * ks[i] for i, b in enumerate(_B4) if b != 0.0)
        err = y5 - y4
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        # max norm: the clip policy below needs per-component errors held
        # to their own scale, which an RMS norm does not guarantee; the
        # factor 2 covers the gap between the embedded estimate and the
        # true local error
        errnorm = 2.0 * float(np.max(np.abs(err) / scale))
        accepted = errnorm <= 1.0
        if accepted:
            t = t_target if hit_target else t + dt_try
            fpart = y5[: K + 1]
            neg = fpart < 0.0
            if np.any(neg):
                clipped = -float(fpart[neg].sum())
                if float(fpart.min()) < -atol or clipped > 10.0 * atol:
                    raise IntegrationAbort(
                        f"negativity {fpart.min():.3e} (total {clipped:.3e}) "
                        f"at t={t:.6g} exceeds roundoff tolerance"
                    )
            # flush sub-atol values along with the negatives: they are
            # below the resolution of the error control, and the
            # conservative stencil transports such deposits ballistically
            # into a spurious tail plateau that trips the truncation
            # trigger if they are left in place
            kill = fpart < atol
            if np.any(kill):
                total_before = fpart.sum()
                mass_before = float(np.dot(karr, fpart))
                fpart[kill] = 0.0
                pos_sum = fpart.sum()
                if pos_sum > 0:
                    fpart *= total_before / pos_sum
                y5[: K + 1] = fpart
                # flushed k-weighted mass is truncation loss; book it in
                # the leak ledger so conservation stays exact
                y5[-1] += mass_before - float(np.dot(karr, fpart))
            y = y5
            unpack(y)
            record_up_to(t)
            m2 = float(np.dot(karr * karr, fvec))
            if m2 > m2_ceiling:
                traj.blown_up = True
                traj.t_blowup = t
                traj.annotations.append(
                    f"m2 = {m2:.3e} exceeded ceiling {m2_ceiling:.1e} at t={t:.6g}"
                )
                break
            if not traj.blown_up and leak > LEAK_BLOWUP_FRAC * rho:
                traj.blown_up = True
                traj.t_blowup = t
                traj.annotations.append(
                    f"truncation leak {leak:.3e} exceeded {LEAK_BLOWUP_FRAC:g}"
                    f" of the initial mass at t={t:.6g} (K={K}); the tail"
                    " outruns every finite truncation"
                )
                if stop_on_blowup:
                    break
            if grow and K < k_cap:
                cut = int(0.9 * K)
                tail = float(np.dot(karr[cut:], fvec[cut:]))
                if tail > TAIL_THRESHOLD:
                    if rebuild(2 * K):
                        karr = np.arange(K + 1, dtype=float)
                        y = pack()
        # step-size update; a clamped accepted step keeps the cruise size
        factor = 5.0 if errnorm == 0.0 else min(5.0, max(0.2, 0.9 * errnorm ** -0.2))
        if accepted and hit_target:
            dt = max(dt, dt_try * factor)
        else:
            dt = dt_try * factor
        if dt < DT_BLOWUP:
            traj.blown_up = True
            traj.t_blowup = t
            traj.annotations.append(f"step size underflow (dt={dt:.3e}) at t={t:.6g}")
            break
    return traj


def write_trajectory_csv(traj: MeanFieldTrajectory, path_long, path_summary=None):
    """Long-format CSV t,k,f_k plus optional summary CSV."""
    with open(path_long, "w") as fh:
        fh.write("t,k,f_k\n")
        for t, f in zip(traj.times, traj.fs):
            for k, v in enumerate(f):
                if v != 0.0:
                    fh.write(f"{float(t)!r},{k},{float(v)!r}\n")
    if path_summary is not None:
        s = traj.summary()
        cols = ["t", "m0", "m1", "m2"]
        if "m_gamma" in s:
            cols.append("m_gamma")
        cols += ["f0", "ell", "leak"]
        with open(path_summary, "w") as fh:
            fh.write(",".join(cols) + "\n")
            for i in range(len(s["t"])):
                fh.write(",".join(repr(float(s[c][i])) for c in cols) + "\n")
