import numpy as np
import pytest
from scipy.integrate import solve_ivp

from edglab.kernels import make_product_kernel, make_table_kernel
from edglab.meanfield import (
    boundary_flux,
    coarsening_scale,
    edg_rhs,
    edg_rhs_product,
    integrate,
    mu_of,
    mu_vec,
    poisson_profile,
    sbm_rhs,
    write_trajectory_csv,
)


def reference_rhs(f, kernel):
    """Direct birth-death transcription: birth mu_k, death mu_k (k >= 1),
    no birth at k = 0; written with explicit loops as an oracle."""
    K = len(f) - 1
    mu = [mu_of(f, kernel, k) for k in range(K + 1)]
    out = np.zeros(K + 1)
    for k in range(K + 1):
        gain = 0.0
        if k >= 1:
            gain += mu[k - 1] * f[k - 1]          # birth from below
        if k + 1 <= K:
            gain += mu[k + 1] * f[k + 1]          # death from above
        loss = 2.0 * mu[k] * f[k] if k >= 1 else 0.0
        out[k] = gain - loss
    return out


@pytest.fixture
def f_small():
    f = np.array([0.35, 0.3, 0.2, 0.1, 0.05])
    assert f.sum() == pytest.approx(1.0)
    return f


def test_poisson_profile():
    f = poisson_profile(1.0, 64)
    assert f.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.dot(np.arange(65), f) == pytest.approx(1.0, abs=1e-12)
    assert np.all(f >= 0)


def test_mu_vec_matches_mu_of(f_small):
    for ker in (make_product_kernel(1.5),
                make_table_kernel(np.pad(1.0 + np.arange(16).reshape(4, 4)
                                         * 0.1, ((1, 0), (1, 0))), 1, 1, 5)):
        mu = mu_vec(f_small, ker)
        for k in range(len(f_small)):
            assert mu[k] == pytest.approx(mu_of(f_small, ker, k), rel=1e-12)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 1.75])
def test_rhs_matches_reference(f_small, gamma):
    ker = make_product_kernel(gamma)
    expect = reference_rhs(f_small, ker)
    np.testing.assert_allclose(edg_rhs(f_small, ker), expect, atol=1e-14)
    np.testing.assert_allclose(edg_rhs_product(f_small, gamma), expect,
                               atol=1e-14)


def test_rhs_hand_value():
    # f = (0.5, 0.3, 0.2), gamma = 1: m_1 = 0.7, mu_k = 0.7 k
    # df_0 = mu_1 f_1 = 0.21
    # df_1 = mu_2 f_2 - 2 mu_1 f_1 = 0.28 - 0.42 = -0.14
    # df_2 = mu_1 f_1 - 2 mu_2 f_2 = 0.21 - 0.56 = -0.35
    f = np.array([0.5, 0.3, 0.2])
    rhs = edg_rhs(f, make_product_kernel(1.0))
    np.testing.assert_allclose(rhs, [0.21, -0.14, -0.35], atol=1e-15)


def test_rhs_conservation_up_to_boundary(f_small):
    ker = make_product_kernel(1.2)
    rhs = edg_rhs(f_small, ker)
    nflux, mflux = boundary_flux(f_small, ker)
    K = len(f_small) - 1
    # the truncated chain loses number through births at K only, and each
    # lost birth carries K+1 particles
    assert rhs.sum() == pytest.approx(-nflux, rel=1e-12)
    assert np.dot(np.arange(K + 1), rhs) == pytest.approx(-mflux, rel=1e-10)


def test_integrate_matches_scipy_reference():
    ker = make_product_kernel(1.0)
    f0 = poisson_profile(1.0, 32)
    f0 = f0 / f0.sum()
    grid = np.linspace(0.0, 1.0, 5)
    traj = integrate(f0, ker, 1.0, grid=grid, grow=False, rtol=1e-10,
                     atol=1e-14)
    # integrate() starts at its own truncation; give BDF the same system
    f0p = np.zeros(len(traj.fs[0]))
    f0p[: len(f0)] = f0
    ref = solve_ivp(lambda t, y: edg_rhs(y, ker), (0.0, 1.0), f0p,
                    method="BDF", t_eval=grid, rtol=1e-10, atol=1e-14)
    assert ref.success
    for i in range(len(grid)):
        np.testing.assert_allclose(traj.fs[i], ref.y[:, i], atol=1e-6)


def test_integrate_conserves_mass_with_leak_ledger():
    ker = make_product_kernel(1.25)
    traj = integrate(poisson_profile(1.0, 64), ker, 1.5,
                     grid=np.linspace(0, 1.5, 7))
    for f, leak in zip(traj.fs, traj.leaks):
        assert abs(f.sum() - 1.0) <= 1e-8
        mass = float(np.dot(np.arange(len(f)), f))
        assert abs(mass + leak - traj.rho) <= 1e-9
        assert np.all(f >= 0.0)


def test_integrate_input_validation():
    ker = make_product_kernel(1.0)
    with pytest.raises(ValueError):
        integrate(np.array([0.5, 0.2]), ker, 1.0)        # not normalized
    with pytest.raises(ValueError):
        integrate(np.array([1.2, -0.2]), ker, 1.0)       # negative entry
    with pytest.raises(ValueError):
        integrate(np.array([1.0, 0.0]), ker, 1.0)        # no particles


def test_sizebias_consistency_short():
    # with p(0) = k f(0) / rho the two hierarchies stay glued together
    ker = make_product_kernel(1.0)
    traj = integrate(poisson_profile(1.0, 64), ker, 0.5,
                     grid=[0.0, 0.25, 0.5], track_sizebias=True)
    for f, p in zip(traj.fs, traj.ps):
        k = np.arange(len(f), dtype=float)
        assert np.max(np.abs(p - k * f / traj.rho)) <= 1e-7


def test_sbm_rhs_is_consistent_with_master_equation(f_small):
    # d/dt (k f_k / rho) must equal sbm_rhs at p = k f / rho.  The identity
    # is an infinite-system statement, so pad the profile with zeros to
    # push both truncation boundaries out of the populated rows.
    ker = make_product_kernel(1.0)
    f = np.zeros(12)
    f[: len(f_small)] = f_small
    rho = float(np.dot(np.arange(len(f)), f))
    k = np.arange(len(f), dtype=float)
    p = k * f / rho
    lhs = k * edg_rhs(f, ker) / rho
    rhs = sbm_rhs(p, f, ker)
    np.testing.assert_allclose(rhs[:8], lhs[:8], atol=1e-12)


def test_blowup_flag_gamma_175():
    ker = make_product_kernel(1.75)
    traj = integrate(poisson_profile(1.0, 64), ker, 5.0,
                     grid=np.linspace(0, 5.0, 51), k_cap=64)
    assert traj.blown_up
    assert traj.t_blowup is not None
    assert traj.t_blowup < 5.0
    assert traj.times[-1] < 5.0       # stopped at the flag by default


def test_trajectory_interpolation_and_series():
    ker = make_product_kernel(1.0)
    traj = integrate(poisson_profile(1.0, 32), ker, 1.0,
                     grid=[0.0, 0.5, 1.0])
    np.testing.assert_allclose(traj.f_at(0.0), traj.fs[0])
    mid = traj.f_at(0.25)
    a, b = traj.fs[0], traj.fs[1]
    n = max(len(a), len(b))
    pa, pb = np.zeros(n), np.zeros(n)
    pa[: len(a)] = a
    pb[: len(b)] = b
    np.testing.assert_allclose(mid, 0.5 * (pa + pb))
    assert traj.moment_series(1)[0] == pytest.approx(1.0, abs=1e-10)
    ell = traj.ell_series()
    assert np.all(ell > 0)
    assert ell[-1] > ell[0]           # coarsening moves upward
    assert coarsening_scale(traj.fs[0]) == pytest.approx(ell[0])


def test_write_trajectory_csv(tmp_path):
    ker = make_product_kernel(1.0)
    traj = integrate(poisson_profile(1.0, 32), ker, 0.5, grid=[0.0, 0.5])
    long_path = tmp_path / "profile.csv"
    sum_path = tmp_path / "summary.csv"
    write_trajectory_csv(traj, long_path, sum_path)
    lines = long_path.read_text().splitlines()
    assert lines[0] == "t,k,f_k"
    assert len(lines) > 2
    header = sum_path.read_text().splitlines()[0].split(",")
    assert header[:4] == ["t", "m0", "m1", "m2"]
