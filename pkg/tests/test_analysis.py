import numpy as np
import pytest

from edglab.analysis import (
    InsufficientDynamicRange,
    absorption_study,
    fit_coarsening,
    lln_distance,
    moment_convergence_check,
    moment_growth_check,
    run_ensemble,
    summarize_ensemble,
    tv_distance,
    two_site_chaos_check,
    weak_form_residual,
)
from edglab.kernels import make_product_kernel
from edglab.meanfield import MeanFieldTrajectory, integrate, poisson_profile
from edglab.records import TrajectoryRecord


def test_tv_distance():
    assert tv_distance([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert tv_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    assert tv_distance([0.5, 0.5], [0.25, 0.75]) == pytest.approx(0.25)
    # zero padding of unequal supports
    assert tv_distance([1.0], [0.5, 0.5]) == pytest.approx(0.5)
    assert tv_distance([0.3, 0.7], [0.7, 0.3]) == tv_distance([0.7, 0.3],
                                                              [0.3, 0.7])


def two_hand_records():
    r1 = TrajectoryRecord(L=4, N=4, replica=0, seed=0)
    r1.append(0.0, {1: 4})
    r1.append(1.0, {2: 2})
    r2 = TrajectoryRecord(L=4, N=4, replica=1, seed=0)
    r2.append(0.0, {1: 2, 2: 1})
    r2.append(1.0, {4: 1})
    return [r1, r2]


def test_summarize_ensemble_hand_values():
    s = summarize_ensemble(two_hand_records())
    assert s.replicas == 2 and s.L == 4 and s.N == 4
    np.testing.assert_allclose(s.times, [0.0, 1.0])
    # t=0: F = (0,1,0,0,0) and (1/4, 1/2, 1/4, 0, 0)
    np.testing.assert_allclose(s.f_mean[0], [0.125, 0.75, 0.125, 0.0, 0.0])
    # every mean row is a probability vector
    np.testing.assert_allclose(s.f_mean.sum(axis=1), 1.0)
    # first moment is conserved at N/L = 1 in each replica
    np.testing.assert_allclose(s.moments_mean[1], [1.0, 1.0])
    # t=1 second moment: (2 * 4 / 4 + 16 / 4) / 2
    assert s.moments_mean[2][1] == pytest.approx(3.0)


def test_summarize_ensemble_rejects_mismatched_grids():
    r1, r2 = two_hand_records()
    r2.times[1] = 2.0
    with pytest.raises(ValueError):
        summarize_ensemble([r1, r2])
    with pytest.raises(ValueError):
        summarize_ensemble([])


def test_run_ensemble_deterministic():
    ker = make_product_kernel(1.0)
    a = run_ensemble(ker, 100, 100, 0.5, [0.0, 0.5], 3, master_seed=42)
    b = run_ensemble(ker, 100, 100, 0.5, [0.0, 0.5], 3, master_seed=42)
    for ra, rb in zip(a, b):
        assert ra.counts == rb.counts
    c = run_ensemble(ker, 100, 100, 0.5, [0.0, 0.5], 3, master_seed=43)
    assert any(ra.counts != rc.counts for ra, rc in zip(a, c))


def test_lln_distance_zero_against_itself():
    s = summarize_ensemble(two_hand_records())
    mf = MeanFieldTrajectory(times=[0.0, 1.0],
                             fs=[s.f_mean[0].copy(), s.f_mean[1].copy()],
                             leaks=[0.0, 0.0], rho=1.0, gamma=1.0)
    gaps = lln_distance(s, mf)
    np.testing.assert_allclose(gaps["sup_gap"], 0.0, atol=1e-15)
    np.testing.assert_allclose(gaps["l1_gap"], 0.0, atol=1e-15)


def small_ensemble():
    ker = make_product_kernel(1.0)
    grid = np.linspace(0.0, 0.5, 6)
    recs = run_ensemble(ker, 300, 300, 0.5, grid, 4, master_seed=17)
    return summarize_ensemble(recs), ker


def test_weak_form_conserved_test_functions():
    s, ker = small_ensemble()
    # h constant and h linear are conserved by every exchange, so the
    # residual is pure quadrature noise
    assert weak_form_residual(s, ker, lambda k: 1.0, 0.5) < 1e-12
    assert weak_form_residual(s, ker, lambda k: float(k), 0.5) < 1e-12
    with pytest.raises(ValueError):
        weak_form_residual(s, ker, lambda k: 1.0, 0.123)   # off-grid time


def test_moment_checks_smoke():
    s, ker = small_ensemble()
    out = moment_growth_check(s, 2, gamma=1.0)
    assert out["m_n"][0] > 0
    assert np.isfinite(out["exp_rate"])
    mf = integrate(poisson_profile(1.0, 64), ker, 0.5, grid=s.times)
    gaps = moment_convergence_check(s, mf, 1)
    assert np.all(gaps >= 0)
    assert gaps.max() < 1.0


def test_fit_power_law_exact_recovery():
    t = np.linspace(1.0, 300.0, 200)
    fit = fit_coarsening(t, 2.5 * t**0.5, gamma=0.5)
    assert fit.regime == "power"
    assert abs(fit.beta_hat - 0.5) < 1e-6
    assert fit.expected_beta == pytest.approx(0.5)    # 1 / (3 - 2 * 0.5)
    assert fit.r2 > 1.0 - 1e-12


def test_fit_exponential_exact_recovery():
    t = np.linspace(0.0, 3.0, 100)
    fit = fit_coarsening(t, 1.7 * np.exp(3.0 * t), gamma=1.5)
    assert fit.regime == "exponential"
    assert abs(fit.beta_hat - 3.0) < 1e-8


def test_fit_gelation_exact_recovery():
    t_gel = 2.0
    t = np.linspace(0.1, 1.9, 150)
    ell = 0.8 * (t_gel - t) ** -2.0
    fit = fit_coarsening(t, ell, gamma=1.75)
    assert fit.regime == "gelation"
    assert abs(fit.beta_hat - (-2.0)) < 1e-4
    assert fit.t_gel == pytest.approx(t_gel, abs=1e-4)
    assert fit.expected_beta == pytest.approx(-2.0)


def test_fit_coarsening_guards():
    t = np.linspace(1.0, 2.0, 50)
    with pytest.raises(InsufficientDynamicRange):
        fit_coarsening(t, np.full(50, 3.0), gamma=1.0)     # no growth
    with pytest.raises(ValueError):
        fit_coarsening(t, t**2, gamma=2.0)                 # no solution
    with pytest.raises(InsufficientDynamicRange):
        fit_coarsening(t[:3], t[:3] ** 2, gamma=1.0)       # too few points


def test_fit_gelation_leak_trust_window():
    # late samples with heavy leak carry a corrupted exponent; the trust
    # window must drop them
    t_gel = 2.0
    t = np.linspace(0.1, 1.95, 200)
    ell = (t_gel - t) ** -2.0
    leaks = np.where(t < 1.5, 0.0, 0.5)      # second half: 50% mass leaked
    ell = ell.copy()
    ell[t >= 1.5] *= np.linspace(1.0, 5.0, (t >= 1.5).sum())  # corrupted
    fit = fit_coarsening(t, ell, gamma=1.75, leaks=leaks, rho0=1.0)
    assert abs(fit.beta_hat - (-2.0)) < 1e-3
    assert fit.window[1] < 1.5


def test_fit_accepts_trajectory():
    ker = make_product_kernel(1.0)
    traj = integrate(poisson_profile(1.0, 64), ker, 40.0,
                     grid=np.linspace(0.0, 40.0, 161), atol=1e-10)
    fit = fit_coarsening(traj)
    assert fit.regime == "power"
    assert fit.expected_beta == pytest.approx(1.0)
    assert abs(fit.beta_hat - 1.0) < 0.15


def test_two_site_chaos_smoke():
    ker = make_product_kernel(1.0)
    out = two_site_chaos_check(ker, 20, 20, 0.5, replicas=200, master_seed=1)
    assert out["marginal"].sum() == pytest.approx(1.0)
    assert out["joint"].sum() == pytest.approx(1.0)
    assert 0.0 <= out["product_tv"] <= 1.0
    assert out["max_cov"] <= out["product_tv"] * 2.0 + 1.0


def test_absorption_study_smoke():
    ker = make_product_kernel(1.0)
    out = absorption_study(ker, [2], 1.0, replicas=40, master_seed=5)
    res = out[2]
    assert res["completed"] + res["censored"] == 40
    assert res["median"] > 0
    assert res["q25"] <= res["median"] <= res["q75"]
    assert out["nondecreasing"] is True
