import math
import warnings

import numpy as np
import pytest
from scipy import stats

from voltra.cgf import FlatCurve, HestonCurve, afv_model, cgf_increment, cumulants, hawkes_forward_curve, joint_cgf, multi_cgf
from voltra.errors import DomainError, PreconditionError
from voltra.kernels import ConstantKernel, ExponentialKernel, MittagLefflerKernel
from voltra.riccati import Dirac, ExponentialLaw, JumpSpec
from voltra.simulate import (
    empirical_cgf,
    empirical_mean,
    hawkes_mean_intensity,
    hawkes_resolvent,
    path_rng,
    simulate_afi_grid,
    simulate_afi_thinning,
    simulate_afv,
)


@pytest.fixture(scope="module")
def heston_kernel_curve():
    from conftest import HESTON as p

    return ExponentialKernel(p["zeta"], p["lam"]), HestonCurve(p["v0"], p["theta"], p["lam"])


@pytest.fixture(scope="module")
def heston_batch(heston_kernel_curve):
    kernel, curve = heston_kernel_curve
    return simulate_afv(kernel, curve, -0.7, 1.0, 2e-3, 40_000, seed=11, observe=(0.5, 1.0))


# -- random streams ------------------------------------------------------------------


def test_path_streams_are_reproducible_and_disjoint():
    a = path_rng(5, 3).random(4)
    np.testing.assert_array_equal(a, path_rng(5, 3).random(4))
    assert not np.array_equal(a, path_rng(5, 4).random(4))
    assert not np.array_equal(a, path_rng(5, 3, stream=1).random(4))
    with pytest.raises(DomainError):
        path_rng(-1, 0)


def test_afv_independent_of_chunking_and_threads(heston_kernel_curve):
    kernel, curve = heston_kernel_curve
    a = simulate_afv(kernel, curve, -0.7, 0.5, 1e-2, 50, seed=7)
    b = simulate_afv(kernel, curve, -0.7, 0.5, 1e-2, 50, seed=7, threads=4, chunk=7)
    np.testing.assert_array_equal(a.x_T, b.x_T)
    np.testing.assert_array_equal(a.v_T, b.v_T)
    # one path on its own reproduces its entry in the batch
    c = simulate_afv(kernel, curve, -0.7, 0.5, 1e-2, 3, seed=7)
    np.testing.assert_array_equal(c.x_T, a.x_T[:3])


def test_afv_generic_kernel_path_matches_markov_recursion():
    # the O(n^2) convolution and the O(n) recursion agree; ML with alpha = 1 is exponential
    curve = FlatCurve(0.04)
    fast = simulate_afv(ExponentialKernel(0.3, 1.2), curve, -0.5, 0.5, 1e-2, 20, seed=2)
    slow = simulate_afv(MittagLefflerKernel(0.3, 1.0, 1.2), curve, -0.5, 0.5, 1e-2, 20, seed=2)
    np.testing.assert_allclose(slow.x_T, fast.x_T, atol=1e-12)
    np.testing.assert_allclose(slow.v_T, fast.v_T, atol=1e-12)


def test_afv_without_vol_of_vol_is_gaussian():
    batch = simulate_afv(ConstantKernel(0.0), FlatCurve(0.04), -0.7, 1.0, 1e-2, 20_000, seed=1)
    assert np.all(batch.v_T == 0.04)
    res = stats.kstest(batch.x_T, stats.norm(-0.02, 0.2).cdf)
    assert res.pvalue > 1e-3


def test_afv_observation_at_horizon(heston_batch):
    np.testing.assert_array_equal(heston_batch.x_obs[:, 1], heston_batch.x_T)
    with pytest.raises(DomainError):
        simulate_afv(ConstantKernel(0.0), FlatCurve(0.04), 0.0, 1.0, 1e-2, 2, seed=1, observe=(0.005,))


def test_afv_store_paths():
    b = simulate_afv(ExponentialKernel(0.3, 1.2), FlatCurve(0.04), 0.0, 0.1, 1e-2, 4, seed=3, store_paths=True)
    assert b.x_paths.shape == (4, 11)
    np.testing.assert_array_equal(b.x_paths[:, -1], b.x_T)
    assert np.all(b.v_paths[:, 0] == 0.04)


# -- AFV against the analytic CGF ----------------------------------------------------


def test_afv_martingale(heston_batch):
    m, se = empirical_mean(np.exp(heston_batch.x_T))
    assert abs(m - 1.0) < 3 * se


@pytest.mark.parametrize("u", [0.25, 0.5, 0.75])
def test_afv_cgf(heston_batch, heston_kernel_curve, u):
    kernel, curve = heston_kernel_curve
    exact = cgf_increment(afv_model(kernel, curve, -0.7), u, 1.0, 1e-3)
    est, se = empirical_cgf(heston_batch, u)
    assert abs(est - exact) < 3 * se


def test_afv_variance_mean(heston_batch, heston_kernel_curve):
    _, curve = heston_kernel_curve
    m, se = empirical_mean(heston_batch.v_T)
    assert abs(m - curve(1.0)) < 3 * se


def test_afv_mean_and_variance_of_log_price(heston_batch, heston_kernel_curve):
    kernel, curve = heston_kernel_curve
    mean, var = cumulants(afv_model(kernel, curve, -0.7), 1.0, 1e-3)
    x = heston_batch.x_T
    m, se = empirical_mean(x)
    assert abs(m - mean) < 3 * se
    s2 = np.var(x, ddof=1)
    se_var = math.sqrt((np.mean((x - m) ** 4) - s2**2) / x.size)
    assert abs(s2 - var) < 3 * se_var


def test_afv_multi_horizon_cgf(heston_batch, heston_kernel_curve):
    kernel, curve = heston_kernel_curve
    exact = multi_cgf(afv_model(kernel, curve, -0.7), [0.0, 0.5, 1.0], [0.3, 0.4], 1e-3)
    x1 = heston_batch.x_obs[:, 0]
    y = 0.3 * x1 + 0.4 * (heston_batch.x_T - x1)
    est, se = empirical_cgf(y, 1.0)
    assert abs(est - exact) < 3 * se


def test_afv_joint_cgf_with_future_variance(heston_batch, heston_kernel_curve):
    # Heston forward curve at T: xi_T(s) = theta + (V_T - theta) exp(-lam (s - T))
    from conftest import HESTON as p

    kernel, curve = heston_kernel_curve
    delta, c = 0.2, -2.0
    exact = joint_cgf(afv_model(kernel, curve, -0.7), 0.5, lambda s: np.full_like(s, c), 1.0, delta, 1e-3)
    future = p["theta"] * delta + (heston_batch.v_T - p["theta"]) * -math.expm1(-p["lam"] * delta) / p["lam"]
    est, se = empirical_cgf(0.5 * heston_batch.x_T + c * future, 1.0)
    assert abs(est - exact) < 3 * se


def test_empirical_cgf_trivial_cases():
    x = np.full(10, 0.3)
    assert empirical_cgf(x, 0.5) == (pytest.approx(0.15, abs=1e-15), 0.0)
    assert empirical_cgf(np.random.default_rng(0).normal(size=100), 0.0)[0] == 0.0
    with pytest.raises(DomainError):
        empirical_cgf(x, 1.5)


# -- AFI -------------------------------------------------------------------------------

UNIT = JumpSpec(Dirac(1.0), Dirac(1.0), 0.3, 0.2)


def test_thinning_without_excitation_is_poisson():
    batch = simulate_afi_thinning(1.5, ExponentialKernel(1.0, 1.0), JumpSpec(Dirac(1.0), Dirac(1.0), 0.0, 0.0), 2.0, 4000, seed=4)
    n = batch.n_events
    # buys and sells at rate mu each
    assert abs(n.mean() - 6.0) < 3 * math.sqrt(6.0 / n.size)
    assert np.var(n, ddof=1) == pytest.approx(6.0, rel=0.1)
    assert np.all(batch.lam_T == 1.5)


def test_thinning_intensity_mean():
    mu, phi = 1.0, ExponentialKernel(1.0, 1.5)
    batch = simulate_afi_thinning(mu, phi, UNIT, 1.0, 5000, seed=9)
    k = hawkes_resolvent(phi, UNIT.mean_impact, 1.0, 1e-3)
    m, se = empirical_mean(batch.lam_T)
    assert abs(m - hawkes_mean_intensity(mu, UNIT.mean_impact, k, 1.0)) < 3 * se


def test_thinning_events_are_consistent():
    batch = simulate_afi_thinning(1.0, ExponentialKernel(1.0, 1.5), UNIT, 1.0, 200, seed=9)
    for st, n in zip(batch.streams, batch.n_events):
        assert len(st.times) == n
        assert np.all(np.diff(st.times) >= 0) and np.all((st.times > 0) & (st.times <= 1.0))
        assert np.all(st.intensity >= 1.0)
    again = simulate_afi_thinning(1.0, ExponentialKernel(1.0, 1.5), UNIT, 1.0, 200, seed=9, threads=3, chunk=17)
    np.testing.assert_array_equal(again.x_T, batch.x_T)


def test_thinning_generic_kernel_matches_exponential_path():
    a = simulate_afi_thinning(1.0, ExponentialKernel(1.0, 1.5), UNIT, 1.0, 30, seed=5)
    b = simulate_afi_thinning(1.0, MittagLefflerKernel(1.0, 1.0, 1.5), UNIT, 1.0, 30, seed=5)
    np.testing.assert_array_equal(a.n_events, b.n_events)
    np.testing.assert_allclose(a.x_T, b.x_T, atol=1e-12)


def test_thinning_rejects_singular_kernel_and_warns_when_supercritical():
    with pytest.raises(PreconditionError):
        simulate_afi_thinning(1.0, MittagLefflerKernel(1.0, 0.7, 1.0), UNIT, 1.0, 10, seed=1)
    with pytest.warns(RuntimeWarning, match="branching ratio"):
        simulate_afi_thinning(1.0, ExponentialKernel(5.0, 1.0), UNIT, 0.05, 5, seed=1)


def test_grid_and_thinning_agree():
    mu, phi = 1.0, ExponentialKernel(1.0, 1.5)
    T = 1.0
    k = hawkes_resolvent(phi, UNIT.mean_impact, T, 1e-3)
    curve = hawkes_forward_curve(mu, UNIT.mean_impact, k)
    thin = simulate_afi_thinning(mu, phi, UNIT, T, 5000, seed=21, keep_events=False)
    grid = simulate_afi_grid(k, curve, UNIT, T, 1e-3, 5000, seed=22, keep_events=False)
    a, b = thin.n_events, grid.n_events
    assert abs(a.mean() - b.mean()) < 3 * math.sqrt(a.var() / a.size + b.var() / b.size)
    # buys and sells each arrive at the forward intensity
    assert abs(a.mean() - 2.0 * curve.integral(T)) < 3 * math.sqrt(a.var() / a.size)
    # both put mass exp(-2 mu T) on "no event", where X_T = -2 mu T m_X up to rounding
    assert stats.ks_2samp(np.round(thin.x_T, 10), np.round(grid.x_T, 10)).pvalue > 1e-3


def test_grid_events_and_clamp_diagnostic():
    k = ExponentialKernel(1.0, 1.0)
    batch = simulate_afi_grid(k, FlatCurve(1.0), JumpSpec(Dirac(1.0), ExponentialLaw(0.3), 0.3, 0.2), 1.0, 1e-2, 50, seed=3)
    for st, n in zip(batch.streams, batch.n_events):
        assert len(st.times) == n
    assert 0.0 <= batch.diagnostics["clamp_fraction"] <= 1.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        again = simulate_afi_grid(k, FlatCurve(1.0), UNIT, 1.0, 1e-2, 50, seed=3, threads=2, chunk=9)
    ref = simulate_afi_grid(k, FlatCurve(1.0), UNIT, 1.0, 1e-2, 50, seed=3)
    np.testing.assert_array_equal(again.x_T, ref.x_T)


def test_grid_generic_kernel_path_matches_markov_recursion():
    a = simulate_afi_grid(ExponentialKernel(1.0, 1.5), FlatCurve(1.0), UNIT, 0.5, 1e-2, 30, seed=8)
    b = simulate_afi_grid(MittagLefflerKernel(1.0, 1.0, 1.5), FlatCurve(1.0), UNIT, 0.5, 1e-2, 30, seed=8)
    np.testing.assert_array_equal(a.n_events, b.n_events)
    np.testing.assert_allclose(b.lam_T, a.lam_T, atol=1e-12)
    np.testing.assert_allclose(b.x_T, a.x_T, atol=1e-12)


def test_event_csv(tmp_path):
    batch = simulate_afi_thinning(1.0, ExponentialKernel(1.0, 1.5), UNIT, 0.5, 3, seed=2)
    path = batch.events_csv(tmp_path / "events.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "path,t,sign,mark"
    assert len(lines) == 1 + int(batch.n_events.sum())
    single = batch.streams[0].to_csv(tmp_path / "one.csv").read_text().splitlines()
    assert single[0] == "t,sign,mark" and len(single) == 1 + batch.n_events[0]
