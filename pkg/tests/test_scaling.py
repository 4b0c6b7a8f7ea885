import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from voltra.cgf import FlatCurve, HestonCurve, cgf_from_grid, cgf_increment
from voltra.errors import DomainError, StructureError
from voltra.kernels import ExponentialKernel, MittagLefflerKernel, gamma_resolvent
from voltra.riccati import Dirac, ExponentialLaw, JumpSpec, r_lambda, r_v, solve_riccati
from voltra.scaling import (
    DEFAULT_EPS,
    ScalingFamily,
    cgf_convergence_experiment,
    fit_order,
    limit_params,
    multi_convergence_experiment,
    r_epsilon_gap,
    rescale,
    scaled_family,
    w_star_gaps,
)

A = 1.0 / math.sqrt(2.0)
SPEC = JumpSpec(Dirac(A), Dirac(A), 1.0, 0.5)


@pytest.fixture(scope="module")
def family():
    return ScalingFamily(SPEC, ExponentialKernel(1.0, 1.0), FlatCurve(1.0))


# -- limit parameters ----------------------------------------------------------------


def test_symmetric_impacts_cancel():
    p, c, rho = limit_params(JumpSpec(Dirac(A), Dirac(A), 0.4, 0.4))
    assert p == pytest.approx(0.5) and c == pytest.approx(0.4) and rho == pytest.approx(0.0, abs=1e-15)


def test_one_sided_impact():
    p, c, rho = limit_params(JumpSpec(Dirac(A), Dirac(A), 1.0, 0.0))
    assert c == pytest.approx(A, rel=1e-15) and rho == pytest.approx(A, rel=1e-15)


def test_correlation_tends_to_one_as_buys_dominate():
    rhos = []
    for d in (1e-1, 1e-2, 1e-3):
        spec = JumpSpec(Dirac(math.sqrt(1 - d)), Dirac(math.sqrt(d)), 0.7, 0.7)
        rhos.append(limit_params(spec)[2])
        assert rhos[-1] == pytest.approx(1 - 2 * d, rel=1e-12)
    assert rhos[0] < rhos[1] < rhos[2] < 1


def test_limit_params_errors():
    with pytest.raises(DomainError):
        limit_params(JumpSpec(Dirac(1.0), Dirac(1.0), 1.0, 1.0))
    with pytest.raises(StructureError):
        limit_params(JumpSpec(Dirac(A), Dirac(A), 0.0, 0.0))


IMPACT = st.one_of(st.just(0.0), st.floats(1e-6, 2.0))


@given(p=st.floats(0.01, 0.99), gp=IMPACT, gm=IMPACT)
def test_limit_correlation_bounds(p, gp, gm):
    if gp == 0 and gm == 0:
        return
    spec = JumpSpec(ExponentialLaw(math.sqrt(p / 2)), Dirac(math.sqrt(1 - p)), gp, gm)
    q, c, rho = limit_params(spec)
    assert q == pytest.approx(p, rel=1e-12)
    assert -1 < rho < 1
    assert c == pytest.approx(math.hypot(math.sqrt(p) * gp, math.sqrt(1 - p) * gm), rel=1e-12)


# -- rescaling -----------------------------------------------------------------------


def test_rescale_identity_at_one(family):
    m = rescale(family, 1.0)
    assert m.jumps == SPEC
    assert m.kernel == family.kernel and m.curve == family.curve


def test_rescale_scales_marks_kernel_and_curve(family):
    m = rescale(family, 0.04)
    assert m.jumps.plus == Dirac(A * 0.2)
    assert m.kernel == ExponentialKernel(25.0, 1.0)
    assert m.curve == FlatCurve(25.0)
    assert m.jumps.m_x == pytest.approx(math.expm1(0.2 * A) + math.expm1(-0.2 * A), rel=1e-14)
    with pytest.raises(DomainError):
        rescale(family, 0.0)
    h = ScalingFamily(SPEC, ExponentialKernel(1.0, 1.0), HestonCurve(0.5, 1.0, 2.0))
    assert rescale(h, 0.5).curve == HestonCurve(1.0, 2.0, 2.0)


def test_rescaled_cgf_equals_direct_route(family):
    # int g^eps xi_0^eps with g^eps from the rescaled model equals int (g^eps / eps) xi_0
    eps, dt = 1e-2, 1e-3
    direct = cgf_increment(rescale(family, eps), 0.5, 1.0, dt)
    grid = solve_riccati(scaled_family(SPEC, eps), family.kernel, 0.5, 1.0, dt, bounds=False)
    assert direct == pytest.approx(cgf_from_grid(grid, family.curve), rel=1e-10)


def test_unstable_hawkes_round_trip():
    # phi_eps has Laplace transform 1 / (eps (z**a + lam) + g); its g-resolvent is kappa / eps
    eps, alpha, lam, g = 0.1, 0.6, 1.0, 0.5
    phi = MittagLefflerKernel(1.0 / eps, alpha, lam + g / eps)
    for z in (0.5, 2.0):
        assert phi.laplace(z) == pytest.approx(1.0 / (eps * (z**alpha + lam) + g), rel=1e-14)
    r = gamma_resolvent(phi, g, 1000, 1e-3)
    t = 1e-3 * np.arange(1, 1001)
    assert np.max(np.abs(r(t) - MittagLefflerKernel(1.0, alpha, lam)(t) / eps)) < 1e-3


# -- nonlinearity gaps ---------------------------------------------------------------


def test_gap_vanishes_at_origin():
    for eps in DEFAULT_EPS:
        s = scaled_family(SPEC, eps)(0.0)
        assert s(0.0) == 0.0
        assert r_epsilon_gap(SPEC, eps, n_u=1, n_w=1, w_range=(0.0, 0.0)).value == 0.0


def test_gap_is_order_half():
    gaps = [r_epsilon_gap(SPEC, e) for e in DEFAULT_EPS]
    values = [g.value for g in gaps]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert 0.35 <= fit_order(DEFAULT_EPS, values) <= 0.65
    ratio = r_epsilon_gap(SPEC, 1e-2).value / r_epsilon_gap(SPEC, 2.5e-3).value
    assert ratio == pytest.approx(2.0, rel=0.05)
    for name in ("du", "dw"):
        d = [getattr(g, name) for g in gaps]
        assert all(a > b for a, b in zip(d, d[1:]))


def test_scaled_nonlinearity_convex_in_w():
    w = np.linspace(-1.0, 0.0, 201)
    for eps in DEFAULT_EPS:
        for u in (0.2, 0.5, 0.8):
            v = r_lambda(u, w, SPEC.scaled(math.sqrt(eps))) / eps
            assert np.all(np.diff(v, 2) > -1e-12)


def test_limit_nonlinearity_is_attained():
    _, c, rho = limit_params(SPEC)
    u, w = 0.3, -0.4
    v = r_lambda(u, w, SPEC.scaled(math.sqrt(1e-8))) / 1e-8
    assert v == pytest.approx(r_v(u, c * w, rho), abs=1e-3)


def test_root_converges():
    gaps = w_star_gaps(SPEC, [1e-2, 1e-3, 1e-4], np.linspace(0.1, 0.9, 9))
    assert np.all(np.diff(gaps) < 0)
    assert gaps[-1] < 1e-2


# -- CGF convergence -------------------------------------------------------------------


def test_cgf_convergence(family):
    report = cgf_convergence_experiment(family, [0.0, 0.5, 1.0], 1.0, 1e-3)
    eps, cgf_gap = report.gaps(0.5)
    assert np.all(np.diff(cgf_gap) < 0)
    assert cgf_gap[-1] < 1e-2
    _, ric_gap = report.gaps(0.5, "riccati_gap")
    assert np.all(np.diff(ric_gap) < 0)
    for u in (0.0, 1.0):
        assert np.all(report.gaps(u)[1] == 0.0)
    assert "fitted order" in report.summary()


def test_multi_horizon_convergence(family):
    report = multi_convergence_experiment(family, [0.0, 0.5, 1.0], [0.5, 0.3], 1e-3)
    gaps = [r[3] for r in report.rows]
    assert all(a > b for a, b in zip(gaps, gaps[1:]))
    with pytest.raises(DomainError):
        multi_convergence_experiment(family, [0.0, 0.5, 1.0], [0.3, 0.5], 1e-3)


def test_report_csv(tmp_path, family):
    report = cgf_convergence_experiment(family, [0.5], 0.5, 1e-2, eps=[1e-1, 1e-2])
    lines = report.to_csv(tmp_path / "hf.csv").read_text().splitlines()
    assert lines[0] == "eps,u,riccati_gap,cgf_gap"
    assert len(lines) == 3
