import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.integrate import quad

from voltra.errors import DomainError, PreconditionError, SingularityError
from voltra.kernels import (
    ConstantKernel,
    ExponentialKernel,
    MittagLefflerKernel,
    PowerLawKernel,
    TabulatedKernel,
    conv_weights,
    eval_kernel,
    gamma_resolvent,
    kernel_from_record,
    kernel_primitive,
    laplace_transform,
    read_kernel_table,
    self_convolution,
)

# mpmath, 40 digits: int_0^1 0.3 s^-0.4 E_{0.6,0.6}(-1.2 s^0.6) ds = 0.3 E_{0.6,1.6}(-1.2)
ML_PRIMITIVE_AT_1 = 0.15944667793420998203

KERNELS = [
    ConstantKernel(0.3),
    ExponentialKernel(0.3, 1.2),
    PowerLawKernel(0.3, 0.7),
    MittagLefflerKernel(0.3, 0.6, 1.2),
    MittagLefflerKernel(1.0, 0.8, 0.5),
]


def _quad(fn, a, b):
    return quad(fn, a, b, limit=400, epsabs=1e-14, epsrel=1e-12)[0]


def test_evaluation_values():
    assert ConstantKernel(0.3)(2.0) == 0.3
    assert ExponentialKernel(0.3, 1.2)(1.0) == pytest.approx(0.3 * math.exp(-1.2), rel=1e-15)
    assert PowerLawKernel(0.3, 0.7)(2.0) == pytest.approx(0.3 * 2.0**-0.3, rel=1e-15)
    np.testing.assert_allclose(
        eval_kernel(ExponentialKernel(1.0, 2.0), np.array([0.0, 0.5])), [1.0, math.exp(-1.0)], rtol=1e-15
    )


def test_singular_kernels_reject_origin():
    with pytest.raises(SingularityError):
        MittagLefflerKernel(0.3, 0.6, 1.2)(0.0)
    with pytest.raises(SingularityError):
        PowerLawKernel(0.3, 0.7)(np.array([0.0, 1.0]))
    with pytest.raises(DomainError):
        ExponentialKernel(0.3, 1.2)(-1.0)


@pytest.mark.parametrize("alpha", [0.4, 0.5, 0.0, -0.2])
def test_alpha_at_most_half_rejected(alpha):
    with pytest.raises(DomainError):
        MittagLefflerKernel(0.3, alpha, 1.2)
    with pytest.raises(DomainError):
        PowerLawKernel(0.3, alpha)


def test_mittag_leffler_alpha_above_one_rejected():
    with pytest.raises(DomainError):
        MittagLefflerKernel(0.3, 1.2, 1.0)


def test_mittag_leffler_alpha_one_is_exponential():
    x = np.linspace(0.01, 5.0, 50)
    np.testing.assert_allclose(MittagLefflerKernel(0.3, 1.0, 1.2)(x), ExponentialKernel(0.3, 1.2)(x), rtol=1e-12)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
@pytest.mark.parametrize("t", [0.05, 1.0, 3.0])
def test_primitive_and_first_moment_against_quadrature(kernel, t):
    assert kernel_primitive(kernel, t) == pytest.approx(_quad(kernel, 0.0, t), rel=1e-9, abs=1e-13)
    assert kernel.first_moment(t) == pytest.approx(_quad(lambda s: s * kernel(s), 0.0, t), rel=1e-9, abs=1e-13)


@pytest.mark.parametrize("kernel", [k for k in KERNELS if k.kind != "power_law"], ids=lambda k: k.kind)
@pytest.mark.parametrize("z", [0.5, 1.0, 2.0])
def test_laplace_against_quadrature(kernel, z):
    ref = _quad(lambda s: math.exp(-z * s) * kernel(s), 0.0, 1.0) + _quad(lambda s: math.exp(-z * s) * kernel(s), 1.0, np.inf)
    assert laplace_transform(kernel, z) == pytest.approx(ref, rel=1e-8)


def test_frozen_mittag_leffler_values():
    k = MittagLefflerKernel(0.3, 0.6, 1.2)
    assert k.primitive(1.0) == pytest.approx(ML_PRIMITIVE_AT_1, rel=1e-12)
    # closed form: zeta / (z**alpha + lam)
    assert k.laplace(2.0) == pytest.approx(0.3 / (2.0**0.6 + 1.2), rel=1e-14)
    assert k.primitive(np.inf) == pytest.approx(0.3 / 1.2, rel=1e-14)


def test_laplace_rejects_non_positive_argument():
    with pytest.raises(DomainError):
        laplace_transform(ExponentialKernel(1.0, 1.0), 0.0)


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.kind)
def test_conv_weights_exact_for_linear_integrands(kernel):
    n, dt = 40, 0.025
    w = conv_weights(kernel, n, dt)
    t = dt * np.arange(n + 1)
    f = 0.7 - 1.3 * t
    got = w.apply(f)
    # (k * f)(t) = int_0^t k(tau) f(t - tau) dtau = 0.7 K(t) - 1.3 (t K(t) - K1(t))
    K = kernel.primitive(t)
    K1 = kernel.first_moment(t)
    np.testing.assert_allclose(got, 0.7 * K - 1.3 * (t * K - K1), atol=1e-13)
    np.testing.assert_allclose(w.row_sums(), K, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(w.matrix() @ f, got, atol=1e-14)


def test_self_convolution_exponential():
    n, dt = 200, 0.01
    t = dt * np.arange(n + 1)
    got = self_convolution(ExponentialKernel(0.5, 2.0), n, dt)
    # linear interpolation of the second factor: relative error lam**2 dt**2 / 12
    np.testing.assert_allclose(got[1:], 0.25 * t[1:] * np.exp(-2.0 * t[1:]), rtol=4e-5)


def test_self_convolution_power_law_beta_function():
    n, dt = 100, 0.01
    t = dt * np.arange(1, n + 1)
    got = self_convolution(PowerLawKernel(1.0, 0.7), n, dt)[1:]
    exact = math.gamma(0.7) ** 2 / math.gamma(1.4) * t**0.4
    np.testing.assert_allclose(got, exact, rtol=1e-6)


def test_resolvent_constant_to_exponential():
    zeta, lam = 0.3, 1.2
    n, dt = 1000, 1e-3
    r = gamma_resolvent(ConstantKernel(zeta), -lam / zeta, n, dt)
    t = dt * np.arange(n + 1)
    assert np.max(np.abs(r(t) - ExponentialKernel(zeta, lam)(t))) < 1e-6


def test_resolvent_mittag_leffler_pair():
    # r = k + 0.5 k * r with k = ML(1, 0.6, 1.5) is ML(1, 0.6, 1.0)
    n, dt = 1000, 1e-3
    r = gamma_resolvent(MittagLefflerKernel(1.0, 0.6, 1.5), 0.5, n, dt)
    t = dt * np.arange(1, n + 1)
    assert np.max(np.abs(r(t) - MittagLefflerKernel(1.0, 0.6, 1.0)(t))) < 1e-4


@pytest.mark.parametrize(
    "kernel, gamma, n, dt",
    [
        (ConstantKernel(0.3), -4.0, 8000, 2e-3),
        (ExponentialKernel(1.0, 1.5), 0.5, 8000, 2e-3),
        (MittagLefflerKernel(1.0, 0.6, 1.5), 0.5, 4000, 5e-3),
    ],
    ids=["constant", "exponential", "mittag_leffler"],
)
def test_resolvent_laplace_identity(kernel, gamma, n, dt):
    r = gamma_resolvent(kernel, gamma, n, dt)
    for z in (0.5, 1.0, 2.0):
        kz, rz = kernel.laplace(z), r.laplace(z)
        assert abs(rz - kz - gamma * kz * rz) < 1e-5


def test_resolvent_gamma_zero_is_identity():
    k = MittagLefflerKernel(0.3, 0.6, 1.2)
    assert gamma_resolvent(k, 0.0, 10, 0.1) is k


def test_resolvent_negative_gamma_needs_log_convexity():
    bumpy = TabulatedKernel(np.array([0.0, 1.0, 2.0, 3.0]), np.array([1.0, 2.0, 1.0, 2.0]))
    assert not bumpy.is_log_convex
    with pytest.raises(PreconditionError):
        gamma_resolvent(bumpy, -0.5, 10, 0.1)


@given(gamma=st.floats(-2.0, 0.5), zeta=st.floats(0.1, 2.0), lam=st.floats(0.0, 3.0))
def test_resolvent_of_exponential_is_exponential(gamma, zeta, lam):
    n, dt = 200, 5e-3
    r = gamma_resolvent(ExponentialKernel(zeta, lam), gamma, n, dt)
    t = dt * np.arange(n + 1)
    exact = ExponentialKernel(zeta, lam - gamma * zeta)(t)
    # second-order scheme: error ~ dt**2 times the squared rate scale
    assert np.max(np.abs(r(t) - exact)) < 0.1 * dt**2 * zeta * (1.0 + abs(gamma) * zeta + lam) ** 2


def test_record_round_trip():
    for k in KERNELS:
        assert kernel_from_record(k.record()) == k


def test_record_rejects_unknown_keys():
    with pytest.raises(DomainError):
        kernel_from_record({"kind": "exponential", "zeta": "1", "lambda": "1", "alpha": "0.6"})
    with pytest.raises(DomainError):
        kernel_from_record({"kind": "exponential", "zeta": "1"})
    with pytest.raises(DomainError):
        kernel_from_record({"kind": "gaussian", "zeta": "1"})
    with pytest.raises(DomainError):
        kernel_from_record({"kind": "constant", "zeta": "abc"})


def test_read_kernel_table(tmp_path):
    path = tmp_path / "k.csv"
    x = np.linspace(0.0, 2.0, 201)
    path.write_text("x,kappa\n" + "".join(f"{float(a)!r},{math.exp(-a)!r}\n" for a in x))
    k = read_kernel_table(path)
    assert k.horizon == 2.0
    assert k(0.5) == pytest.approx(math.exp(-0.5), rel=2e-5)
    assert k.is_decreasing and k.is_log_convex
    again = kernel_from_record({"kind": "tabulated", "table": "k.csv"}, base_dir=tmp_path)
    np.testing.assert_array_equal(again.values, k.values)
    with pytest.raises(DomainError):
        k(2.5)


def test_tabulated_kernel_validation():
    with pytest.raises(DomainError):
        TabulatedKernel(np.array([0.0, 1.0]), np.array([1.0, -1.0]))
    with pytest.raises(DomainError):
        TabulatedKernel(np.array([1.0, 0.0]), np.array([1.0, 1.0]))
    with pytest.raises(DomainError):
        TabulatedKernel(np.array([0.0, 1.0]), np.array([np.inf, 1.0]))
