"""Invariant audit behind ``voltra validate``: resolvent identities, comparison
bounds, reference-solution cross-checks and a small Monte-Carlo check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cgf import (
    FlatCurve,
    HestonCurve,
    RoughHestonCurve,
    afi_model,
    afv_model,
    cgf_increment,
    cumulants,
    heston_ode_reference,
    joint_cgf,
    multi_cgf,
    rough_heston_adams_reference,
)
from .kernels import ConstantKernel, ExponentialKernel, MittagLefflerKernel, gamma_resolvent
from .riccati import Dirac, JumpSpec, RLambdaFamily, RVFamily, solve_riccati
from .scaling import DEFAULT_EPS, fit_order, r_epsilon_gap
from .simulate import empirical_mean, simulate_afv

HESTON = dict(lam=1.2, theta=0.04, zeta=0.3, v0=0.04)


@dataclass(frozen=True)
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value <= self.tol)


def _sandwich_violations(grid) -> int:
    f, r1 = grid.f[1:], grid.r1[1:]
    return int(np.sum(~(grid.w_star < r1)) + np.sum(~(r1 <= f)) + np.sum(~(f < 0)))


def run_audit(seed: int = 42, dt: float = 1e-3) -> list[Check]:
    p = HESTON
    n = int(round(1.0 / dt))
    t = dt * np.arange(n + 1)
    checks = []

    r = gamma_resolvent(ConstantKernel(p["zeta"]), -p["lam"] / p["zeta"], n, dt)
    checks.append(Check("resolvent constant->exponential", float(np.max(np.abs(r.values - ExponentialKernel(p["zeta"], p["lam"])(t)))), 1e-6))
    r = gamma_resolvent(MittagLefflerKernel(1.0, 0.6, 1.5), 0.5, n, dt)
    gap = np.max(np.abs(r(t[1:]) - MittagLefflerKernel(1.0, 0.6, 1.0)(t[1:])))
    checks.append(Check("resolvent Mittag-Leffler pair", float(gap), 1e-4))
    k = ExponentialKernel(p["zeta"], p["lam"])
    checks.append(Check("resolvent gamma=0 identity", 0.0 if gamma_resolvent(k, 0.0, n, dt) is k else 1.0, 0.0))

    heston = afv_model(k, HestonCurve(p["v0"], p["theta"], p["lam"]), -0.7)
    worst = 0.0
    for u in (0.1, 0.3, 0.5, 0.7, 0.9):
        phi, psi = heston_ode_reference(u, 1.0, p["lam"], p["theta"], p["zeta"], -0.7, p["v0"], dt)
        worst = max(worst, abs(cgf_increment(heston, u, 1.0, dt) - (phi + p["v0"] * psi)))
    checks.append(Check("Heston CGF vs Riccati ODE", worst, 1e-5))

    rough = afv_model(MittagLefflerKernel(p["zeta"], 0.6, p["lam"]), RoughHestonCurve(p["v0"], p["theta"], p["lam"], 0.6), 0.0)
    ref = rough_heston_adams_reference(0.5, 1.0, p["lam"], p["theta"], p["zeta"], 0.6, p["v0"], dt)
    checks.append(Check("rough Heston CGF vs fractional Adams", abs(cgf_increment(rough, 0.5, 1.0, dt) - ref.cgf), 1e-3))

    bad = 0
    for rho in (-0.7, 0.0, 0.5):
        bad += _sandwich_violations(solve_riccati(RVFamily(rho), k, 0.5, 1.0, dt))
    spec = JumpSpec(Dirac(1.0), Dirac(1.0), 0.3, 0.2)
    bad += _sandwich_violations(solve_riccati(RLambdaFamily(spec), ExponentialKernel(1.0, 1.0), 0.5, 1.0, dt))
    checks.append(Check("comparison sandwich violations", float(bad), 0.0))

    c = cgf_increment(heston, 0.4, 1.0, dt)
    checks.append(Check("multi_cgf telescoping", abs(multi_cgf(heston, [0.0, 0.25, 0.5, 1.0], [0.4] * 3, dt) - c), 1e-10))
    zero = lambda s: np.zeros_like(np.asarray(s, dtype=float))
    checks.append(Check("joint_cgf with h = 0", abs(joint_cgf(heston, 0.4, zero, 1.0, 0.1, dt) - c), 1e-10))
    edge = max(abs(cgf_increment(heston, u, 1.0, dt)) for u in (0.0, 1.0))
    checks.append(Check("CGF vanishes at u = 0 and u = 1", edge, 0.0))
    flat = afv_model(k, FlatCurve(0.04), -0.7)
    checks.append(Check("mean identity -int xi_0 / 2", abs(cumulants(flat, 1.0, dt)[0] + 0.02), 1e-6))

    a = 1 / np.sqrt(2.0)
    gaps = [r_epsilon_gap(JumpSpec(Dirac(a), Dirac(a), 1.0, 0.5), e).value for e in DEFAULT_EPS]
    checks.append(Check("high-frequency gap order |fit - 1/2|", abs(fit_order(DEFAULT_EPS, gaps) - 0.5), 0.15))

    afi = afi_model(ExponentialKernel(1.0, 1.0), FlatCurve(1.0), spec)
    checks.append(Check("AFI CGF vanishes at u = 1", abs(cgf_increment(afi, 1.0, 1.0, dt)), 0.0))

    batch = simulate_afv(k, heston.curve, -0.7, 1.0, dt, 20_000, seed)
    m, se = empirical_mean(np.exp(batch.x_T))
    checks.append(Check("Monte-Carlo martingale |mean e^X - 1| / SE", abs(m - 1.0) / se, 3.0))
    return checks
