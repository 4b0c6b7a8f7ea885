"""Forward curves, CGF assembly and independent reference solutions.

The CGF of an affine model is ``log E exp(u (X_T - X_0)) = int_0^T g(T - s, u) xi_0(s) ds``.
The integral is assembled panel by panel: ``g`` is the solver's
piecewise-linear solution (with jumps where the nonlinearity switches) and
the forward curve enters through its exact moments against the two hat
functions on each panel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import DomainError, StructureError
from .io import write_csv
from .kernels import ExponentialKernel, Kernel, MittagLefflerKernel, TabulatedKernel
from .mittag_leffler import mittag_leffler
from .riccati import (
    JumpSpec,
    RiccatiGrid,
    RLambdaFamily,
    RVFamily,
    solve_riccati,
    solve_riccati_ic,
    solve_riccati_multi,
)

__all__ = [
    "FlatCurve",
    "HestonCurve",
    "RoughHestonCurve",
    "TabulatedCurve",
    "hawkes_forward_curve",
    "AffineModel",
    "afv_model",
    "afi_model",
    "cgf_increment",
    "cgf_from_grid",
    "joint_cgf",
    "multi_cgf",
    "cumulants",
    "heston_ode_reference",
    "rough_heston_adams_reference",
    "AdamsResult",
    "cgf_term_structure",
    "write_cgf_csv",
]

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W

# -- forward curves ----------------------------------------------------------------


class ForwardCurve:
    """Initial forward variance (AFV) or forward intensity (AFI) curve."""

    def __call__(self, s):
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < 0):
            raise DomainError("forward curves are defined for s >= 0")
        out = self._eval(s_arr)
        return float(out) if out.ndim == 0 else out

    def _eval(self, s):
        raise NotImplementedError

    def integral(self, T: float) -> float:
        """``int_0^T xi_0(s) ds`` by composite Gauss quadrature."""
        n = max(16, int(math.ceil(T / 0.01)))
        edges = np.linspace(0.0, T, n + 1)
        x = edges[:-1, None] + np.diff(edges)[:, None] * _GL_X
        return float(np.sum(self._eval(x) @ _GL_W * np.diff(edges)))


@dataclass(frozen=True)
class FlatCurve(ForwardCurve):
    v: float

    def __post_init__(self):
        if not self.v >= 0:
            raise DomainError(f"flat curve level must be non-negative, got {self.v}")

    def _eval(self, s):
        return np.full_like(s, self.v)

    def integral(self, T):
        return self.v * T

    def record(self):
        return {"kind": "flat", "v": self.v}


@dataclass(frozen=True)
class HestonCurve(ForwardCurve):
    """``theta (1 - exp(-lam s)) + exp(-lam s) V0``."""

    v0: float
    theta: float
    lam: float

    def __post_init__(self):
        if self.v0 < 0 or self.theta < 0:
            raise DomainError("Heston curve needs V0 >= 0 and theta >= 0")

    def _eval(self, s):
        e = np.exp(-self.lam * s)
        return self.theta * (1.0 - e) + e * self.v0

    def integral(self, T):
        if self.lam == 0:
            return self.v0 * T
        return self.theta * T + (self.v0 - self.theta) * -math.expm1(-self.lam * T) / self.lam

    def record(self):
        return {"kind": "heston", "v0": self.v0, "theta": self.theta, "lambda": self.lam}


@dataclass(frozen=True)
class RoughHestonCurve(ForwardCurve):
    """``V0 + (theta - V0) lam int_0^s x**(a-1) E_{a,a}(-lam x**a) dx``.

    The kernel inside the integral is the rough Heston kernel divided by its
    vol-of-vol factor, so ``alpha = 1`` gives the Heston curve.
    """

    v0: float
    theta: float
    lam: float
    alpha: float

    def __post_init__(self):
        if self.v0 < 0 or self.theta < 0:
            raise DomainError("rough Heston curve needs V0 >= 0 and theta >= 0")
        if not 0.5 < self.alpha <= 1.0:
            raise DomainError(f"rough Heston curve needs alpha in (1/2, 1], got {self.alpha}")

    def _eval(self, s):
        a = self.alpha
        sa = s**a
        primitive = sa * mittag_leffler(a, a + 1.0, -self.lam * sa)
        return self.v0 + (self.theta - self.v0) * self.lam * primitive

    def integral(self, T):
        a = self.alpha
        # int_0^T s**a E_{a,a+1}(-lam s**a) ds = T**(a+1) E_{a,a+2}(-lam T**a)
        second = T ** (a + 1.0) * float(mittag_leffler(a, a + 2.0, -self.lam * T**a))
        return self.v0 * T + (self.theta - self.v0) * self.lam * second

    def record(self):
        return {"kind": "rough_heston", "v0": self.v0, "theta": self.theta, "lambda": self.lam, "alpha": self.alpha}


@dataclass(frozen=True, eq=False)
class TabulatedCurve(ForwardCurve):
    """Linear interpolation of values on a grid starting at 0."""

    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or len(g) < 2 or g[0] != 0 or np.any(np.diff(g) <= 0):
            raise DomainError("tabulated curve needs an increasing grid starting at 0 with matching values")
        if np.any(v < 0):
            raise DomainError("forward curve values must be non-negative")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)

    def _eval(self, s):
        if np.any(s > self.grid[-1] * (1 + 1e-12)):
            raise DomainError(f"tabulated curve evaluated beyond {self.grid[-1]}")
        return np.interp(s, self.grid, self.values)

    def record(self):
        return {"kind": "tabulated"}


def hawkes_forward_curve(mu: float, impact: float, kernel: Kernel, T: float | None = None, dt: float | None = None):
    """Forward intensity ``mu (1 + impact int_0^s kernel)`` of a Hawkes process.

    ``kernel`` is the resolvent driving the intensity. Exponential and
    Mittag-Leffler kernels with unit weight map onto the closed-form curves;
    other kernels are tabulated on ``[0, T]`` with step ``dt``.
    """
    if isinstance(kernel, ExponentialKernel) and kernel.zeta == 1.0 and kernel.lam > 0:
        return HestonCurve(mu, mu * (1.0 + impact / kernel.lam), kernel.lam)
    if isinstance(kernel, MittagLefflerKernel) and kernel.zeta == 1.0 and kernel.lam > 0:
        return RoughHestonCurve(mu, mu * (1.0 + impact / kernel.lam), kernel.lam, kernel.alpha)
    if T is None or dt is None:
        raise DomainError("tabulating a Hawkes forward curve needs T and dt")
    s = dt * np.arange(int(round(T / dt)) + 1)
    return TabulatedCurve(s, mu * (1.0 + impact * np.asarray(kernel.primitive(s))))


# -- models ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AffineModel:
    """AFV model (``rho`` set) or AFI model (``jumps`` set) with kernel and forward curve."""

    kind: str
    kernel: Kernel
    curve: ForwardCurve
    rho: float | None = None
    jumps: JumpSpec | None = None

    def __post_init__(self):
        if self.kind == "afv":
            if self.rho is None or not -1 <= self.rho <= 1:
                raise DomainError("AFV model needs rho in [-1, 1]")
            if not self.kernel.is_decreasing:
                raise StructureError("AFV models need a decreasing kernel")
        elif self.kind == "afi":
            if self.jumps is None:
                raise DomainError("AFI model needs a jump specification")
        else:
            raise DomainError(f"unknown model kind {self.kind!r}")

    @property
    def family(self):
        """``u -> H_u``."""
        if self.kind == "afv":
            return RVFamily(self.rho)
        return RLambdaFamily(self.jumps)


def afv_model(kernel: Kernel, curve: ForwardCurve, rho: float) -> AffineModel:
    return AffineModel("afv", kernel, curve, rho=rho)


def afi_model(kernel: Kernel, curve: ForwardCurve, jumps: JumpSpec) -> AffineModel:
    return AffineModel("afi", kernel, curve, jumps=jumps)


# -- CGF assembly -----------------------------------------------------------------------


def _curve_hat_moments(curve: ForwardCurve, horizon: float, n: int, dt: float):
    """For ``tau``-panels ``[j dt, (j+1) dt]``: ``int xi_0(horizon - tau) (1 - v)`` and ``... v``."""
    j = np.arange(n)[:, None]
    v = _GL_X[None, :]
    s = np.maximum(horizon - (j + v) * dt, 0.0)
    xi = curve._eval(s)
    near = (xi * (1.0 - v)) @ _GL_W * dt
    far = (xi * v) @ _GL_W * dt
    return near, far


def cgf_from_grid(grid: RiccatiGrid, curve: ForwardCurve) -> float:
    """``int_0^T g(T - s) xi_0(s) ds`` for a solved grid."""
    n = len(grid.t) - 1
    if not np.any(grid.g) and not np.any(grid.g_left):
        return 0.0
    near, far = _curve_hat_moments(curve, grid.T, n, grid.dt)
    return float(np.dot(near, grid.g[:-1]) + np.dot(far, grid.g_left[1:]))


def cgf_increment(model: AffineModel, u: float, T: float, dt: float) -> float:
    """``log E exp(u (X_T - X_0))``."""
    grid = solve_riccati(model.family, model.kernel, u, T, dt, bounds=False)
    return cgf_from_grid(grid, model.curve)


def joint_cgf(model: AffineModel, u: float, h: Callable, T: float, delta: float, dt: float) -> float:
    """``log E exp(u (X_T - X_0) + int_T^{T+delta} h(T + delta - s) xi_T(s) ds)``."""
    H = model.family(u)
    grid = solve_riccati_ic(H, model.kernel, h, delta, T + delta, dt, bounds=False)
    return cgf_from_grid(grid, model.curve)


def multi_cgf(model: AffineModel, times: Sequence[float], u_vec: Sequence[float], dt: float) -> float:
    """``log E exp(sum_k u_k (X_{t_{k+1}} - X_{t_k}))``."""
    grid = solve_riccati_multi(model.family, model.kernel, times, u_vec, dt)
    return cgf_from_grid(grid, model.curve)


def cumulants(model: AffineModel, T: float, dt: float, step: float = 1e-4) -> tuple[float, float]:
    """Mean and variance of ``X_T - X_0`` from one-sided differences of the CGF at ``0, step, 2 step``."""
    c1 = cgf_increment(model, step, T, dt)
    c2 = cgf_increment(model, 2 * step, T, dt)
    mean = (4.0 * c1 - c2) / (2.0 * step)
    var = (c2 - 2.0 * c1) / step**2
    return mean, var


def cgf_term_structure(model: AffineModel, u_values: Sequence[float], horizons: Sequence[float], dt: float):
    """Rows ``(T, u, cgf)`` for all combinations."""
    return [(T, u, cgf_increment(model, u, T, dt)) for T in horizons for u in u_values]


def write_cgf_csv(path, rows) -> Path:
    return write_csv(path, ["T", "u", "cgf"], rows)


# -- reference solutions ------------------------------------------------------------------


def heston_ode_reference(u: float, T: float, lam: float, theta: float, zeta: float, rho: float, v0: float, dt: float):
    """``(phi(T), psi(T))`` of the classical Heston Riccati ODE by RK4 at step ``dt / 10``.

    ``psi' = (u**2 - u)/2 + (zeta rho u - lam) psi + zeta**2 psi**2 / 2``,
    ``phi' = lam theta psi``; the CGF is ``phi + V0 psi``.
    """
    if not 0 <= u <= 1:
        raise DomainError("u must lie in [0, 1]")
    n = int(round(T / dt)) * 10
    h = T / n
    c0 = 0.5 * (u * u - u)
    c1 = zeta * rho * u - lam
    c2 = 0.5 * zeta * zeta

    def rhs(y):
        return np.array([lam * theta * y[1], c0 + c1 * y[1] + c2 * y[1] ** 2])

    y = np.zeros(2)
    for _ in range(n):
        k1 = rhs(y)
        k2 = rhs(y + 0.5 * h * k1)
        k3 = rhs(y + 0.5 * h * k2)
        k4 = rhs(y + h * k3)
        y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return float(y[0]), float(y[1])


@dataclass(frozen=True, eq=False)
class AdamsResult:
    t: np.ndarray
    psi: np.ndarray
    cgf: float


def rough_heston_adams_reference(
    u: float, T: float, lam: float, theta: float, zeta: float, alpha: float, v0: float, dt: float, rho: float = 0.0
) -> AdamsResult:
    """Fractional Adams predictor-corrector for the rough Heston Riccati equation.

    Solves ``D^alpha psi = (u**2 - u)/2 + (zeta rho u - lam) psi + zeta**2 psi**2 / 2``
    with ``psi(0) = 0`` and returns ``psi`` with the CGF
    ``V0 I^{1-alpha} psi(T) + theta lam int_0^T psi``.
    """
    if not 0.5 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (1/2, 1), got {alpha}")
    if not 0 <= u <= 1:
        raise DomainError("u must lie in [0, 1]")
    n = int(round(T / dt))
    h = T / n
    t = h * np.arange(n + 1)
    if u in (0.0, 1.0):
        return AdamsResult(t, np.zeros(n + 1), 0.0)
    c0 = 0.5 * (u * u - u)
    c1 = zeta * rho * u - lam
    c2 = 0.5 * zeta * zeta

    def rhs(p):
        return c0 + c1 * p + c2 * p * p

    a = alpha
    k = np.arange(n + 2, dtype=float)
    pred_w = h**a / gamma_fn(a + 1.0) * (k[1:] ** a - k[:-1] ** a)  # b_m, m = 0..n
    corr_scale = h**a / gamma_fn(a + 2.0)
    # a_{j,k+1} for j >= 1 depends on m = k - j
    mm = k
    mid_w = (mm + 2) ** (a + 1) + mm ** (a + 1) - 2 * (mm + 1) ** (a + 1)
    psi = np.zeros(n + 1)
    F = np.zeros(n + 1)
    F[0] = rhs(0.0)
    for i in range(n):
        # predictor: sum_j b_{i-j} F_j
        pred = np.dot(pred_w[i::-1], F[: i + 1])
        first = i ** (a + 1) - (i - a) * (i + 1) ** a
        corr_hist = first * F[0]
        if i >= 1:
            corr_hist += np.dot(mid_w[i - 1 :: -1][:i], F[1 : i + 1])
        psi[i + 1] = corr_scale * (rhs(pred) + corr_hist)
        F[i + 1] = rhs(psi[i + 1])
    # I^{1-alpha} psi(T) with psi linear between nodes (product trapezoidal)
    b = 1.0 - a
    m = np.arange(n, dtype=float)
    # int over [t_j, t_{j+1}] of (T - s)**(-a) times hat functions
    lo = (n - m - 1) * h
    hi = (n - m) * h
    p0 = (hi**b - lo**b) / b
    p1 = (hi ** (b + 1) - lo ** (b + 1)) / (b + 1)
    # (T - s) = tau, s = T - tau; the hat at t_j is (tau - lo) / h, at t_{j+1} it is (hi - tau) / h
    w_left = (p1 - lo * p0) / h
    w_right = (hi * p0 - p1) / h
    frac = (np.dot(w_left, psi[:-1]) + np.dot(w_right, psi[1:])) / gamma_fn(b)
    integral = h * (psi.sum() - 0.5 * (psi[0] + psi[-1]))
    return AdamsResult(t, psi, float(v0 * frac + theta * lam * integral))
