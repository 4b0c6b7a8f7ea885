"""High-frequency rescaling of AFI models and its AFV limit.

With marks scaled by ``sqrt(eps)`` and the kernel by ``1/eps``, the AFI
Riccati equation for ``g / eps`` has nonlinearity ``R_lambda^eps / eps`` and
the unscaled kernel. As ``eps -> 0`` that nonlinearity tends to
``R_V(u, c w)`` with correlation ``rho_lim``, i.e. to an AFV model with kernel
``c * kernel``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .cgf import (
    AffineModel,
    FlatCurve,
    ForwardCurve,
    HestonCurve,
    RoughHestonCurve,
    TabulatedCurve,
    afi_model,
    cgf_from_grid,
)
from .errors import DomainError, StructureError
from .io import write_csv
from .kernels import Kernel
from .riccati import (
    JumpSpec,
    RLambdaFamily,
    RVFamily,
    _r_lambda_dw,
    r_lambda,
    r_v,
    solve_riccati,
    solve_riccati_multi,
    w_star,
)

__all__ = [
    "NORMALIZATION_TOL",
    "ScalingFamily",
    "limit_params",
    "rescale",
    "scale_curve",
    "scaled_family",
    "r_epsilon_gap",
    "RGap",
    "fit_order",
    "ConvergenceReport",
    "cgf_convergence_experiment",
    "multi_convergence_experiment",
    "w_star_gaps",
    "DEFAULT_EPS",
]

NORMALIZATION_TOL = 1e-12
DEFAULT_EPS = (1e-1, 1e-2, 1e-3, 1e-4)


def limit_params(spec: JumpSpec) -> tuple[float, float, float]:
    """``(p, c, rho_lim)`` of the AFV limit of a normalized jump specification.

    ``p = int x**2 zeta_+``, ``c = sqrt(p g_+**2 + (1 - p) g_-**2)`` and
    ``rho_lim = (p g_+ - (1 - p) g_-) / c``.
    """
    _check_normalized(spec)
    p = float(spec.plus.second_moment)
    c = math.hypot(math.sqrt(p) * spec.gamma_plus, math.sqrt(max(1.0 - p, 0.0)) * spec.gamma_minus)
    if c <= 0:
        raise StructureError("degenerate limit: c = 0 (both impact coefficients vanish)")
    rho = (p * spec.gamma_plus - (1.0 - p) * spec.gamma_minus) / c
    return p, c, float(np.clip(rho, -1.0, 1.0))


def _check_normalized(spec: JumpSpec):
    total = spec.plus.second_moment + spec.minus.second_moment
    if abs(total - 1.0) > NORMALIZATION_TOL:
        raise DomainError(f"jump laws must satisfy int x^2 zeta_+ + int x^2 zeta_- = 1, got {total!r}")


def scale_curve(curve: ForwardCurve, factor: float) -> ForwardCurve:
    """``factor * curve`` in the same representation."""
    if isinstance(curve, FlatCurve):
        return FlatCurve(curve.v * factor)
    if isinstance(curve, (HestonCurve, RoughHestonCurve)):
        return replace(curve, v0=curve.v0 * factor, theta=curve.theta * factor)
    if isinstance(curve, TabulatedCurve):
        return TabulatedCurve(curve.grid, curve.values * factor)
    raise DomainError(f"cannot scale curve of type {type(curve).__name__}")


@dataclass(frozen=True)
class ScalingFamily:
    """Base AFI ingredients and the ``eps`` values of a high-frequency sweep."""

    spec: JumpSpec
    kernel: Kernel
    curve: ForwardCurve
    eps: tuple = DEFAULT_EPS
    p: float = field(init=False)
    c: float = field(init=False)
    rho_lim: float = field(init=False)

    def __post_init__(self):
        p, c, rho = limit_params(self.spec)
        object.__setattr__(self, "eps", tuple(float(e) for e in self.eps))
        for e in self.eps:
            _check_eps(e)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "rho_lim", rho)

    @property
    def limit_model(self) -> AffineModel:
        """AFV model with kernel ``c * kernel`` and correlation ``rho_lim``."""
        return AffineModel("afv", self.kernel.scaled(self.c), self.curve, rho=self.rho_lim)

    @property
    def limit_family(self) -> RVFamily:
        return RVFamily(self.rho_lim)


def _check_eps(eps):
    if not 0 < eps <= 1:
        raise DomainError(f"eps must lie in (0, 1], got {eps}")


def rescale(family: ScalingFamily, eps: float) -> AffineModel:
    """AFI model at scale ``eps``: marks times ``sqrt(eps)``, kernel and curve divided by ``eps``."""
    _check_eps(eps)
    spec = family.spec.scaled(math.sqrt(eps))
    return afi_model(family.kernel.scaled(1.0 / eps), scale_curve(family.curve, 1.0 / eps), spec)


def scaled_family(spec: JumpSpec, eps: float) -> RLambdaFamily:
    """``u -> R_lambda^eps(u, .) / eps``."""
    _check_eps(eps)
    return RLambdaFamily(spec.scaled(math.sqrt(eps)), scale=1.0 / eps)


@dataclass(frozen=True)
class RGap:
    """Sup-gaps of ``R^eps / eps`` against the limit, for the value and both partial derivatives."""

    eps: float
    value: float
    du: float
    dw: float


def r_epsilon_gap(spec: JumpSpec, eps: float, n_u: int = 21, n_w: int = 21, w_range=(-1.0, 0.0)) -> RGap:
    """Sup over a uniform ``(u, w)`` grid of ``|R^eps(u, w) / eps - R_V(u, c w)|`` and derivative gaps."""
    _check_eps(eps)
    _, c, rho = limit_params(spec)
    s = spec.scaled(math.sqrt(eps))
    u, w = np.meshgrid(np.linspace(0.0, 1.0, n_u), np.linspace(w_range[0], w_range[1], n_w), indexing="ij")
    val = r_lambda(u, w, s) / eps
    lim = r_v(u, c * w, rho)
    gp, gm = s.gamma_plus, s.gamma_minus
    du = (s.plus.dpsi(u + w * gp) - s.minus.dpsi(-u + w * gm) - s.m_x) / eps
    du_lim = u - 0.5 + rho * c * w
    dw = _r_lambda_dw(u, w, s) / eps
    dw_lim = c * (rho * u + c * w)
    return RGap(
        eps,
        float(np.max(np.abs(val - lim))),
        float(np.max(np.abs(du - du_lim))),
        float(np.max(np.abs(dw - dw_lim))),
    )


def fit_order(eps: Sequence[float], gaps: Sequence[float]) -> float:
    """Least-squares slope of ``log gap`` against ``log eps``."""
    x = np.log(np.asarray(eps, dtype=float))
    y = np.log(np.asarray(gaps, dtype=float))
    return float(np.polyfit(x, y, 1)[0])


@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    """Rows ``(eps, u, riccati_gap, cgf_gap)`` of a high-frequency sweep."""

    rows: list
    T: float
    dt: float

    def gaps(self, u: float, column: str = "cgf_gap") -> tuple[np.ndarray, np.ndarray]:
        k = {"riccati_gap": 2, "cgf_gap": 3}[column]
        sel = [r for r in self.rows if r[1] == u]
        return np.array([r[0] for r in sel]), np.array([r[k] for r in sel])

    def fitted_order(self, u: float, column: str = "riccati_gap") -> float:
        eps, gaps = self.gaps(u, column)
        return fit_order(eps, gaps)

    def summary(self) -> str:
        lines = [f"high-frequency sweep, T={self.T}, dt={self.dt}"]
        for u in sorted({r[1] for r in self.rows}):
            eps, gaps = self.gaps(u, "riccati_gap")
            if np.all(gaps > 0) and len(eps) > 1:
                lines.append(f"u={u}: fitted order {fit_order(eps, gaps):.3f} (riccati gap)")
            else:
                lines.append(f"u={u}: gaps vanish")
        return "\n".join(lines)

    def to_csv(self, path) -> Path:
        return write_csv(path, ["eps", "u", "riccati_gap", "cgf_gap"], self.rows)


def cgf_convergence_experiment(
    family: ScalingFamily,
    u_values: Sequence[float],
    T: float,
    dt: float,
    eps: Sequence[float] | None = None,
) -> ConvergenceReport:
    """Compare ``g^eps / eps`` with the AFV limit ``g`` and the resulting CGFs.

    ``g^eps / eps`` solves ``g = R^eps(u, k * g) / eps`` with the base kernel;
    ``g`` solves ``g = R_V(u, (c k) * g)``.
    """
    eps = family.eps if eps is None else tuple(eps)
    limit = family.limit_model
    rows = []
    limits = {u: solve_riccati(limit.family, limit.kernel, u, T, dt, bounds=False) for u in u_values}
    for e in eps:
        fam = scaled_family(family.spec, e)
        for u in u_values:
            g_lim = limits[u]
            g_eps = solve_riccati(fam, family.kernel, u, T, dt, bounds=False)
            gap = float(max(np.max(np.abs(g_eps.g - g_lim.g)), np.max(np.abs(g_eps.g_left - g_lim.g_left))))
            cgf_gap = abs(cgf_from_grid(g_eps, family.curve) - cgf_from_grid(g_lim, family.curve))
            rows.append((e, u, gap, cgf_gap))
    return ConvergenceReport(rows, T, dt)


def multi_convergence_experiment(
    family: ScalingFamily,
    times: Sequence[float],
    u_vec: Sequence[float],
    dt: float,
    eps: Sequence[float] | None = None,
) -> ConvergenceReport:
    """Multi-horizon variant: gaps of the joint CGF of increments.

    Convergence is only established for ``u_0 >= u_1 >= ...``; other orderings
    are rejected rather than extrapolated.
    """
    u_vec = [float(u) for u in u_vec]
    if any(b > a for a, b in zip(u_vec, u_vec[1:])):
        raise DomainError(f"multi-horizon limit needs non-increasing exponents, got {u_vec}")
    eps = family.eps if eps is None else tuple(eps)
    limit = family.limit_model
    g_lim = solve_riccati_multi(limit.family, limit.kernel, times, u_vec, dt)
    c_lim = cgf_from_grid(g_lim, family.curve)
    rows = []
    for e in eps:
        g_eps = solve_riccati_multi(scaled_family(family.spec, e), family.kernel, times, u_vec, dt)
        gap = float(max(np.max(np.abs(g_eps.g - g_lim.g)), np.max(np.abs(g_eps.g_left - g_lim.g_left))))
        rows.append((e, tuple(u_vec), gap, abs(cgf_from_grid(g_eps, family.curve) - c_lim)))
    return ConvergenceReport(rows, float(times[-1]), dt)


def w_star_gaps(spec: JumpSpec, eps: Sequence[float], u_values: Sequence[float]) -> np.ndarray:
    """``max_u |w_*^eps(u) - w_*^V(u) / c|`` for each ``eps``, with ``w_*^V`` the root of ``R_V(u, .)``."""
    _, c, rho = limit_params(spec)
    lim = RVFamily(rho)
    out = []
    for e in eps:
        fam = scaled_family(spec, e)
        out.append(max(abs(w_star(fam(u)) - w_star(lim(u)) / c) for u in u_values))
    return np.array(out)
