"""Convex nonlinearities and solvers for convolution Riccati equations.

The solvers march the outer form ``f = k * H(f)``, ``g = H(f)`` on a uniform
grid in time-to-maturity. The convolution uses product-integration weights
(exact for piecewise-linear ``g``) and the diagonal weight is handled
implicitly, which keeps singular kernels stable. ``g`` may jump at grid nodes
where the nonlinearity switches, so both one-sided limits are stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .errors import BoundViolation, DomainError, StepSizeError, StructureError
from .kernels import ConvWeights, Kernel, conv_weights

__all__ = [
    "r_v",
    "r_lambda",
    "Dirac",
    "ExponentialLaw",
    "DiscreteTable",
    "JumpSpec",
    "ConvexNonlinearity",
    "RVFamily",
    "RLambdaFamily",
    "RiccatiGrid",
    "BoundArrays",
    "w_star",
    "solve_riccati",
    "solve_riccati_ic",
    "solve_riccati_multi",
    "solve_forced",
    "comparison_bounds",
    "snap_to_grid",
]

STEP_TOL = 1e-12
STEP_MAX_ITER = 50
ROOT_TOL = 1e-12


# -- nonlinearities -------------------------------------------------------------


def r_v(u, w, rho):
    """``(u**2 - u) / 2 + rho u w + w**2 / 2``."""
    return 0.5 * (u * u - u) + rho * u * w + 0.5 * w * w


@dataclass(frozen=True)
class Dirac:
    """All jumps have size ``a``."""

    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise DomainError(f"Dirac jump size must be positive, got {self.a}")

    def psi(self, v):
        return np.expm1(v * self.a)

    def dpsi(self, v):
        return self.a * np.exp(v * self.a)

    @property
    def mean(self):
        return self.a

    @property
    def second_moment(self):
        return self.a * self.a

    def scaled(self, c):
        return Dirac(self.a * c)

    def sample(self, rng, size):
        return self.a if size is None else np.full(size, self.a)

    def record(self):
        return {"law": "dirac", "a": self.a}


@dataclass(frozen=True)
class ExponentialLaw:
    """Exponentially distributed jump sizes with mean ``m < 1``."""

    m: float

    def __post_init__(self):
        if not 0 < self.m < 1:
            raise DomainError(f"exponential jump law needs 0 < m < 1 for int e^x < inf, got {self.m}")

    def psi(self, v):
        v = np.asarray(v, dtype=float)
        return v * self.m / (1.0 - v * self.m)

    def dpsi(self, v):
        return self.m / (1.0 - np.asarray(v, dtype=float) * self.m) ** 2

    @property
    def mean(self):
        return self.m

    @property
    def second_moment(self):
        return 2.0 * self.m * self.m

    def scaled(self, c):
        return ExponentialLaw(self.m * c)

    def sample(self, rng, size):
        return rng.exponential(self.m, size)

    def record(self):
        return {"law": "exponential", "m": self.m}


@dataclass(frozen=True, eq=False)
class DiscreteTable:
    """Jump sizes ``points`` with probabilities ``weights``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.points, dtype=float))
        p = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if x.shape != p.shape or x.ndim != 1 or x.size == 0:
            raise DomainError("discrete jump table needs matching 1-d points and weights")
        if np.any(x <= 0) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-12):
            raise DomainError("discrete jump table needs positive points and probabilities summing to 1")
        object.__setattr__(self, "points", x)
        object.__setattr__(self, "weights", p)

    def psi(self, v):
        v = np.asarray(v, dtype=float)
        return np.expm1(v[..., None] * self.points) @ self.weights

    def dpsi(self, v):
        v = np.asarray(v, dtype=float)
        return (self.points * np.exp(v[..., None] * self.points)) @ self.weights

    @property
    def mean(self):
        return float(self.points @ self.weights)

    @property
    def second_moment(self):
        return float(self.points**2 @ self.weights)

    def scaled(self, c):
        return DiscreteTable(self.points * c, self.weights)

    def sample(self, rng, size):
        return rng.choice(self.points, size=size, p=self.weights)

    def record(self):
        return {"law": "table", "points": self.points.tolist(), "weights": self.weights.tolist()}


JumpLaw = Dirac | ExponentialLaw | DiscreteTable


@dataclass(frozen=True)
class JumpSpec:
    """Jump laws and impact coefficients of buy (``+``) and sell (``-``) events."""

    plus: JumpLaw
    minus: JumpLaw
    gamma_plus: float
    gamma_minus: float

    def __post_init__(self):
        if self.gamma_plus < 0 or self.gamma_minus < 0:
            raise DomainError("impact coefficients must be non-negative")

    def psi_plus(self, v):
        return self.plus.psi(v)

    def psi_minus(self, v):
        return self.minus.psi(v)

    @property
    def m_plus(self):
        return self.plus.mean

    @property
    def m_minus(self):
        return self.minus.mean

    @property
    def m_x(self):
        """Compensator rate ``psi_+(1) + psi_-(-1)`` that makes ``exp(X)`` a martingale."""
        return float(self.plus.psi(1.0) + self.minus.psi(-1.0))

    @property
    def gamma_hat(self):
        """``gamma_+ + gamma_-``, the excitation per event pair for unit jumps."""
        return self.gamma_plus + self.gamma_minus

    @property
    def mean_impact(self):
        """``gamma_+ m_+ + gamma_- m_-``: expected intensity jump per unit of intensity."""
        return self.gamma_plus * self.m_plus + self.gamma_minus * self.m_minus

    def scaled(self, c):
        """Marks multiplied by ``c``."""
        return JumpSpec(self.plus.scaled(c), self.minus.scaled(c), self.gamma_plus, self.gamma_minus)

    def record(self):
        return {
            "plus": self.plus.record(),
            "minus": self.minus.record(),
            "gamma_plus": self.gamma_plus,
            "gamma_minus": self.gamma_minus,
        }


def r_lambda(u, w, spec: JumpSpec):
    """``psi_+(u + w g_+) + psi_-(-u + w g_-) - u m_X - w (g_+ m_+ + g_- m_-)``."""
    gp, gm = spec.gamma_plus, spec.gamma_minus
    return (
        spec.plus.psi(u + w * gp)
        + spec.minus.psi(-u + w * gm)
        - u * spec.m_x
        - w * (gp * spec.m_plus + gm * spec.m_minus)
    )


def _r_lambda_dw(u, w, spec: JumpSpec):
    gp, gm = spec.gamma_plus, spec.gamma_minus
    return gp * spec.plus.dpsi(u + w * gp) + gm * spec.minus.dpsi(-u + w * gm) - (gp * spec.m_plus + gm * spec.m_minus)


@dataclass(frozen=True)
class ConvexNonlinearity:
    """Convex ``H`` on ``(-inf, w_max]`` with a unique negative root.

    ``root`` and ``argmin`` may be given when known in closed form; otherwise
    they are found numerically on first use.
    """

    value: Callable
    slope: Callable
    w_max: float = 0.0
    root: float | None = None
    argmin: float | None = None
    u: float | None = None
    label: str = ""

    def __call__(self, w):
        return self.value(w)

    def derivative(self, w):
        return self.slope(w)

    @property
    def degenerate(self) -> bool:
        """``H(w_max) = 0``: the root sits at the boundary (``u`` in ``{0, 1}``)."""
        return abs(float(self.value(self.w_max))) <= 1e-300

    @cached_property
    def w_star(self) -> float:
        if self.root is not None:
            return float(self.root)
        return _find_root(self)

    @cached_property
    def w0(self) -> float:
        """Leftmost minimizer of ``H`` on ``(-inf, w_max]``."""
        if self.argmin is not None:
            return float(self.argmin)
        if self.slope(self.w_max) <= 0:
            return self.w_max
        lo = self.w_star
        return float(brentq(self.slope, lo, self.w_max, xtol=1e-15, rtol=4 * np.finfo(float).eps))

    def envelope(self, w):
        """Decreasing envelope: ``H(w)`` left of ``w0``, ``H(w0)`` right of it."""
        return self.value(np.minimum(w, self.w0))

    def envelope_slope(self, w):
        w = np.asarray(w, dtype=float)
        return np.where(w < self.w0, self.slope(np.minimum(w, self.w0)), 0.0)

    def scaled(self, c: float) -> "ConvexNonlinearity":
        """``c * H`` for ``c > 0``; root and argmin are unchanged."""
        if not c > 0:
            raise DomainError("nonlinearities may only be scaled by positive factors")
        return ConvexNonlinearity(
            lambda w: c * self.value(w),
            lambda w: c * self.slope(w),
            self.w_max,
            self.root,
            self.argmin,
            self.u,
            self.label,
        )


def _find_root(H: ConvexNonlinearity) -> float:
    hm = float(H(H.w_max))
    if hm == 0.0:
        return H.w_max
    if hm > 0:
        raise StructureError(f"H(w_max) = {hm} > 0: no negative root")
    width = 1.0
    while float(H(H.w_max - width)) <= 0:
        width *= 2.0
        if width > 1e8:
            raise StructureError("no sign change of H found on (-1e8, w_max]")
    root = brentq(H.value, H.w_max - width, H.w_max, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    # a few Newton polishes for |H(root)| at rounding level
    for _ in range(3):
        d = float(H.derivative(root))
        if d == 0:
            break
        root = root - float(H(root)) / d
    return float(root)


@dataclass(frozen=True)
class RVFamily:
    """``u -> R_V(u, .)`` for correlation ``rho``."""

    rho: float

    def __post_init__(self):
        if not -1.0 <= self.rho <= 1.0:
            raise DomainError(f"rho must lie in [-1, 1], got {self.rho}")

    def __call__(self, u: float) -> ConvexNonlinearity:
        _check_u(u)
        rho = self.rho
        disc = rho * rho * u * u + u - u * u
        root = -rho * u - math.sqrt(max(disc, 0.0))
        if u in (0.0, 1.0):
            # the root at the boundary; the other one (if any) lies at w > 0
            root = 0.0
        return ConvexNonlinearity(
            lambda w: r_v(u, w, rho),
            lambda w: rho * u + np.asarray(w, dtype=float),
            0.0,
            min(root, 0.0),
            min(-rho * u, 0.0),
            u,
            f"R_V(rho={rho})",
        )


@dataclass(frozen=True)
class RLambdaFamily:
    """``u -> c R_lambda(u, .)`` for a jump specification (``c = 1`` by default)."""

    spec: JumpSpec
    scale: float = 1.0

    def __call__(self, u: float) -> ConvexNonlinearity:
        _check_u(u)
        spec, c = self.spec, self.scale
        H = ConvexNonlinearity(
            lambda w: c * r_lambda(u, w, spec),
            lambda w: c * _r_lambda_dw(u, w, spec),
            0.0,
            0.0 if u in (0.0, 1.0) else None,
            None,
            u,
            "R_lambda",
        )
        return H


def _check_u(u):
    if not 0.0 <= u <= 1.0:
        raise DomainError(f"u must lie in [0, 1], got {u}")


def w_star(H: ConvexNonlinearity) -> float:
    """Unique root ``w_* < 0`` of ``H`` (``0`` for the degenerate ``u`` in ``{0, 1}``)."""
    root = H.w_star
    if abs(float(H(root))) > ROOT_TOL * max(1.0, abs(root)):
        raise StructureError(f"root {root} leaves |H| = {abs(float(H(root))):.3e}")
    return root


# -- grids ------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RiccatiGrid:
    """Solution of a convolution Riccati equation on ``t_i = i dt``.

    ``g`` holds right limits at the nodes and ``g_left`` left limits (they
    differ only where the nonlinearity switches). ``residual`` is the defect
    ``|g - H(k * g)|`` of the piecewise-linear solution at panel midpoints
    (``nan`` where not computable).
    """

    u: float | tuple
    dt: float
    T: float
    t: np.ndarray
    g: np.ndarray
    g_left: np.ndarray
    f: np.ndarray
    residual: np.ndarray
    w_star: float | np.ndarray
    r1: np.ndarray | None = None
    breaks: tuple = field(default_factory=tuple)

    @property
    def max_residual(self) -> float:
        r = self.residual[np.isfinite(self.residual)]
        return float(r.max()) if r.size else float("nan")

    def to_csv(self, path) -> Path:
        from .io import write_csv

        r1 = self.r1 if self.r1 is not None else [None] * len(self.t)
        rows = zip(self.t, self.g, self.f, self.residual, r1)
        return write_csv(path, ["t", "g", "f", "residual", "r1_bound"], rows)


# -- time stepping ----------------------------------------------------------------


def snap_to_grid(t: float, dt: float) -> int:
    """Index of the grid node nearest to ``t``; error when farther than ``dt / 2``."""
    k = int(round(t / dt))
    if abs(t - k * dt) > 0.5 * dt * (1 + 1e-12):
        raise DomainError(f"time {t} is not within dt/2 of the grid")
    return k


def _steps(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise DomainError(f"need T > 0 and dt > 0, got T={T}, dt={dt}")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise DomainError(f"T={T} is not a multiple of dt={dt}")
    return n


def _solve_step(H: ConvexNonlinearity, a: float, c: float, guess: float) -> float:
    """Root of ``f - a - c H(f)`` on its increasing branch."""

    def phi(x):
        return x - a - c * float(H(x))

    x = min(guess, H.w_max)
    lo, hi = -np.inf, np.inf
    for _ in range(STEP_MAX_ITER):
        p = phi(x)
        if p < 0:
            lo = max(lo, x)
        else:
            hi = min(hi, x)
        d = 1.0 - c * float(H.derivative(x))
        if d > 0:
            step = p / d
            nxt = x - step
        else:
            nxt = np.nan
        if not np.isfinite(nxt) or nxt <= lo or nxt >= hi or nxt > H.w_max:
            if np.isfinite(lo) and np.isfinite(hi):
                nxt = 0.5 * (lo + hi)
            elif np.isfinite(hi):
                nxt = hi - max(1.0, abs(hi))
            else:
                nxt = min(lo + max(1.0, abs(lo)), H.w_max)
            step = x - nxt
        if abs(step) <= STEP_TOL * max(1.0, abs(nxt)):
            return nxt
        x = nxt
    raise StepSizeError(f"per-step solve did not converge in {STEP_MAX_ITER} iterations; reduce dt")


def _march(
    w: ConvWeights,
    n: int,
    schedule: Sequence[tuple[int, ConvexNonlinearity]],
    initial: tuple[np.ndarray, float] | None = None,
    forcing: np.ndarray | None = None,
):
    """March ``f = a + k * g``, ``g = H(f)`` with ``H`` switching at given nodes.

    ``schedule`` lists ``(start, H)``: ``H`` applies from node ``start`` on.
    ``initial = (values, left)`` prescribes ``g`` at nodes ``0..b-1`` and its
    left limit at node ``b``, from where the equation takes over. ``forcing``
    holds ``a`` at the nodes (zero when omitted).
    """
    g_plus = np.zeros(n + 1)
    g_minus = np.zeros(n + 1)
    a_nodes = np.zeros(n + 1) if forcing is None else np.asarray(forcing, dtype=float)
    f = a_nodes.copy()
    starts = [s for s, _ in schedule]
    active = np.searchsorted(starts, np.arange(n + 1), side="right") - 1
    first = 0
    if initial is not None:
        values, left = initial
        first = len(values)
        g_plus[:first] = values
        g_minus[1:first] = values[1:]
        g_minus[first] = left
    diag = w.right[1]
    for i in range(first, n + 1):
        H_new = schedule[active[i]][1]
        if i == 0:
            g_plus[0] = g_minus[0] = float(H_new(a_nodes[0]))
            continue
        a = a_nodes[i] + np.dot(w.left[i:0:-1], g_plus[:i]) + np.dot(w.right[i:1:-1], g_minus[1:i])
        if i == first:
            # the panel ending here is still the prescribed segment
            f[i] = a + diag * g_minus[i]
            g_plus[i] = float(H_new(f[i]))
            continue
        H_old = schedule[active[i - 1]][1]
        f[i] = _solve_step(H_old, a, diag, f[i - 1])
        g_minus[i] = float(H_old(f[i]))
        g_plus[i] = g_minus[i] if H_new is H_old else float(H_new(f[i]))
    return f, g_plus, g_minus


def _midpoint_defect(kernel, n, dt, schedule, g_plus, g_minus, skip_until=0):
    """``|g(t_{i-1/2}) - H((k * g)(t_{i-1/2}))|`` of the piecewise-linear ``g``."""
    shifted = kernel._half_shift_weights(n, dt)
    out = np.full(n + 1, np.nan)
    if shifted is None:
        return out
    p0, p1, left, right = shifted
    starts = [s for s, _ in schedule]
    out[0] = 0.0
    for i in range(max(1, skip_until + 1), n + 1):
        k = np.arange(1, i)
        full = np.dot(left[k], g_plus[i - 1 - k]) + np.dot(right[k], g_minus[i - k])
        fm = full + g_plus[i - 1] * (0.5 * p0 + p1) + g_minus[i] * (0.5 * p0 - p1)
        H = schedule[np.searchsorted(starts, i - 1, side="right") - 1][1]
        out[i] = abs(0.5 * (g_plus[i - 1] + g_minus[i]) - float(H(fm)))
    return out


def _check_bounds(f, lower, upper, first=1, what="f"):
    tol = 1e-12
    bad = np.nonzero((f[first:] <= lower - tol) | (f[first:] > upper + tol))[0]
    if bad.size:
        i = bad[0] + first
        raise BoundViolation(f"{what}(t_{i}) = {f[i]} escapes ({lower}, {upper}]")


def _short_circuit(u, n, dt, T, root=0.0):
    t = dt * np.arange(n + 1)
    z = np.zeros(n + 1)
    return RiccatiGrid(u, dt, T, t, z, z.copy(), z.copy(), z.copy(), root, z.copy())


def solve_riccati(family, kernel: Kernel, u: float, T: float, dt: float, bounds: bool = True) -> RiccatiGrid:
    """Solve ``g = H_u(k * g)`` on ``[0, T]``.

    Parameters
    ----------
    family : callable
        ``u -> ConvexNonlinearity`` (e.g. ``RVFamily(rho)``).
    kernel : Kernel
        Decreasing kernel; tabulated kernels must cover ``[0, T]``.
    u : float
        Exponent in ``[0, 1]``; ``0`` and ``1`` return ``g = 0`` exactly.
    T, dt : float
        Horizon and step; ``T`` must be a multiple of ``dt``.
    bounds : bool
        Attach the lower comparison bound ``r1`` (case a/a' with ``a = 0``).
    """
    n = _steps(T, dt)
    if u in (0.0, 1.0):
        return _short_circuit(u, n, dt, T)
    H = family(u)
    ws = w_star(H)
    w = conv_weights(kernel, n, dt)
    schedule = [(0, H)]
    f, gp, gm = _march(w, n, schedule)
    _check_bounds(f, ws, H.w_max)
    residual = _midpoint_defect(kernel, n, dt, schedule, gp, gm)
    r1 = None
    if bounds:
        r1 = comparison_bounds(H, kernel, lambda t: np.zeros_like(t), T, dt).lower
    return RiccatiGrid(u, dt, T, dt * np.arange(n + 1), gp, gm, f, residual, ws, r1)


def solve_riccati_ic(
    H: ConvexNonlinearity, kernel: Kernel, h: Callable, delta: float, T: float, dt: float, bounds: bool = True
) -> RiccatiGrid:
    """Solve ``g = h`` on ``[0, delta)`` and ``g = H(k * g)`` on ``[delta, T]``.

    ``h`` is evaluated at the grid nodes in ``[0, delta)``; its value just
    below ``delta`` is used as the left limit of ``g`` there. Raises
    ``DomainError`` unless ``w_* < int_0^delta k(delta - s) h(s) ds``.
    """
    n = _steps(T, dt)
    b = snap_to_grid(delta, dt)
    if not 0 < b <= n:
        raise DomainError(f"delta={delta} must lie in (0, T]")
    t = dt * np.arange(n + 1)
    hv = np.asarray(h(t[:b]), dtype=float) * np.ones(b)
    h_left = float(np.asarray(h(np.nextafter(b * dt, 0.0)), dtype=float))
    if np.any(hv > 0) or h_left > 0:
        raise DomainError("initial segment h must be non-positive")
    ws = w_star(H)
    w = conv_weights(kernel, n, dt)
    entry = float(np.dot(w.left[b:0:-1], hv) + np.dot(w.right[b:1:-1], hv[1:]) + w.right[1] * h_left)
    if not entry > ws:
        raise DomainError(f"initial segment gives int_0^delta k(delta - s) h(s) ds = {entry} <= w_* = {ws}")
    schedule = [(0, H)]
    f, gp, gm = _march(w, n, schedule, initial=(hv, h_left))
    f[:b] = _prefix_conv(w, hv, b)
    if np.any(f[b:] <= ws):
        i = b + int(np.argmax(f[b:] <= ws))
        raise BoundViolation(f"(k * g)(t_{i}) = {f[i]} fell to w_* = {ws}")
    residual = _midpoint_defect(kernel, n, dt, schedule, gp, gm, skip_until=b)
    r1 = None
    if bounds:
        r1 = np.full(n + 1, np.nan)
        shifted = comparison_bounds(H, kernel, lambda s: np.full_like(s, entry), T - b * dt, dt, case="a'")
        r1[b:] = shifted.lower
    return RiccatiGrid(H.u, dt, T, t, gp, gm, f, residual, ws, r1, (b,))


def solve_forced(H: ConvexNonlinearity, kernel: Kernel, a: Callable, T: float, dt: float):
    """Solve ``f = a + k * H(f)`` on ``[0, T]``; returns ``(t, f, g)``.

    This is the equation the comparison bounds of ``comparison_bounds`` refer to.
    """
    n = _steps(T, dt)
    t = dt * np.arange(n + 1)
    av = np.asarray(a(t), dtype=float) * np.ones(n + 1)
    w = conv_weights(kernel, n, dt)
    f, gp, _ = _march(w, n, [(0, H)], forcing=av)
    return t, f, gp


def _prefix_conv(w: ConvWeights, hv: np.ndarray, b: int) -> np.ndarray:
    out = np.zeros(b)
    for i in range(1, b):
        out[i] = np.dot(w.left[i:0:-1], hv[:i]) + np.dot(w.right[i:0:-1], hv[1 : i + 1])
    return out


def solve_riccati_multi(family, kernel: Kernel, times: Sequence[float], u_vec: Sequence[float], dt: float) -> RiccatiGrid:
    """Backward recursion for the joint law of increments over ``t_0 <= ... <= t_n = T``.

    On time-to-maturity ``[T - t_{k+1}, T - t_k)`` the nonlinearity is
    ``H_{u_k}``; before ``t_0`` (``tau > T - t_0``) the process runs with
    ``u = 0``. Requires ``w_*(u_0) <= ... <= w_*(u_{n-1})``.
    """
    times = [float(x) for x in times]
    u_vec = [float(x) for x in u_vec]
    if len(times) != len(u_vec) + 1 or len(u_vec) < 1:
        raise DomainError("need n + 1 times for n exponents")
    if any(b < a for a, b in zip(times, times[1:])) or times[0] < 0:
        raise DomainError("times must be non-negative and non-decreasing")
    T = times[-1]
    n = _steps(T, dt)
    idx = [snap_to_grid(x, dt) for x in times]
    Hs = [family(u) for u in u_vec]
    roots = [w_star(H) for H in Hs]
    for k in range(len(roots) - 1):
        if roots[k] > roots[k + 1] + 1e-12:
            raise DomainError(
                f"w_* ordering violated: w_*(u_{k}={u_vec[k]}) = {roots[k]} > w_*(u_{k + 1}={u_vec[k + 1]}) = {roots[k + 1]}"
            )
    # segments in time-to-maturity, latest increment first
    schedule = []
    for k in reversed(range(len(u_vec))):
        start = n - idx[k + 1]
        if idx[k + 1] > idx[k]:
            if schedule and schedule[-1][0] == start:
                schedule[-1] = (start, Hs[k])
            else:
                schedule.append((start, Hs[k]))
    if not schedule:
        raise DomainError("all increments have zero length")
    if idx[0] > 0:
        schedule.append((n - idx[0], family(0.0)))
    w = conv_weights(kernel, n, dt)
    f, gp, gm = _march(w, n, schedule)
    residual = _midpoint_defect(kernel, n, dt, schedule, gp, gm)
    breaks = tuple(s for s, _ in schedule[1:])
    return RiccatiGrid(tuple(u_vec), dt, T, dt * np.arange(n + 1), gp, gm, f, residual, np.array(roots), None, breaks)


# -- comparison bounds ---------------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(48)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


@dataclass(frozen=True, eq=False)
class BoundArrays:
    """Comparison bounds on the grid: ``lower <= f <= upper`` with the case label."""

    case: str
    t: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    w_star: float


def _smooth_integral(fn, lo, hi):
    """``int_lo^hi fn`` for arrays ``lo <= hi`` with a 48-point Gauss rule."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    width = hi - lo
    x = lo[..., None] + width[..., None] * _GL_X
    return width * (fn(x) @ _GL_W)


def _q_decreasing(H, slope_star, w, a):
    """``-int_w^a dz / H(z)`` for ``w_* < w <= a`` where ``H < 0``.

    The pole at ``w_*`` is split off through ``H(z) ~ H'(w_*) (z - w_*)``
    and integrated analytically; the remainder is smooth.
    """
    ws = H.w_star
    s = -slope_star

    def rem(z):
        return -1.0 / H(z) - 1.0 / (s * (z - ws))

    return np.log((a - ws) / (w - ws)) / s + _smooth_integral(rem, w, np.full_like(w, a))


def _q_envelope(H, slope_star, w, a):
    """``-int_w^a dz / H_bar(z)`` with the decreasing envelope ``H_bar``."""
    w0 = H.w0
    if a <= w0:
        return _q_decreasing(H, slope_star, w, a)
    level = -float(H(w0))
    flat = (a - np.maximum(w, w0)) / level
    below = np.minimum(w, w0)
    curved = _q_decreasing(H, slope_star, below, w0)
    return flat + np.where(w < w0, curved, 0.0)


def _q_increasing(H, slope_star, w, a):
    """``int_a^w dz / H(z)`` for ``a <= w < w_*`` where ``H > 0``."""
    ws = H.w_star
    s = -slope_star

    def rem(z):
        return 1.0 / H(z) - 1.0 / (s * (ws - z))

    return np.log((ws - a) / (ws - w)) / s + _smooth_integral(rem, np.full_like(w, a), w)


def _invert(q, target, near_root, far, tol=1e-15):
    """Solve ``q(w) = target`` by vectorized bisection.

    ``q`` vanishes at ``far`` and grows without bound toward ``near_root``.
    """
    near = np.full_like(target, near_root)
    away = np.full_like(target, far)
    for _ in range(200):
        mid = 0.5 * (near + away)
        too_far = q(mid) < target
        away = np.where(too_far, mid, away)
        near = np.where(too_far, near, mid)
        if np.max(np.abs(away - near)) <= tol:
            break
    return 0.5 * (near + away)


def comparison_bounds(
    H: ConvexNonlinearity, kernel: Kernel, a: Callable, T: float, dt: float, case: str | None = None
) -> BoundArrays:
    """A-priori bounds for ``f = a + k * H(f)``.

    Cases (detected from ``a`` on the grid unless given):

    * ``"a"``/``"a'"``: ``a`` non-decreasing in ``(w_*, w_max]``;
      ``w_* < r1 <= f < a`` with ``r1(t) = Q1^{-1}(int_0^t k, a(0))``, built
      from ``H`` when it is decreasing up to ``max a`` and from its
      decreasing envelope otherwise.
    * ``"b"``: ``a = w_*``; ``f = w_*``.
    * ``"c"``: ``a`` non-increasing below ``w_*``; ``a < f <= r2 < w_*``.
    """
    n = _steps(T, dt)
    t = dt * np.arange(n + 1)
    av = np.asarray(a(t), dtype=float) * np.ones(n + 1)
    ws = w_star(H)
    tol = 1e-12
    if case is None:
        if np.all(np.abs(av - ws) <= tol):
            case = "b"
        elif np.all(av > ws) and np.all(np.diff(av) >= -tol) and np.all(av <= H.w_max + tol):
            case = "a" if H.w0 >= av.max() else "a'"
        elif np.all(av < ws) and np.all(np.diff(av) <= tol):
            case = "c"
        else:
            raise DomainError("a fits none of the comparison cases (increasing above w_*, = w_*, decreasing below)")
    if case == "b":
        r = np.full(n + 1, ws)
        return BoundArrays("b", t, r, r.copy(), ws)
    K = np.asarray(kernel.primitive(t), dtype=float)
    a0 = float(av[0])
    slope_star = float(H.derivative(ws))
    if not slope_star < 0:
        raise StructureError("H'(w_*) must be negative")
    pos = K > 0
    if case in ("a", "a'"):
        q_fn = _q_decreasing if case == "a" else _q_envelope
        r1 = np.full(n + 1, a0)
        r1[pos] = _invert(lambda w: q_fn(H, slope_star, w, a0), K[pos], ws + 1e-14, a0)
        return BoundArrays(case, t, r1, av, ws)
    if case == "c":
        r2 = np.full(n + 1, a0)
        r2[pos] = _invert(lambda w: _q_increasing(H, slope_star, w, a0), K[pos], ws - 1e-14, a0)
        return BoundArrays("c", t, av, r2, ws)
    raise DomainError(f"unknown comparison case {case!r}")
