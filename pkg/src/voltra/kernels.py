"""Kernel catalog, product-integration weights, gamma-resolvents and Laplace transforms.

A kernel is a non-negative function on ``(0, inf)`` that is square integrable
near the origin. Convolutions ``(k * f)(t) = int_0^t k(t - s) f(s) ds`` are
discretized by product integration: ``f`` is replaced by its piecewise-linear
interpolant on a uniform grid and integrated exactly against ``k``, which
needs only the panel moments ``int k`` and ``int s k`` over each panel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import gamma as gamma_fn

from .errors import DomainError, NumericalFailure, PreconditionError, SingularityError
from .mittag_leffler import mittag_leffler

__all__ = [
    "Kernel",
    "ConstantKernel",
    "ExponentialKernel",
    "PowerLawKernel",
    "MittagLefflerKernel",
    "TabulatedKernel",
    "ConvWeights",
    "eval_kernel",
    "kernel_primitive",
    "conv_weights",
    "gamma_resolvent",
    "laplace_transform",
    "self_convolution",
    "kernel_from_record",
    "mittag_leffler",
]

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(16)
# rescaled to [0, 1]
_GL_X = 0.5 * (_GL_NODES + 1.0)
_GL_W = 0.5 * _GL_WEIGHTS
_GL64_X, _GL64_W = np.polynomial.legendre.leggauss(64)
_GL64_X = 0.5 * (_GL64_X + 1.0)
_GL64_W = 0.5 * _GL64_W
_NEAR_NODES = 256


def _scaled_series(x, exact, coeffs):
    """``exact(x)`` away from 0, the Taylor polynomial ``coeffs`` for ``|x| < 0.1``."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 0.1
    out = np.empty_like(x)
    out[small] = np.polynomial.polynomial.polyval(x[small], coeffs)
    xl = x[~small]
    with np.errstate(over="ignore", invalid="ignore"):
        out[~small] = exact(xl)
    return out


_FACT = np.array([math.factorial(k) for k in range(22)], dtype=float)
_K = np.arange(20)


def _phi1(x):
    """``(1 - exp(-x)) / x``."""
    return _scaled_series(x, lambda v: -np.expm1(-v) / v, (-1.0) ** _K / _FACT[_K + 1])


def _phi2(x):
    """``(1 - exp(-x) (1 + x)) / x**2``."""
    return _scaled_series(x, lambda v: (-np.expm1(-v) - v * np.exp(-v)) / v**2, (-1.0) ** _K * (_K + 1) / _FACT[_K + 2])


def _phi3(x):
    """``(x - 1 + exp(-x)) / x**2``."""
    return _scaled_series(x, lambda v: (v + np.expm1(-v)) / v**2, (-1.0) ** _K / _FACT[_K + 2])


@dataclass(frozen=True)
class ConvWeights:
    """Product-integration weights on a uniform grid ``t_i = i * dt``.

    For the panel at lag ``m`` (``tau`` in ``[(m-1) dt, m dt]``), ``left[m]``
    multiplies the integrand value at the panel's left end in ``s`` (the older
    node) and ``right[m]`` the value at its right end. Index 0 is unused.
    """

    dt: float
    left: np.ndarray
    right: np.ndarray

    @property
    def n(self) -> int:
        return len(self.left) - 1

    def matrix(self) -> np.ndarray:
        """Dense lower-triangular ``w`` with ``(k * f)(t_i) ~ sum_j w[i, j] f(t_j)``."""
        n = self.n
        w = np.zeros((n + 1, n + 1))
        for i in range(1, n + 1):
            lags = i - np.arange(i)
            w[i, :i] += self.left[lags]
            w[i, 1 : i + 1] += self.right[lags]
        return w

    def apply(self, f) -> np.ndarray:
        """Convolve node values ``f[0..n]`` of a continuous function."""
        f = np.asarray(f, dtype=float)
        return self.apply_split(f, f)

    def apply_split(self, f_plus, f_minus) -> np.ndarray:
        """Convolve a piecewise-linear function allowed to jump at nodes.

        ``f_plus[k]`` is the right limit at ``t_k`` (left end of panel ``k``)
        and ``f_minus[k]`` the left limit (right end of panel ``k - 1``).
        """
        n = min(self.n, len(f_plus) - 1)
        out = np.zeros(n + 1)
        for i in range(1, n + 1):
            out[i] = np.dot(self.left[i:0:-1], f_plus[:i]) + np.dot(self.right[i:0:-1], f_minus[1 : i + 1])
        return out

    def row_sums(self) -> np.ndarray:
        """Cumulative ``sum_m (left + right)``, the discrete ``int_0^{t_i} k``."""
        return np.concatenate([[0.0], np.cumsum(self.left[1:] + self.right[1:])])


class Kernel:
    """Base class; subclasses are frozen dataclasses."""

    kind = "kernel"

    # -- analytic metadata -------------------------------------------------
    @property
    def singular_exponent(self) -> float:
        """Exponent ``e`` with ``k(x) ~ x**e`` at the origin (0 when bounded)."""
        return 0.0

    @property
    def is_singular(self) -> bool:
        return self.singular_exponent < 0.0

    @property
    def is_decreasing(self) -> bool:
        raise NotImplementedError

    @property
    def is_log_convex(self) -> bool:
        raise NotImplementedError

    # -- evaluation --------------------------------------------------------
    def __call__(self, x):
        x_arr = np.asarray(x, dtype=float)
        if np.any(x_arr < 0):
            raise DomainError("kernels are defined on x >= 0")
        if self.is_singular and np.any(x_arr == 0):
            raise SingularityError(f"{self.kind} kernel is singular at x = 0")
        out = self._eval(x_arr)
        return float(out) if np.ndim(out) == 0 else out

    def _eval(self, x):
        raise NotImplementedError

    def regular_part(self, x):
        """``k(x) * x**(-e)``; finite at the origin."""
        x = np.asarray(x, dtype=float)
        e = self.singular_exponent
        if e == 0.0:
            return self(x)
        return self._regular(x)

    def _regular(self, x):
        raise NotImplementedError

    def primitive(self, t):
        """``int_0^t k(s) ds``; ``t = inf`` returns the total mass."""
        raise NotImplementedError

    def first_moment(self, t):
        """``int_0^t s k(s) ds``."""
        raise NotImplementedError

    def laplace(self, z):
        raise NotImplementedError

    def scaled(self, c: float) -> "Kernel":
        """The kernel ``c * k``."""
        raise NotImplementedError

    def record(self) -> dict:
        raise NotImplementedError

    # -- discretization ----------------------------------------------------
    def _panel_weights(self, n: int, dt: float):
        """``(left, right)`` for lags ``1..n`` (arrays of length ``n``)."""
        h = dt
        left = np.empty(n)
        right = np.empty(n)
        k0 = self.primitive(h)
        k1 = self.first_moment(h)
        left[0] = k1 / h
        right[0] = k0 - k1 / h
        if n > 1:
            m = np.arange(2, n + 1)
            a = (m - 1)[:, None] * h
            v = _GL_X[None, :] * h
            vals = self(a + v)
            left[1:] = (vals * _GL_X[None, :]) @ _GL_W * h
            right[1:] = (vals * (1.0 - _GL_X[None, :])) @ _GL_W * h
        return left, right

    def _half_shift_weights(self, n: int, dt: float):
        """Moments for convolutions evaluated at the panel midpoints ``t_{i-1/2}``.

        Returns ``(p0, p1, left, right)``: ``p0 = int_0^{dt/2} k``,
        ``p1 = int_0^{dt/2} k(tau) tau / dt``, and for ``k = 1..n`` the
        moments of ``k`` over ``[(k - 1/2) dt, (k + 1/2) dt]`` against the
        hat functions rising to the left and right ends (index 0 unused).
        ``None`` when the kernel cannot be evaluated between grid nodes.
        """
        h = dt
        p0 = self.primitive(0.5 * h)
        p1 = self.first_moment(0.5 * h) / h
        k = np.arange(1, n + 1)
        a = (k - 0.5)[:, None] * h
        vals = self(a + _GL_X[None, :] * h)
        left = np.concatenate([[0.0], (vals * _GL_X[None, :]) @ _GL_W * h])
        right = np.concatenate([[0.0], (vals * (1.0 - _GL_X[None, :])) @ _GL_W * h])
        return p0, p1, left, right


@dataclass(frozen=True)
class ConstantKernel(Kernel):
    zeta: float
    kind = "constant"

    def __post_init__(self):
        if not self.zeta >= 0:
            raise DomainError(f"constant kernel needs zeta >= 0, got {self.zeta}")

    is_decreasing = property(lambda self: True)
    is_log_convex = property(lambda self: True)

    def _eval(self, x):
        return np.full_like(x, self.zeta) if np.ndim(x) else np.float64(self.zeta)

    def primitive(self, t):
        return self.zeta * np.asarray(t, dtype=float) if np.ndim(t) else self.zeta * float(t)

    def first_moment(self, t):
        t = np.asarray(t, dtype=float)
        out = 0.5 * self.zeta * t * t
        return float(out) if out.ndim == 0 else out

    def laplace(self, z):
        return self.zeta / _positive(z)

    def scaled(self, c):
        return ConstantKernel(self.zeta * c)

    def record(self):
        return {"kind": self.kind, "zeta": self.zeta}

    def _panel_weights(self, n, dt):
        w = np.full(n, 0.5 * self.zeta * dt)
        return w, w.copy()


@dataclass(frozen=True)
class ExponentialKernel(Kernel):
    """``zeta * exp(-lam * x)``; the Heston forward-variance kernel."""

    zeta: float
    lam: float
    kind = "exponential"

    def __post_init__(self):
        if not self.zeta >= 0:
            raise DomainError(f"exponential kernel needs zeta >= 0, got {self.zeta}")

    is_decreasing = property(lambda self: self.lam >= 0 or self.zeta == 0)
    is_log_convex = property(lambda self: True)

    def _eval(self, x):
        return self.zeta * np.exp(-self.lam * x)

    def primitive(self, t):
        t = np.asarray(t, dtype=float)
        finite = np.isfinite(t)
        with np.errstate(invalid="ignore"):
            out = self.zeta * t * _phi1(self.lam * np.where(finite, t, 0.0))
        total = self.zeta / self.lam if self.lam > 0 else (np.inf if self.zeta > 0 else 0.0)
        out = np.where(finite, out, total)
        return float(out) if out.ndim == 0 else out

    def first_moment(self, t):
        t = np.asarray(t, dtype=float)
        out = self.zeta * t * t * _phi2(self.lam * t)
        return float(out) if out.ndim == 0 else out

    def laplace(self, z):
        return self.zeta / (_positive(z) + self.lam)

    def scaled(self, c):
        return ExponentialKernel(self.zeta * c, self.lam)

    def record(self):
        return {"kind": self.kind, "zeta": self.zeta, "lambda": self.lam}

    def _panel_weights(self, n, dt):
        if self.lam == 0:
            return ConstantKernel(self.zeta)._panel_weights(n, dt)
        x = self.lam * dt
        decay = self.zeta * np.exp(-self.lam * dt * np.arange(n))
        return decay * dt * float(_phi2(x)), decay * dt * float(_phi3(x))


@dataclass(frozen=True)
class PowerLawKernel(Kernel):
    """``zeta * x**(alpha - 1)`` (no Gamma normalization)."""

    zeta: float
    alpha: float
    kind = "power_law"

    def __post_init__(self):
        _check_alpha(self.alpha, upper=None)
        if not self.zeta >= 0:
            raise DomainError(f"power-law kernel needs zeta >= 0, got {self.zeta}")

    singular_exponent = property(lambda self: min(self.alpha - 1.0, 0.0))
    is_decreasing = property(lambda self: self.alpha <= 1.0)
    is_log_convex = property(lambda self: self.alpha <= 1.0)

    def _eval(self, x):
        return self.zeta * x ** (self.alpha - 1.0)

    def _regular(self, x):
        return np.full_like(x, self.zeta)

    def primitive(self, t):
        t = np.asarray(t, dtype=float)
        out = self.zeta * t**self.alpha / self.alpha
        return float(out) if out.ndim == 0 else out

    def first_moment(self, t):
        t = np.asarray(t, dtype=float)
        out = self.zeta * t ** (self.alpha + 1.0) / (self.alpha + 1.0)
        return float(out) if out.ndim == 0 else out

    def laplace(self, z):
        return self.zeta * gamma_fn(self.alpha) * _positive(z) ** (-self.alpha)

    def scaled(self, c):
        return PowerLawKernel(self.zeta * c, self.alpha)

    def record(self):
        return {"kind": self.kind, "zeta": self.zeta, "alpha": self.alpha}


@dataclass(frozen=True)
class MittagLefflerKernel(Kernel):
    """``zeta * x**(alpha-1) * E_{alpha,alpha}(-lam * x**alpha)``; the rough Heston kernel."""

    zeta: float
    alpha: float
    lam: float
    kind = "mittag_leffler"

    def __post_init__(self):
        _check_alpha(self.alpha, upper=1.0)
        if not self.zeta >= 0:
            raise DomainError(f"Mittag-Leffler kernel needs zeta >= 0, got {self.zeta}")

    singular_exponent = property(lambda self: self.alpha - 1.0)
    is_decreasing = property(lambda self: self.lam >= 0)
    is_log_convex = property(lambda self: self.lam >= 0)

    def _eval(self, x):
        a = self.alpha
        xa = x**a
        return self.zeta * x ** (a - 1.0) * mittag_leffler(a, a, -self.lam * xa)

    def _regular(self, x):
        a = self.alpha
        return self.zeta * mittag_leffler(a, a, -self.lam * x**a)

    def primitive(self, t):
        t = np.asarray(t, dtype=float)
        a = self.alpha
        if np.all(np.isinf(t)):
            out = np.full_like(t, self.zeta / self.lam if self.lam > 0 else np.inf)
        else:
            ta = t**a
            out = self.zeta * ta * mittag_leffler(a, a + 1.0, -self.lam * ta)
        return float(out) if np.ndim(out) == 0 else out

    def first_moment(self, t):
        # int_0^t s k(s) ds = t K(t) - int_0^t K(s) ds
        t = np.asarray(t, dtype=float)
        a = self.alpha
        ta = t**a
        z = -self.lam * ta
        out = self.zeta * t * ta * (mittag_leffler(a, a + 1.0, z) - mittag_leffler(a, a + 2.0, z))
        return float(out) if np.ndim(out) == 0 else out

    def laplace(self, z):
        return self.zeta / (_positive(z) ** self.alpha + self.lam)

    def scaled(self, c):
        return MittagLefflerKernel(self.zeta * c, self.alpha, self.lam)

    def record(self):
        return {"kind": self.kind, "zeta": self.zeta, "alpha": self.alpha, "lambda": self.lam}


@dataclass(frozen=True, eq=False)
class TabulatedKernel(Kernel):
    """Kernel given by values on abscissae, linearly interpolated.

    Below the first abscissa the first value is used (if finite); beyond the
    last abscissa the kernel is not defined. A kernel that is unbounded at the
    origin must carry its own product-integration weights (``native``) for
    the grid it was built on.
    """

    abscissae: np.ndarray
    values: np.ndarray
    native: ConvWeights | None = None
    log_convex: bool | None = None
    exponent: float = 0.0
    source: str | None = field(default=None, compare=False)
    kind = "tabulated"

    def __post_init__(self):
        x = np.asarray(self.abscissae, dtype=float)
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "abscissae", x)
        object.__setattr__(self, "values", v)
        if x.ndim != 1 or x.shape != v.shape or len(x) < 2:
            raise DomainError("tabulated kernel needs matching 1-d abscissae and values (>= 2 points)")
        if np.any(np.diff(x) <= 0) or x[0] < 0:
            raise DomainError("tabulated abscissae must be non-negative and strictly increasing")
        finite = np.isfinite(v)
        if np.any(v[finite] < 0):
            raise DomainError("tabulated kernel values must be non-negative")
        if not finite[1:].all() or (not finite[0] and x[0] != 0):
            raise DomainError("only the value at x = 0 may be infinite")
        if not finite[0] and (self.native is None or not self.exponent < 0):
            raise DomainError("a tabulated kernel singular at 0 must supply its exponent and panel moments")

    @property
    def singular_exponent(self):
        return self.exponent

    @property
    def horizon(self) -> float:
        return float(self.abscissae[-1])

    @property
    def is_decreasing(self):
        v = self.values
        return bool(np.all(np.diff(v[np.isfinite(v)]) <= 1e-14 * np.max(np.abs(v[np.isfinite(v)]))))

    @property
    def is_log_convex(self):
        if self.log_convex is not None:
            return self.log_convex
        v = self.values
        ok = np.isfinite(v)
        x, lv = self.abscissae[ok], v[ok]
        if np.any(lv <= 0):
            return False
        lv = np.log(lv)
        slopes = np.diff(lv) / np.diff(x)
        return bool(np.all(np.diff(slopes) >= -1e-9 * (1.0 + np.abs(slopes[1:]))))

    def _eval(self, x):
        if np.any(x > self.horizon * (1 + 1e-12)):
            raise DomainError(f"tabulated kernel evaluated beyond its horizon {self.horizon}")
        xs, vs = self.abscissae, self.values
        if not np.isfinite(vs[0]):
            xs, vs = xs[1:], vs[1:]
            if np.any(x < xs[0]):
                # inside the singular first panel: use the panel mean
                w = self.native
                mean0 = (w.left[1] + w.right[1]) / w.dt
                return np.where(x < xs[0], mean0, np.interp(x, xs, vs))
        return np.interp(x, xs, vs)

    def _regular(self, x):
        return self(x)

    def _cumulative(self, t, order):
        t = np.asarray(t, dtype=float)
        if self.native is not None:
            w = self.native
            h = w.dt
            m = np.arange(1, w.n + 1)
            m0 = w.left[1:] + w.right[1:]
            m1 = h * w.left[1:] + (m - 1) * h * m0
            c = np.concatenate([[0.0], np.cumsum(m0 if order == 0 else m1)])
            nodes = h * np.arange(w.n + 1)
            if np.any(t > nodes[-1] * (1 + 1e-12)):
                raise DomainError("tabulated kernel integrated beyond its horizon")
            idx = np.clip(np.floor(t / h + 1e-9).astype(int), 0, w.n)
            rem = t - nodes[idx]
            base = c[idx]
            # partial panel: linear interpolant of the integrand
            nxt = np.minimum(idx + 1, w.n)
            lo = np.where(idx == 0, m0[0] / h, self._eval(np.maximum(nodes[idx], 1e-300)))
            hi = self._eval(np.minimum(nodes[nxt], self.horizon))
            a0 = nodes[idx]
            slope = np.where(rem > 0, (hi - lo) / h, 0.0)
            if order == 0:
                part = lo * rem + 0.5 * slope * rem**2
            else:
                part = a0 * lo * rem + (lo + a0 * slope) * rem**2 / 2 + slope * rem**3 / 3
            out = base + np.where(rem > 1e-15 * h, part, 0.0)
            return float(out) if out.ndim == 0 else out
        xs = np.concatenate([[0.0], self.abscissae]) if self.abscissae[0] > 0 else self.abscissae
        vs = self._eval(xs)
        if np.any(t > self.horizon * (1 + 1e-12)):
            raise DomainError("tabulated kernel integrated beyond its horizon")
        # exact integrals of the linear interpolant between breakpoints
        dx = np.diff(xs)
        slope = np.diff(vs) / dx
        if order == 0:
            seg = 0.5 * (vs[:-1] + vs[1:]) * dx
        else:
            a = xs[:-1]
            seg = a * vs[:-1] * dx + (vs[:-1] + a * slope) * dx**2 / 2 + slope * dx**3 / 3
        c = np.concatenate([[0.0], np.cumsum(seg)])
        idx = np.clip(np.searchsorted(xs, t, side="right") - 1, 0, len(xs) - 2)
        rem = t - xs[idx]
        lo = vs[idx]
        sl = slope[idx]
        a = xs[idx]
        if order == 0:
            part = lo * rem + 0.5 * sl * rem**2
        else:
            part = a * lo * rem + (lo + a * sl) * rem**2 / 2 + sl * rem**3 / 3
        out = c[idx] + part
        return float(out) if out.ndim == 0 else out

    def primitive(self, t):
        return self._cumulative(t, 0)

    def first_moment(self, t):
        return self._cumulative(t, 1)

    def laplace(self, z):
        z = _positive(z)
        w = self.native or conv_weights(self, int(round(self.horizon / _native_dt(self))), _native_dt(self))
        h = w.dt
        m = np.arange(1, w.n + 1)
        zz = np.atleast_1d(np.asarray(z, dtype=float))
        # exp(-z tau) linearly interpolated on each panel, integrated against the kernel
        out = np.array(
            [np.dot(w.right[1:], np.exp(-zi * (m - 1) * h)) + np.dot(w.left[1:], np.exp(-zi * m * h)) for zi in zz]
        )
        return float(out[0]) if np.ndim(z) == 0 else out

    def scaled(self, c):
        native = None
        if self.native is not None:
            native = ConvWeights(self.native.dt, self.native.left * c, self.native.right * c)
        return TabulatedKernel(self.abscissae, self.values * c, native, self.log_convex, self.exponent, self.source)

    def record(self):
        return {"kind": self.kind, "table": self.source or ""}

    def _half_shift_weights(self, n, dt):
        if not np.isfinite(self.values[0]) or (n + 0.5) * dt > self.horizon * (1 + 1e-12):
            return None
        return super()._half_shift_weights(n, dt)

    def _panel_weights(self, n, dt):
        w = self.native
        if w is not None and math.isclose(w.dt, dt, rel_tol=1e-12) and w.n >= n:
            return w.left[1 : n + 1].copy(), w.right[1 : n + 1].copy()
        if not np.isfinite(self.values[0]):
            raise DomainError("singular tabulated kernel can only be discretized on its native grid")
        if n * dt > self.horizon * (1 + 1e-12):
            raise DomainError(f"grid horizon {n * dt} exceeds the table horizon {self.horizon}")
        # the interpolant is linear between breakpoints: two-point Gauss is exact per piece
        edges = np.union1d(dt * np.arange(n + 1), self.abscissae[self.abscissae < n * dt])
        gx = np.array([0.5 - 0.5 / math.sqrt(3.0), 0.5 + 0.5 / math.sqrt(3.0)])
        lo, hi = edges[:-1], edges[1:]
        tau = lo[:, None] + (hi - lo)[:, None] * gx[None, :]
        wts = 0.5 * (hi - lo)[:, None]
        vals = self._eval(tau) * wts
        panel = np.minimum(np.floor(tau / dt).astype(int), n - 1)
        start = panel * dt
        left = np.zeros(n)
        right = np.zeros(n)
        np.add.at(left, panel.ravel(), (vals * (tau - start) / dt).ravel())
        np.add.at(right, panel.ravel(), (vals * (start + dt - tau) / dt).ravel())
        return left, right


def _native_dt(k: TabulatedKernel) -> float:
    return float(np.min(np.diff(k.abscissae)))


def _positive(z):
    z_arr = np.asarray(z, dtype=float)
    if np.any(z_arr <= 0):
        raise DomainError("Laplace transforms are evaluated at z > 0")
    return z


def _check_alpha(alpha, upper):
    if not alpha > 0:
        raise DomainError(f"kernel with alpha={alpha} is not integrable at the origin")
    if not alpha > 0.5:
        raise DomainError(f"kernel with alpha={alpha} <= 1/2 is not square integrable")
    if upper is not None and alpha > upper:
        raise DomainError(f"alpha={alpha} exceeds the supported range (<= {upper})")


# -- module-level operations ---------------------------------------------------


def eval_kernel(kernel: Kernel, x):
    """``kernel(x)``; raises ``SingularityError`` at 0 for singular kernels."""
    return kernel(x)


def kernel_primitive(kernel: Kernel, t):
    """``int_0^t kernel(s) ds``; ``t = inf`` gives the total mass."""
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise DomainError("primitive needs t >= 0")
    return kernel.primitive(t)


def laplace_transform(kernel: Kernel, z):
    """Laplace transform of the kernel at real ``z > 0``."""
    return kernel.laplace(z)


def conv_weights(kernel: Kernel, n: int, dt: float) -> ConvWeights:
    """Product-integration weights for ``n`` panels of width ``dt``.

    Exact for piecewise-linear integrands. The first panel uses the analytic
    primitives (it carries the singularity), later panels 16-point Gauss
    rules, which are exact to rounding for the smooth tail of the kernel.
    """
    if n < 1 or not dt > 0:
        raise DomainError(f"conv_weights needs n >= 1 and dt > 0, got n={n}, dt={dt}")
    left, right = kernel._panel_weights(int(n), float(dt))
    if not (np.all(np.isfinite(left)) and np.all(np.isfinite(right))):
        raise DomainError(f"{kernel.kind} kernel is not integrable on the grid")
    return ConvWeights(float(dt), np.concatenate([[0.0], left]), np.concatenate([[0.0], right]))


def self_convolution(kernel: Kernel, n: int, dt: float, weights: ConvWeights | None = None) -> np.ndarray:
    """``(k * k)(t_i)`` for ``i = 0..n``.

    Each half of ``[0, t_i]`` is integrated with the factor that is singular
    on that half as the product-integration weight and the other factor
    interpolated linearly. Near the origin, where the interpolated factor
    varies on the scale of a panel, a Gauss rule after a change of variables
    that removes the endpoint singularity is used instead.
    """
    w = weights or conv_weights(kernel, n, dt)
    out = np.zeros(n + 1)
    if not kernel.is_singular:
        out[:] = w.apply(kernel(dt * np.arange(n + 1)))
        return out
    near = min(n, _NEAR_NODES)
    if isinstance(kernel, TabulatedKernel):
        near = 0
    else:
        # s = (t/2) y**(1/a) with a = e + 1 absorbs s**e and leaves a smooth integrand in y
        a = kernel.singular_exponent + 1.0
        t = dt * np.arange(1, near + 1)[:, None]
        y = _GL64_X[None, :]
        half = 0.5 * t
        s = half * y ** (1.0 / a)
        vals = kernel.regular_part(s) * kernel(t - s)
        out[1 : near + 1] = 2.0 * half[:, 0] ** a / a * (vals @ _GL64_W)
    if n > near:
        kv = np.empty(n + 1)
        kv[0] = np.nan
        kv[1:] = kernel(dt * np.arange(1, n + 1))
        for i in range(near + 1, n + 1):
            h = i // 2
            out[i] = _half(w, kv, i, h) + _half(w, kv, i, i - h)
    return out


def _half(w: ConvWeights, kv: np.ndarray, i: int, c: int) -> float:
    # sum_{k<c} right[k+1] k(t_{i-k}) + left[k+1] k(t_{i-k-1})
    k = np.arange(c)
    return float(np.dot(w.right[k + 1], kv[i - k]) + np.dot(w.left[k + 1], kv[i - k - 1]))


def _tanh_sinh_rule(step: float = 1.0 / 8.0, reach: float = 3.2):
    """Nodes ``x``, complements ``1 - x`` and weights of a tanh-sinh rule on ``[0, 1]``."""
    t = step * np.arange(-round(reach / step), round(reach / step) + 1)
    u = np.pi * np.sinh(t)
    x = 1.0 / (1.0 + np.exp(-u))
    xc = 1.0 / (1.0 + np.exp(u))
    return x, xc, step * np.pi * np.cosh(t) * x * xc


_TS_X, _TS_XC, _TS_W = _tanh_sinh_rule()
_START_PANELS = 16
_NEAR_LAGS = 16
_REFINED_PANELS = 16
_REFINE = 32


def _starting_basis(beta: float, m: int) -> np.ndarray:
    """Right hat function linear in ``s**beta`` minus the one linear in ``s``, on panel ``m``.

    Evaluated at the tanh-sinh nodes in unit panel coordinates.
    """
    x = _TS_X
    if m == 1:
        return x**beta - x
    lo = float(m - 1) ** beta
    return ((m - 1 + x) ** beta - lo) / (float(m) ** beta - lo) - x


def _starting_corrections(kernel: Kernel, beta: float, n: int, dt: float, panels: int):
    """Weight corrections when ``q`` is linear in ``s**beta`` on the first panels.

    Returns ``d`` with ``d[i, m]`` the change of the weight of ``q_m`` at node
    ``i`` (the weight of ``q_{m-1}`` changes by ``-d[i, m]``), and the basis
    moments ``mu[m, k] = int_0^1 diff(v) v**k dv`` for ``k = 0, 1, 2``.
    """
    h = dt
    d = np.zeros((n + 1, panels + 1))
    mu = np.zeros((panels + 1, 3))
    half = kernel(h * (np.arange(n) + 0.5))
    nodes = np.empty(n + 1)
    nodes[1:] = kernel(h * np.arange(1, n + 1))
    for m in range(1, panels + 1):
        diff = _starting_basis(beta, m)
        wd = _TS_W * diff
        mu[m] = [wd.sum(), wd @ _TS_X, wd @ _TS_X**2]
        near = np.arange(m, min(n, m + _NEAR_LAGS) + 1)
        # tau = t_i - s = (i - m) h + h (1 - x)
        tau = h * ((near - m)[:, None] + _TS_XC[None, :])
        d[near, m] = h * (kernel(tau) @ wd)
        far = np.arange(m + _NEAR_LAGS + 1, n + 1)
        if far.size:
            # quadratic interpolation of the smooth kernel across the panel
            k0 = nodes[far - m + 1]
            kh = half[far - m]
            k1 = nodes[far - m]
            m0, m1, m2 = mu[m]
            d[far, m] = h * (k0 * (2 * m2 - 3 * m1 + m0) + kh * (4 * m1 - 4 * m2) + k1 * (2 * m2 - m1))
    return d, mu


def _march_smooth_part(kernel: Kernel, gamma: float, n: int, dt: float, w: ConvWeights):
    """March ``q = gamma (k * k) + gamma (k * q)`` on the uniform grid.

    Returns ``q`` at the nodes and, for a singular kernel, the moments of the
    starting basis (see ``_starting_corrections``) on the first panels.
    """
    forcing = gamma * self_convolution(kernel, n, dt, w)
    beta = 2.0 * kernel.singular_exponent + 1.0
    panels = min(n, _START_PANELS) if kernel.is_singular else 0
    mu = np.zeros((panels + 1, 3))
    if panels:
        d, mu = _starting_corrections(kernel, beta, n, dt, panels)
    q = np.zeros(n + 1)
    for i in range(1, n + 1):
        hist = np.dot(w.left[i:0:-1], q[:i]) + np.dot(w.right[i:1:-1], q[1:i])
        diag = w.right[1]
        if panels:
            m = np.arange(1, min(i - 1, panels) + 1)
            hist += np.dot(d[i, m], q[m] - q[m - 1])
            if i <= panels:
                diag += d[i, i]
                hist -= d[i, i] * q[i - 1]
        q[i] = (forcing[i] + gamma * hist) / (1.0 - gamma * diag)
    return q, mu


def _panel_moments(q: np.ndarray, mu: np.ndarray, refine: int, panels: int) -> np.ndarray:
    """``int_0^1 q(v) v**k dv`` (``k = 0, 1, 2``) on coarse panels made of ``refine`` fine ones.

    ``q`` holds fine-node values; ``mu`` the starting-basis moments of the
    fine march, whose first panels are not linear in ``s``.
    """
    gx, gw = np.polynomial.legendre.leggauss(3)
    gx, gw = 0.5 * (gx + 1.0), 0.5 * gw
    out = np.zeros((panels + 1, 3))
    offset = np.arange(refine)
    for m in range(1, panels + 1):
        j = (m - 1) * refine + offset + 1
        lin = q[j - 1][:, None] * (1.0 - gx) + q[j][:, None] * gx
        v = (offset[:, None] + gx[None, :]) / refine
        for k in range(3):
            out[m, k] = np.sum(lin * v**k * gw) / refine
        fine = j[j < len(mu)]
        if fine.size:
            jl = fine - 1 - (m - 1) * refine
            jump = q[fine] - q[fine - 1]
            m0, m1, m2 = mu[fine, 0], mu[fine, 1], mu[fine, 2]
            out[m, 0] += np.sum(jump * m0) / refine
            out[m, 1] += np.sum(jump * (jl * m0 + m1)) / refine**2
            out[m, 2] += np.sum(jump * (jl**2 * m0 + 2 * jl * m1 + m2)) / refine**3
    return out


def gamma_resolvent(kernel: Kernel, gamma: float, n: int, dt: float) -> Kernel:
    """Tabulated solution ``r`` of ``r = k + gamma (k * r)`` on ``t_i = i dt``.

    The part ``q = r - k`` solves ``q = gamma (k * k) + gamma (k * q)``, which
    is marched forward with the diagonal weight treated implicitly. For a
    kernel ``~ s**e`` at the origin, ``q ~ s**(2e + 1)`` varies fastest on
    the first panels. There ``q`` is interpolated linearly in ``s**(2e + 1)``
    rather than in ``s``, and the first panels are solved on a finer grid
    whose exact panel moments feed the coarse march. The result carries its
    own product-integration weights, so it can be convolved on the same grid
    even when it is singular at the origin.
    """
    if gamma == 0:
        return kernel
    if gamma < 0 and not kernel.is_log_convex:
        raise PreconditionError("gamma < 0 requires a log-convex kernel")
    if n < 1 or not dt > 0:
        raise DomainError(f"gamma_resolvent needs n >= 1 and dt > 0, got n={n}, dt={dt}")
    h = dt
    w = conv_weights(kernel, n, dt)
    moments = np.zeros((0, 3))
    if not kernel.is_singular:
        q, _ = _march_smooth_part(kernel, gamma, n, dt, w)
    else:
        known = min(n, _REFINED_PANELS + _NEAR_LAGS)
        fine_n = known * _REFINE
        fine_w = conv_weights(kernel, fine_n, dt / _REFINE)
        qf, muf = _march_smooth_part(kernel, gamma, fine_n, dt / _REFINE, fine_w)
        moments = _panel_moments(qf, muf, _REFINE, known)
        q = np.zeros(n + 1)
        q[: known + 1] = qf[::_REFINE]
        if n > known:
            forcing = gamma * self_convolution(kernel, n, dt, w)
            lead = _REFINED_PANELS
            # refined panels act on far nodes through quadratic interpolation of the kernel
            nodes = np.empty(n + 1)
            nodes[1:] = kernel(h * np.arange(1, n + 1))
            half = kernel(h * (np.arange(n) + 0.5))
            m = np.arange(1, lead + 1)
            m0, m1, m2 = moments[m, 0], moments[m, 1], moments[m, 2]
            c0, ch, c1 = 2 * m2 - 3 * m1 + m0, 4 * m1 - 4 * m2, 2 * m2 - m1
            for i in range(known + 1, n + 1):
                lead_part = h * (
                    np.dot(nodes[i - m + 1], c0) + np.dot(half[i - m], ch) + np.dot(nodes[i - m], c1)
                )
                lags = i - np.arange(lead + 1, i) + 1
                hist = (
                    lead_part
                    + np.dot(w.left[lags], q[lead : i - 1])
                    + np.dot(w.right[lags], q[lead + 1 : i])
                    + w.left[1] * q[i - 1]
                )
                q[i] = (forcing[i] + gamma * hist) / (1.0 - gamma * w.right[1])
    t = dt * np.arange(n + 1)
    values = np.empty(n + 1)
    values[1:] = kernel(t[1:]) + q[1:]
    values[0] = np.inf if kernel.is_singular else kernel(0.0) + q[0]
    scale = np.max(np.abs(values[1:]))
    if np.any(values[1:] < -1e-9 * scale):
        raise NumericalFailure("resolvent took negative values beyond tolerance")
    # panel moments of r = k + q: linear q, or the refined representation where available
    left = w.left.copy()
    right = w.right.copy()
    left[1:] += dt * (q[:-1] / 6.0 + q[1:] / 3.0)
    right[1:] += dt * (q[:-1] / 3.0 + q[1:] / 6.0)
    if len(moments) > 1:
        m = np.arange(1, len(moments))
        left[m] = w.left[m] + dt * moments[m, 1]
        right[m] = w.right[m] + dt * (moments[m, 0] - moments[m, 1])
    native = ConvWeights(dt, left, right)
    return TabulatedKernel(
        t,
        values,
        native,
        log_convex=kernel.is_log_convex if gamma < 0 else None,
        exponent=kernel.singular_exponent,
    )


# -- serialization ---------------------------------------------------------------


def kernel_from_record(record: dict, base_dir: Path | None = None) -> Kernel:
    """Build a kernel from a flat key-value record.

    Keys: ``kind`` (constant | exponential | power_law | mittag_leffler |
    tabulated), ``zeta``, ``lambda``, ``alpha``, ``table`` (path to a
    two-column CSV ``x,kappa``).
    """
    rec = {k.strip().lower(): v for k, v in record.items()}
    kind = str(rec.get("kind", "")).strip().lower().replace("-", "_")
    allowed = {
        "constant": {"zeta"},
        "exponential": {"zeta", "lambda"},
        "power_law": {"zeta", "alpha"},
        "powerlaw": {"zeta", "alpha"},
        "mittag_leffler": {"zeta", "alpha", "lambda"},
        "mittagleffler": {"zeta", "alpha", "lambda"},
        "tabulated": {"table"},
    }
    if kind not in allowed:
        raise DomainError(f"unknown kernel kind {kind!r}")
    keys = set(rec) - {"kind"}
    extra = keys - allowed[kind]
    missing = allowed[kind] - keys
    if extra:
        raise DomainError(f"unexpected key(s) for {kind} kernel: {sorted(extra)}")
    if missing:
        raise DomainError(f"missing key(s) for {kind} kernel: {sorted(missing)}")

    def num(key):
        try:
            return float(rec[key])
        except (TypeError, ValueError):
            raise DomainError(f"kernel key {key!r} must be a number, got {rec[key]!r}") from None

    if kind == "constant":
        return ConstantKernel(num("zeta"))
    if kind == "exponential":
        return ExponentialKernel(num("zeta"), num("lambda"))
    if kind in ("power_law", "powerlaw"):
        return PowerLawKernel(num("zeta"), num("alpha"))
    if kind in ("mittag_leffler", "mittagleffler"):
        return MittagLefflerKernel(num("zeta"), num("alpha"), num("lambda"))
    path = Path(str(rec["table"]))
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    return read_kernel_table(path)


def read_kernel_table(path: Path) -> TabulatedKernel:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DomainError(f"cannot read kernel table {path}: {exc}") from exc
    if rows and rows[0] and rows[0][0].strip().lower() == "x":
        rows = rows[1:]
    data = np.array([[float(a), float(b)] for a, b in rows if a.strip()])
    return TabulatedKernel(data[:, 0], data[:, 1], source=str(path))
