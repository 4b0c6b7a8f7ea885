"""Monte-Carlo engines for AFV and AFI models.

Every path owns its random stream: a Philox generator keyed by
``(seed, path index)``. Results therefore do not depend on chunking or on the
number of worker threads, and any single path can be regenerated on its own.
"""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cgf import ForwardCurve
from .errors import DomainError, InstabilityError, PreconditionError
from .io import write_csv
from .kernels import (
    ConstantKernel,
    ExponentialKernel,
    Kernel,
    MittagLefflerKernel,
    gamma_resolvent,
    kernel_primitive,
)
from .riccati import Dirac, JumpSpec

__all__ = [
    "PathBatch",
    "EventStream",
    "EventBatch",
    "path_rng",
    "simulate_afv",
    "simulate_afi_thinning",
    "simulate_afi_grid",
    "empirical_cgf",
    "empirical_mean",
    "hawkes_mean_intensity",
    "hawkes_resolvent",
]

EVENT_CAP = 10_000_000
CLAMP_WARN_FRACTION = 0.05
DEFAULT_CHUNK = 2000

_COUNT_STREAM = 0
_EVENT_STREAM = 1


def path_rng(seed: int, path: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for one path; ``stream`` selects disjoint counter ranges."""
    if not 0 <= seed < 2**64:
        raise DomainError(f"seed must lie in [0, 2**64), got {seed}")
    key = np.array([seed, path], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, stream]))


def _threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("VOLTRA_THREADS", "1"))
    return max(1, int(threads))


def _chunks(n_paths: int, chunk: int):
    return [(a, min(a + chunk, n_paths)) for a in range(0, n_paths, chunk)]


def _run_chunks(fn, n_paths, chunk, threads):
    bounds = _chunks(n_paths, chunk)
    workers = _threads(threads)
    if workers == 1 or len(bounds) == 1:
        return [fn(a, b) for a, b in bounds]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda ab: fn(*ab), bounds))


def _grid(T: float, dt: float) -> int:
    if not (T > 0 and dt > 0):
        raise DomainError("T and dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise DomainError(f"T={T} must be a multiple of dt={dt}")
    return n


def _lag_weights(kernel: Kernel, n: int, dt: float) -> np.ndarray:
    """``w[m] = int_{(m-1) dt}^{m dt} kernel`` for ``m = 1..n`` (``w[0]`` unused)."""
    K = np.asarray(kernel_primitive(kernel, dt * np.arange(n + 1)), dtype=float)
    w = np.zeros(n + 1)
    w[1:] = np.diff(K)
    return w


def _markov_decay(kernel: Kernel, dt: float) -> float | None:
    """Per-step decay factor when lag weights are geometric, else ``None``."""
    if isinstance(kernel, ExponentialKernel):
        return math.exp(-kernel.lam * dt)
    if isinstance(kernel, ConstantKernel):
        return 1.0
    return None


# -- AFV ------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathBatch:
    """Simulated AFV paths.

    ``x_T`` and ``v_T`` are terminal log-price increments and variances;
    ``x_obs`` holds ``X`` at ``observe_times`` (one column per time).
    """

    seed: int
    n_paths: int
    t: np.ndarray
    x_T: np.ndarray
    v_T: np.ndarray
    observe_times: tuple = ()
    x_obs: np.ndarray | None = None
    x_paths: np.ndarray | None = None
    v_paths: np.ndarray | None = None

    def summary(self) -> dict:
        ex, ex_se = empirical_mean(np.exp(self.x_T))
        return {
            "n_paths": self.n_paths,
            "mean_x": float(np.mean(self.x_T)),
            "var_x": float(np.var(self.x_T, ddof=1)) if self.n_paths > 1 else 0.0,
            "mean_exp_x": ex,
            "se_exp_x": ex_se,
            "mean_v": float(np.mean(self.v_T)),
        }

    def to_csv(self, path, per_path: bool = False) -> Path:
        if per_path:
            rows = zip(range(self.n_paths), self.x_T, self.v_T)
            return write_csv(path, ["path", "x_T", "v_T"], rows)
        return write_csv(path, ["statistic", "value"], self.summary().items())


def simulate_afv(
    kernel: Kernel,
    curve: ForwardCurve,
    rho: float,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    observe: Sequence[float] = (),
    store_paths: bool = False,
    threads: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> PathBatch:
    """Euler scheme for ``V_t = xi_0(t) + int_0^t k(t - s) sqrt(V_s) dW_s`` and ``X``.

    ``V(t_i) = xi_0(t_i) + sum_{j<i} kbar_{i-j} sqrt(V+(t_j)) dW_j`` with
    ``kbar_m`` the kernel averaged over the ``m``-th lag panel and
    ``V+ = max(V, 0)``; ``X`` moves by ``-V+ dt / 2`` plus
    ``sqrt(V+) (rho dW + sqrt(1 - rho**2) dW')``. Exponential and constant
    kernels use an O(n) recursion, other kernels the full O(n**2) sum.
    """
    if not kernel.is_decreasing:
        raise PreconditionError("AFV simulation needs a decreasing kernel")
    if not -1 <= rho <= 1:
        raise DomainError("rho must lie in [-1, 1]")
    if n_paths < 1:
        raise DomainError("n_paths must be positive")
    n = _grid(T, dt)
    t = dt * np.arange(n + 1)
    xi = np.asarray(curve(t), dtype=float) * np.ones(n + 1)
    w = _lag_weights(kernel, n, dt) / dt
    decay = _markov_decay(kernel, dt)
    obs_idx = [int(round(s / dt)) for s in observe]
    if any(i < 0 or i > n or abs(i * dt - s) > 1e-9 for i, s in zip(obs_idx, observe)):
        raise DomainError("observation times must be grid points in [0, T]")
    sdt = math.sqrt(dt)
    rho_perp = math.sqrt(max(1.0 - rho * rho, 0.0))
    w_rev = w[::-1].copy()  # w_rev[n - m] = w[m]

    def run(a, b):
        m = b - a
        noise = np.stack([path_rng(seed, k).standard_normal((n, 2)) for k in range(a, b)])
        x = np.zeros(m)
        U = np.zeros(m)
        Z = None if decay is not None else np.zeros((m, n))
        xo = np.zeros((m, len(obs_idx)))
        xp = np.zeros((m, n + 1)) if store_paths else None
        vp = np.zeros((m, n + 1)) if store_paths else None
        for i in range(n + 1):
            if decay is None and i > 0:
                U = Z[:, :i] @ w_rev[n - i : n]
            v = xi[i] + U
            for c, oi in enumerate(obs_idx):
                if oi == i:
                    xo[:, c] = x
            if store_paths:
                xp[:, i] = x
                vp[:, i] = v
            if i == n:
                return x, v, xo, xp, vp
            vpos = np.maximum(v, 0.0)
            sq = np.sqrt(vpos)
            dW = sdt * noise[:, i, 0]
            dWp = sdt * noise[:, i, 1]
            x = x - 0.5 * vpos * dt + sq * (rho * dW + rho_perp * dWp)
            z = sq * dW
            if decay is not None:
                U = decay * U + w[1] * z
            else:
                Z[:, i] = z

    parts = _run_chunks(run, n_paths, chunk, threads)
    x_T = np.concatenate([p[0] for p in parts])
    v_T = np.concatenate([p[1] for p in parts])
    x_obs = np.concatenate([p[2] for p in parts]) if obs_idx else None
    x_paths = np.concatenate([p[3] for p in parts]) if store_paths else None
    v_paths = np.concatenate([p[4] for p in parts]) if store_paths else None
    return PathBatch(seed, n_paths, t, x_T, v_T, tuple(observe), x_obs, x_paths, v_paths)


# -- AFI ------------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EventStream:
    """Order flow of one path: event times, signs (+1 buy, -1 sell), marks,
    the intensity just before each event and ``X`` just after it."""

    times: np.ndarray
    signs: np.ndarray
    marks: np.ndarray
    intensity: np.ndarray
    x: np.ndarray

    def to_csv(self, path) -> Path:
        rows = zip(self.times, ["+" if s > 0 else "-" for s in self.signs], self.marks)
        return write_csv(path, ["t", "sign", "mark"], rows)


@dataclass(frozen=True, eq=False)
class EventBatch:
    """Simulated AFI paths with terminal values and optional per-path event streams."""

    seed: int
    n_paths: int
    T: float
    x_T: np.ndarray
    lam_T: np.ndarray
    n_events: np.ndarray
    streams: list | None = None
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        ex, ex_se = empirical_mean(np.exp(self.x_T))
        lam, lam_se = empirical_mean(self.lam_T)
        return {
            "n_paths": self.n_paths,
            "mean_x": float(np.mean(self.x_T)),
            "mean_exp_x": ex,
            "se_exp_x": ex_se,
            "mean_lambda_T": lam,
            "se_lambda_T": lam_se,
            "mean_events": float(np.mean(self.n_events)),
        }

    def to_csv(self, path, per_path: bool = False) -> Path:
        if per_path:
            rows = zip(range(self.n_paths), self.x_T, self.lam_T, self.n_events)
            return write_csv(path, ["path", "x_T", "lambda_T", "n_events"], rows)
        return write_csv(path, ["statistic", "value"], self.summary().items())

    def events_csv(self, path) -> Path:
        """All events as rows ``(path, t, sign, mark)``."""
        if self.streams is None:
            raise DomainError("event streams were not kept")
        rows = (
            (k, t, "+" if s > 0 else "-", x)
            for k, st in enumerate(self.streams)
            for t, s, x in zip(st.times, st.signs, st.marks)
        )
        return write_csv(path, ["path", "t", "sign", "mark"], rows)


def hawkes_mean_intensity(mu: float, impact: float, resolvent: Kernel, T) -> np.ndarray | float:
    """``E[lambda_T] = mu (1 + impact int_0^T resolvent)``."""
    return mu * (1.0 + impact * np.asarray(kernel_primitive(resolvent, T)))


def hawkes_resolvent(phi: Kernel, impact: float, T: float, dt: float) -> Kernel:
    """Kernel ``k`` with ``k = phi + impact (phi * k)`` driving the forward intensity.

    Exponential and Mittag-Leffler excitation kernels have closed-form
    resolvents of the same family (rate reduced by ``impact * zeta``); other
    kernels are resolved numerically on ``[0, T]``.
    """
    if isinstance(phi, ExponentialKernel):
        return ExponentialKernel(phi.zeta, phi.lam - impact * phi.zeta)
    if isinstance(phi, MittagLefflerKernel):
        return MittagLefflerKernel(phi.zeta, phi.alpha, phi.lam - impact * phi.zeta)
    return gamma_resolvent(phi, impact, int(round(T / dt)), dt)


def _branching_ratio(phi: Kernel, impact: float) -> float:
    """``impact * int_0^inf phi``; ``nan`` when the total mass is unknown."""
    try:
        return impact * float(phi.primitive(np.inf))
    except (NotImplementedError, ValueError, ArithmeticError):
        return float("nan")


def simulate_afi_thinning(
    mu: float,
    phi: Kernel,
    jumps: JumpSpec,
    T: float,
    n_paths: int,
    seed: int,
    keep_events: bool = True,
    threads: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> EventBatch:
    """Exact simulation of the marked bivariate Hawkes form by Ogata thinning.

    Buys and sells each arrive with intensity
    ``lambda_t = mu + sum_i phi(t - tau_i) gamma_{s_i} x_i``. Since ``phi``
    is decreasing, the intensity right after the last event dominates until
    the next one. ``X`` jumps by ``+x`` (buy) or ``-x`` (sell) and carries the
    drift ``-lambda m_X``, integrated exactly through the primitive of ``phi``.
    Kernels that are not decreasing or are singular at 0 are rejected; use
    ``simulate_afi_grid`` with the resolvent instead.
    """
    if not mu > 0:
        raise DomainError("baseline intensity mu must be positive")
    if not phi.is_decreasing or phi.is_singular:
        raise PreconditionError("thinning needs a decreasing kernel that is finite at 0")
    if not T > 0 or n_paths < 1:
        raise DomainError("T and n_paths must be positive")
    ratio = _branching_ratio(phi, jumps.mean_impact)
    if ratio >= 1:
        warnings.warn(f"Hawkes branching ratio {ratio:.4g} >= 1: event counts may explode", RuntimeWarning)
    decay = None
    if isinstance(phi, ExponentialKernel):
        decay = phi.lam
    phi0 = float(phi(0.0))
    m_x = jumps.m_x
    laws = {1: jumps.plus, -1: jumps.minus}
    gammas = {1: jumps.gamma_plus, -1: jumps.gamma_minus}

    def one_path(k):
        rng = path_rng(seed, k, _EVENT_STREAM)
        t = 0.0
        excite = 0.0  # sum_i phi(t - tau_i) c_i at the current time (exponential case)
        taus, cs, signs, marks, lam_left, xs = [], [], [], [], [], []
        jump_sum = 0.0

        def excitation(s):
            if decay is not None:
                return excite * math.exp(-decay * (s - t))
            if not taus:
                return 0.0
            return float(np.dot(phi(s - np.asarray(taus)), cs))

        bound = mu + (excite if decay is not None else excitation(t))
        while True:
            t_new = t + rng.exponential(1.0 / (2.0 * bound))
            if t_new > T:
                break
            e_new = excitation(t_new)
            lam_new = mu + e_new
            if decay is not None:
                excite = e_new
            t = t_new
            if rng.random() * bound <= lam_new:
                side = 1 if rng.random() < 0.5 else -1
                x = float(laws[side].sample(rng, None))
                c = gammas[side] * x
                taus.append(t)
                cs.append(c)
                signs.append(side)
                marks.append(x)
                lam_left.append(lam_new)
                jump_sum += side * x
                if decay is not None:
                    excite += phi0 * c
                    bound = mu + excite
                else:
                    bound = lam_new + phi0 * c
                if len(taus) > EVENT_CAP:
                    raise InstabilityError(f"path {k} exceeded {EVENT_CAP} events")
                if keep_events:
                    xs.append(jump_sum - m_x * _integrated_intensity(mu, phi, taus, cs, t))
            else:
                bound = lam_new
        tau = np.asarray(taus)
        c = np.asarray(cs)
        lam_T = mu + (float(np.dot(phi(T - tau), c)) if taus else 0.0)
        x_T = jump_sum - m_x * _integrated_intensity(mu, phi, taus, cs, T)
        stream = None
        if keep_events:
            stream = EventStream(tau, np.asarray(signs, dtype=int), np.asarray(marks), np.asarray(lam_left), np.asarray(xs))
        return x_T, lam_T, len(taus), stream

    def run(a, b):
        return [one_path(k) for k in range(a, b)]

    parts = [r for p in _run_chunks(run, n_paths, chunk, threads) for r in p]
    x_T = np.array([p[0] for p in parts])
    lam_T = np.array([p[1] for p in parts])
    counts = np.array([p[2] for p in parts])
    streams = [p[3] for p in parts] if keep_events else None
    return EventBatch(seed, n_paths, T, x_T, lam_T, counts, streams, {"branching_ratio": ratio})


def _integrated_intensity(mu, phi, taus, cs, t):
    """``int_0^t lambda = mu t + sum_i c_i Phi(t - tau_i)``."""
    if not taus:
        return mu * t
    tau = np.asarray(taus)
    return mu * t + float(np.dot(np.asarray(kernel_primitive(phi, t - tau)), cs))


def _poisson_from_uniform(u: np.ndarray, mean: np.ndarray) -> np.ndarray:
    """Inverse-CDF Poisson draws, vectorized over small means."""
    count = np.zeros(u.shape, dtype=np.int64)
    p = np.exp(-mean)
    cdf = p.copy()
    todo = u > cdf
    k = 0
    while todo.any():
        k += 1
        p = p * mean / k
        cdf = cdf + p
        count[todo] = k
        todo &= u > cdf
        if k > 10_000:
            raise InstabilityError("Poisson inversion did not terminate; intensity is too large for the step")
    return count


def simulate_afi_grid(
    kernel: Kernel,
    curve: ForwardCurve,
    jumps: JumpSpec,
    T: float,
    dt: float,
    n_paths: int,
    seed: int,
    keep_events: bool = True,
    threads: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> EventBatch:
    """Time-stepping AFI simulator in forward-intensity form.

    Each step draws Poisson buy and sell counts with mean ``lambda(t_i) dt``
    and sets ``lambda(t_i) = max(xi_0(t_i) + sum_{j<i} kbar_{i-j} dJ~_j, 0)``
    where ``kbar_m`` is the kernel averaged over the ``m``-th lag panel and
    ``dJ~ = gamma_+ dJ~+ + gamma_- dJ~-`` are compensated jump contributions.
    Event times are placed uniformly within their step.
    """
    if n_paths < 1:
        raise DomainError("n_paths must be positive")
    n = _grid(T, dt)
    t = dt * np.arange(n + 1)
    xi = np.asarray(curve(t), dtype=float) * np.ones(n + 1)
    kbar = _lag_weights(kernel, n, dt) / dt
    kbar_rev = kbar[::-1].copy()
    decay = _markov_decay(kernel, dt)
    gp, gm = jumps.gamma_plus, jumps.gamma_minus
    mp, mm = jumps.m_plus, jumps.m_minus
    m_x = jumps.m_x
    dirac_plus = jumps.plus.a if isinstance(jumps.plus, Dirac) else None
    dirac_minus = jumps.minus.a if isinstance(jumps.minus, Dirac) else None

    def run(a, b):
        m = b - a
        unif = np.stack([path_rng(seed, k, _COUNT_STREAM).random((n, 2)) for k in range(a, b)])
        event_rngs = [path_rng(seed, k, _EVENT_STREAM) for k in range(a, b)]
        ev = [[] for _ in range(m)] if keep_events else None
        x = np.zeros(m)
        E = np.zeros(m)
        D = None if decay is not None else np.zeros((m, n))
        counts = np.zeros(m, dtype=np.int64)
        clamps = 0
        for i in range(n + 1):
            if decay is None and i > 0:
                E = D[:, :i] @ kbar_rev[n - i : n]
            raw = xi[i] + E
            clamps += int(np.count_nonzero(raw < 0))
            lam = np.maximum(raw, 0.0)
            if i == n:
                return x, lam, counts, ev, clamps
            n_plus = _poisson_from_uniform(unif[:, i, 0], lam * dt)
            n_minus = _poisson_from_uniform(unif[:, i, 1], lam * dt)
            s_plus = n_plus * dirac_plus if dirac_plus is not None else np.zeros(m)
            s_minus = n_minus * dirac_minus if dirac_minus is not None else np.zeros(m)
            hit = np.flatnonzero((n_plus + n_minus) > 0)
            for p in hit:
                rng = event_rngs[p]
                xs_p = jumps.plus.sample(rng, int(n_plus[p])) if n_plus[p] else np.empty(0)
                xs_m = jumps.minus.sample(rng, int(n_minus[p])) if n_minus[p] else np.empty(0)
                if dirac_plus is None:
                    s_plus[p] = xs_p.sum()
                if dirac_minus is None:
                    s_minus[p] = xs_m.sum()
                if keep_events:
                    k_tot = int(n_plus[p] + n_minus[p])
                    when = t[i] + dt * rng.random(k_tot)
                    order = np.argsort(when)
                    sides = np.concatenate([np.ones(int(n_plus[p]), int), -np.ones(int(n_minus[p]), int)])
                    marks = np.concatenate([xs_p, xs_m])
                    ev[p].append((when[order], sides[order], marks[order], lam[p], x[p]))
            counts += n_plus + n_minus
            x = x + s_plus - s_minus - lam * m_x * dt
            d = gp * (s_plus - mp * lam * dt) + gm * (s_minus - mm * lam * dt)
            if decay is not None:
                E = decay * E + kbar[1] * d
            else:
                D[:, i] = d

    parts = _run_chunks(run, n_paths, chunk, threads)
    x_T = np.concatenate([p[0] for p in parts])
    lam_T = np.concatenate([p[1] for p in parts])
    counts = np.concatenate([p[2] for p in parts])
    clamps = sum(p[4] for p in parts)
    fraction = clamps / (n_paths * (n + 1))
    if fraction > CLAMP_WARN_FRACTION:
        warnings.warn(f"intensity clamped at 0 in {fraction:.1%} of steps", RuntimeWarning)
    streams = None
    if keep_events:
        streams = [_grid_stream(e) for p in parts for e in p[3]]
    return EventBatch(seed, n_paths, T, x_T, lam_T, counts, streams, {"clamp_fraction": fraction})


def _grid_stream(entries) -> EventStream:
    if not entries:
        e = np.empty(0)
        return EventStream(e, np.empty(0, int), e, e, e)
    times = np.concatenate([e[0] for e in entries])
    signs = np.concatenate([e[1] for e in entries])
    marks = np.concatenate([e[2] for e in entries])
    lam = np.concatenate([np.full(len(e[0]), e[3]) for e in entries])
    # X just after each event: value at the start of the step plus the jumps so far within it
    x = np.concatenate([e[4] + np.cumsum(e[1] * e[2]) for e in entries])
    return EventStream(times, signs, marks, lam, x)


# -- estimators ---------------------------------------------------------------------------


def empirical_mean(values) -> tuple[float, float]:
    """Sample mean and its standard error."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


def empirical_cgf(batch, u: float) -> tuple[float, float]:
    """``log mean exp(u X_T)`` with its delta-method standard error.

    ``batch`` is a ``PathBatch``, an ``EventBatch`` or an array of ``X_T``.
    """
    if not 0 <= u <= 1:
        raise DomainError(f"u must lie in [0, 1], got {u}")
    x = np.asarray(getattr(batch, "x_T", batch), dtype=float)
    y = u * x
    shift = float(y.max())
    e = np.exp(y - shift)
    mean, se = empirical_mean(e)
    return shift + math.log(mean), se / mean
