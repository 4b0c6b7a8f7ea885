"""Command-line front end: strict config parsing, dispatch and artifact output.

Configs are INI-style documents with one section per concept::

    [kernel]
    kind = exponential
    zeta = 0.3
    lambda = 1.2

    [curve]
    kind = heston
    v0 = 0.04
    theta = 0.04
    lambda = 1.2

    [model]
    kind = afv
    rho = -0.7

    [numerics]
    horizons = 0.5, 1, 2
    u = 0.1, 0.5, 0.9

Unknown sections or keys are errors, and every value is checked against the
preconditions of the code that will consume it before anything runs.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .cgf import (
    FlatCurve,
    HestonCurve,
    RoughHestonCurve,
    TabulatedCurve,
    afi_model,
    afv_model,
    cgf_increment,
    write_cgf_csv,
)
from .errors import VoltraError
from .io import write_csv, write_manifest
from .kernels import kernel_from_record, gamma_resolvent
from .riccati import Dirac, DiscreteTable, ExponentialLaw, JumpSpec, solve_riccati
from .scaling import DEFAULT_EPS, ScalingFamily, cgf_convergence_experiment

COMMANDS = ("resolvent", "riccati", "cgf", "simulate-afv", "simulate-afi", "hf-limit", "validate")

DEFAULTS = {"dt": 1e-3, "T": 1.0, "seed": 42, "n_paths": 10_000}


class ConfigError(VoltraError, ValueError):
    """A config document is malformed or violates a precondition."""


# -- typed fields ---------------------------------------------------------------------


def _number(section, key, text) -> float:
    try:
        x = float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {text!r}") from None
    if not math.isfinite(x):
        raise ConfigError(f"[{section}] {key}: must be finite, got {text!r}")
    return x


def _integer(section, key, text) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected an integer, got {text!r}") from None


def _numbers(section, key, text) -> list[float]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"[{section}] {key}: expected a comma-separated list of numbers")
    return [_number(section, key, p) for p in parts]


def _boolean(section, key, text) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected true/false, got {text!r}")


def _choice(*options):
    def parse(section, key, text):
        low = text.strip().lower().replace("-", "_")
        if low not in options:
            raise ConfigError(f"[{section}] {key}: must be one of {', '.join(options)}, got {text!r}")
        return low

    return parse


def _text(section, key, text) -> str:
    return text.strip()


_LAWS = ("dirac", "exponential", "table")

# allowed keys per section and their parsers
SCHEMA: dict[str, dict[str, Callable]] = {
    "run": {"command": _choice(*(c.replace("-", "_") for c in COMMANDS)), "out": _text},
    "kernel": {"kind": _text, "zeta": _text, "lambda": _text, "alpha": _text, "table": _text},
    "curve": {
        "kind": _choice("flat", "heston", "rough_heston", "tabulated"),
        "v": _number,
        "v0": _number,
        "theta": _number,
        "lambda": _number,
        "alpha": _number,
        "table": _text,
    },
    "model": {"kind": _choice("afv", "afi"), "rho": _number},
    "jumps": {
        "plus": _choice(*_LAWS),
        "minus": _choice(*_LAWS),
        "plus_a": _number,
        "plus_m": _number,
        "plus_points": _numbers,
        "plus_weights": _numbers,
        "minus_a": _number,
        "minus_m": _number,
        "minus_points": _numbers,
        "minus_weights": _numbers,
        "gamma_plus": _number,
        "gamma_minus": _number,
    },
    "resolvent": {"gamma": _number},
    "hawkes": {"mu": _number, "method": _choice("thinning", "grid")},
    "numerics": {
        "dt": _number,
        "T": _number,
        "horizons": _numbers,
        "u": _numbers,
        "seed": _integer,
        "n_paths": _integer,
    },
    "output": {"per_path": _boolean},
    "scaling": {"eps": _numbers},
}

# sections each command accepts (required ones first)
SECTIONS = {
    "resolvent": ({"kernel", "resolvent"}, {"numerics", "run"}),
    "riccati": ({"kernel", "model"}, {"jumps", "numerics", "run"}),
    "cgf": ({"kernel", "curve", "model"}, {"jumps", "numerics", "run"}),
    "simulate-afv": ({"kernel", "curve", "model"}, {"numerics", "output", "run"}),
    "simulate-afi": ({"kernel", "jumps", "hawkes"}, {"curve", "numerics", "output", "run"}),
    "hf-limit": ({"kernel", "curve", "jumps"}, {"scaling", "numerics", "run"}),
    "validate": (set(), {"numerics", "run"}),
}


@dataclass(frozen=True)
class Numerics:
    dt: float = DEFAULTS["dt"]
    T: float = DEFAULTS["T"]
    horizons: tuple = ()
    u: tuple = (0.5,)
    seed: int = DEFAULTS["seed"]
    n_paths: int = DEFAULTS["n_paths"]


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated run: command, built model objects, numerics and output directory."""

    command: str
    model: dict
    numerics: Numerics
    out: Path
    raw: dict = field(default_factory=dict)
    source: str = ""
    base_dir: Path | None = None


# -- parsing --------------------------------------------------------------------------


def parse_config(text: str, command: str | None = None, base_dir: Path | None = None) -> RunConfig:
    """Parse and validate a config document.

    ``command`` overrides (and must agree with) ``[run] command``.
    """
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";")
    )
    parser.optionxform = str  # keep key case ("T")
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    raw: dict[str, dict[str, str]] = {}
    parsed: dict[str, dict[str, Any]] = {}
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        raw[name] = dict(parser.items(name))
        parsed[name] = {}
        for key, value in raw[name].items():
            if key not in SCHEMA[name]:
                raise ConfigError(f"[{name}] unknown key {key!r} (allowed: {', '.join(SCHEMA[name])})")
            parsed[name][key] = SCHEMA[name][key](name, key, value)

    run_cmd = parsed.get("run", {}).get("command")
    if run_cmd is not None:
        run_cmd = run_cmd.replace("_", "-")
    if command is None:
        command = run_cmd
    if command is None:
        raise ConfigError("no command given (use the command line or [run] command)")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    if run_cmd is not None and run_cmd != command:
        raise ConfigError(f"[run] command = {run_cmd} conflicts with requested command {command}")

    required, optional = SECTIONS[command]
    for name in required - set(parsed):
        raise ConfigError(f"command {command} needs a [{name}] section")
    for name in set(parsed) - required - optional:
        raise ConfigError(f"section [{name}] is not used by command {command}")

    numerics = _numerics(parsed.get("numerics", {}))
    model = _build(command, parsed, numerics, base_dir)
    out = Path(parsed.get("run", {}).get("out", "voltra-out"))
    return RunConfig(command, model, numerics, out, raw, text, base_dir)


def _numerics(sec: dict) -> Numerics:
    n = Numerics(
        dt=sec.get("dt", DEFAULTS["dt"]),
        T=sec.get("T", DEFAULTS["T"]),
        horizons=tuple(sec.get("horizons", ())),
        u=tuple(sec.get("u", (0.5,))),
        seed=sec.get("seed", DEFAULTS["seed"]),
        n_paths=sec.get("n_paths", DEFAULTS["n_paths"]),
    )
    if not n.dt > 0:
        raise ConfigError(f"[numerics] dt: must be positive, got {n.dt}")
    for key, T in [("T", n.T)] + [("horizons", h) for h in n.horizons]:
        if not T > 0:
            raise ConfigError(f"[numerics] {key}: must be positive, got {T}")
        steps = T / n.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigError(f"[numerics] {key}: {T} must be a multiple of dt = {n.dt}")
    for u in n.u:
        if not 0 <= u <= 1:
            raise ConfigError(f"[numerics] u: every value must lie in [0, 1], got {u}")
    if not 0 <= n.seed < 2**64:
        raise ConfigError(f"[numerics] seed: must lie in [0, 2**64), got {n.seed}")
    if n.n_paths < 1:
        raise ConfigError(f"[numerics] n_paths: must be at least 1, got {n.n_paths}")
    return n


def _guard(section: str, fn: Callable, *args):
    """Run a constructor and report precondition failures against the section."""
    try:
        return fn(*args)
    except (VoltraError, ValueError, OSError) as exc:
        raise ConfigError(f"[{section}] {exc}") from None


def _kernel(sec: dict, base_dir):
    if "kind" not in sec:
        raise ConfigError("[kernel] kind: required")
    return _guard("kernel", kernel_from_record, sec, base_dir)


def _curve(sec: dict, base_dir):
    kind = sec.get("kind")
    need = {
        "flat": ("v",),
        "heston": ("v0", "theta", "lambda"),
        "rough_heston": ("v0", "theta", "lambda", "alpha"),
        "tabulated": ("table",),
        None: (),
    }[kind]
    if kind is None:
        raise ConfigError("[curve] kind: required")
    _exact_keys("curve", sec, need)
    if kind == "flat":
        return _guard("curve", FlatCurve, sec["v"])
    if kind == "heston":
        return _guard("curve", HestonCurve, sec["v0"], sec["theta"], sec["lambda"])
    if kind == "rough_heston":
        return _guard("curve", RoughHestonCurve, sec["v0"], sec["theta"], sec["lambda"], sec["alpha"])
    path = Path(sec["table"])
    if base_dir is not None and not path.is_absolute():
        path = base_dir / path
    data = _guard("curve", _read_two_columns, path)
    return _guard("curve", TabulatedCurve, data[:, 0], data[:, 1])


def _read_two_columns(path: Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"{path}: expected two columns")
    return data


def _exact_keys(section, sec, need):
    keys = set(sec) - {"kind"}
    missing = set(need) - keys
    extra = keys - set(need)
    if missing:
        raise ConfigError(f"[{section}] missing key(s): {', '.join(sorted(missing))}")
    if extra:
        raise ConfigError(f"[{section}] key(s) not used by kind {sec.get('kind')}: {', '.join(sorted(extra))}")


def _law(sec: dict, side: str):
    kind = sec.get(side)
    if kind is None:
        raise ConfigError(f"[jumps] {side}: required")
    need = {"dirac": ("a",), "exponential": ("m",), "table": ("points", "weights")}[kind]
    present = {k[len(side) + 1 :] for k in sec if k.startswith(side + "_")}
    if present != set(need):
        raise ConfigError(
            f"[jumps] {side} = {kind} needs exactly {', '.join(f'{side}_{k}' for k in need)}"
        )
    if kind == "dirac":
        return _guard("jumps", Dirac, sec[f"{side}_a"])
    if kind == "exponential":
        return _guard("jumps", ExponentialLaw, sec[f"{side}_m"])
    return _guard("jumps", DiscreteTable, sec[f"{side}_points"], sec[f"{side}_weights"])


def _jumps(sec: dict) -> JumpSpec:
    for key in ("gamma_plus", "gamma_minus"):
        if key not in sec:
            raise ConfigError(f"[jumps] {key}: required")
    return _guard("jumps", JumpSpec, _law(sec, "plus"), _law(sec, "minus"), sec["gamma_plus"], sec["gamma_minus"])


def _build(command: str, p: dict, numerics: Numerics, base_dir) -> dict:
    out: dict[str, Any] = {}
    if "kernel" in p:
        out["kernel"] = _kernel(p["kernel"], base_dir)
    if "curve" in p:
        out["curve"] = _curve(p["curve"], base_dir)
    if "jumps" in p:
        out["jumps"] = _jumps(p["jumps"])
    if command == "resolvent":
        if "gamma" not in p["resolvent"]:
            raise ConfigError("[resolvent] gamma: required")
        out["gamma"] = p["resolvent"]["gamma"]
        if out["gamma"] < 0 and not out["kernel"].is_log_convex:
            raise ConfigError("[resolvent] gamma: negative values need a log-convex kernel")
    if "model" in p:
        kind = p["model"].get("kind")
        if kind is None:
            raise ConfigError("[model] kind: required")
        if kind == "afv":
            if "rho" not in p["model"]:
                raise ConfigError("[model] rho: required for afv models")
            if "jumps" in p:
                raise ConfigError("section [jumps] is not used by afv models")
            if "curve" in out:
                out["model"] = _guard("model", afv_model, out["kernel"], out["curve"], p["model"]["rho"])
            else:
                out["model"] = _guard("model", afv_model, out["kernel"], FlatCurve(0.0), p["model"]["rho"])
        else:
            if "rho" in p["model"]:
                raise ConfigError("[model] rho: not used by afi models")
            if "jumps" not in out:
                raise ConfigError("afi models need a [jumps] section")
            curve = out.get("curve", FlatCurve(0.0))
            out["model"] = _guard("model", afi_model, out["kernel"], curve, out["jumps"])
        if command == "simulate-afv" and kind != "afv":
            raise ConfigError("[model] kind: simulate-afv needs an afv model")
    if command == "simulate-afi":
        hk = p["hawkes"]
        method = hk.get("method", "thinning")
        out["method"] = method
        if method == "thinning":
            if "mu" not in hk:
                raise ConfigError("[hawkes] mu: required for thinning")
            if not hk["mu"] > 0:
                raise ConfigError(f"[hawkes] mu: must be positive, got {hk['mu']}")
            phi = out["kernel"]
            if not phi.is_decreasing or phi.is_singular:
                raise ConfigError("[kernel] thinning needs a decreasing kernel that is finite at 0")
            if "curve" in p:
                raise ConfigError("section [curve] is not used by thinning (the curve follows from mu and the kernel)")
            out["mu"] = hk["mu"]
        else:
            if "mu" in hk:
                raise ConfigError("[hawkes] mu: not used by the grid simulator (give a [curve])")
            if "curve" not in out:
                raise ConfigError("the grid simulator needs a [curve] section")
    horizon = max(_horizons(numerics))
    for key in ("kernel", "curve"):
        grid = getattr(out.get(key), "abscissae", None)
        if grid is None:
            grid = getattr(out.get(key), "grid", None)
        if grid is not None and grid[-1] < horizon * (1 - 1e-12):
            raise ConfigError(f"[{key}] table covers [0, {grid[-1]}] but the run needs [0, {horizon}]")
    if command == "hf-limit":
        eps = tuple(p.get("scaling", {}).get("eps", DEFAULT_EPS))
        out["family"] = _guard("scaling", ScalingFamily, out["jumps"], out["kernel"], out["curve"], eps)
    return out


# -- running ---------------------------------------------------------------------------


def run(config: RunConfig, out: Path | None = None, threads: int | None = None, echo=print) -> int:
    """Execute a validated config; returns the process exit status."""
    out = Path(out) if out is not None else config.out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise VoltraError(f"cannot create output directory {out}: {exc}") from None
    handler = _HANDLERS[config.command]
    artifacts, status = handler(config, out, threads, echo)
    manifest = {
        "command": config.command,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seed": config.numerics.seed,
        "numerics": config.numerics.__dict__,
        "config": config.raw,
        "config_text": config.source,
        "inputs": _input_hashes(config),
        "artifacts": [str(Path(a).name) for a in artifacts],
        "status": status,
    }
    write_manifest(out / "manifest.json", manifest)
    return status


def _input_hashes(config: RunConfig) -> dict:
    """SHA-256 of referenced table files so a run can be reproduced exactly."""
    found = {}
    for section in ("kernel", "curve"):
        name = config.raw.get(section, {}).get("table")
        if name:
            path = Path(name)
            if config.base_dir is not None and not path.is_absolute():
                path = config.base_dir / path
            found[name] = hashlib.sha256(path.read_bytes()).hexdigest()
    return found


def _horizons(n: Numerics):
    return n.horizons if n.horizons else (n.T,)


def _run_resolvent(cfg, out, threads, echo):
    n = cfg.numerics
    steps = int(round(n.T / n.dt))
    kernel = cfg.model["kernel"]
    r = gamma_resolvent(kernel, cfg.model["gamma"], steps, n.dt)
    t = n.dt * np.arange(steps + 1)
    vals = np.full(steps + 1, np.nan)
    vals[1:] = r(t[1:])
    if not r.is_singular:
        vals[0] = r(0.0)
    path = write_csv(out / "resolvent.csv", ["x", "kappa"], zip(t, vals))
    echo(f"wrote {path}")
    return [path], 0


def _run_riccati(cfg, out, threads, echo):
    n = cfg.numerics
    model = cfg.model["model"]
    paths = []
    for u in n.u:
        grid = solve_riccati(model.family, model.kernel, u, n.T, n.dt)
        path = grid.to_csv(out / f"riccati_u{u:g}.csv")
        paths.append(path)
        echo(f"u={u:g}: max residual {grid.max_residual:.3e}, wrote {path}")
    return paths, 0


def _run_cgf(cfg, out, threads, echo):
    n = cfg.numerics
    model = cfg.model["model"]
    rows = [(T, u, cgf_increment(model, u, T, n.dt)) for T in _horizons(n) for u in n.u]
    path = write_cgf_csv(out / "cgf.csv", rows)
    echo(f"wrote {len(rows)} rows to {path}")
    return [path], 0


def _per_path(cfg) -> bool:
    return _boolean("output", "per_path", cfg.raw.get("output", {}).get("per_path", "false"))


def _run_simulate_afv(cfg, out, threads, echo):
    from .simulate import empirical_cgf, simulate_afv

    n = cfg.numerics
    model = cfg.model["model"]
    batch = simulate_afv(model.kernel, model.curve, model.rho, n.T, n.dt, n.n_paths, n.seed, threads=threads)
    paths = [batch.to_csv(out / "paths_summary.csv")]
    if _per_path(cfg):
        paths.append(batch.to_csv(out / "paths.csv", per_path=True))
    rows = []
    for u in n.u:
        est, se = empirical_cgf(batch, u)
        rows.append((u, est, se, cgf_increment(model, u, n.T, n.dt)))
    paths.append(write_csv(out / "cgf_check.csv", ["u", "empirical", "se", "analytic"], rows))
    echo(f"simulated {n.n_paths} paths, wrote {', '.join(str(p) for p in paths)}")
    return paths, 0


def _run_simulate_afi(cfg, out, threads, echo):
    from .cgf import hawkes_forward_curve
    from .simulate import empirical_cgf, hawkes_resolvent, simulate_afi_grid, simulate_afi_thinning

    n = cfg.numerics
    jumps = cfg.model["jumps"]
    if cfg.model["method"] == "thinning":
        phi = cfg.model["kernel"]
        mu = cfg.model["mu"]
        batch = simulate_afi_thinning(mu, phi, jumps, n.T, n.n_paths, n.seed, threads=threads)
        kappa = hawkes_resolvent(phi, jumps.mean_impact, n.T, n.dt)
        curve = hawkes_forward_curve(mu, jumps.mean_impact, kappa, n.T, n.dt)
    else:
        kappa, curve = cfg.model["kernel"], cfg.model["curve"]
        batch = simulate_afi_grid(kappa, curve, jumps, n.T, n.dt, n.n_paths, n.seed, threads=threads)
    model = afi_model(kappa, curve, jumps)
    paths = [batch.to_csv(out / "paths_summary.csv"), batch.events_csv(out / "events.csv")]
    if _per_path(cfg):
        paths.append(batch.to_csv(out / "paths.csv", per_path=True))
    rows = []
    for u in n.u:
        est, se = empirical_cgf(batch, u)
        rows.append((u, est, se, cgf_increment(model, u, n.T, n.dt)))
    paths.append(write_csv(out / "cgf_check.csv", ["u", "empirical", "se", "analytic"], rows))
    echo(f"simulated {n.n_paths} paths, wrote {', '.join(str(p) for p in paths)}")
    return paths, 0


def _run_hf_limit(cfg, out, threads, echo):
    n = cfg.numerics
    report = cgf_convergence_experiment(cfg.model["family"], n.u, n.T, n.dt)
    path = report.to_csv(out / "hf_limit.csv")
    summary = out / "hf_limit_summary.txt"
    summary.write_text(report.summary() + "\n")
    echo(report.summary())
    return [path, summary], 0


def _run_validate(cfg, out, threads, echo):
    from .audit import run_audit

    checks = run_audit(seed=cfg.numerics.seed)
    width = max(len(c.name) for c in checks)
    for c in checks:
        echo(f"{c.name:<{width}}  {c.value:.3e}  (tol {c.tol:.1e})  {'PASS' if c.passed else 'FAIL'}")
    path = write_csv(out / "validate.csv", ["check", "value", "tolerance", "passed"], [(c.name, c.value, c.tol, c.passed) for c in checks])
    failed = sum(not c.passed for c in checks)
    echo(f"{len(checks) - failed}/{len(checks)} checks passed")
    return [path], 0 if failed == 0 else 1


_HANDLERS = {
    "resolvent": _run_resolvent,
    "riccati": _run_riccati,
    "cgf": _run_cgf,
    "simulate-afv": _run_simulate_afv,
    "simulate-afi": _run_simulate_afi,
    "hf-limit": _run_hf_limit,
    "validate": _run_validate,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="voltra", description="CGFs and simulations of affine Volterra variance and order-flow models.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, help="config file (optional for validate)")
    parser.add_argument("--out", type=Path, help="output directory (default: [run] out or ./voltra-out)")
    parser.add_argument("--threads", type=int, help="worker threads (default: $VOLTRA_THREADS or 1)")
    args = parser.parse_args(argv)
    try:
        if args.config is None:
            if args.command != "validate":
                parser.error(f"command {args.command} needs --config")
            config = parse_config("", args.command)
        else:
            try:
                text = args.config.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from None
            config = parse_config(text, args.command, args.config.parent)
        return run(config, args.out, args.threads)
    except ConfigError as exc:
        print(f"voltra: config error: {exc}", file=sys.stderr)
        return 2
    except VoltraError as exc:
        print(f"voltra: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"voltra: I/O error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
