"""Command line, key = value configs, JSON result envelopes and verification suites.

    ribulk green --d 3 --extent 20
    ribulk rate --config ball.cfg
    ribulk verify --suite potential

Exit codes: 0 success, 1 a verification check failed, 2 invalid input, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import re
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import jsonschema

from . import __version__
from .errors import NumericalError, RibulkError, ValidationError
from .lattice import box, cube_L, sup_ball
from .lattice_potential import (CACHE_ENV, cache_path, capacity, capacity_and_equilibrium,
                                green_fourier, green_table)

EXIT_OK, EXIT_CHECK_FAILED, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2, 3

_NONE = object()

# command -> key -> (type, default); _NONE marks optional keys without a default
PARAMS: dict[str, dict[str, tuple[type, Any]]] = {
    "green": {"d": (int, 3), "extent": (int, 20), "tol": (float, 1e-12)},
    "capacity": {"d": (int, 3), "shape": (str, "box"), "size": (int, 2), "extent": (int, _NONE)},
    "sample": {"d": (int, 3), "u": (float, 1.0), "shape": (str, "ball"), "size": (int, 0),
               "replicas": (int, 1000), "guard_radius": (int, _NONE), "extent": (int, _NONE),
               "chunk": (int, 20000)},
    "theta": {"d": (int, 3), "kind": (str, "site_indicator"), "r": (int, 0), "R": (int, 0),
              "u_grid": (str, "0.25,0.5,1,2,4"), "n_samples": (int, 2000), "isotonic": (bool, False),
              "extent": (int, _NONE)},
    "excursions": {"d": (int, 3), "L": (int, 2), "K": (float, 0.0), "n": (int, 10000),
                   "guard_radius": (int, _NONE), "extent": (int, _NONE)},
    "rate": {"d": (int, 3), "u": (float, 1.0), "nu": (float, 0.7), "domain": (str, "ball"),
             "size": (float, 1.0), "h": (float, 1 / 16), "rho_t": (float, _NONE), "boundary": (str, "free"),
             "theta": (str, "site_indicator"), "solver": (str, "auto"), "extent": (int, _NONE)},
    "verify": {"suite": (str, "potential")},
}
RUN_KEYS: dict[str, tuple[type, Any]] = {"seed": (int, 0), "workers": (int, 1), "cache_dir": (str, _NONE),
                                         "output_dir": (str, "."), "command": (str, _NONE)}
SUITES = ("potential", "sampling", "laplace", "excursions", "rate")


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    workers: int = 1
    cache_dir: str | None = None
    output_dir: str = "."
    params: dict = field(default_factory=dict)

    def validate(self):
        if self.command not in PARAMS:
            raise ValidationError(f"unknown command {self.command!r}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be a u64")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")
        unknown = set(self.params) - set(PARAMS[self.command])
        if unknown:
            raise ValidationError(f"unknown keys for {self.command}: {sorted(unknown)}")

    def echo(self) -> dict:
        return {"command": self.command, "seed": self.seed, "workers": self.workers,
                "cache_dir": self.cache_dir, "output_dir": self.output_dir,
                "params": {k: v for k, v in sorted(self.params.items())}}


def _convert(kind: type, raw, where: str):
    if raw is None or isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    try:
        if kind is bool:
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(str(raw).strip(), 0)
        return kind(str(raw).strip()) if kind is not str else str(raw).strip()
    except ValueError:
        raise ValidationError(f"{where}: cannot read {raw!r} as {kind.__name__}") from None


def parse_config(text: str, command: str | None = None, source: str = "<config>") -> RunConfig:
    """Read a key = value config with a [run] section and one section per command."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValidationError(f"{source}: {exc}") from None

    def line_of(section, key):
        sec_seen = False
        for i, ln in enumerate(text.splitlines(), 1):
            s = ln.strip()
            if s.startswith("["):
                sec_seen = s.strip("[] ") == section
            elif sec_seen and re.match(rf"{re.escape(key)}\s*[=:]", s):
                return i
        return "?"

    run = dict(cp["run"]) if cp.has_section("run") else {}
    for k in run:
        if k not in RUN_KEYS:
            raise ValidationError(f"{source}:{line_of('run', k)}: unknown key {k!r} in [run]")
    cmd = command or run.get("command")
    if cmd is None:
        raise ValidationError(f"{source}: no command given")
    if cmd not in PARAMS:
        raise ValidationError(f"{source}: unknown command {cmd!r}")
    for sec in cp.sections():
        if sec not in ("run", cmd):
            raise ValidationError(f"{source}: unknown section [{sec}] for command {cmd}")
    params = {}
    if cp.has_section(cmd):
        for k, v in cp[cmd].items():
            if k not in PARAMS[cmd]:
                raise ValidationError(f"{source}:{line_of(cmd, k)}: unknown key {k!r} in [{cmd}]")
            params[k] = _convert(PARAMS[cmd][k][0], v, f"{source}:{line_of(cmd, k)}: {k}")
    cfg = RunConfig(cmd, **{k: _convert(RUN_KEYS[k][0], v, f"{source}:{line_of('run', k)}: {k}")
                            for k, v in run.items() if k != "command"}, params=params)
    cfg.validate()
    return cfg


def _params(cfg: RunConfig) -> dict:
    out = {}
    for k, (kind, default) in PARAMS[cfg.command].items():
        v = cfg.params.get(k, None if default is _NONE else default)
        out[k] = _convert(kind, v, k)
    return out


def _table(d: int, extent: int | None, need: int, cfg: RunConfig):
    E = max(int(extent or 0), need, 20)
    return green_table(d, E, directory=cfg.cache_dir)


def _window(shape: str, size: int, d: int) -> np.ndarray:
    if shape == "ball":
        return sup_ball(size, d)
    if shape == "box":
        return cube_L([0] * d, size)
    raise ValidationError(f"shape must be 'ball' or 'box', got {shape!r}")


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


# ---------------------------------------------------------------------------
# commands


def cmd_green(cfg: RunConfig, prm: dict) -> tuple[dict, dict, list]:
    T = green_table(prm["d"], prm["extent"], prm["tol"], directory=cfg.cache_dir)
    path = cache_path(T.d, T.extent, T.tol, cfg.cache_dir)
    payload = {"d": T.d, "extent": T.extent, "tol": T.tol, "g00": T.g00,
               "g00_fourier": green_fourier(np.zeros(T.d, dtype=int), T.d),
               "harmonicity_residual": T.harmonicity_residual(), "digest": T.digest()}
    return payload, {"green_table": T.digest(), "cache_file": str(path)}, []


def cmd_capacity(cfg: RunConfig, prm: dict):
    A = _window(prm["shape"], prm["size"], prm["d"])
    T = _table(prm["d"], prm["extent"], int(np.ptp(A, axis=0).max()) + 1, cfg)
    sol = capacity_and_equilibrium(A, T)
    payload = {"shape": prm["shape"], "size": prm["size"], "n_sites": len(A), "n_boundary": int(len(sol.boundary)),
               "capacity": sol.cap, "capacity_over_size": sol.cap / max(prm["size"], 1),
               "max_e": float(sol.e.max())}
    return payload, {"green_table": T.digest()}, []


def cmd_sample(cfg: RunConfig, prm: dict):
    from .interlacements import sample_fields
    W = _window(prm["shape"], prm["size"], prm["d"])
    T = _table(prm["d"], prm["extent"], 20, cfg)
    b = sample_fields(prm["u"], W, T, prm["replicas"], cfg.seed, guard_radius=prm["guard_radius"],
                      chunk=prm["chunk"], workers=cfg.workers)
    n = prm["replicas"]
    L = b.time
    occ = (b.visits > 0).mean(0)
    payload = {"u": prm["u"], "replicas": n, "n_sites": len(W),
               "mean_occupation": L.mean(0), "se_occupation": L.std(0, ddof=1) / math.sqrt(n) if n > 1 else [0.0] * len(W),
               "p_occupied": occ, "p_occupied_closed_form": float(-np.expm1(-prm["u"] / T.g00)),
               "mean_trajectories": float(b.n_trajectories.mean())}
    out = Path(cfg.output_dir) / "sample_means.csv"
    with out.open("w") as fh:
        fh.write(",".join([f"x{i + 1}" for i in range(prm["d"])] + ["mean_time", "p_occupied"]) + "\n")
        for s, m, p in zip(W, L.mean(0), occ):
            fh.write(",".join(map(str, s.tolist())) + f",{m!r},{p!r}\n")
    return payload, {"green_table": T.digest()}, [str(out)]


def cmd_theta(cfg: RunConfig, prm: dict):
    from . import local_functionals as lf
    u_grid = [float(x) for x in prm["u_grid"].split(",") if x.strip()]
    kinds = {"site_indicator": lambda: lf.site_indicator(), "ball_hit": lambda: lf.ball_hit(prm["R"]),
             "disconnect": lambda: lf.disconnect(prm["r"], prm["R"])}
    if prm["kind"] not in kinds:
        raise ValidationError(f"theta supports {sorted(kinds)}")
    F = kinds[prm["kind"]]()
    T = _table(prm["d"], prm["extent"], 20, cfg)
    curve = lf.estimate_theta(F, u_grid, prm["n_samples"], T, seed=cfg.seed, isotonic=prm["isotonic"])
    out = curve.to_csv(Path(cfg.output_dir) / f"theta_{prm['kind']}_r{prm['r']}_R{prm['R']}.csv")
    payload = {"kind": curve.kind, "r": F.r, "R": F.R, "u": curve.u_grid, "theta": curve.values,
               "ci_halfwidth": curve.ci_halfwidth, "n_samples": curve.n_samples}
    if prm["kind"] in ("site_indicator", "ball_hit"):
        payload["theta_closed_form"] = lf.theta_closed_form(prm["kind"], curve.u_grid, T, F.R)
    return payload, {"green_table": T.digest(), "theta_curve": str(out)}, [str(out)]


def cmd_excursions(cfg: RunConfig, prm: dict):
    from scipy import stats
    from .rng import stream
    from .rw_engine import BoxPair, equilibrium_time_sample
    d, L, K = prm["d"], prm["L"], prm["K"]
    B = cube_L([0] * d, L)
    U = None
    if K > 0:
        pair = BoxPair((0,) * d, L, K)
        pair.validate()
        U = pair.U
    T = _table(d, prm["extent"], 4 * L + 10, cfg)
    x = equilibrium_time_sample(B, U, T, stream(cfg.seed, 0), prm["n"], prm["guard_radius"])
    ks = stats.kstest(x, "expon")
    payload = {"L": L, "K": K, "n": prm["n"], "mean": float(x.mean()), "se": float(x.std(ddof=1) / math.sqrt(len(x))),
               "ks_statistic": float(ks.statistic), "ks_pvalue": float(ks.pvalue)}
    return payload, {"green_table": T.digest()}, []


def parse_theta(spec: str, d: int, cfg: RunConfig | None = None):
    """site_indicator | ball_hit:R | exp:c | sigmoid:u_star:sigma | curve:path.csv"""
    from .local_functionals import ThetaCurve
    from .rate_solver import ExpTheta, InterpolatedTheta, SigmoidTheta
    head, _, rest = spec.partition(":")
    args = rest.split(":") if rest else []
    cache = cfg.cache_dir if cfg else None
    try:
        if head == "site_indicator":
            T = green_table(d, 20, directory=cache)
            return ExpTheta(1 / T.g00, source=f"site_indicator closed form, green {T.digest()}")
        if head == "ball_hit":
            R = int(args[0])
            T = green_table(d, max(20, 2 * R + 2), directory=cache)
            return ExpTheta(capacity(sup_ball(R, d), T), source=f"ball_hit({R}) closed form, green {T.digest()}")
        if head == "exp":
            return ExpTheta(float(args[0]), source=f"exp:{args[0]}")
        if head == "sigmoid":
            return SigmoidTheta(float(args[0]), float(args[1]), source=f"sigmoid:{args[0]}:{args[1]}")
        if head == "curve":
            c = ThetaCurve.from_csv(rest)
            th = InterpolatedTheta.from_curve(c)
            th.source = f"{rest} ({th.source})"
            return th
    except (IndexError, ValueError) as exc:
        raise ValidationError(f"bad theta spec {spec!r}: {exc}") from None
    raise ValidationError(f"unknown theta spec {spec!r}")


def cmd_rate(cfg: RunConfig, prm: dict):
    from .rate_solver import RateProblem, solve_full_grid, solve_radial
    th = parse_theta(prm["theta"], prm["d"], cfg)
    p = RateProblem(prm["d"], prm["u"], prm["nu"], th, (prm["domain"], prm["size"]), prm["h"], prm["rho_t"],
                    prm["boundary"])
    solver = prm["solver"]
    if solver == "auto":
        solver = "radial" if p.domain[0] == "ball" else "grid"
    if solver not in ("radial", "grid"):
        raise ValidationError("solver must be auto, radial or grid")
    if solver == "grid":
        n = int(math.ceil(p.domain[1] / p.h)) + 1
        sol = solve_full_grid(p, green=green_table(p.d, max(20, 2 * (2 * n + 1)), directory=cfg.cache_dir))
    else:
        sol = solve_radial(p)
    payload = sol.payload(p)
    payload["theta_u"] = p.theta_u
    return payload, {"green_table": None, "theta_curve": payload.pop("theta_provenance")}, []


# ---------------------------------------------------------------------------
# verification suites


@dataclass
class Check:
    name: str
    passed: bool
    measured: Any
    expected: Any
    tolerance: str


def _close(name, measured, expected, tol, rel=False):
    err = abs(measured - expected) / (abs(expected) if rel else 1.0)
    return Check(name, bool(err <= tol), measured, expected, f"{'rel' if rel else 'abs'} {tol:g}")


def suite_potential(cfg: RunConfig) -> list[Check]:
    T = green_table(3, 20, directory=cfg.cache_dir)
    g0 = T.g00
    e1 = np.array([1, 0, 0])
    out = [_close("g00 bessel vs fourier", g0, green_fourier(np.zeros(3, dtype=int), 3), 1e-6),
           _close("g00 value", g0, 1.516386059151978, 1e-6),
           Check("harmonicity residual", T.harmonicity_residual() < 1e-10, T.harmonicity_residual(), 0.0, "< 1e-10"),
           _close("cap({0}) = 1/g00", capacity([[0, 0, 0]], T), 1 / g0, 1e-9),
           _close("cap({0,e1}) = 2/(g00+g(e1))", capacity([[0, 0, 0], e1], T), 2 / (g0 + float(T(e1))), 1e-9)]
    ratios = [capacity(cube_L([0, 0, 0], L), T) / L for L in range(2, 9)]
    out.append(Check("cap([0,L)^3)/L bounded, increasing", bool(np.all(np.diff(ratios) > 0) and max(ratios) < 2),
                     [round(r, 4) for r in ratios], "in (0, 2)", "monotone"))
    A = sup_ball(2, 3)
    sol = capacity_and_equilibrium(A, T)
    h_far = float(sol.h(np.array([[8, 0, 0]]))[0])
    out.append(Check("0 <= h_A <= 1 off A", 0 <= h_far <= 1, h_far, "[0, 1]", "bounds"))
    return out


def suite_sampling(cfg: RunConfig) -> list[Check]:
    from .interlacements import sample_fields
    T = green_table(3, 20, directory=cfg.cache_dir)
    b = sample_fields(1.0, [[0, 0, 0]], T, 50_000, cfg.seed, workers=cfg.workers)
    L = b.time[:, 0]
    se = L.std(ddof=1) / math.sqrt(len(L))
    p = float((b.visits[:, 0] > 0).mean())
    p0 = float(-np.expm1(-1.0 / T.g00))
    sp = math.sqrt(p0 * (1 - p0) / len(L))
    return [Check("E L^1_0 = 1", abs(L.mean() - 1) <= 3 * se, float(L.mean()), 1.0, f"3 SE = {3 * se:.4f}"),
            Check("P[0 in I^1]", abs(p - p0) <= 3 * sp, p, p0, f"3 SE = {3 * sp:.4f}")]


def suite_laplace(cfg: RunConfig) -> list[Check]:
    from .interlacements import LaplaceQuery, laplace_oracle, sample_fields
    T = green_table(3, 20, directory=cfg.cache_dir)
    out = []
    t = 0.3
    q = LaplaceQuery([[0, 0, 0]], [t], 1.0)
    out.append(_close("closed form t delta_0", laplace_oracle(q, T), math.exp(t / (1 - t * T.g00)), 1e-9, rel=True))
    W = sup_ball(1, 3)
    rng = np.random.default_rng(1)
    Vs = {"0.3 delta_0": np.where(np.all(W == 0, axis=1), 0.3, 0.0),
          "0.05 on B(0,1)": np.full(len(W), 0.05),
          "mixed sign": rng.uniform(-0.04, 0.04, len(W))}
    b = sample_fields(1.0, W, T, 100_000, cfg.seed, workers=cfg.workers)
    for name, V in Vs.items():
        x = np.exp(b.time @ V)
        se = x.std(ddof=1) / math.sqrt(len(x))
        exact = laplace_oracle(LaplaceQuery(W, V, 1.0), T)
        out.append(Check(f"oracle vs MC, {name}", abs(x.mean() - exact) <= 3 * se, float(x.mean()), exact,
                         f"3 SE = {3 * se:.4f}"))
    return out


def suite_excursions(cfg: RunConfig) -> list[Check]:
    from scipy import stats
    from .rng import stream
    from .rw_engine import equilibrium_time_sample
    T = green_table(3, 20, directory=cfg.cache_dir)
    x = equilibrium_time_sample(cube_L([0, 0, 0], 3), None, T, stream(cfg.seed, 0), 10_000)
    p = float(stats.kstest(x, "expon").pvalue)
    return [Check("KS equilibrium time vs Exp(1)", p > 0.01, p, "> 0.01", "p-value")]


def suite_rate(cfg: RunConfig) -> list[Check]:
    from .rate_solver import RateProblem, SigmoidTheta, ball_volume, sigma_sweep, step_limit_energy
    target = step_limit_energy(3, 1.0, 3.0, 0.5)
    p = RateProblem(3, 1.0, 0.5 / ball_volume(3, 1.0), SigmoidTheta(3.0, 0.05), ("ball", 1.0), 1 / 1000)
    r = sigma_sweep(p, 3.0, [0.025, 0.0125])
    return [_close("step-theta limit (radial, ball D)", r["extrapolated"], target, 0.02, rel=True)]


SUITE_FUNCS: dict[str, Callable[[RunConfig], list[Check]]] = {
    "potential": suite_potential, "sampling": suite_sampling, "laplace": suite_laplace,
    "excursions": suite_excursions, "rate": suite_rate}


def format_checks(checks: list[Check]) -> str:
    rows = [("check", "status", "measured", "expected", "tolerance")]
    for c in checks:
        rows.append((c.name, "PASS" if c.passed else "FAIL", _fmt(c.measured), _fmt(c.expected), c.tolerance))
    w = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(s.ljust(w[i]) for i, s in enumerate(r)) for r in rows)


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.10g}"
    return str(x)


def cmd_verify(cfg: RunConfig, prm: dict):
    suite = prm["suite"]
    if suite not in SUITE_FUNCS:
        raise ValidationError(f"unknown suite {suite!r}; choose from {list(SUITE_FUNCS)}")
    checks = SUITE_FUNCS[suite](cfg)
    payload = {"suite": suite, "passed": all(c.passed for c in checks),
               "checks": [{"name": c.name, "passed": c.passed, "measured": c.measured, "expected": c.expected,
                           "tolerance": c.tolerance} for c in checks]}
    return payload, {"green_table": None}, []


COMMAND_FUNCS = {"green": cmd_green, "capacity": cmd_capacity, "sample": cmd_sample, "theta": cmd_theta,
                 "excursions": cmd_excursions, "rate": cmd_rate, "verify": cmd_verify}


# ---------------------------------------------------------------------------
# envelopes


def load_schema(name: str) -> dict:
    return json.loads(resources.files("ribulk").joinpath("schemas", f"{name}.json").read_text())


def validate_envelope(env: dict):
    try:
        jsonschema.validate(env, load_schema("envelope"))
        jsonschema.validate(env["payload"], load_schema(env["config"]["command"]))
    except jsonschema.ValidationError as exc:
        raise ValidationError(f"envelope does not match its schema: {exc.message}") from None


def dumps(env: dict) -> str:
    return json.dumps(env, indent=2, sort_keys=True, allow_nan=False)


def run(cfg: RunConfig) -> dict:
    """Dispatch one command and return its validated result envelope."""
    cfg.validate()
    if cfg.cache_dir:
        os.environ[CACHE_ENV] = cfg.cache_dir
    Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    prm = _params(cfg)
    payload, prov, files = COMMAND_FUNCS[cfg.command](cfg, prm)
    env = {"tool": "ribulk", "version": __version__, "config": cfg.echo(), "seed": cfg.seed, "workers": cfg.workers,
           "wall_time": time.perf_counter() - t0, "payload": payload,
           "provenance": {"green_table": prov.get("green_table"), "theta_curve": prov.get("theta_curve"),
                          "cache_file": prov.get("cache_file"), "side_files": files}}
    env = _clean(env)
    validate_envelope(env)
    return env


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ribulk", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, keys in PARAMS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="key = value file with [run] and [%s] sections" % name)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--cache-dir", dest="cache_dir")
        sp.add_argument("--output-dir", dest="output_dir")
        sp.add_argument("--out", help="envelope path (default <output_dir>/<command>.json)")
        for k, (kind, _) in keys.items():
            sp.add_argument(f"--{k}", dest=f"p_{k}", type=str)
    return ap


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    if ns.config:
        try:
            text = Path(ns.config).read_text()
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}") from None
        cfg = parse_config(text, ns.command, ns.config)
    else:
        cfg = RunConfig(ns.command)
    for k in ("seed", "workers", "cache_dir", "output_dir"):
        if getattr(ns, k) is not None:
            setattr(cfg, k, getattr(ns, k))
    if cfg.cache_dir is None:
        cfg.cache_dir = os.environ.get(CACHE_ENV)
    for k, (kind, _) in PARAMS[ns.command].items():
        v = getattr(ns, f"p_{k}")
        if v is not None:
            cfg.params[k] = _convert(kind, v, f"--{k}")
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    try:
        cfg = config_from_args(ns)
        env = run(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NumericalError as exc:
        print(f"numerical failure: {exc} {getattr(exc, 'diagnostics', {})}", file=sys.stderr)
        return EXIT_NUMERICAL
    except RibulkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    text = dumps(env)
    out = Path(ns.out) if ns.out else Path(cfg.output_dir) / f"{cfg.command}.json"
    out.write_text(text + "\n")
    if cfg.command == "verify":
        checks = [Check(**c) for c in env["payload"]["checks"]]
        print(format_checks(checks))
        return EXIT_OK if env["payload"]["passed"] else EXIT_CHECK_FAILED
    print(text)
    return EXIT_OK
