"""Monotone local functions of the occupation field and their mean curves theta(u).

A local function F of range R reads the field on B(x, R) (sup-norm ball),
is non-decreasing, vanishes at 0 and grows sub-linearly:
F(l + l') <= F(l) + c(F) (1{l' != 0} + sum l').
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage
from scipy.optimize import isotonic_regression

from .errors import NumericalError, ValidationError
from .interlacements import OccupationField, _entries, _make_sampler, sample_field
from .lattice import as_sites, box, sup_ball, unit_steps
from .lattice_potential import GreenTable, capacity, capacity_and_equilibrium
from .rng import as_generator, stream
from .rw_engine import BoxPair, GuardedSampler

KINDS = ("linear", "site_indicator", "ball_hit", "disconnect", "custom")
_Z95 = 1.959963984540054


@dataclass(frozen=True)
class LocalFunctional:
    kind: str
    R: int = 0
    r: int = 0
    c_F: float = 1.0
    rule: Callable[[np.ndarray], float] | None = None
    theta_inf: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown functional kind {self.kind!r}")
        if self.R < 0 or self.r < 0:
            raise ValidationError("ranges must be >= 0")
        if self.kind == "disconnect" and self.r > self.R:
            raise ValidationError("disconnect needs r <= R")
        if self.kind in ("linear", "site_indicator") and self.R != 0:
            raise ValidationError(f"{self.kind} has range 0")
        if self.kind == "custom" and self.rule is None:
            raise ValidationError("custom functional needs an evaluation rule")

    @property
    def bounded(self) -> bool:
        return self.kind in ("site_indicator", "ball_hit", "disconnect") or self.theta_inf is not None

    @property
    def sup(self) -> float:
        if self.kind == "linear":
            return math.inf
        return 1.0 if self.theta_inf is None else self.theta_inf

    def label(self) -> str:
        if self.kind == "disconnect":
            return f"disconnect({self.r},{self.R})"
        if self.kind == "ball_hit":
            return f"ball_hit({self.R})"
        return self.kind

    def __call__(self, local: np.ndarray) -> float:
        """F on an array of shape (2R+1,)*d centred at the evaluation point."""
        R = self.R
        if self.kind == "linear":
            return float(local[(R,) * local.ndim])
        if self.kind == "site_indicator":
            return float(local[(R,) * local.ndim] > 0)
        if self.kind == "ball_hit":
            return float(np.any(local > 0))
        if self.kind == "disconnect":
            return float(disconnected(local > 0, self.r))
        return float(self.rule(local))


def linear() -> LocalFunctional:
    return LocalFunctional("linear")


def site_indicator() -> LocalFunctional:
    return LocalFunctional("site_indicator")


def ball_hit(R: int) -> LocalFunctional:
    return LocalFunctional("ball_hit", R=R)


def disconnect(r: int, R: int) -> LocalFunctional:
    return LocalFunctional("disconnect", R=R, r=r)


_STRUCT = {}


def disconnected(occupied: np.ndarray, r: int) -> bool:
    """True iff no nearest-neighbour path of vacant sites joins B(0, r) to S(0, R) inside B(0, R).

    ``occupied`` is the indicator on B(0, R) with the centre at index R.
    """
    d = occupied.ndim
    R = (occupied.shape[0] - 1) // 2
    if d not in _STRUCT:
        _STRUCT[d] = ndimage.generate_binary_structure(d, 1)
    vacant = ~occupied
    labels, _ = ndimage.label(vacant, structure=_STRUCT[d])
    inner = labels[tuple(slice(R - r, R + r + 1) for _ in range(d))]
    start = np.unique(inner[inner > 0])
    if len(start) == 0:
        return True
    shell = np.ones(occupied.shape, dtype=bool)
    shell[tuple(slice(1, -1) for _ in range(d))] = False
    target = np.unique(labels[shell & vacant])
    return not np.intersect1d(start, target).size


# ---------------------------------------------------------------------------
# evaluation on fields


def _local(arr: np.ndarray, idx, R: int) -> np.ndarray:
    return arr[tuple(slice(i - R, i + R + 1) for i in idx)]


def evaluate(F: LocalFunctional, field: OccupationField, x) -> float:
    """F((l_{x+y})_{|y| <= R}) for a sampled field; B(x, R) must lie in the window."""
    arr, lo = field.box_array("values")
    mask, _ = field.box_array("visits")
    inwin = np.zeros(arr.shape, dtype=bool)
    inwin[tuple((field.window - lo).T)] = True
    idx = np.asarray(x) - lo
    if np.any(idx - F.R < 0) or np.any(idx + F.R >= np.array(arr.shape)):
        raise ValidationError("B(x, R) is not inside the field window")
    if not _local(inwin, idx, F.R).all():
        raise ValidationError("B(x, R) is not inside the field window")
    return F(_local(arr, idx, F.R))


def evaluate_many(F: LocalFunctional, arr: np.ndarray, lo: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """F at each centre for a field given as a dense box array with lower corner ``lo``."""
    idx = np.asarray(centers) - lo
    R = F.R
    if np.any(idx - R < 0) or np.any(idx + R >= np.array(arr.shape)):
        raise ValidationError("some B(x, R) leave the field array")
    if F.kind == "linear":
        return arr[tuple(idx.T)].astype(float)
    if F.kind == "site_indicator":
        return (arr[tuple(idx.T)] > 0).astype(float)
    if F.kind == "ball_hit":
        occ = ndimage.maximum_filter((arr > 0).astype(np.int8), size=2 * R + 1, mode="constant")
        return occ[tuple(idx.T)].astype(float)
    return np.array([F(_local(arr, i, R)) for i in idx])


# ---------------------------------------------------------------------------
# theta curves


def theta_closed_form(kind: str, u, green: GreenTable, R: int = 0):
    """theta(u) for the kinds with an explicit law."""
    u = np.asarray(u, dtype=float)
    if kind == "linear":
        return u
    if kind == "site_indicator":
        return -np.expm1(-u / green.g00)
    if kind == "ball_hit":
        return -np.expm1(-u * capacity(sup_ball(R, green.d), green))
    raise ValidationError(f"no closed form for {kind!r}; use estimate_theta")


def theta_disconnect_r0_R1(u, green: GreenTable):
    """Exact theta for disconnect(0, 1).

    Inside B(0, 1) a vacant path from 0 reaches S(0, 1) in one step, so the event
    is {0 occupied} or {all 2d neighbours occupied}. With N the neighbours,
    P[0 vacant, N occupied] = sum_{T subset N} (-1)^{|T|} exp(-u cap({0} u T)).
    """
    d = green.d
    u = np.atleast_1d(np.asarray(u, dtype=float))
    nbrs = unit_steps(d)
    origin = np.zeros((1, d), dtype=np.int64)
    acc = np.zeros_like(u)
    caps = {}
    for mask in range(1 << len(nbrs)):
        T = nbrs[[i for i in range(len(nbrs)) if mask >> i & 1]]
        A = np.concatenate([origin, T])
        key = tuple(sorted(map(tuple, np.abs(A).tolist()))), len(T)
        if key not in caps:
            caps[key] = capacity(A, green)
        acc += (-1) ** len(T) * np.exp(-u * caps[key])
    return 1.0 - np.exp(-u / green.g00) + acc


@dataclass
class ThetaCurve:
    u_grid: np.ndarray
    values: np.ndarray
    ci_halfwidth: np.ndarray
    theta_inf: float
    n_samples: int = 0
    kind: str = ""
    r: int = 0
    R: int = 0
    seed: int | None = None
    crossings: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.u_grid = np.asarray(self.u_grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.ci_halfwidth = np.asarray(self.ci_halfwidth, dtype=float)
        if np.any(np.diff(self.u_grid) <= 0):
            raise ValidationError("u_grid must be strictly increasing")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["u", "theta", "ci_halfwidth", "n_samples", "kind", "r", "R", "seed"])
            for u, t, c in zip(self.u_grid, self.values, self.ci_halfwidth):
                w.writerow([repr(float(u)), repr(float(t)), repr(float(c)), self.n_samples, self.kind, self.r,
                            self.R, "" if self.seed is None else self.seed])
        return path

    @classmethod
    def from_csv(cls, path, theta_inf: float = 1.0) -> "ThetaCurve":
        with Path(path).open() as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValidationError(f"{path}: empty theta curve")
        need = {"u", "theta", "ci_halfwidth", "n_samples", "kind", "r", "R", "seed"}
        if not need <= set(rows[0]):
            raise ValidationError(f"{path}: missing columns {sorted(need - set(rows[0]))}")
        f = lambda k: np.array([float(r[k]) for r in rows])
        seed = rows[0]["seed"]
        return cls(f("u"), f("theta"), f("ci_halfwidth"), theta_inf, int(rows[0]["n_samples"]), rows[0]["kind"],
                   int(rows[0]["r"]), int(rows[0]["R"]), int(seed) if seed else None)


def closed_form_curve(kind: str, u_grid, green: GreenTable, R: int = 0) -> ThetaCurve:
    vals = theta_closed_form(kind, u_grid, green, R)
    return ThetaCurve(u_grid, vals, np.zeros(len(vals)), math.inf if kind == "linear" else 1.0,
                      0, kind, 0, R, None)


def _critical_levels(F: LocalFunctional, first: np.ndarray, R: int, d: int) -> np.ndarray:
    """For each sample, the smallest level at which F of the occupied set becomes 1.

    ``first`` holds, per sample, the label at which each site of B(0,R) is first
    visited (inf if never). Occupation only grows with the level, so a binary
    search over the distinct first-visit labels finds the switch.
    """
    n, side = first.shape[0], 2 * R + 1
    out = np.full(n, np.inf)
    for i in range(n):
        f = first[i]
        levels = np.unique(f[np.isfinite(f)])
        if len(levels) == 0:
            continue
        occ = lambda t: F((f <= t).reshape((side,) * d).astype(float))
        if not occ(levels[-1]):
            continue
        lo, hi = -1, len(levels) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if occ(levels[mid]):
                hi = mid
            else:
                lo = mid
        out[i] = levels[hi]
    return out


def _first_visit_labels(R: int, u_max: float, n_samples: int, green: GreenTable, seed: int, chunk: int,
                        guard_radius: int | None):
    """Per chunk, (m, |B(0,R)|) first-visit labels of one top-level field per sample."""
    window = sup_ball(R, green.d)
    sol, eng = _make_sampler(window, green, guard_radius)
    nW = len(window)
    for c, a in enumerate(range(0, n_samples, chunk)):
        m = min(chunk, n_samples - a)
        rng = stream(seed, c)
        counts = rng.poisson(u_max * sol.cap, size=m)
        total = int(counts.sum())
        labels = rng.uniform(0.0, u_max, size=total)
        rep = np.repeat(np.arange(m), counts)
        first = np.full(m * nW, np.inf)
        if total:
            rec = eng.run(_entries(sol, total, rng), np.arange(total), rng, times=False)
            np.minimum.at(first, rep[rec.traj] * nW + rec.site, labels[rec.traj])
        yield first.reshape(m, nW)


def _curve(F: LocalFunctional, u_grid, crit, n_samples, seed, isotonic) -> ThetaCurve:
    vals = (crit[None, :] <= u_grid[:, None]).mean(1)
    if isotonic:
        vals = isotonic_regression(vals).x
    ci = _Z95 * np.sqrt(vals * (1 - vals) / n_samples)
    return ThetaCurve(u_grid, vals, ci, F.sup, n_samples, F.label(), F.r, F.R, seed, crit)


def _check_theta_args(F: LocalFunctional, n_samples: int):
    if n_samples < 100:
        raise ValidationError("n_samples must be >= 100")
    if F.kind == "linear" or (F.kind == "custom" and not F.bounded):
        raise ValidationError("estimate_theta handles indicator-type functionals")


def estimate_theta(F: LocalFunctional, u_grid, n_samples: int, green: GreenTable, seed: int = 0,
                   isotonic: bool = False, chunk: int = 2000, guard_radius: int | None = None) -> ThetaCurve:
    """Monte Carlo theta(u) for an indicator-type F on a shared-randomness grid.

    Each sample is one interlacement field on B(0, R) at the top level with
    uniform trajectory labels; the curve at u counts samples whose critical
    level is <= u, so it is exactly non-decreasing in u.
    """
    _check_theta_args(F, n_samples)
    u_grid = np.asarray(u_grid, dtype=float)
    crit = np.concatenate([_critical_levels(F, first, F.R, green.d)
                           for first in _first_visit_labels(F.R, float(u_grid.max()), n_samples, green, seed,
                                                            chunk, guard_radius)])
    return _curve(F, u_grid, crit, n_samples, seed, isotonic)


def estimate_theta_family(functionals, u_grid, n_samples: int, green: GreenTable, seed: int = 0,
                          chunk: int = 2000, guard_radius: int | None = None) -> list[ThetaCurve]:
    """theta curves for several functionals from the same fields on the largest B(0, R).

    With common samples, pointwise orderings between the functionals (for
    disconnect(r, R): larger R or smaller r means a larger event) hold sample by
    sample, so the estimated curves inherit them exactly.
    """
    Fs = list(functionals)
    for F in Fs:
        _check_theta_args(F, n_samples)
    u_grid = np.asarray(u_grid, dtype=float)
    d, Rmax = green.d, max(F.R for F in Fs)
    side = 2 * Rmax + 1
    crit = [[] for _ in Fs]
    for first in _first_visit_labels(Rmax, float(u_grid.max()), n_samples, green, seed, chunk, guard_radius):
        cube = first.reshape((len(first),) + (side,) * d)
        for k, F in enumerate(Fs):
            sl = (slice(None),) + (slice(Rmax - F.R, Rmax + F.R + 1),) * d
            crit[k].append(_critical_levels(F, cube[sl].reshape(len(first), -1), F.R, d))
    return [_curve(F, u_grid, np.concatenate(c), n_samples, seed, False) for F, c in zip(Fs, crit)]


# ---------------------------------------------------------------------------
# spatial averages


def shape_sites(shape, N: int, d: int) -> np.ndarray:
    """D_N = (N D) intersect Z^d for D = ('cube', a) = [-a, a]^d or ('ball', rho)."""
    kind, a = shape
    m = int(math.floor(N * a + 1e-12))
    pts = box([-m] * d, [m] * d)
    if kind == "cube":
        return pts
    if kind == "ball":
        return pts[np.sum(pts.astype(float) ** 2, axis=1) <= (N * a) ** 2 + 1e-9]
    raise ValidationError(f"unknown shape {kind!r}")


def ergodic_average(F: LocalFunctional, u: float, N: int, shape, green: GreenTable, seed: int = 0,
                    guard_radius: int | None = None, max_sites: int = 2_000_000) -> float:
    """|D_N|^{-1} sum_{x in D_N} F((L^u_{x+.})) on one sampled field."""
    d = green.d
    DN = shape_sites(shape, N, d)
    lo, hi = DN.min(0) - F.R, DN.max(0) + F.R
    if np.prod(hi - lo + 1) > max_sites:
        raise ValidationError("window exceeds the memory budget")
    if u == 0:
        return 0.0
    window = box(lo, hi)
    fld = sample_field(u, window, green, rng=stream(seed, 0), guard_radius=guard_radius,
                       times=F.kind in ("linear", "custom"), seed=seed)
    arr, alo = fld.box_array("values")
    return float(evaluate_many(F, arr, alo, DN).mean())


# ---------------------------------------------------------------------------
# good boxes


@dataclass(frozen=True)
class GoodBoxSpec:
    Sigma: tuple
    kappa: float
    mu: float
    L: int
    K: float

    def validate(self):
        S = sorted(self.Sigma)
        if not S or S[0] <= 0:
            raise ValidationError("Sigma must be a non-empty set of positive levels")
        if not 0 < self.kappa < 1 or self.mu < 0 or self.L < 1 or self.K < 2:
            raise ValidationError("need 0 < kappa < 1, mu >= 0, L >= 1, K >= 2")
        for a in S:
            inside = [b for b in S if (1 - self.kappa) * a < b < (1 + self.kappa) * a]
            if inside != [a]:
                raise ValidationError(f"Sigma violates the spacing condition at alpha={a}")


@dataclass
class GoodBoxReport:
    alphas: np.ndarray
    bad_frequency: np.ndarray
    eq_mean: np.ndarray
    eq_se: np.ndarray
    count_mean: np.ndarray
    F_mean: np.ndarray
    any_bad_frequency: float
    implication_checks: int
    implication_violations: int
    N_u_over_cap: np.ndarray
    replicas: int
    cap_B: float


def _box_excursions(spec: GoodBoxSpec, record: np.ndarray, sol, eng, need: int, u: float, rng):
    """Excursion records of one replica, ordered by trajectory label.

    Returns (excursion index per record, site, time, N_u(B)). Trajectory labels
    follow a Poisson process of rate cap(B); labels are added in doubling rounds
    until at least ``need`` excursions exist and the horizon covers u.
    """
    cap = sol.cap
    horizon = max(u, need / cap, 1.0 / cap)
    labels = np.zeros(0)
    parts, n_exc, upto = [], 0, 0.0
    offset = 0
    while True:
        top = 2 * horizon if upto == 0 else 2 * upto
        k = int(rng.poisson(cap * (top - upto)))
        new = np.sort(rng.uniform(upto, top, size=k))
        if k:
            rec = eng.run(_entries(sol, k, rng), np.arange(k), rng, times=True)
            start = np.concatenate([[0], np.cumsum(rec.n_segments)[:-1]]) + n_exc
            parts.append((start[rec.traj] + rec.segment, rec.site, rec.time, new, rec.n_segments))
            n_exc += int(rec.n_segments.sum())
        labels = np.concatenate([labels, new])
        upto = top
        if n_exc >= need and upto >= u:
            break
    exc = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, int)
    site = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, int)
    time = np.concatenate([p[2] for p in parts]) if parts else np.zeros(0)
    labs = np.concatenate([p[3] for p in parts]) if parts else np.zeros(0)
    nseg = np.concatenate([p[4] for p in parts]) if parts else np.zeros(0, int)
    N_u = int(nseg[labs <= u].sum())
    return exc, site, time, N_u


def good_box_diagnostic(spec: GoodBoxSpec, F: LocalFunctional, u: float, replicas: int, green: GreenTable,
                        seed: int = 0, theta: Callable | None = None) -> GoodBoxReport:
    """Bad-event frequencies of excursion-truncated fields in B = [0, L)^d.

    For each alpha the truncated field uses the first [alpha cap(B)] excursions
    from B to the boundary of U = [-KL+1, KL-1)^d. The implication checks use
    the field of all excursions with labels <= u.
    """
    spec.validate()
    d = green.d
    pair = BoxPair((0,) * d, spec.L, spec.K)
    pair.validate()
    (blo, bhi), (ulo, uhi) = pair.B, pair.U
    B = box(blo, bhi)
    R = F.R
    rlo, rhi = blo - R, bhi + R
    if np.any(rlo < ulo) or np.any(rhi > uhi):
        raise ValidationError("B enlarged by R must lie in U")
    record = box(rlo, rhi)
    sol = capacity_and_equilibrium(B, green)
    eng = GuardedSampler(record, sol, (ulo, uhi))
    theta = theta or (lambda a: float(theta_closed_form(F.kind, a, green, R)))
    alphas = np.array(sorted(spec.Sigma), dtype=float)
    cap, nB = sol.cap, len(B)
    need = int(math.floor(alphas.max() * cap))
    ebar = np.zeros(len(record))
    inB = np.all((record >= blo) & (record <= bhi), axis=1)
    ebar[inB] = sol.e_bar
    shape = tuple(rhi - rlo + 1)
    interior = B[np.all((B - blo >= R) & (bhi - B >= R), axis=1)]

    bad = np.zeros((replicas, len(alphas)), dtype=bool)
    eq = np.zeros((replicas, len(alphas)))
    cnt = np.zeros((replicas, len(alphas)))
    fv = np.zeros((replicas, len(alphas)))
    nuc = np.zeros(replicas)
    checks = violations = 0
    for rep in range(replicas):
        rng = stream(seed, rep)
        exc, site, time, N_u = _box_excursions(spec, record, sol, eng, need, u, rng)
        if N_u > 10 * max(u, alphas.max()) * cap + 10:
            raise NumericalError("excursion count cap reached", N_u=N_u)
        nuc[rep] = N_u / cap

        def field(k):
            keep = exc < k
            return np.bincount(site[keep], weights=time[keep], minlength=len(record))

        def stats(L):
            arr = L.reshape(shape)
            e = float(ebar @ L)
            m = float(L[inB].mean())
            f_all = evaluate_many(F, arr, rlo, B).sum() / nB
            f_int = evaluate_many(F, arr, rlo, interior).sum() / nB if len(interior) else 0.0
            return e, m, f_all, f_int

        for j, a in enumerate(alphas):
            k = int(math.floor(a * cap)) if a * cap >= 1 else 0
            e, m, f, _ = stats(field(k))
            eq[rep, j], cnt[rep, j], fv[rep, j] = e, m, f
            lo_a, hi_a = a * (1 - spec.kappa), a * (1 + spec.kappa)
            bad[rep, j] = (not lo_a < e < hi_a) or (not lo_a < m < hi_a) or \
                (not theta(lo_a) - spec.mu < f < theta(hi_a) + spec.mu)
        if not bad[rep].any():
            e, m, f_all, f_int = stats(field(N_u))
            for a in alphas:
                if N_u <= a * cap:
                    checks += 1
                    ok = e < (1 + spec.kappa) * a and m < (1 + spec.kappa) * a and \
                        f_int < theta((1 + spec.kappa) * a) + spec.mu
                    violations += not ok
                if N_u >= a * cap:
                    checks += 1
                    ok = e > (1 - spec.kappa) * a and m > (1 - spec.kappa) * a and \
                        f_all > theta((1 - spec.kappa) * a) - spec.mu
                    violations += not ok
    return GoodBoxReport(alphas, bad.mean(0), eq.mean(0), eq.std(0, ddof=1) / math.sqrt(max(replicas, 1)) if replicas > 1
                         else np.zeros(len(alphas)), cnt.mean(0), fv.mean(0), float(bad.any(1).mean()),
                         checks, violations, nuc, replicas, cap)
