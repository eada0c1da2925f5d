"""Occupation fields of random interlacements in a finite window, and exact
exponential moments of their linear functionals.

The field in a window W at level u is built from N ~ Poisson(u cap(W))
trajectories entering W at independent points with law e_W / cap(W) and then
running forward. Earlier parts of a doubly infinite trajectory never meet W,
so nothing else is needed.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import GaugeError, NumericalError, ValidationError
from .lattice import as_sites, contains, internal_boundary_mask, membership_grid
from .lattice_potential import GreenTable, PotentialSolution, capacity_and_equilibrium
from .rng import as_generator, stream
from .rw_engine import GuardedSampler, TiltedProfile, default_guard_radius, guard_box, tilted_green_matrix

NEUMANN_MAX_TERMS = 10_000
NEUMANN_TAIL = 1e-13


@dataclass
class OccupationField:
    window: np.ndarray
    visits: np.ndarray
    time: np.ndarray | None
    u: float
    seed: int | None = None
    cap: float | None = None
    n_trajectories: int | None = None

    @property
    def occupied(self) -> np.ndarray:
        return self.visits > 0

    @property
    def vacant(self) -> np.ndarray:
        return self.visits == 0

    @property
    def values(self) -> np.ndarray:
        """Occupation times when sampled, else visit counts (same zero set)."""
        return self.visits.astype(float) if self.time is None else self.time

    def box_array(self, which: str = "values"):
        """(array over the bounding box, lower corner); sites outside the window read 0."""
        lo, hi = self.window.min(0), self.window.max(0)
        arr = np.zeros(tuple(hi - lo + 1))
        arr[tuple((self.window - lo).T)] = getattr(self, which)
        return arr, lo

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.window.shape[1]
        t = self.values if self.time is not None else np.full(len(self.window), np.nan)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{i + 1}" for i in range(d)] + ["visits", "time"])
            for s, v, tt in zip(self.window, self.visits, t):
                w.writerow([*s.tolist(), int(v), repr(float(tt))])
        return path

    def summary(self) -> dict:
        lo, hi = self.window.min(0), self.window.max(0)
        return {"u": self.u, "window": {"lo": lo.tolist(), "hi": hi.tolist(), "n_sites": len(self.window)},
                "cap": self.cap, "n_trajectories": self.n_trajectories, "seed": self.seed}

    def write_summary(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.summary(), indent=2))
        return path


@dataclass
class FieldBatch:
    """Independent replicas of the field on one window (rows = replicas)."""

    window: np.ndarray
    visits: np.ndarray
    time: np.ndarray | None
    u: float
    n_trajectories: np.ndarray


def _entries(sol: PotentialSolution, n: int, rng) -> np.ndarray:
    b = sol.boundary
    return sol.sites[b[rng.choice(len(b), size=n, p=sol.e_bar[b])]]


def _make_sampler(window, green, guard_radius, profile=None, solution=None):
    sol = solution or capacity_and_equilibrium(window, green)
    r = default_guard_radius(window, green, len(sol.boundary)) if guard_radius is None else int(guard_radius)
    if r < 0:
        raise ValidationError("guard radius must be >= 0")
    return sol, GuardedSampler(window, sol, guard_box(window, r), profile=profile)


def _check_window(window, green) -> np.ndarray:
    window = as_sites(window, green.d)
    if len(np.unique(window, axis=0)) != len(window):
        raise ValidationError("window contains duplicate sites")
    return window


def sample_field(u: float, window, green: GreenTable, rng=None, guard_radius: int | None = None,
                 times: bool = True, seed: int | None = None) -> OccupationField:
    """One exact sample of (L^u_x)_{x in window}."""
    if u < 0:
        raise ValidationError("u must be >= 0")
    window = _check_window(window, green)
    rng = as_generator(rng if rng is not None else seed)
    sol, eng = _make_sampler(window, green, guard_radius)
    n = int(rng.poisson(u * sol.cap))
    visits = np.zeros(len(window), dtype=np.int64)
    time = np.zeros(len(window)) if times else None
    if n:
        rec = eng.run(_entries(sol, n, rng), np.arange(n), rng, times=times)
        visits = np.bincount(rec.site, minlength=len(window))
        if times:
            time = np.bincount(rec.site, weights=rec.time, minlength=len(window))
    return OccupationField(window, visits, time, float(u), seed, sol.cap, n)


def _batch_chunk(args):
    (u, window, green, guard_radius, profile, times, seed, chunk_id, m) = args
    sol, eng = _make_sampler(window, green, guard_radius, profile)
    rng = stream(seed, chunk_id)
    counts = rng.poisson(u * sol.cap, size=m)
    total = int(counts.sum())
    nW = len(window)
    visits = np.zeros((m, nW), dtype=np.int64)
    time = np.zeros((m, nW)) if times else None
    if total:
        rep = np.repeat(np.arange(m), counts)
        rec = eng.run(_entries(sol, total, rng), np.arange(total), rng, times=times)
        key = rep[rec.traj] * nW + rec.site
        visits = np.bincount(key, minlength=m * nW).reshape(m, nW)
        if times:
            time = np.bincount(key, weights=rec.time, minlength=m * nW).reshape(m, nW)
    return visits, time, counts


def sample_fields(u: float, window, green: GreenTable, n_replicas: int, seed: int = 0, *,
                  profile: TiltedProfile | None = None, times: bool = True, guard_radius: int | None = None,
                  chunk: int = 20_000, workers: int = 1) -> FieldBatch:
    """Independent replicas of the (optionally tilted) field.

    Replicas are cut into fixed chunks with one random stream each, so the output
    depends on (seed, chunk) but not on the number of workers.
    """
    if u < 0 or n_replicas < 1:
        raise ValidationError("need u >= 0 and n_replicas >= 1")
    window = _check_window(window, green)
    if profile is not None:
        _check_tilt_buffer(profile, window)
    jobs = [(u, window, green, guard_radius, profile, times, seed, c, min(chunk, n_replicas - a))
            for c, a in enumerate(range(0, n_replicas, chunk))]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_batch_chunk, jobs))
    else:
        parts = [_batch_chunk(j) for j in jobs]
    visits = np.concatenate([p[0] for p in parts])
    time = np.concatenate([p[1] for p in parts]) if times else None
    return FieldBatch(window, visits, time, float(u), np.concatenate([p[2] for p in parts]))


# ---------------------------------------------------------------------------
# coupled levels


@dataclass
class CoupledField:
    """Trajectories at level u_max with independent Uniform(0, u_max) labels.

    The field at u <= u_max keeps the trajectories with label <= u, which gives
    an increasing family in u with the correct law at every level.
    """

    window: np.ndarray
    labels: np.ndarray
    traj: np.ndarray
    site: np.ndarray
    time: np.ndarray | None
    u_max: float

    def at(self, u: float) -> OccupationField:
        if u > self.u_max:
            raise ValidationError("u exceeds the coupled sample's u_max")
        keep = self.labels[self.traj] <= u
        nW = len(self.window)
        visits = np.bincount(self.site[keep], minlength=nW)
        time = None if self.time is None else np.bincount(self.site[keep], weights=self.time[keep], minlength=nW)
        return OccupationField(self.window, visits, time, float(u), None, None, int((self.labels <= u).sum()))

    def first_visit_order(self) -> tuple[np.ndarray, np.ndarray]:
        """(sites, label of the first trajectory to visit them); unvisited sites get +inf."""
        first = np.full(len(self.window), np.inf)
        np.minimum.at(first, self.site, self.labels[self.traj])
        return self.window, first


def sample_coupled(u_max: float, window, green: GreenTable, rng=None, guard_radius: int | None = None,
                   times: bool = False, engine=None) -> CoupledField:
    window = _check_window(window, green)
    rng = as_generator(rng)
    sol, eng = engine if engine is not None else _make_sampler(window, green, guard_radius)
    n = int(rng.poisson(u_max * sol.cap))
    labels = np.sort(rng.uniform(0.0, u_max, size=n))
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return CoupledField(window, labels, z, z, np.zeros(0) if times else None, float(u_max))
    rec = eng.run(_entries(sol, n, rng), np.arange(n), rng, times=times)
    return CoupledField(window, labels, rec.traj, rec.site, rec.time, float(u_max))


# ---------------------------------------------------------------------------
# Laplace transforms


@dataclass
class LaplaceQuery:
    sites: np.ndarray
    V: np.ndarray
    u: float

    def __post_init__(self):
        self.sites = as_sites(self.sites)
        self.V = np.asarray(self.V, dtype=float)
        if self.V.shape != (len(self.sites),):
            raise ValidationError("one V value per site required")
        if self.u < 0:
            raise ValidationError("u must be >= 0")


def _perron(M: np.ndarray) -> tuple[float, np.ndarray]:
    w, v = np.linalg.eig(M)
    k = int(np.argmax(w.real))
    vec = np.abs(v[:, k].real)
    return float(w[k].real), vec


def neumann_exponent(K: np.ndarray, V: np.ndarray, weight: np.ndarray, tail: float = NEUMANN_TAIL):
    """<V, sum_n K^n 1>_weight with K = G diag(V), truncated once a rigorous tail bound drops below ``tail``.

    The bound uses the Perron vector v of |K|: |K^n 1| <= rho^n v / min v.
    Returns (value, terms, rho).
    """
    n = len(V)
    if n == 0 or not np.any(V):
        return 0.0, 0, 0.0
    rho, v = _perron(np.abs(K))
    if rho >= 1.0 or v.min() <= 0:
        raise GaugeError("gauge not finite: spectral radius of G|V| is >= 1", spectral_radius=rho)
    scale = float(np.abs(V * weight) @ v / v.min())
    term = np.ones(n)
    acc = np.zeros(n)
    for k in range(NEUMANN_MAX_TERMS):
        acc += term
        bound = scale * rho ** (k + 1) / (1.0 - rho)
        if bound < tail:
            return float((V * weight) @ acc), k + 1, rho
        term = K @ term
    raise GaugeError("Neumann series needs more than the term cap", spectral_radius=rho)


def laplace_exponent(q: LaplaceQuery, green: GreenTable) -> float:
    """log E[exp <L^u, V>] = u <V, sum_n (GV)^n 1>."""
    K = green.pair_matrix(q.sites, q.sites) * q.V[None, :]
    val, _, _ = neumann_exponent(K, q.V, np.ones(len(q.V)), NEUMANN_TAIL / max(q.u, 1e-300))
    return q.u * val


def laplace_oracle(q: LaplaceQuery, green: GreenTable) -> float:
    return math.exp(laplace_exponent(q, green))


def laplace_direct(q: LaplaceQuery, green: GreenTable) -> float:
    """Same quantity via a dense solve of (I - GV) psi = 1."""
    K = green.pair_matrix(q.sites, q.sites) * q.V[None, :]
    psi = linalg.solve(np.eye(len(q.V)) - K, np.ones(len(q.V)))
    return math.exp(q.u * float(q.V @ psi))


def tilted_laplace_oracle(q: LaplaceQuery, profile: TiltedProfile, green: GreenTable) -> float:
    """Tilted exponential moment exp{u <V, (I - G~V)^{-1} 1>_lambda}, lambda = f^2."""
    Gt = tilted_green_matrix(profile, green, q.sites, q.sites)
    sup = float((Gt @ np.abs(q.V)).max()) if len(q.V) else 0.0
    if sup >= 1.0:
        raise GaugeError("sup of G~|V| is not below 1", sup=sup)
    K = Gt * q.V[None, :]
    val, _, _ = neumann_exponent(K, q.V, profile.lam(q.sites), NEUMANN_TAIL / max(q.u, 1e-300))
    return math.exp(q.u * val)


# ---------------------------------------------------------------------------
# tilted fields


def _check_tilt_buffer(profile: TiltedProfile, domain: np.ndarray):
    core = profile.nontrivial_sites()
    if len(core) == 0:
        return
    if not np.all(contains(domain, core)):
        raise ValidationError("domain must contain every site where f differs from 1")
    bnd = domain[internal_boundary_mask(domain)]
    dist = np.abs(bnd[:, None, :] - core[None, :, :]).max(-1).min()
    if dist < 2:
        raise ValidationError(f"tilt is {int(dist)} away from the domain boundary; need >= 2")


def sample_tilted_field(u: float, profile: TiltedProfile, domain, green: GreenTable, rng=None,
                        guard_radius: int | None = None, times: bool = True,
                        seed: int | None = None) -> OccupationField:
    """Field on ``domain`` under the tilted interlacement measure.

    Entrances follow the simple-walk equilibrium measure of the domain and the
    trajectories then move with the tilted generator.
    """
    domain = _check_window(domain, green)
    _check_tilt_buffer(profile, domain)
    rng = as_generator(rng if rng is not None else seed)
    sol, eng = _make_sampler(domain, green, guard_radius, profile)
    n = int(rng.poisson(u * sol.cap))
    visits = np.zeros(len(domain), dtype=np.int64)
    time = np.zeros(len(domain)) if times else None
    if n:
        rec = eng.run(_entries(sol, n, rng), np.arange(n), rng, times=times)
        visits = np.bincount(rec.site, minlength=len(domain))
        if times:
            time = np.bincount(rec.site, weights=rec.time, minlength=len(domain))
    return OccupationField(domain, visits, time, float(u), seed, sol.cap, n)


def relative_entropy_rate(profile: TiltedProfile, u: float) -> float:
    """-u sum_x f(x) L f(x) (expected <L^u, V> under the tilt)."""
    S = profile.affected_sites()
    if len(S) == 0:
        return 0.0
    from .lattice import unit_steps

    fx = profile.f(S)
    Lf = sum(profile.f(S + s) for s in unit_steps(profile.d)) / (2 * profile.d) - fx
    return float(-u * np.sum(fx * Lf))
