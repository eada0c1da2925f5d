"""Trajectory simulation for the continuous-time simple random walk and its tilts.

Two layers:

* scalar path simulators (``simulate_srw``, ``simulate_tilted``) that return
  full :class:`WalkPath` objects, used for small checks and dumps;
* :class:`GuardedSampler`, a lockstep vectorized engine that runs many walkers
  inside a guard box and replaces every excursion outside the box by an exact
  draw from the hitting distribution of the re-entry set (or by death with the
  complementary probability). All Monte Carlo for fields and excursions runs
  through it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .errors import ExtentError, NumericalError, ValidationError
from .lattice import as_sites, contains, membership_grid, sup_diameter, unit_steps
from .lattice_potential import GreenTable, PotentialSolution, capacity_and_equilibrium
from .rng import as_generator

REENTRY_CACHE_BYTES = 256 * 2**20


# ---------------------------------------------------------------------------
# paths and stopping rules


@dataclass
class WalkPath:
    sites: np.ndarray
    holding_times: np.ndarray
    teleport: np.ndarray

    @property
    def clock(self) -> np.ndarray:
        return np.cumsum(self.holding_times)

    def __len__(self):
        return len(self.sites)

    def to_csv(self, path) -> Path:
        path = Path(path)
        d = self.sites.shape[1]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"x{i + 1}" for i in range(d)] + ["holding_time", "teleport_flag"])
            for k, (s, t, f) in enumerate(zip(self.sites, self.holding_times, self.teleport)):
                w.writerow([k, *s.tolist(), repr(float(t)), int(f)])
        return path


@dataclass(frozen=True)
class StopRule:
    """Stop on first exit from a finite set, after a fixed time, or after a number of jumps."""

    kind: str
    region: np.ndarray | None = None
    value: float = 0.0

    @classmethod
    def exit_set(cls, sites) -> "StopRule":
        return cls("exit", as_sites(sites))

    @classmethod
    def exit_box(cls, lo, hi) -> "StopRule":
        return cls("exit_box", np.array([lo, hi], dtype=np.int64))

    @classmethod
    def after_time(cls, t: float) -> "StopRule":
        return cls("time", None, float(t))

    @classmethod
    def after_jumps(cls, n: int) -> "StopRule":
        return cls("jumps", None, int(n))

    def validate(self):
        if self.kind in ("exit", "exit_box"):
            if self.region is None:
                raise ValidationError("exit rule needs a finite region")
        elif self.kind in ("time", "jumps"):
            if not np.isfinite(self.value) or self.value < 0:
                raise ValidationError("stopping time or jump count must be finite and >= 0")
        else:
            raise ValidationError(f"unknown stopping rule {self.kind!r}")

    def outside(self, x: np.ndarray) -> bool:
        if self.kind == "exit_box":
            return bool(np.any(x < self.region[0]) or np.any(x > self.region[1]))
        return not bool(contains(self.region, x[None, :])[0])


def _run_scalar(start, stop: StopRule, rng, step_law, max_steps: int) -> WalkPath:
    stop.validate()
    rng = as_generator(rng)
    x = np.asarray(start, dtype=np.int64).copy()
    sites, times = [x.copy()], []
    clock = 0.0
    for n in range(max_steps + 1):
        rate, probs, steps = step_law(x)
        hold = rng.standard_exponential() / rate
        if stop.kind == "time" and clock + hold >= stop.value:
            times.append(stop.value - clock)
            break
        if stop.kind == "jumps" and n >= stop.value:
            times.append(hold)
            break
        if stop.kind in ("exit", "exit_box") and stop.outside(x):
            times.append(hold)
            break
        times.append(hold)
        clock += hold
        k = rng.integers(len(steps)) if probs is None else rng.choice(len(steps), p=probs)
        x = x + steps[k]
        sites.append(x.copy())
    else:
        raise NumericalError("walk exceeded max_steps before its stopping rule", max_steps=max_steps)
    s = np.array(sites)
    return WalkPath(s, np.array(times), np.zeros(len(s), dtype=bool))


def simulate_srw(start, stop: StopRule, rng=None, max_steps: int = 10**7) -> WalkPath:
    """Rate-1 simple random walk from ``start`` until ``stop``.

    For exit rules the last site is the first one outside the region.
    For a time rule the last holding time is truncated so the clock ends at t.
    """
    steps = unit_steps(len(start))
    return _run_scalar(start, stop, rng, lambda x: (1.0, None, steps), max_steps)


# ---------------------------------------------------------------------------
# tilted walks


class TiltedProfile:
    """A positive function f equal to 1 off a finite set, with V = -Lf/f and lambda = f^2."""

    def __init__(self, sites, values):
        sites = as_sites(sites)
        values = np.asarray(values, dtype=float)
        if values.shape != (len(sites),):
            raise ValidationError("one value per site required")
        if np.any(values <= 0) or not np.all(np.isfinite(values)):
            raise ValidationError("f must be positive and finite")
        self.d = sites.shape[1]
        keep = values != 1.0
        self.sites = sites[keep] if keep.any() else sites[:1]
        self.values = values[keep] if keep.any() else np.ones(1)
        self.lo = self.sites.min(0) - 2
        self.hi = self.sites.max(0) + 2
        self._grid = np.ones(tuple(self.hi - self.lo + 1))
        self._grid[tuple((self.sites - self.lo).T)] = self.values

    @classmethod
    def flat(cls, d: int) -> "TiltedProfile":
        return cls(np.zeros((1, d), dtype=np.int64), [1.0])

    @classmethod
    def from_function(cls, sites, fn) -> "TiltedProfile":
        sites = as_sites(sites)
        return cls(sites, [fn(s) for s in sites])

    def f(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        out = np.ones(len(x))
        inside = np.all((x >= self.lo) & (x <= self.hi), axis=1)
        out[inside] = self._grid[tuple((x[inside] - self.lo).T)]
        return out

    def lam(self, x) -> np.ndarray:
        return self.f(x) ** 2

    def is_flat(self) -> bool:
        return bool(np.all(self.values == 1.0))

    def nontrivial_sites(self) -> np.ndarray:
        """Sites where f differs from 1."""
        return self.sites[self.values != 1.0]

    def affected_sites(self) -> np.ndarray:
        """Sites whose jump law differs from the simple random walk: {f != 1} and its neighbours."""
        core = self.nontrivial_sites()
        if len(core) == 0:
            return core
        pts = np.concatenate([core] + [core + s for s in unit_steps(self.d)])
        return np.unique(pts, axis=0)

    def V(self) -> tuple[np.ndarray, np.ndarray]:
        """(sites, values) of V = -Lf/f on its support."""
        S = self.affected_sites()
        if len(S) == 0:
            return np.zeros((0, self.d), dtype=np.int64), np.zeros(0)
        fx = self.f(S)
        nb = sum(self.f(S + s) for s in unit_steps(self.d)) / (2 * self.d)
        vals = -(nb - fx) / fx
        keep = vals != 0
        return S[keep], vals[keep]

    def rates(self, x) -> np.ndarray:
        """Total jump rate (1/2d) sum_y f(y)/f(x)."""
        x = np.atleast_2d(x)
        return sum(self.f(x + s) for s in unit_steps(self.d)) / (2 * self.d) / self.f(x)


def simulate_tilted(start, profile: TiltedProfile, stop: StopRule, rng=None, max_steps: int = 10**7) -> WalkPath:
    """Chain with jump rate (1/2d) f(y)/f(x) along each edge x -> y."""
    steps = unit_steps(profile.d)

    def law(x):
        fy = profile.f(x[None, :] + steps)
        fx = profile.f(x[None, :])[0]
        return fy.sum() / (2 * profile.d) / fx, fy / fy.sum(), steps

    return _run_scalar(start, stop, rng, law, max_steps)


def tilted_green_matrix(profile: TiltedProfile, green: GreenTable, targets, sources) -> np.ndarray:
    """G~(x, z) = expected time at z for the tilted chain from x.

    With w = f G~h one has -Lw = f h + V w and V finitely supported, so w = G(f h + V w)
    reduces to a dense system on supp V together with supp h: no truncation.
    """
    targets = as_sites(targets, profile.d)
    sources = as_sites(sources, profile.d)
    vs, vv = profile.V()
    S = np.unique(np.concatenate([vs, sources]), axis=0)
    vS = np.zeros(len(S))
    if len(vs):
        vS[membership_grid(S, S.min(0), S.max(0))[tuple((vs - S.min(0)).T)]] = vv
    src_idx = membership_grid(S, S.min(0), S.max(0))[tuple((sources - S.min(0)).T)]
    fS = profile.f(S)
    G_SS = green.pair_matrix(S, S)
    rhs = np.zeros((len(S), len(sources)))
    rhs[src_idx, np.arange(len(sources))] = fS[src_idx]
    A = np.eye(len(S)) - G_SS * vS[None, :]
    b = G_SS @ rhs
    try:
        wS = linalg.solve(A, b)
    except linalg.LinAlgError as exc:
        raise NumericalError("tilted resolvent system is singular") from exc
    resid = np.abs(A @ wS - b).max()
    if not np.isfinite(resid) or resid > 1e-8 * max(1.0, np.abs(b).max()):
        raise NumericalError("tilted resolvent residual above tolerance", residual=float(resid))
    charge = rhs + vS[:, None] * wS
    w_targets = green.pair_matrix(targets, S) @ charge
    return w_targets / profile.f(targets)[:, None]


def tilted_resolvent(profile: TiltedProfile, h, x, green: GreenTable) -> float:
    """G~h(x) for h given as (sites, values)."""
    sites, vals = as_sites(h[0], profile.d), np.asarray(h[1], dtype=float)
    K = tilted_green_matrix(profile, green, np.atleast_2d(x), sites)
    return float(K[0] @ vals)


# ---------------------------------------------------------------------------
# guarded lockstep engine


@dataclass
class Records:
    """Visits inside the recording set, one row per (walker, visit)."""

    traj: np.ndarray
    site: np.ndarray
    time: np.ndarray | None
    segment: np.ndarray
    n_segments: np.ndarray
    path: list | None = None


class GuardedSampler:
    """Many independent walkers in a guard box with exact re-entry.

    record_sites: sites whose visits (and optionally holding times) are kept.
    reentry: equilibrium data of the re-entry set W; after leaving the guard at
        x a walker returns with probability h_W(x) and lands on the internal
        boundary of W according to the hitting distribution.
    guard: (lo, hi) corners of the guard box; must contain W and the record sites.
    profile: optional tilt; its affected sites must lie inside W so that the
        walk outside W is a simple random walk (exactness of re-entry).
    allow_return: if False, leaving the guard kills the walker.
    """

    def __init__(self, record_sites, reentry: PotentialSolution | None, guard, profile: TiltedProfile | None = None,
                 allow_return: bool = True, green: GreenTable | None = None):
        self.record_sites = as_sites(record_sites)
        self.d = self.record_sites.shape[1]
        self.lo = np.asarray(guard[0], dtype=np.int64)
        self.hi = np.asarray(guard[1], dtype=np.int64)
        self.reentry = reentry
        self.allow_return = allow_return and reentry is not None
        self.profile = None if profile is None or profile.is_flat() else profile
        for name, pts in (("record set", self.record_sites),
                          ("re-entry set", None if reentry is None else reentry.sites)):
            if pts is not None and (np.any(pts < self.lo) or np.any(pts > self.hi)):
                raise ValidationError(f"guard box does not contain the {name}")
        if self.allow_return:
            span = int((self.hi - self.lo).max()) + 1
            if span > reentry.green.extent:
                raise ExtentError(f"guard span {span} exceeds Green table extent {reentry.green.extent}")
        if self.profile is not None and reentry is not None:
            aff = self.profile.affected_sites()
            if len(aff) and not np.all(contains(reentry.sites, aff)):
                raise ValidationError("tilt must be confined to the re-entry set")

        plo, phi = self.lo - 1, self.hi + 1
        self.shape = tuple(phi - plo + 1)
        self.plo = plo
        strides = np.array([int(np.prod(self.shape[i + 1:])) for i in range(self.d)], dtype=np.int64)
        self.strides = strides
        self.steps_flat = np.concatenate([strides, -strides])
        inside = np.zeros(self.shape, dtype=bool)
        inside[tuple(slice(1, -1) for _ in range(self.d))] = True
        self.inside = inside.ravel()
        self.rec_index = membership_grid(self.record_sites, plo, phi).ravel()

        if self.profile is not None:
            coords = np.stack(np.unravel_index(np.arange(self.inside.size), self.shape), 1) + plo
            fx = self.profile.f(coords)
            fy = np.stack([self.profile.f(coords + s) for s in unit_steps(self.d)], 1)
            self.rate = fy.sum(1) / (2 * self.d) / fx
            self.cum = np.cumsum(fy / fy.sum(1, keepdims=True), axis=1)
            self.cum[:, -1] = 1.0
        else:
            self.rate = None

        if self.allow_return:
            self.bflat = self.flat(reentry.boundary_sites)
            self._row_of = np.full(self.inside.size, -1, dtype=np.int64)
            self._h = np.empty(0)
            self._cum = np.empty((0, len(self.bflat)))

    def flat(self, sites) -> np.ndarray:
        return np.asarray((as_sites(sites, self.d) - self.plo) @ self.strides, dtype=np.int64)

    def coords(self, flat) -> np.ndarray:
        return np.stack(np.unravel_index(flat, self.shape), 1) + self.plo

    def _rows(self, flat: np.ndarray) -> np.ndarray:
        missing = np.unique(flat[self._row_of[flat] < 0])
        if len(missing):
            rows = self.reentry.hitting_rows(self.coords(missing))
            rows = np.clip(rows, 0.0, None)
            h = rows.sum(1)
            cum = np.cumsum(rows, axis=1) / np.where(h > 0, h, 1.0)[:, None]
            cum[:, -1] = 1.0
            start = len(self._h)
            self._h = np.concatenate([self._h, np.minimum(h, 1.0)])
            self._cum = np.concatenate([self._cum, cum])
            self._row_of[missing] = start + np.arange(len(missing))
            if self._cum.nbytes > REENTRY_CACHE_BYTES:
                raise NumericalError("re-entry cache exceeds memory budget; use a smaller guard radius",
                                     bytes=self._cum.nbytes)
        return self._row_of[flat]

    def run(self, starts, traj, rng, times: bool = True, record_path: bool = False,
            max_iter: int = 10**8) -> Records:
        """Advance walkers from ``starts`` (sites) until every one has died.

        ``traj`` labels each walker; segments count re-entries per walker
        (segment 0 is the initial stretch).
        """
        rng = as_generator(rng)
        pos = self.flat(starts)
        if np.any(~self.inside[pos]):
            raise ValidationError("walkers must start inside the guard box")
        tid = np.asarray(traj, dtype=np.int64).copy()
        n_traj = int(tid.max()) + 1 if len(tid) else 0
        seg = np.zeros(len(pos), dtype=np.int64)
        nseg = np.zeros(n_traj, dtype=np.int64)
        np.add.at(nseg, tid, 1)
        out_t, out_s, out_h, out_g = [], [], [], []
        path = [] if record_path else None
        tele = np.zeros(len(pos), dtype=bool)
        ndir = 2 * self.d
        for _ in range(max_iter):
            if len(pos) == 0:
                break
            ri = self.rec_index[pos]
            m = ri >= 0
            hold = None
            if times or record_path:
                e = rng.standard_exponential(len(pos))
                hold = e if self.rate is None else e / self.rate[pos]
            if record_path:
                path.append((tid.copy(), pos.copy(), hold.copy(), tele.copy()))
            if m.any():
                out_t.append(tid[m])
                out_s.append(ri[m])
                out_g.append(seg[m])
                if times:
                    out_h.append(hold[m])
            if self.rate is None:
                dirs = rng.integers(0, ndir, len(pos))
            else:
                u = rng.random(len(pos))
                dirs = (u[:, None] > self.cum[pos]).sum(1)
            pos = pos + self.steps_flat[dirs]
            tele = np.zeros(len(pos), dtype=bool)
            gone = ~self.inside[pos]
            if gone.any():
                if record_path:
                    g = np.flatnonzero(gone)
                    path.append((tid[g], pos[g], np.full(len(g), np.nan), tele[g]))
                keep = ~gone
                if self.allow_return:
                    gi = np.flatnonzero(gone)
                    rows = self._rows(pos[gi])
                    back = rng.random(len(gi)) < self._h[rows]
                    gi, rows = gi[back], rows[back]
                    if len(gi):
                        v = rng.random(len(gi))
                        k = (self._cum[rows] < v[:, None]).sum(1)
                        pos[gi] = self.bflat[np.minimum(k, len(self.bflat) - 1)]
                        seg[gi] += 1
                        np.add.at(nseg, tid[gi], 1)
                        tele[gi] = True
                        keep[gi] = True
                pos, tid, seg, tele = pos[keep], tid[keep], seg[keep], tele[keep]
        else:
            raise NumericalError("guarded sampler exceeded max_iter", max_iter=max_iter)
        cat = lambda xs, dt: np.concatenate(xs) if xs else np.zeros(0, dtype=dt)
        return Records(cat(out_t, np.int64), cat(out_s, np.int64), cat(out_h, float) if times else None,
                       cat(out_g, np.int64), nseg, path)


def default_guard_radius(window: np.ndarray, green: GreenTable | None = None, n_boundary: int | None = None) -> int:
    """3x the window diameter, shrunk to respect the table extent and the re-entry cache budget."""
    diam = sup_diameter(window)
    r = 3 * max(diam, 1)
    if green is not None:
        r = min(r, (green.extent - 1 - diam) // 2)
    if n_boundary:
        d = window.shape[1]
        while r > 0 and 2 * d * (diam + 2 * r + 3) ** (d - 1) * n_boundary * 8 > REENTRY_CACHE_BYTES:
            r -= 1
    return max(r, 0)


def guard_box(window: np.ndarray, radius: int):
    return window.min(0) - radius, window.max(0) + radius


def simulate_with_guard(start, window, guard_radius: int | None, green: GreenTable, rng=None,
                        solution: PotentialSolution | None = None, max_iter: int = 10**7) -> WalkPath:
    """One trajectory recorded inside the guard box, with exact teleports back to the window.

    Sites that left the guard are kept in the path (holding time nan) and the
    landing site after a teleport carries ``teleport = True``.
    """
    window = as_sites(window, green.d)
    sol = solution or capacity_and_equilibrium(window, green)
    r = default_guard_radius(window, green, len(sol.boundary)) if guard_radius is None else guard_radius
    if r < 0:
        raise ValidationError("guard radius must be >= 0")
    eng = GuardedSampler(window, sol, guard_box(window, r))
    rec = eng.run(np.atleast_2d(start), [0], rng, times=False, record_path=True, max_iter=max_iter)
    sites = np.concatenate([eng.coords(p[1]) for p in rec.path])
    holds = np.concatenate([p[2] for p in rec.path])
    tele = np.concatenate([p[3] for p in rec.path])
    return WalkPath(sites, holds, tele)


# ---------------------------------------------------------------------------
# excursions between concentric boxes


@dataclass(frozen=True)
class BoxPair:
    """B = z + [0, L)^d inside U = z + [-K L + 1, K L - 1)^d."""

    corner: tuple
    L: int
    K: float

    @property
    def d(self) -> int:
        return len(self.corner)

    @property
    def B(self):
        z = np.asarray(self.corner)
        return z, z + self.L - 1

    @property
    def U(self):
        z = np.asarray(self.corner)
        a = int(math.floor(self.K * self.L))
        return z - a + 1, z + a - 2

    def validate(self):
        (blo, bhi), (ulo, uhi) = self.B, self.U
        if self.L < 1 or np.any(blo < ulo) or np.any(bhi > uhi):
            raise ValidationError("B is not contained in U")


@dataclass
class Excursion:
    path: WalkPath
    box_id: BoxPair


def excursion_decompose(path: WalkPath, boxes: BoxPair) -> tuple[list[Excursion], int]:
    """Maximal excursions from B until the first exit from U, in order."""
    boxes.validate()
    (blo, bhi), (ulo, uhi) = boxes.B, boxes.U
    s = path.sites
    in_B = np.all((s >= blo) & (s <= bhi), axis=1)
    in_U = np.all((s >= ulo) & (s <= uhi), axis=1)
    out = []
    i, n = 0, len(s)
    while i < n:
        if not in_B[i]:
            i += 1
            continue
        j = i
        while j < n and in_U[j] and not (j > i and path.teleport[j]):
            j += 1
        if j >= n or path.teleport[j]:
            # the path ended (or jumped) before leaving U: not a complete excursion
            break
        sl = slice(i, j + 1)
        out.append(Excursion(WalkPath(s[sl], path.holding_times[sl], path.teleport[sl]), boxes))
        i = j + 1
    return out, len(out)


def truncated_occupation(excursions: list[Excursion], a: float, sites) -> np.ndarray:
    """Time spent at each of ``sites`` by the first [a] excursions (zero when a < 1)."""
    sites = as_sites(sites)
    out = np.zeros(len(sites))
    k = int(math.floor(a)) if a >= 1 else 0
    for exc in excursions[:k]:
        p = exc.path
        inner = p.sites[:-1]
        ht = p.holding_times[:-1]
        lo, hi = sites.min(0), sites.max(0)
        grid = membership_grid(sites, lo, hi)
        ok = np.all((inner >= lo) & (inner <= hi), axis=1)
        idx = grid[tuple((inner[ok] - lo).T)]
        good = idx >= 0
        np.add.at(out, idx[good], ht[ok][good])
    return out


# ---------------------------------------------------------------------------
# equilibrium functional and box occupation moments


def equilibrium_time_sample(B, U, green: GreenTable, rng=None, n: int = 10_000,
                            guard_radius: int | None = None) -> np.ndarray:
    """n draws of int e_B(X_s) ds with X_0 ~ normalized e_B.

    U = None integrates over the whole trajectory; a box (lo, hi) stops the
    integral at the first exit from U.
    """
    rng = as_generator(rng)
    B = as_sites(B, green.d)
    sol = capacity_and_equilibrium(B, green)
    starts = B[rng.choice(len(B), size=n, p=sol.e_bar)]
    if U is None:
        r = default_guard_radius(B, green, len(sol.boundary)) if guard_radius is None else guard_radius
        eng = GuardedSampler(B, sol, guard_box(B, r))
    else:
        lo, hi = np.asarray(U[0]), np.asarray(U[1])
        eng = GuardedSampler(B, None, (lo, hi), allow_return=False)
    rec = eng.run(starts, np.arange(n), rng, times=True)
    return np.bincount(rec.traj, weights=sol.e[rec.site] * rec.time, minlength=n)


def box_occupation_moment(L: int, c0: float, green: GreenTable) -> float:
    """sup_x E_x[exp(c0/L^2 int 1_B(X_s) ds)] for B = [0, L)^d via Kac's moment formula.

    The series sum_n (c G 1_B)^n 1 is (I - c G_BB)^{-1} 1 on B; the supremum over
    Z^d is attained on B. Returns inf when the series diverges.
    """
    from .lattice import cube_L

    B = cube_L(np.zeros(green.d, dtype=np.int64), L)
    c = c0 / L**2
    G = green.pair_matrix(B, B)
    if c * np.linalg.eigvalsh(G)[-1] >= 1:
        return math.inf
    psi = linalg.solve(np.eye(len(B)) - c * G, np.ones(len(B)), assume_a="gen")
    return float(psi.max())
