"""Potential theory of the continuous-time simple random walk on Z^d, d >= 3.

The walk jumps at rate 1 to a uniformly chosen neighbour, so g(x, y) is the
expected time spent at y starting from x and L h(x) = (1/2d) sum_{y~x} h(y) - h(x).

Green values are stored for offsets in [0, E]^d (the table is symmetric under
sign flips and coordinate permutations). Everything else here is built on top
of that table through small dense solves.
"""
from __future__ import annotations

import functools
import hashlib
import itertools
import math
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, sparse, special
from scipy.sparse.linalg import spsolve

from .errors import ExtentError, NumericalError, ValidationError
from .lattice import as_sites, internal_boundary_mask, membership_grid, unit_steps

MAX_SET_SIZE = 4000
CACHE_ENV = "RIBULK_CACHE_DIR"
FORMAT_VERSION = 1
_MAGIC = b"GRNT"
_GL_ORDER = 24


def reduced_offsets(d: int, extent: int) -> np.ndarray:
    """Offsets 0 <= x_1 <= ... <= x_d <= extent in lexicographic order."""
    return np.array(list(itertools.combinations_with_replacement(range(extent + 1), d)), dtype=np.int64)


# ---------------------------------------------------------------------------
# Bessel time integral: g(0,x) = int_0^inf prod_i e^{-t/d} I_{x_i}(t/d) dt.
# With t = e^s the integrand is smooth on the whole line and decays like e^s
# on the left and t^{1-d/2} on the right.


def _log_time_window(d: int, tol: float) -> tuple[float, float]:
    s_lo = math.log(tol) - 3.0
    # e^{-z} I_n(z) <= e^{-z} I_0(z) <= 1.2 / sqrt(2 pi z) for z >= 1
    c = 1.2**d * (d / (2 * math.pi)) ** (d / 2) / (d / 2 - 1)
    T = (c / (tol * math.exp(-3.0))) ** (1.0 / (d / 2 - 1))
    return s_lo, math.log(max(T, 10.0 * d))


def _panel_rule(lo: float, hi: float, width: float) -> tuple[np.ndarray, np.ndarray]:
    n = max(1, math.ceil((hi - lo) / width))
    x, w = np.polynomial.legendre.leggauss(_GL_ORDER)
    edges = np.linspace(lo, hi, n + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


_ASYMPTOTIC_Z = 1e8


def scaled_bessel_rows(n_max: int, z: np.ndarray) -> np.ndarray:
    """e^{-z} I_n(z) for n = 0..n_max; large z by the Hankel series (scipy returns nan past ~1e10)."""
    z = np.asarray(z, dtype=float)
    orders = np.arange(n_max + 1)[:, None]
    big = z > _ASYMPTOTIC_Z
    rows = np.empty((n_max + 1, len(z)))
    rows[:, ~big] = special.ive(orders, z[None, ~big])
    if big.any():
        zb = z[big][None, :]
        mu = 4.0 * orders**2
        term = np.ones((n_max + 1, zb.shape[1]))
        acc = term.copy()
        for k in range(1, 6):
            term = term * -(mu - (2 * k - 1) ** 2) / (k * 8 * zb)
            acc += term
        rows[:, big] = acc / np.sqrt(2 * np.pi * zb)
    return rows


def _bessel_quadrature(offsets: np.ndarray, d: int, s: np.ndarray, ws: np.ndarray) -> np.ndarray:
    t = np.exp(s)
    rows = scaled_bessel_rows(int(offsets.max()), t / d)
    weights = ws * t
    out = np.empty(len(offsets))
    step = max(1, 4_000_000 // len(s))
    for a in range(0, len(offsets), step):
        off = offsets[a:a + step]
        prod = rows[off[:, 0]].copy()
        for i in range(1, d):
            prod *= rows[off[:, i]]
        out[a:a + step] = prod @ weights
    return out


def green_bessel(offsets, d: int, tol: float = 1e-12, max_halvings: int = 6) -> np.ndarray:
    """g(0, x) for each row of ``offsets`` by adaptive panel Gauss-Legendre.

    Panels in log-time are halved until two successive rules agree to ``tol``
    at every offset.
    """
    off = np.sort(np.abs(as_sites(offsets, d)), axis=1)
    lo, hi = _log_time_window(d, tol)
    width = 4.0
    prev = _bessel_quadrature(off, d, *_panel_rule(lo, hi, width))
    for _ in range(max_halvings):
        width /= 2
        cur = _bessel_quadrature(off, d, *_panel_rule(lo, hi, width))
        diff = np.abs(cur - prev)
        if diff.max() < tol:
            return cur
        prev = cur
    worst = int(diff.argmax())
    raise NumericalError("Green quadrature did not converge", worst_offset=off[worst].tolist(),
                         change=float(diff[worst]))


# ---------------------------------------------------------------------------
# Fourier oracle. The last coordinate is integrated in closed form:
#   (1/2pi) int cos(n k) / (a - cos k) dk = z^|n| / sqrt(a^2 - 1),  z = a - sqrt(a^2 - 1),
# leaving a (d-1)-dimensional integral over [0, pi]^{d-1} whose 1/|k| singularity
# is removed by splitting into pyramids along the largest coordinate.


def green_fourier(x, d: int | None = None, n: int = 160) -> float:
    x = np.abs(np.asarray(x, dtype=np.int64))
    d = len(x) if d is None else d
    if d < 3:
        raise ValidationError("d must be at least 3")
    x = np.sort(x)
    xs, xd = x[:-1], int(x[-1])
    m = d - 1
    r_nodes, r_w = np.polynomial.legendre.leggauss(n)
    r = 0.5 * math.pi * (r_nodes + 1)
    r_w = 0.5 * math.pi * r_w
    s_nodes, s_w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (s_nodes + 1)
    s_w = 0.5 * s_w
    if m > 1:
        ss = np.stack(np.meshgrid(*([s] * (m - 1)), indexing="ij"), -1).reshape(-1, m - 1)
        sw = np.prod(np.stack(np.meshgrid(*([s_w] * (m - 1)), indexing="ij"), -1).reshape(-1, m - 1), axis=1)
    else:
        ss, sw = np.zeros((1, 0)), np.ones(1)
    total = 0.0
    for j in range(m):
        k = np.empty((n, len(ss), m))
        others = [i for i in range(m) if i != j]
        k[:, :, j] = r[:, None]
        for col, i in enumerate(others):
            k[:, :, i] = r[:, None] * ss[None, :, col]
        b = np.sum(2 * np.sin(0.5 * k) ** 2, axis=-1)
        root = np.sqrt(b * (b + 2))
        z = 1.0 / (1.0 + b + root)
        f = np.prod(np.cos(k * xs), axis=-1) * z**xd / root
        jac = r ** (m - 1)
        total += np.einsum("i,ij,j->", r_w * jac, f, sw)
    return float(d * total / math.pi**m)


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GreenTable:
    """g(0, x) for |x|_inf <= extent, stored over the non-negative orthant."""

    d: int
    extent: int
    tol: float
    grid: np.ndarray
    oracle_check: tuple = ()

    def __call__(self, offsets) -> np.ndarray:
        off = np.abs(np.asarray(offsets, dtype=np.int64))
        if off.size and off.max() > self.extent:
            raise ExtentError(f"offset with |x|_inf = {int(off.max())} exceeds table extent {self.extent}")
        return self.grid[tuple(np.moveaxis(off, -1, 0))]

    @property
    def g00(self) -> float:
        return float(self.grid[(0,) * self.d])

    def reduced_values(self) -> np.ndarray:
        return self.grid[tuple(reduced_offsets(self.d, self.extent).T)]

    def digest(self) -> str:
        return hashlib.sha256(self.reduced_values().astype("<f8").tobytes()).hexdigest()[:16]

    def pair_matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Matrix g(a_i, b_j)."""
        return self(a[:, None, :] - b[None, :, :])

    def harmonicity_residual(self) -> float:
        """max |L g(0,.)(x) + delta_0(x)| over offsets whose neighbours are stored."""
        full = self.grid
        for ax in range(self.d):
            full = np.concatenate([np.flip(np.take(full, [1], axis=ax), ax), full], axis=ax)
        # full now covers [-1, E]^d
        E = self.extent
        core = tuple(slice(1, E + 1) for _ in range(self.d))  # offsets 0..E-1
        acc = np.zeros((E,) * self.d)
        for ax in range(self.d):
            for shift in (-1, 1):
                sl = list(core)
                sl[ax] = slice(1 + shift, E + 1 + shift)
                acc += full[tuple(sl)]
        lap = acc / (2 * self.d) - full[core]
        lap[(0,) * self.d] += 1.0
        return float(np.abs(lap).max())


def _grid_from_reduced(d: int, extent: int, values: np.ndarray) -> np.ndarray:
    red = reduced_offsets(d, extent)
    grid = np.empty((extent + 1,) * d)
    for perm in itertools.permutations(range(d)):
        grid[tuple(red[:, perm].T)] = values
    return grid


def _default_check_offsets(d: int, extent: int) -> list[tuple[int, ...]]:
    cands = [(0,) * d, (1,) + (0,) * (d - 1), (1, 1) + (0,) * (d - 2), (2, 1) + (0,) * (d - 2)]
    return [c for c in cands if max(c) <= extent]


def build_green_table(d: int, extent: int, tol: float = 1e-12, check_offsets=None,
                      check_tol: float = 1e-8) -> GreenTable:
    """Tabulate g(0, .) on the reduced octant and cross-check a few offsets by Fourier quadrature."""
    if d < 3:
        raise ValidationError("the walk is recurrent for d < 3; no Green function")
    if extent < 1 or tol <= 0:
        raise ValidationError("extent must be >= 1 and tol > 0")
    red = reduced_offsets(d, extent)
    values = green_bessel(red, d, tol)
    grid = _grid_from_reduced(d, extent, values)
    checks = []
    for x in (check_offsets or _default_check_offsets(d, extent)):
        b = float(grid[tuple(np.abs(x))])
        f = green_fourier(x, d)
        if abs(b - f) > check_tol:
            raise NumericalError("Bessel and Fourier Green values disagree", offset=list(x), bessel=b, fourier=f)
        checks.append((tuple(int(v) for v in x), b, f))
    if np.any(values <= 0):
        raise NumericalError("non-positive Green value")
    return GreenTable(d, extent, tol, grid, tuple(checks))


# ---------------------------------------------------------------------------
# binary cache


def save_green_table(table: GreenTable, path) -> Path:
    path = Path(path)
    payload = table.reduced_values().astype("<f8").tobytes()
    header = _MAGIC + struct.pack("<IIId", FORMAT_VERSION, table.d, table.extent, table.tol)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + payload + struct.pack("<I", zlib.crc32(payload)))
    os.replace(tmp, path)
    return path


def load_green_table(path) -> GreenTable:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValidationError(f"{path}: not a Green table file")
    version, d, extent, tol = struct.unpack("<IIId", raw[4:24])
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    n = math.comb(extent + d, d)
    payload = raw[24:24 + 8 * n]
    if len(payload) != 8 * n or len(raw) != 24 + 8 * n + 4:
        raise ValidationError(f"{path}: truncated payload")
    (crc,) = struct.unpack("<I", raw[24 + 8 * n:])
    if crc != zlib.crc32(payload):
        raise ValidationError(f"{path}: checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    return GreenTable(d, extent, tol, _grid_from_reduced(d, extent, values))


def cache_dir(override=None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "ribulk"


def cache_path(d: int, extent: int, tol: float, directory=None) -> Path:
    return cache_dir(directory) / f"green_d{d}_E{extent}_tol{tol:.0e}.grnt"


@functools.lru_cache(maxsize=8)
def _memo(d, extent, tol, directory):
    path = cache_path(d, extent, tol, directory)
    if path.exists():
        try:
            return load_green_table(path)
        except ValidationError:
            pass
    table = build_green_table(d, extent, tol)
    try:
        save_green_table(table, path)
    except OSError:
        pass
    return table


def green_table(d: int = 3, extent: int = 20, tol: float = 1e-12, directory=None) -> GreenTable:
    """Load from the on-disk cache or build (and store) a table."""
    return _memo(int(d), int(extent), float(tol), None if directory is None else str(directory))


# ---------------------------------------------------------------------------
# equilibrium measure, capacity, hitting distributions


@dataclass(eq=False)
class PotentialSolution:
    """Equilibrium data of a finite set A.

    e_A vanishes off the internal boundary, so the dense system is only
    solved there. ``boundary`` indexes the rows of ``sites`` carrying mass.
    """

    sites: np.ndarray
    e: np.ndarray
    cap: float
    green: GreenTable
    boundary: np.ndarray
    factor: tuple

    @property
    def e_bar(self) -> np.ndarray:
        return self.e / self.cap

    @property
    def boundary_sites(self) -> np.ndarray:
        return self.sites[self.boundary]

    def h(self, x) -> np.ndarray:
        """h_A(x) = sum_y g(x, y) e_A(y) = P_x[H_A < inf]."""
        x = as_sites(x, self.green.d)
        return self.green.pair_matrix(x, self.boundary_sites) @ self.e[self.boundary]

    def hitting_rows(self, x) -> np.ndarray:
        """P_x[X_{H_A} = y] for y in the internal boundary; valid for x outside A."""
        x = as_sites(x, self.green.d)
        gx = self.green.pair_matrix(self.boundary_sites, x)
        return linalg.cho_solve(self.factor, gx).T

    def hitting_distribution(self, x) -> np.ndarray:
        """Sub-probability over the sites of A (point mass when x is in A)."""
        x = as_sites(x, self.green.d)
        out = np.zeros((len(x), len(self.sites)))
        grid_lo = self.sites.min(0)
        grid = membership_grid(self.sites, grid_lo, self.sites.max(0))
        inside = np.all((x >= grid_lo) & (x <= self.sites.max(0)), axis=1)
        idx = np.full(len(x), -1)
        idx[inside] = grid[tuple((x[inside] - grid_lo).T)]
        hit = idx >= 0
        out[np.flatnonzero(hit), idx[hit]] = 1.0
        if (~hit).any():
            out[np.ix_(np.flatnonzero(~hit), self.boundary)] = self.hitting_rows(x[~hit])
        return out


def capacity_and_equilibrium(A, green: GreenTable) -> PotentialSolution:
    A = as_sites(A, green.d)
    if len(np.unique(A, axis=0)) != len(A):
        raise ValidationError("site set contains duplicates")
    span = int((A.max(0) - A.min(0)).max())
    if span > green.extent:
        raise ExtentError(f"set diameter {span} exceeds Green table extent {green.extent}")
    boundary = np.flatnonzero(internal_boundary_mask(A))
    if len(boundary) > MAX_SET_SIZE:
        raise ValidationError(f"internal boundary has {len(boundary)} sites; limit is {MAX_SET_SIZE}")
    B = A[boundary]
    M = green.pair_matrix(B, B)
    try:
        factor = linalg.cho_factor(M, lower=True)
    except linalg.LinAlgError as exc:
        w = np.linalg.eigvalsh(M)
        raise NumericalError("restricted Green matrix is not positive definite",
                             condition=float(abs(w[-1] / w[0]))) from exc
    eb = linalg.cho_solve(factor, np.ones(len(B)))
    if eb.min() < -1e-10:
        raise NumericalError("negative equilibrium mass", min_mass=float(eb.min()))
    e = np.zeros(len(A))
    e[boundary] = np.clip(eb, 0.0, None)
    return PotentialSolution(A, e, float(e.sum()), green, boundary, factor)


def capacity(A, green: GreenTable) -> float:
    return capacity_and_equilibrium(A, green).cap


def hitting_distribution(x, A, green: GreenTable) -> np.ndarray:
    """u_y(x) = P_x[H_A < inf, X_{H_A} = y] for each y in A."""
    return capacity_and_equilibrium(A, green).hitting_distribution(x)[0]


# ---------------------------------------------------------------------------
# Dirichlet forms and the generator on finitely supported functions


@dataclass(frozen=True)
class DirichletFormValue:
    value: float
    scale: str | float = "unit"


def _as_grid(h) -> np.ndarray:
    if isinstance(h, tuple) and len(h) == 2:
        sites, vals = as_sites(h[0]), np.asarray(h[1], dtype=float)
        lo, hi = sites.min(0), sites.max(0)
        grid = np.zeros(tuple(hi - lo + 1))
        grid[tuple((sites - lo).T)] = vals
        return grid
    return np.asarray(h, dtype=float)


def edge_sum(h) -> float:
    """sum over undirected nearest-neighbour edges of (h(y) - h(x))^2, h zero off the array."""
    g = np.pad(_as_grid(h), 1)
    return float(sum(np.sum(np.diff(g, axis=ax) ** 2) for ax in range(g.ndim)))


def dirichlet_form(h, spacing=None) -> DirichletFormValue:
    """E(h,h) = (1/2) sum_{x, y~x} (1/2d) (h(y)-h(x))^2 on Z^d.

    With ``spacing=N`` the array is read as a function on (1/N) Z^d and the
    scaled form (1 / 2N^{d-2}) sum_{y~y'} (1/2)(h(y')-h(y))^2 is returned;
    at N = 1 that is d times the unit-lattice value.

    ``h`` is a d-dimensional array (zero outside) or a (sites, values) pair.
    """
    grid = _as_grid(h)
    d = grid.ndim
    s = edge_sum(grid)
    if spacing is None:
        return DirichletFormValue(s / (2 * d), "unit")
    N = float(spacing)
    return DirichletFormValue(s / (2 * N ** (d - 2)), N)


def apply_generator(h) -> np.ndarray:
    """L h on the array padded by one layer of zeros on every side."""
    g = np.pad(_as_grid(h), 1)
    d = g.ndim
    acc = np.zeros_like(g)
    for ax in range(d):
        acc += np.roll(g, 1, ax) + np.roll(g, -1, ax)
    return acc / (2 * d) - g


def kill_outside(green: GreenTable, U, x, y) -> float:
    """g_U(x, y): Green function of the walk killed on leaving U."""
    U = as_sites(U, green.d)
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    lo, hi = U.min(0), U.max(0)
    if int((hi - lo).max()) > 2 * green.extent:
        raise ExtentError("killing set exceeds table extent")
    grid = membership_grid(U, lo - 1, hi + 1)
    def index(p):
        p = np.asarray(p) - lo + 1
        if np.any(p < 0) or np.any(p >= np.array(grid.shape)):
            return -1
        return int(grid[tuple(p)])
    iy, ix = index(y), index(x)
    if iy < 0 or ix < 0:
        return 0.0
    n = len(U)
    rows, cols = [np.arange(n)], [np.arange(n)]
    vals = [np.ones(n)]
    for step in unit_steps(green.d):
        nb = grid[tuple((U - lo + 1 + step).T)]
        ok = nb >= 0
        rows.append(np.flatnonzero(ok))
        cols.append(nb[ok])
        vals.append(np.full(ok.sum(), -1.0 / (2 * green.d)))
    mat = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    rhs = np.zeros(n)
    rhs[iy] = 1.0
    return float(spsolve(mat, rhs)[ix])
