"""Constrained Dirichlet-energy minimisation: full-grid and radial solvers.

Problem: minimise (1/2d) int |grad phi|^2 over phi >= 0 decaying at infinity,
subject to avg_D theta((sqrt(u) + phi)^2) = nu. Critical points solve
-(1/2) Lap phi = lam (sqrt(u) + phi) theta'((sqrt(u) + phi)^2) 1_D.
Both solvers iterate that equation with damping; lam is re-fitted every
step so that the undamped candidate meets the constraint.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.linalg import solve_banded
from scipy.optimize import brentq
from scipy.signal import fftconvolve
from scipy.special import expit, gamma

from .errors import NumericalError, ValidationError
from .lattice_potential import GreenTable, green_table

CONSTRAINT_TOL = 1e-6
CHANGE_TOL = 1e-8
LAMBDA_MAX = 1e250


# ---------------------------------------------------------------------------
# theta callables


class Theta:
    """Non-decreasing theta with derivative; ``theta_inf`` is the supremum."""

    theta_inf: float = 1.0
    source: str = ""

    def __call__(self, v):
        raise NotImplementedError

    def prime(self, v):
        raise NotImplementedError


@dataclass(frozen=True)
class ExpTheta(Theta):
    """theta(v) = 1 - exp(-c v): site indicator (c = 1/g00) or ball hit (c = cap)."""

    c: float
    source: str = "closed form"
    theta_inf: float = 1.0

    def __call__(self, v):
        return -np.expm1(-self.c * np.asarray(v, dtype=float))

    def prime(self, v):
        return self.c * np.exp(-self.c * np.asarray(v, dtype=float))


@dataclass(frozen=True)
class SigmoidTheta(Theta):
    """Smoothed step at u_star with width sigma."""

    u_star: float
    sigma: float
    source: str = "sigmoid"
    theta_inf: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValidationError("sigma must be > 0")

    def __call__(self, v):
        return expit((np.asarray(v, dtype=float) - self.u_star) / self.sigma)

    def prime(self, v):
        s = expit((np.asarray(v, dtype=float) - self.u_star) / self.sigma)
        return s * (1 - s) / self.sigma


class InterpolatedTheta(Theta):
    """Monotone cubic interpolation of tabulated (u, theta) pairs.

    A knot (0, 0) is added when missing and, for finite theta_inf, a knot
    (2 u_max, theta_inf) after which the curve is flat.
    """

    def __init__(self, u, values, theta_inf: float = 1.0, source: str = "table"):
        u = np.asarray(u, dtype=float)
        y = np.asarray(values, dtype=float)
        if np.any(np.diff(u) <= 0) or np.any(np.diff(y) < -1e-12):
            raise ValidationError("theta table must be increasing in u and non-decreasing in theta")
        if u[0] > 0:
            u, y = np.r_[0.0, u], np.r_[0.0, y]
        self.theta_inf = float(theta_inf)
        if math.isfinite(self.theta_inf):
            if y[-1] > self.theta_inf + 1e-12:
                raise ValidationError("theta table exceeds theta_inf")
            u, y = np.r_[u, 2 * u[-1]], np.r_[y, self.theta_inf]
        self.u, self.y = u, np.maximum.accumulate(y)
        self._p = PchipInterpolator(self.u, self.y, extrapolate=True)
        self._dp = self._p.derivative()
        self.source = source

    @classmethod
    def from_curve(cls, curve) -> "InterpolatedTheta":
        src = f"ThetaCurve({curve.kind}, r={curve.r}, R={curve.R}, n={curve.n_samples}, seed={curve.seed})"
        return cls(curve.u_grid, np.clip(curve.values, 0, curve.theta_inf), curve.theta_inf, src)

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        out = self._p(np.clip(v, 0, self.u[-1]))
        if not math.isfinite(self.theta_inf):
            slope = float(self._dp(self.u[-1]))
            out = np.where(v > self.u[-1], self.y[-1] + slope * (v - self.u[-1]), out)
        return out

    def prime(self, v):
        v = np.asarray(v, dtype=float)
        out = self._dp(np.clip(v, 0, self.u[-1]))
        if math.isfinite(self.theta_inf):
            out = np.where((v >= self.u[-1]) | (v < 0), 0.0, out)
        return np.maximum(out, 0.0)


class CallableTheta(Theta):
    """Wrap a monotone callable; derivative by central differences if not given."""

    def __init__(self, f: Callable, fprime: Callable | None = None, theta_inf: float = 1.0,
                 step: float = 1e-6, source: str = "callable"):
        self.f, self.fprime, self.theta_inf, self.step, self.source = f, fprime, theta_inf, step, source

    def __call__(self, v):
        return np.asarray(self.f(np.asarray(v, dtype=float)), dtype=float)

    def prime(self, v):
        v = np.asarray(v, dtype=float)
        if self.fprime is not None:
            return np.asarray(self.fprime(v), dtype=float)
        s = self.step * np.maximum(1.0, np.abs(v))
        return (self(v + s) - self(np.maximum(v - s, 0))) / (v + s - np.maximum(v - s, 0))


# ---------------------------------------------------------------------------
# problem and solution


@dataclass(frozen=True)
class RateProblem:
    d: int
    u: float
    nu: float
    theta: Theta
    domain: tuple = ("ball", 1.0)
    h: float = 1 / 16
    rho_t: float | None = None
    boundary: str = "free"

    def __post_init__(self):
        if self.d < 3:
            raise ValidationError("d must be >= 3")
        if self.u <= 0 or self.h <= 0:
            raise ValidationError("u and h must be > 0")
        kind, a = self.domain
        if kind not in ("cube", "ball") or a <= 0:
            raise ValidationError("domain must be ('cube', half_side) or ('ball', radius)")
        if self.nu >= self.theta.theta_inf:
            raise ValidationError(f"nu={self.nu} must be below theta_inf={self.theta.theta_inf}")
        if self.boundary not in ("free", "dirichlet"):
            raise ValidationError("boundary must be 'free' or 'dirichlet'")
        if self.rho_t is not None and self.rho_t < 4 * self.diameter:
            raise ValidationError("rho_t must be >= 4 diam(D)")

    @property
    def diameter(self) -> float:
        kind, a = self.domain
        return 2 * a * (math.sqrt(self.d) if kind == "cube" else 1.0)

    @property
    def truncation(self) -> float:
        return 4 * self.diameter if self.rho_t is None else self.rho_t

    @property
    def volume(self) -> float:
        kind, a = self.domain
        return (2 * a) ** self.d if kind == "cube" else ball_volume(self.d, a)

    @property
    def theta_u(self) -> float:
        return float(self.theta(self.u))

    @property
    def trivial(self) -> bool:
        return self.nu <= self.theta_u


@dataclass
class RateSolution:
    kind: str
    phi: np.ndarray
    lam: float
    energy: float
    constraint_residual: float
    el_residual: float
    h: float
    rho_t: float
    iterations: int
    coords: np.ndarray | None = field(default=None, repr=False)
    weights: np.ndarray | None = field(default=None, repr=False)
    source: np.ndarray | None = field(default=None, repr=False)

    def payload(self, p: RateProblem) -> dict:
        return {"nu": p.nu, "lambda": self.lam, "energy": self.energy,
                "constraint_residual": self.constraint_residual, "el_residual": self.el_residual,
                "grid": {"h": self.h, "rho_t": self.rho_t}, "solver": self.kind,
                "iterations": self.iterations, "theta_provenance": getattr(p.theta, "source", "")}

    def profile(self, r):
        if self.kind != "radial":
            raise ValidationError("profile() needs a radial solution")
        return CubicSpline(self.coords, self.phi)(np.asarray(r, dtype=float))


def ball_volume(d: int, radius: float) -> float:
    return math.pi ** (d / 2) / gamma(d / 2 + 1) * radius ** d


def sphere_area(d: int) -> float:
    return 2 * math.pi ** (d / 2) / gamma(d / 2)


def brownian_capacity_ball(d: int, radius: float) -> float:
    """Total mass of the uniform surface charge with potential 1 on the ball.

    The kernel is Gamma(d/2 - 1) / (2 pi^{d/2}) |z|^{2-d}, the Green function of -(1/2) Lap.
    """
    if d < 3:
        raise ValidationError("Brownian capacity needs d >= 3")
    if radius <= 0:
        raise ValidationError("radius must be > 0")
    return 2 * math.pi ** (d / 2) * radius ** (d - 2) / gamma(d / 2 - 1)


def step_limit_energy(d: int, u: float, u_star: float, nu_tilde: float) -> float:
    """(1/d)(sqrt(u*) - sqrt(u))^2 cap(ball of volume nu_tilde)."""
    rho = (nu_tilde / ball_volume(d, 1.0)) ** (1 / d)
    return (math.sqrt(u_star) - math.sqrt(u)) ** 2 * brownian_capacity_ball(d, rho) / d


def _zero_solution(p: RateProblem, kind: str) -> RateSolution:
    return RateSolution(kind, np.zeros(1), 0.0, 0.0, 0.0, 0.0, p.h, p.truncation, 0)


def _fit_lambda(constraint: Callable[[float], float], nu: float, lam0: float | None) -> float:
    """Root of constraint(lam) = nu; bracket grown geometrically from [1e-6, 1]."""
    g = lambda lam: constraint(lam) - nu
    lo, hi = 1e-6, 1.0
    if lam0 is not None and lam0 > 0:
        lo, hi = lam0 / 2, lam0 * 2
    while g(hi) < 0:
        lo, hi = hi, hi * 4
        if hi > LAMBDA_MAX:
            raise NumericalError("lambda bracket not found", nu=nu, lam_hi=hi)
    while g(lo) > 0:
        lo, hi = lo / 4, lo
        if lo < 1e-300:
            raise NumericalError("lambda bracket not found", nu=nu, lam_lo=lo)
    return brentq(g, lo, hi, xtol=1e-300, rtol=1e-14, maxiter=500)


def _picard(p: RateProblem, apply_green: Callable, source: Callable, constraint: Callable,
            phi0: np.ndarray, beta: float, max_iter: int, clip: bool, depth: int = 5):
    """Damped fixed-point iteration phi <- (1-beta) phi + beta lam G s(phi), Anderson-mixed.

    With depth 0 this is plain damped Picard. Otherwise the step is the
    Anderson(depth) combination of the last residuals f = lam G s(phi) - phi,
    which removes the period-2 oscillation sharp theta curves cause on the grid.
    """
    phi, lam, change, res = phi0.astype(float), None, math.inf, math.inf
    X, Fh = [], []
    for it in range(1, max_iter + 1):
        psi = apply_green(source(phi))
        lam = _fit_lambda(lambda l: constraint(l * psi), p.nu, lam)
        f = (lam * psi - phi).reshape(-1)
        x = phi.reshape(-1)
        step = beta * f
        if depth > 0:
            X.append(x.copy())
            Fh.append(f)
            if len(X) > depth + 1:
                X.pop(0)
                Fh.pop(0)
            if len(X) > 1:
                dX = np.stack([X[i + 1] - X[i] for i in range(len(X) - 1)], 1)
                dF = np.stack([Fh[i + 1] - Fh[i] for i in range(len(Fh) - 1)], 1)
                gam = np.linalg.lstsq(dF, f, rcond=None)[0]
                step = beta * f - (dX + beta * dF) @ gam
        new = (x + step).reshape(phi.shape)
        if clip:
            new = np.maximum(new, 0.0)
        change = float(np.max(np.abs(new - phi)))
        phi = new
        res = abs(constraint(phi) - p.nu)
        if res < CONSTRAINT_TOL and change < CHANGE_TOL:
            return phi, lam, it, res
    raise NumericalError("rate solver did not converge", iterations=max_iter, change=change,
                         constraint_residual=res, lam=lam)


# ---------------------------------------------------------------------------
# full grid


@dataclass
class _Grid:
    coords: np.ndarray      # (m,)*d + (d,)
    weights: np.ndarray     # fraction of each cell inside D
    h: float
    n: int                  # half-width in cells (grid index -n..n)


def _cell_weights(p: RateProblem, n: int, sub: int = 8) -> np.ndarray:
    d, h = p.d, p.h
    kind, a = p.domain
    k = np.arange(-n, n + 1) * h
    if kind == "cube":
        w1 = np.clip((np.minimum(k + h / 2, a) - np.maximum(k - h / 2, -a)) / h, 0, 1)
        w = w1
        for _ in range(d - 1):
            w = np.multiply.outer(w, w1)
        return w
    X = np.stack(np.meshgrid(*([k] * d), indexing="ij"), -1)
    r = np.sqrt((X ** 2).sum(-1))
    half = h * math.sqrt(d) / 2
    w = (r + half <= a).astype(float)
    edge = np.argwhere((r - half < a) & (r + half > a))
    s = (np.arange(sub) + 0.5) / sub - 0.5
    S = np.stack(np.meshgrid(*([s] * d), indexing="ij"), -1).reshape(-1, d) * h
    for chunk in np.array_split(edge, max(1, len(edge) // 2000)):
        pts = X[tuple(chunk.T)][:, None, :] + S[None]
        w[tuple(chunk.T)] = (np.sum(pts ** 2, -1) <= a * a).mean(1)
    return w


def _make_grid(p: RateProblem) -> _Grid:
    kind, a = p.domain
    n = int(math.ceil(a / p.h - 1e-9)) + 1
    w = _cell_weights(p, n)
    k = np.arange(-n, n + 1) * p.h
    X = np.stack(np.meshgrid(*([k] * p.d), indexing="ij"), -1)
    return _Grid(X, w, p.h, n)


def _green_kernel(d: int, m: int, green: GreenTable | None) -> np.ndarray:
    E = m - 1
    if green is None or green.d != d or green.extent < E:
        green = green_table(d, max(E, 20))
    idx = np.abs(np.arange(-E, E + 1))
    return green.grid[np.ix_(*([idx] * d))]


def _image_correction(X: np.ndarray, F: np.ndarray, h: float, rho: float, d: int) -> np.ndarray:
    """Kelvin-image term of the Dirichlet Green function of the ball rho, to quadrupole order.

    For |x|, |y| << rho, G_rho(x, y) = G(x - y) - sum_l |x|^l |y|^l rho^{-(2l+d-2)} C_l(cos) c_d
    with Gegenbauer C_l of index d/2 - 1; terms l <= 2 are harmonic polynomials in x.
    """
    if not math.isfinite(rho):
        return np.zeros(X.shape[:-1])
    c_d = gamma(d / 2 - 1) / (2 * math.pi ** (d / 2))
    al = d / 2 - 1
    Y = X.reshape(-1, d)
    f = F.reshape(-1) * h ** d
    M0 = f.sum()
    M1 = Y.T @ f
    M2 = (Y * f[:, None]).T @ Y
    r2 = (X ** 2).sum(-1)
    quad = np.einsum("...i,ij,...j->...", X, M2, X)
    return c_d * (M0 / rho ** (d - 2) + 2 * al * (X @ M1) / rho ** d
                  + (2 * al * (al + 1) * quad - al * r2 * np.trace(M2)) / rho ** (d + 2))


def _stencil_residual(phi: np.ndarray, rhs: np.ndarray, h: float) -> np.ndarray:
    """-(1/2) Lap_h phi - rhs on the interior of the array."""
    d = phi.ndim
    inner = tuple(slice(1, -1) for _ in range(d))
    lap = -2 * d * phi[inner]
    for ax in range(d):
        for sh in (0, 2):
            sl = [slice(1, -1)] * d
            sl[ax] = slice(sh, phi.shape[ax] - 2 + sh)
            lap = lap + phi[tuple(sl)]
    return -0.5 * lap / h ** 2 - rhs[inner]


# (beta, Anderson depth) tried in turn; no single pair converges for every sharp theta and h
MIX_SCHEDULE = ((0.5, 5), (0.3, 10), (0.2, 10), (1.0, 3))


def solve_full_grid(p: RateProblem, green: GreenTable | None = None, beta: float | None = None,
                    max_iter: int = 1500, clip: bool = True, phi0: np.ndarray | None = None,
                    depth: int | None = None) -> RateSolution:
    """Lattice discretisation of the problem with spacing h on the ball of radius rho_t.

    phi = (h^2/d) sum_y g((x - y)/h) s(y) solves -(1/2) Lap_h phi = s on hZ^d
    exactly and decays at infinity (boundary "free"). With boundary
    "dirichlet" zero values on the rho_t sphere are imposed by an image term.
    Cell weights give the fraction of each cell inside D.

    Without explicit ``beta``/``depth`` the mixing pairs of MIX_SCHEDULE are
    tried in order, each for at most ``max_iter`` steps.
    """
    if p.trivial:
        return _zero_solution(p, "grid")
    if beta is None and depth is None:
        schedule = MIX_SCHEDULE
    else:
        schedule = ((0.5 if beta is None else beta, 5 if depth is None else depth),)
    G = _make_grid(p)
    m = 2 * G.n + 1
    kernel = _green_kernel(p.d, m, green) * (p.h ** 2 / p.d)
    w, h, d, su = G.weights, p.h, p.d, math.sqrt(p.u)
    active = w > 0
    wsum = w.sum()

    def source(phi):
        v = su + phi
        return np.where(active, v * p.theta.prime(v * v) * w, 0.0)

    rho = p.truncation if p.boundary == "dirichlet" else math.inf

    def apply_green(s):
        return fftconvolve(kernel, s, mode="valid") - _image_correction(G.coords, s, h, rho, d)

    def constraint(phi):
        v = su + phi[active]
        return float(np.sum(w[active] * p.theta(v * v)) / wsum)

    start = np.zeros(w.shape) if phi0 is None else phi0
    total, fails = 0, []
    for b, k in schedule:
        try:
            phi, lam, it, res = _picard(p, apply_green, source, constraint, start, b, max_iter, clip, k)
            total += it
            break
        except NumericalError as exc:
            total += max_iter
            fails.append({"beta": b, "depth": k, **exc.diagnostics})
    else:
        raise NumericalError("rate solver did not converge", attempts=fails)
    it = total
    s = lam * source(phi)
    energy = float(np.sum(phi * s) * h ** d / d)
    el = float(np.max(np.abs(_stencil_residual(phi, s, h))))
    return RateSolution("grid", phi, lam, energy, res, el, h, rho, it, G.coords, w, s)


# ---------------------------------------------------------------------------
# radial


def _radial_mesh(p: RateProblem, dr: float):
    rho_d = p.domain[1]
    n = int(math.ceil(p.truncation / dr))
    dr = p.truncation / n
    r = np.arange(n + 1) * dr
    faces = np.clip(np.r_[0.0, (np.arange(n) + 0.5) * dr, p.truncation], 0, p.truncation)
    d = p.d
    vol = (faces[1:] ** d - faces[:-1] ** d) / d
    fd = np.minimum(faces, rho_d)
    vol_d = (fd[1:] ** d - fd[:-1] ** d) / d
    return r, faces, vol, vol_d, dr


def _radial_operator(p: RateProblem, r, faces, dr) -> np.ndarray:
    """Banded form of the finite-volume operator for -(1/2) r^{1-d}(r^{d-1} phi')' (times cell volume)."""
    d, n = p.d, len(r) - 1
    A = faces[1:-1] ** (d - 1) / dr         # interior faces i+1/2, i = 0..n-1
    diag = np.zeros(n + 1)
    diag[:-1] += A
    diag[1:] += A
    diag[-1] += (d - 2) * p.truncation ** (d - 2)
    ab = np.zeros((3, n + 1))
    ab[0, 1:] = -0.5 * A
    ab[1] = 0.5 * diag
    ab[2, :-1] = -0.5 * A
    return ab


def _banded_apply(ab: np.ndarray, x: np.ndarray) -> np.ndarray:
    y = ab[1] * x
    y[:-1] += ab[0, 1:] * x[1:]
    y[1:] += ab[2, :-1] * x[:-1]
    return y


def solve_radial(p: RateProblem, beta: float = 0.5, max_iter: int = 5000, dr: float | None = None,
                 clip: bool = True, depth: int = 5) -> RateSolution:
    """Finite-volume radial solver with phi'(0) = 0 and the harmonic-tail Robin condition."""
    if p.domain[0] != "ball":
        raise ValidationError("solve_radial needs a ball domain")
    if p.trivial:
        return _zero_solution(p, "radial")
    r, faces, vol, vol_d, dr = _radial_mesh(p, dr or p.h)
    ab = _radial_operator(p, r, faces, dr)
    su = math.sqrt(p.u)
    inside = vol_d > 0
    wsum = vol_d.sum()

    def source(phi):
        v = su + phi
        return np.where(inside, v * p.theta.prime(v * v) * vol_d, 0.0)

    def apply_green(s):
        return solve_banded((1, 1), ab, s)

    def constraint(phi):
        v = su + phi[inside]
        return float(np.sum(vol_d[inside] * p.theta(v * v)) / wsum)

    phi, lam, it, res = _picard(p, apply_green, source, constraint, np.zeros(len(r)), beta, max_iter, clip, depth)
    s = lam * source(phi)
    energy = float(sphere_area(p.d) * np.sum(phi * s) / p.d)
    el = float(np.max(np.abs((_banded_apply(ab, phi) - s) / vol)))
    return RateSolution("radial", phi, lam, energy, res, el, dr, p.truncation, it, r, vol_d, s)


def solve(p: RateProblem, **kw) -> RateSolution:
    return solve_radial(p, **kw) if p.domain[0] == "ball" else solve_full_grid(p, **kw)


# ---------------------------------------------------------------------------
# diagnostics


def euler_lagrange_residual(sol: RateSolution, p: RateProblem, grid_h: float | None = None,
                            region: Callable[[np.ndarray], np.ndarray] | None = None) -> float:
    """Max-norm defect of -(1/2) Lap_h phi = lam (sqrt(u)+phi) theta'((sqrt(u)+phi)^2) 1_D.

    Full-grid solutions use their own grid and cell weights. A radial solution
    is checked on its own finite-volume scheme, or, with ``grid_h``, resampled
    onto a lattice of spacing grid_h and tested with the (2d+1)-point stencil
    at points selected by ``region(|x|)`` (default: away from the sphere |x| = rho_D).
    """
    if sol.lam == 0 and not np.any(sol.phi):
        return 0.0
    su = math.sqrt(p.u)
    if sol.kind == "grid" and grid_h is None:
        v = su + sol.phi
        rhs = sol.lam * v * p.theta.prime(v * v) * sol.weights
        return float(np.max(np.abs(_stencil_residual(sol.phi, rhs, sol.h))))
    if sol.kind == "radial" and grid_h is None:
        return sol.el_residual
    if sol.kind != "radial":
        raise ValidationError("resampled residual needs a radial solution")
    rho_d = p.domain[1]
    if region is None:
        region = lambda r: (r <= 0.5 * rho_d) | ((r >= 1.5 * rho_d) & (r <= 2.5 * rho_d))
    n = int(math.ceil(2.5 * rho_d / grid_h)) + 2
    k = np.arange(-n, n + 1) * grid_h
    X = np.stack(np.meshgrid(*([k] * p.d), indexing="ij"), -1)
    R = np.sqrt((X ** 2).sum(-1))
    phi = sol.profile(R)
    v = su + phi
    rhs = sol.lam * v * p.theta.prime(v * v) * (R <= rho_d)
    res = _stencil_residual(phi, rhs, grid_h)
    inner = tuple(slice(1, -1) for _ in range(p.d))
    return float(np.max(np.abs(res[region(R[inner])])))


def grid_energy(phi: np.ndarray, h: float) -> float:
    """(1/2d) sum over nearest-neighbour edges of ((phi(x+he) - phi(x))/h)^2 h^d, zero outside the array."""
    d = phi.ndim
    P = np.pad(phi, 1)
    tot = 0.0
    for ax in range(d):
        tot += float(np.sum(np.diff(P, axis=ax) ** 2))
    return tot * h ** (d - 2) / (2 * d)


def _centred_coords(shape, h: float) -> np.ndarray:
    axes = [(np.arange(s) - (s - 1) / 2) * h for s in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1)


def rearrange(phi: np.ndarray, coords: np.ndarray | None = None, h: float = 1.0,
              method: str = "volume") -> np.ndarray:
    """Symmetric-decreasing rearrangement of a grid field.

    "volume": level-set volume matching, phi*(x) is the value whose level set
    has volume |B(0,|x|)|, interpolated in the sorted values.
    "sites": the sorted values placed on the sites sorted by |x| (an exact
    permutation, which is what makes the discrete constraint non-decreasing).
    """
    if coords is None:
        coords = _centred_coords(phi.shape, h)
    d = phi.ndim
    r = np.sqrt((coords ** 2).sum(-1)).reshape(-1)
    vals = np.sort(phi.reshape(-1))[::-1]
    if method == "volume":
        k = ball_volume(d, 1.0) * r ** d / h ** d
        return np.interp(k, np.arange(vals.size) + 0.5, vals).reshape(phi.shape)
    if method != "sites":
        raise ValidationError(f"unknown rearrangement method {method!r}")
    order = np.lexsort((np.arange(r.size), np.round(r, 12)))
    out = np.empty(phi.size)
    out[order] = vals
    return out.reshape(phi.shape)


@dataclass
class RearrangementReport:
    energy: float
    energy_star: float
    constraint: float
    constraint_star: float
    slack: float

    @property
    def energy_ok(self) -> bool:
        return self.energy_star <= self.energy + self.slack

    @property
    def constraint_ok(self) -> bool:
        return self.constraint_star >= self.constraint - 1e-12


def rearrangement_check(phi: np.ndarray, h: float, u: float, theta: Theta, rho_d: float,
                        rel_slack: float = 0.02) -> RearrangementReport:
    """Energy and constraint of phi versus its rearrangement, with D the centred ball rho_d.

    ``phi`` lives on a centred grid and should vanish near the array edge. The
    energy uses the volume-matched rearrangement; the constraint uses the site
    permutation, which gives the |D| points nearest the centre the largest values.
    """
    X = _centred_coords(phi.shape, h)
    inD = np.sqrt((X ** 2).sum(-1)) <= rho_d
    if not inD.any():
        raise ValidationError("D contains no grid points")
    su = math.sqrt(u)
    C = lambda f: float(np.mean(theta((su + f[inD]) ** 2)))
    e, es = grid_energy(phi, h), grid_energy(rearrange(phi, X, h, "volume"), h)
    return RearrangementReport(e, es, C(phi), C(rearrange(phi, X, h, "sites")), rel_slack * e)


def solution_field(sol: RateSolution, p: RateProblem, half_width: float, green: GreenTable | None = None) -> np.ndarray:
    """Full-grid solution evaluated on the centred box [-half_width, half_width]^d."""
    if sol.kind != "grid":
        raise ValidationError("solution_field needs a full-grid solution")
    n = int(math.ceil(half_width / sol.h))
    n0 = (sol.source.shape[0] - 1) // 2
    if n < n0:
        raise ValidationError("box smaller than the source grid")
    pad = n - n0
    s = np.pad(sol.source, pad)
    k = np.arange(-n, n + 1) * sol.h
    X = np.stack(np.meshgrid(*([k] * p.d), indexing="ij"), -1)
    kernel = _green_kernel(p.d, 2 * n + 1, green) * (sol.h ** 2 / p.d)
    return fftconvolve(kernel, s, mode="valid") - _image_correction(X, s, sol.h, sol.rho_t, p.d)


# ---------------------------------------------------------------------------
# curves


def _solve_point(args):
    p, kw = args
    try:
        s = solve(p, **kw)
        return {"nu": p.nu, "energy": s.energy, "lambda": s.lam, "constraint_residual": s.constraint_residual,
                "el_residual": s.el_residual, "iterations": s.iterations, "error": None}
    except (NumericalError, ValidationError) as exc:
        return {"nu": p.nu, "energy": math.nan, "lambda": math.nan, "constraint_residual": math.nan,
                "el_residual": math.nan, "iterations": 0, "error": str(exc)}


def energy_curve(template: RateProblem, nu_grid, workers: int = 1, **kw) -> list[dict]:
    """Minimal energy along a nu grid; out-of-range points carry an error marker."""
    tasks = []
    for nu in nu_grid:
        try:
            tasks.append((replace(template, nu=float(nu)), kw))
        except ValidationError as exc:
            tasks.append((None, str(exc), float(nu)))
    todo = [t for t in tasks if t[0] is not None]
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as ex:
            done = list(ex.map(_solve_point, todo))
    else:
        done = [_solve_point(t) for t in todo]
    it = iter(done)
    return [next(it) if t[0] is not None else
            {"nu": t[2], "energy": math.nan, "lambda": math.nan, "constraint_residual": math.nan,
             "el_residual": math.nan, "iterations": 0, "error": t[1]} for t in tasks]


def k_curve(r: int, R: int, u: float, nu_grid, theta_curve, template: RateProblem, workers: int = 1,
            **kw) -> list[dict]:
    """K_{r,R}(nu): minimal energy with theta taken from a disconnect(r, R) curve."""
    if theta_curve.kind and theta_curve.kind != f"disconnect({r},{R})":
        raise ValidationError(f"theta curve is {theta_curve.kind!r}, expected disconnect({r},{R})")
    th = InterpolatedTheta.from_curve(theta_curve)
    out = energy_curve(replace(template, u=u, theta=th, nu=min(template.nu, th.theta_inf - 1e-9)),
                       nu_grid, workers, **kw)
    for row in out:
        row.update(r=r, R=R)
    return out


def sigma_sweep(template: RateProblem, u_star: float, sigmas, warm: bool = False, **kw) -> dict:
    """Energies for sigmoid theta of decreasing widths and their linear extrapolation to sigma = 0.

    With ``warm`` each full-grid solve starts from the previous width's solution.
    """
    sig = np.sort(np.asarray(sigmas, dtype=float))[::-1]
    E, phi, iters = [], None, []
    for s in sig:
        p = replace(template, theta=SigmoidTheta(u_star, float(s)))
        if p.domain[0] == "cube":
            sol = solve_full_grid(p, phi0=phi, **kw)
            phi = sol.phi if warm else None
        else:
            sol = solve_radial(p, **kw)
        E.append(sol.energy)
        iters.append(sol.iterations)
    E = np.array(E)
    slope, intercept = np.polyfit(sig, E, 1)
    return {"sigma": sig.tolist(), "energy": E.tolist(), "iterations": iters,
            "extrapolated": float(intercept), "slope": float(slope)}
