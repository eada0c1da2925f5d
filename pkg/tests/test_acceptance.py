"""Acceptance criteria 1-13, one PASS/FAIL line each (collected in the terminal summary)."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import integrate, stats

from conftest import ACCEPTANCE_LINES
from ribulk.errors import GaugeError
from ribulk.interlacements import (LaplaceQuery, laplace_exponent, laplace_oracle, relative_entropy_rate,
                                   sample_fields, tilted_laplace_oracle)
from ribulk.lattice import cube_L, sup_ball
from ribulk.lattice_potential import capacity, dirichlet_form, green_bessel, green_fourier, green_table
from ribulk.local_functionals import (disconnect, ergodic_average, estimate_theta_family, shape_sites,
                                      site_indicator)
from ribulk.rate_solver import (ExpTheta, RateProblem, energy_curve, euler_lagrange_residual, k_curve, rearrangement_check,
                                sigma_sweep, solve_full_grid, solve_radial, step_limit_energy)
from ribulk.rng import stream
from ribulk.rw_engine import TiltedProfile, equilibrium_time_sample

G00 = 1.516386  # value stated for criterion 1
Z3 = 3.0


def report(n: int, ok: bool, detail: str, elapsed: float, budget: float):
    ok = bool(ok) and elapsed < budget
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f} s / {budget:.0f} s]"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def within(x: np.ndarray, target: float, k: float = Z3) -> tuple[bool, float]:
    se = float(np.std(x, ddof=1) / math.sqrt(len(x)))
    return abs(float(np.mean(x)) - target) <= k * se, se


# 1


def test_c01_green_oracle():
    t0 = time.perf_counter()
    b = float(green_bessel(np.zeros((1, 3), dtype=np.int64), 3)[0])
    f = green_fourier(np.zeros(3, dtype=np.int64), 3)
    T = green_table(3, 20)
    res = T.harmonicity_residual()
    ok = abs(b - f) < 1e-6 and abs(b - G00) < 1e-6 and res < 1e-10
    assert report(1, ok, f"g00 bessel={b:.13f} fourier={f:.13f} harmonicity={res:.1e}",
                  time.perf_counter() - t0, 60)


# 2


def test_c02_capacity_identities():
    t0 = time.perf_counter()
    T = green_table(3, 20)
    T40 = green_table(3, 40)
    errs = [abs(capacity([[0, 0, 0]], T) - 1 / T.g00)]
    for x in ([1, 0, 0], [1, 1, 0], [2, 1, 0], [3, 2, 1], [5, 0, 0]):
        gx = float(T(np.array(x)))
        errs.append(abs(capacity([[0, 0, 0], x], T) - 2 / (T.g00 + gx)))
    ratios = np.array([capacity(cube_L([0, 0, 0], L), T40) / L for L in range(2, 13)])
    ok = max(errs) < 1e-9 and ratios.min() > 0.5 and ratios.max() < 1.5 and np.all(np.diff(ratios) > 0)
    assert report(2, ok, f"max identity error {max(errs):.1e}; cap/L in [{ratios.min():.4f}, {ratios.max():.4f}]",
                  time.perf_counter() - t0, 60)


# 3 and 4 share one run


@pytest.fixture(scope="module")
def origin_run():
    t0 = time.perf_counter()
    T = green_table(3, 20)
    b = sample_fields(1.0, [[0, 0, 0]], T, 200_000, seed=2024, chunk=50_000)
    return b, time.perf_counter() - t0, T


def test_c03_occupation_mean(origin_run):
    b, el, _ = origin_run
    t0 = time.perf_counter()
    ok, se = within(b.time[:, 0], 1.0)
    assert report(3, ok, f"mean L_0 = {b.time[:, 0].mean():.5f} (u = 1, SE {se:.5f}, n = {len(b.time)})",
                  el + time.perf_counter() - t0, 600)


def test_c04_interlacement_set_law(origin_run):
    b, el, T = origin_run
    occ = (b.visits[:, 0] > 0).astype(float)
    p = 1 - math.exp(-1 / T.g00)
    ok, se = within(occ, p)
    assert report(4, ok, f"P[0 in I^1] = {occ.mean():.5f} vs {p:.5f} (SE {se:.5f})", el, 600)


# 5


def _mc_laplace(V, sites, T, n, seed):
    b = sample_fields(1.0, sites, T, n, seed=seed, chunk=50_000)
    return np.exp(b.time @ V)


def test_c05_laplace_transform():
    t0 = time.perf_counter()
    T = green_table(3, 20)
    B1 = sup_ball(1, 3)
    rows, ok = [], True
    # closed form for a point potential against the series
    ser = max(abs(laplace_exponent(LaplaceQuery([[0, 0, 0]], [t], 1.0), T) - t / (1 - t * T.g00))
              for t in (0.05, 0.1, 0.2, 0.3))
    ok &= ser < 1e-9
    rows.append(f"point closed form err {ser:.1e}")
    # V1 = 0.3 delta_0
    x = _mc_laplace(np.array([0.3]), [[0, 0, 0]], T, 200_000, 51)
    exact = laplace_oracle(LaplaceQuery([[0, 0, 0]], [0.3], 1.0), T)
    good, se = within(x, exact)
    ok &= good
    rows.append(f"V1 mc {x.mean():.5f} vs {exact:.5f} (SE {se:.5f})")
    # V2 = 0.3 on B(0,1): outside the gauge, so no finite value exists to compare with
    try:
        laplace_oracle(LaplaceQuery(B1, np.full(len(B1), 0.3), 1.0), T)
        rows.append("V2 finite")
    except GaugeError as exc:
        ok = False
        rows.append(f"V2 = 0.3*1_B(0,1): E exp<L,V> is infinite (rho(G|V|) = {exc.diagnostics['spectral_radius']:.3f})")
    # V3 mixed sign
    V3 = np.where((B1.sum(1) % 2) == 0, 0.03, -0.04)
    x = _mc_laplace(V3, B1, T, 200_000, 53)
    exact = laplace_oracle(LaplaceQuery(B1, V3, 1.0), T)
    good, se = within(x, exact)
    ok &= good
    rows.append(f"V3 mc {x.mean():.5f} vs {exact:.5f} (SE {se:.5f})")
    # in-gauge companion of V2, reported only
    Vc = np.full(len(B1), 0.05)
    xc = _mc_laplace(Vc, B1, T, 200_000, 52)
    rows.append(f"[companion 0.05*1_B: mc {xc.mean():.4f} vs {laplace_oracle(LaplaceQuery(B1, Vc, 1.0), T):.4f}]")
    passed = report(5, ok, "; ".join(rows), time.perf_counter() - t0, 600)
    if not passed:
        pytest.xfail("V = 0.3*1_{B(0,1)} lies outside the gauge: the exponential moment is infinite")


# 6


def test_c06_tilted_consistency():
    t0 = time.perf_counter()
    T = green_table(3, 20)
    B1 = sup_ball(1, 3)
    q = LaplaceQuery(B1, np.linspace(-0.03, 0.03, len(B1)), 1.0)
    err = abs(tilted_laplace_oracle(q, TiltedProfile.flat(3), T) / laplace_oracle(q, T) - 1)
    prof = TiltedProfile(B1, 1 + 0.35 * np.exp(-(B1 ** 2).sum(1)))
    W = sup_ball(3, 3)
    u = 1.5
    b = sample_fields(u, W, T, 40_000, seed=61, profile=prof, chunk=10_000)
    rows, ok = [f"flat tilt rel err {err:.1e}"], err < 1e-9
    for site in ([0, 0, 0], [1, 0, 0], [1, 1, 1]):
        k = int(np.flatnonzero(np.all(W == site, axis=1))[0])
        target = u * float(prof.f(np.array([site]))[0]) ** 2
        good, se = within(b.time[:, k], target)
        ok &= good
        rows.append(f"{tuple(site)}: {b.time[:, k].mean():.4f} vs {target:.4f} (SE {se:.4f})")
    assert report(6, ok, "; ".join(rows), time.perf_counter() - t0, 600)


# 7


def test_c07_excursion_law():
    t0 = time.perf_counter()
    T = green_table(3, 20)
    x = equilibrium_time_sample(cube_L([0, 0, 0], 3), None, T, stream(71), 10_000)
    p = stats.kstest(x, "expon").pvalue
    assert report(7, p > 0.01, f"KS p = {p:.3f} (n = 10000, mean {x.mean():.4f})", time.perf_counter() - t0, 300)


# 8


def _exact_variance(side: int, T, u: float) -> float:
    """Var of the vacant fraction of a cube of side ``side``: Cov(x, y) = e^{-u cap{x,y}} - e^{-2u/g00}."""
    k = np.arange(-(side - 1), side)
    K = np.stack(np.meshgrid(k, k, k, indexing="ij"), -1).reshape(-1, 3)
    pairs = np.prod(side - np.abs(K), axis=1)
    cov = np.exp(-2 * u / (T.g00 + T(K))) - math.exp(-2 * u / T.g00)
    return float(pairs @ cov) / side ** 6


def test_c08_ergodic_averages():
    t0 = time.perf_counter()
    T = green_table(3, 40)
    theta = 1 - math.exp(-1 / T.g00)
    shape = ("cube", 0.25)
    dev, exact = {}, {}
    for N in (20, 40):
        vals = np.array([ergodic_average(site_indicator(), 1.0, N, shape, T, seed=s) for s in range(20)])
        dev[N] = float(np.mean((vals - theta) ** 2))
    for N in (20, 40):
        exact[N] = _exact_variance(int(round(len(shape_sites(shape, N, 3)) ** (1 / 3))), T, 1.0)
    ratio, true_ratio = dev[20] / dev[40], exact[20] / exact[40]
    # companion: measured mean squared deviation against the exact variance (chi-square, 20 dof)
    chi = {N: stats.chi2.cdf(20 * dev[N] / exact[N], 20) for N in (20, 40)}
    detail = (f"MSE ratio N=20/N=40 = {ratio:.3f} (exact variance ratio {true_ratio:.3f}); "
              f"chi2 cdf {chi[20]:.2f}, {chi[40]:.2f}")
    passed = report(8, ratio > 2, detail, time.perf_counter() - t0, 1200)
    assert all(0.001 < c < 0.999 for c in chi.values())
    if not passed:
        pytest.xfail("variance ratio of the ergodic average tends to 2 from below in d = 3")


# 9


def _bump(z2):
    out = np.zeros_like(z2)
    m = z2 < 0.25
    out[m] = np.exp(-1 / (1 - z2[m] / 0.25))
    return out


def _bump_grad_energy() -> float:
    def dphi(r):
        if r >= 0.5:
            return 0.0
        s = 1 - r * r / 0.25
        return math.exp(-1 / s) * (-2 * r / 0.25) / s ** 2

    val, _ = integrate.quad(lambda r: dphi(r) ** 2 * r * r, 0, 0.5, epsabs=1e-14, epsrel=1e-12, limit=200)
    return 4 * math.pi * val / 6


def test_c09_riemann_sum():
    t0 = time.perf_counter()
    target = _bump_grad_energy()
    vals = {}
    for N in (32, 64, 128):
        ax = np.arange(-N // 2 - 1, N // 2 + 2) / N
        z2 = ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2
        vals[N] = dirichlet_form(_bump(z2)).value / N
    # entropy identity at N = 32: u E(f/sqrt u) = E(f - sqrt u) with f = sqrt(u) + phi(./N)
    u, N = 2.0, 32
    m = N // 2 + 1
    ax = np.arange(-m, m + 1)
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    phi = _bump((X.astype(float) ** 2).sum(1) / N ** 2)
    prof = TiltedProfile(X[phi > 0], 1 + phi[phi > 0] / math.sqrt(u))
    ent = relative_entropy_rate(prof, u) / N
    errs = {N: abs(v / target - 1) for N, v in vals.items()}
    mono = errs[32] > errs[64] > errs[128]
    ok = errs[128] < 0.02 and mono and abs(ent / vals[32] - 1) < 1e-10
    detail = (f"target {target:.6e}; rel err N=32,64,128: {errs[32]:.2e}, {errs[64]:.2e}, {errs[128]:.2e}; "
              f"entropy identity {abs(ent / vals[32] - 1):.1e}")
    assert report(9, ok, detail, time.perf_counter() - t0, 300)


# 10


def test_c10_rate_cross_validation():
    t0 = time.perf_counter()
    th = ExpTheta(1 / green_table(3, 20).g00)
    p = RateProblem(3, 1.0, 0.7, th, domain=("ball", 1.0), h=1 / 16)
    rad = solve_radial(p, dr=1 / 256)
    grid = solve_full_grid(p)
    rel = abs(grid.energy / rad.energy - 1)
    el = max(euler_lagrange_residual(grid, p), rad.el_residual)
    ok = rel < 0.01 and el < 1e-4
    assert report(10, ok, f"radial {rad.energy:.6f} grid {grid.energy:.6f} rel diff {rel:.2e}; EL residual {el:.1e}",
                  time.perf_counter() - t0, 600)


# 11


def test_c11_step_limit():
    t0 = time.perf_counter()
    target = step_limit_energy(3, 1.0, 3.0, 0.5)
    assert target == pytest.approx((math.sqrt(3) - 1) ** 2 * 2 * math.pi * (1.5 / (4 * math.pi)) ** (1 / 3) / 3)
    t = RateProblem(3, 1.0, 0.5 / 8, ExpTheta(1.0), domain=("cube", 1.0), h=1 / 16)
    out = sigma_sweep(t, 3.0, [0.05, 0.025])
    rel = out["extrapolated"] / target - 1
    detail = (f"E(sigma=0.05)={out['energy'][0]:.5f} E(0.025)={out['energy'][1]:.5f} "
              f"extrapolated {out['extrapolated']:.5f} vs {target:.5f} ({rel:+.2%})")
    assert report(11, abs(rel) < 0.02, detail, time.perf_counter() - t0, 1800)


# 12


def test_c12_monotonicity():
    t0 = time.perf_counter()
    T = green_table(3, 20)
    th = ExpTheta(1 / T.g00)
    t = RateProblem(3, 1.0, 0.7, th)
    nus = np.r_[float(th(1.0)), np.linspace(0.5, 0.95, 10)]
    E = np.array([r["energy"] for r in energy_curve(t, nus)])
    ok = E[0] == 0.0 and np.all(np.diff(E) > 0)
    rows = [f"energy(theta(u)) = {E[0]:.1e}, strictly increasing over {len(nus)} nu"]
    u_grid = np.linspace(0.125, 8, 64)
    pairs = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3)]
    curves = dict(zip(pairs, estimate_theta_family([disconnect(*q) for q in pairs], u_grid, 4000, T, seed=121)))
    K = {}
    for q, c in curves.items():
        band = []
        for shift in (0, -1, 1):
            vals = np.clip(c.values + shift * c.ci_halfwidth, 0, 1)
            cc = replace(c, values=np.maximum.accumulate(vals))
            band.append([r["energy"] for r in k_curve(*q, 1.0, [0.6, 0.8], cc, t)])
        K[q] = np.array(band)
    # K decreases in R and increases in r; compare point values with the CI bands as tolerance
    order = [((0, 1), (0, 2)), ((0, 2), (0, 3)), ((1, 2), (1, 3)), ((0, 2), (1, 2)), ((0, 3), (1, 3))]
    for big, small in order[:3]:
        tol = np.abs(K[big][2] - K[big][1]) / 2 + np.abs(K[small][2] - K[small][1]) / 2
        ok &= bool(np.all(K[small][0] <= K[big][0] + tol))
    for low, high in order[3:]:
        tol = np.abs(K[low][2] - K[low][1]) / 2 + np.abs(K[high][2] - K[high][1]) / 2
        ok &= bool(np.all(K[low][0] <= K[high][0] + tol))
    rows.append("K(0.6): " + ", ".join(f"{q}={K[q][0][0]:.4f}" for q in pairs))
    assert report(12, ok, "; ".join(rows), time.perf_counter() - t0, 1800)


# 13


def test_c13_rearrangement():
    t0 = time.perf_counter()
    rng = np.random.default_rng(131)
    th = ExpTheta(1 / green_table(3, 20).g00)
    n, h = 33, 0.125
    ax = (np.arange(n) - n // 2) * h
    X = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1)
    bad = 0
    worst = -math.inf
    for _ in range(50):
        phi = np.zeros((n,) * 3)
        for _ in range(rng.integers(1, 5)):
            c = rng.uniform(-1, 1, 3)
            w = rng.uniform(0.2, 0.8)
            phi += rng.uniform(0.1, 2) * np.maximum(0, 1 - ((X - c) ** 2).sum(-1) / w) ** 2
        rep = rearrangement_check(phi, h, 1.0, th, 1.0)
        bad += not (rep.energy_ok and rep.constraint_ok)
        worst = max(worst, rep.energy_star / rep.energy - 1)
    assert report(13, bad == 0, f"50 fields, {bad} violations, max energy(phi*)/energy(phi) - 1 = {worst:+.3f}",
                  time.perf_counter() - t0, 300)
