"""
Constrained Dirichlet energies
==============================

The rate is the least energy (1/2d) int |grad phi|^2 over phi >= 0 with
mean_D theta((sqrt(u) + phi)^2) = nu. A radial solver handles ball domains and
a lattice solver handles any domain; for a step-like theta the energy tends to
(1/d)(sqrt(u*) - sqrt(u))^2 times the capacity of a ball of volume nu |D|.
"""

import numpy as np

from ribulk.lattice_potential import green_table
from ribulk.local_functionals import disconnect, estimate_theta_family
from ribulk.rate_solver import (ExpTheta, RateProblem, energy_curve, k_curve, sigma_sweep, solve_full_grid,
                                solve_radial, step_limit_energy)

T = green_table(3, 20)
theta = ExpTheta(1 / T.g00)

# the same problem on both solvers
p = RateProblem(3, 1.0, 0.7, theta, domain=("ball", 1.0), h=1 / 16)
rad, grid = solve_radial(p, dr=1 / 256), solve_full_grid(p)
print(f"radial {rad.energy:.6f}  grid {grid.energy:.6f}  (lambda {rad.lam:.4f}, {grid.iterations} grid steps)")

# nu -> energy is increasing and vanishes at nu = theta(u)
for row in energy_curve(p, [float(theta(1.0)), 0.6, 0.7, 0.8, 0.9]):
    print(f"nu = {row['nu']:.4f}: energy {row['energy']:.5f}")

# step-like theta on the cube [-1,1]^3: sharpen and extrapolate
t = RateProblem(3, 1.0, 0.5 / 8, theta, domain=("cube", 1.0), h=1 / 16)
out = sigma_sweep(t, 3.0, [0.05, 0.025])
print(f"energies {np.round(out['energy'], 5)} -> extrapolated {out['extrapolated']:.5f}, "
      f"limit {step_limit_energy(3, 1.0, 3.0, 0.5):.5f}")

# K_{r,R} from Monte Carlo theta curves
u_grid = np.linspace(0.125, 8, 64)
pairs = [(0, 2), (1, 2)]
curves = estimate_theta_family([disconnect(*q) for q in pairs], u_grid, 2000, T, seed=6)
for q, c in zip(pairs, curves):
    rows = k_curve(*q, 1.0, [0.6, 0.8], c, p)
    print(f"K_{q}(0.6) = {rows[0]['energy']:.4f}, K_{q}(0.8) = {rows[1]['energy']:.4f}")
