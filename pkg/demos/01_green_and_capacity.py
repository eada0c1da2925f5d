"""
Green function and capacities on Z^3
====================================

The lattice Green function is tabulated once by a Bessel-type time integral
and checked against a Fourier quadrature. Capacities and equilibrium measures
follow from small linear systems on the boundary of a set.
"""

import numpy as np

from ribulk.lattice import cube_L, sup_ball
from ribulk.lattice_potential import (capacity, capacity_and_equilibrium, green_bessel, green_fourier,
                                      green_table, hitting_distribution)

# the table: g(0, x) for |x|_inf <= 20, cached on disk after the first build
T = green_table(3, 20)
print(f"g(0,0) = {T.g00:.13f}")
print(f"Fourier route   = {green_fourier(np.zeros(3, dtype=np.int64), 3):.13f}")
print(f"harmonicity residual = {T.harmonicity_residual():.1e}")

# a few off-diagonal values, direct route against the table
x = np.array([[1, 0, 0], [2, 1, 0], [5, 0, 0]])
for xi, a, b in zip(x, green_bessel(x, 3), T(x)):
    print(f"g(0,{tuple(xi.tolist())}) direct {a:.12f} table {float(b):.12f}")

# capacity of a point and of a pair
print(f"cap({{0}}) = {capacity([[0, 0, 0]], T):.12f} = 1/g00 = {1 / T.g00:.12f}")

# cubes: cap([0,L)^3) grows like L
T40 = green_table(3, 40)
for L in (2, 4, 8, 12):
    print(f"L = {L:2d}: cap/L = {capacity(cube_L([0, 0, 0], L), T40) / L:.6f}")

# the equilibrium measure lives on the boundary; h_A = 1 on A and harmonic outside
A = sup_ball(2, 3)
sol = capacity_and_equilibrium(A, T)
print(f"B(0,2): cap = {sol.cap:.6f}, boundary sites {len(sol.boundary)} of {len(A)}")
print(f"P[hit B(0,2) from (8,0,0)] = {float(sol.h(np.array([[8, 0, 0]]))[0]):.6f}")
mu = hitting_distribution(np.array([8, 0, 0]), A, T)
print(f"hitting distribution mass {mu.sum():.6f}, most likely entry {tuple(A[np.argmax(mu)].tolist())}")
