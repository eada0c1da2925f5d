"""
Occupation fields of random interlacements
==========================================

In a finite window the field at level u comes from Poisson(u cap(W))
trajectories started from the normalised equilibrium measure. Its mean is u
at every site, its zero set has the law P[A vacant] = exp(-u cap(A)), and
exponential moments have closed forms.
"""

import math

import numpy as np

from ribulk.interlacements import LaplaceQuery, laplace_oracle, sample_fields, tilted_laplace_oracle
from ribulk.lattice import sup_ball
from ribulk.lattice_potential import green_table
from ribulk.rw_engine import TiltedProfile

T = green_table(3, 20)
W = sup_ball(1, 3)
origin = int(np.flatnonzero(np.all(W == 0, axis=1))[0])

# many replicas of the field on B(0,1) at u = 1
batch = sample_fields(1.0, W, T, 50_000, seed=1)
L0 = batch.time[:, origin]
print(f"mean L_0 = {L0.mean():.4f} +- {L0.std() / math.sqrt(len(L0)):.4f} (u = 1)")
p = 1 - math.exp(-1 / T.g00)
print(f"P[0 occupied] = {(L0 > 0).mean():.4f}, exact {p:.4f}")

# E exp<L, V> for a small mixed-sign V, Monte Carlo against the Neumann series
V = np.where(W.sum(1) % 2 == 0, 0.03, -0.04)
mc = np.exp(batch.time @ V)
print(f"E exp<L,V>: mc {mc.mean():.5f} +- {mc.std() / math.sqrt(len(mc)):.5f}, "
      f"exact {laplace_oracle(LaplaceQuery(W, V, 1.0), T):.5f}")

# a tilt f: the mean occupation becomes u f(x)^2
prof = TiltedProfile(W, 1 + 0.35 * np.exp(-(W ** 2).sum(1)))
big = sup_ball(3, 3)
tb = sample_fields(1.0, big, T, 20_000, seed=2, profile=prof)
k = int(np.flatnonzero(np.all(big == 0, axis=1))[0])
print(f"tilted mean at 0: {tb.time[:, k].mean():.4f}, u f(0)^2 = {float(prof.f(np.zeros((1, 3)))[0]) ** 2:.4f}")

# with f = 1 the tilted moment is the plain one
q = LaplaceQuery(W, V, 1.0)
print(f"flat tilt: {tilted_laplace_oracle(q, TiltedProfile.flat(3), T):.12f} vs {laplace_oracle(q, T):.12f}")
