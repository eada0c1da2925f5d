"""Site-set helpers on Z^d. Sites are int64 arrays of shape (n, d)."""
from __future__ import annotations

import numpy as np

from .errors import ValidationError


def as_sites(sites, d: int | None = None) -> np.ndarray:
    a = np.asarray(sites, dtype=np.int64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValidationError("site set must be a non-empty (n, d) integer array")
    if d is not None and a.shape[1] != d:
        raise ValidationError(f"sites have dimension {a.shape[1]}, expected {d}")
    return a


def box(lo, hi) -> np.ndarray:
    """Sites of the closed box prod [lo_i, hi_i], row-major."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.int64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.int64))
    axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def sup_ball(R: int, d: int, center=None) -> np.ndarray:
    """B(center, R) in the sup-norm; center defaults to the origin."""
    c = np.zeros(d, dtype=np.int64) if center is None else np.asarray(center, np.int64)
    return box(c - R, c + R)


def cube_L(corner, L: int) -> np.ndarray:
    """corner + [0, L)^d."""
    c = np.asarray(corner, dtype=np.int64)
    return box(c, c + L - 1)


def bounding_box(sites: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return sites.min(axis=0), sites.max(axis=0)


def unit_steps(d: int) -> np.ndarray:
    e = np.eye(d, dtype=np.int64)
    return np.concatenate([e, -e])


def membership_grid(sites: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Index of each site of the box [lo, hi] within ``sites`` (-1 if absent)."""
    shape = tuple(hi - lo + 1)
    grid = np.full(shape, -1, dtype=np.int64)
    grid[tuple((sites - lo).T)] = np.arange(len(sites))
    return grid


def internal_boundary_mask(sites: np.ndarray) -> np.ndarray:
    """True for sites of A having at least one neighbour outside A."""
    lo, hi = bounding_box(sites)
    grid = membership_grid(sites, lo - 1, hi + 1) >= 0
    idx = sites - lo + 1
    out = np.zeros(len(sites), dtype=bool)
    for step in unit_steps(sites.shape[1]):
        out |= ~grid[tuple((idx + step).T)]
    return out


def sup_diameter(sites: np.ndarray) -> int:
    lo, hi = bounding_box(sites)
    return int((hi - lo).max())


def contains(sites: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Membership of each row of ``query`` in ``sites``."""
    lo, hi = bounding_box(sites)
    q = np.atleast_2d(query)
    inside = np.all((q >= lo) & (q <= hi), axis=1)
    res = np.zeros(len(q), dtype=bool)
    if inside.any():
        grid = membership_grid(sites, lo, hi)
        res[inside] = grid[tuple((q[inside] - lo).T)] >= 0
    return res
