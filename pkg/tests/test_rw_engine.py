import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from ribulk.errors import ValidationError
from ribulk.lattice import box, cube_L, sup_ball
from ribulk.lattice_potential import capacity_and_equilibrium, kill_outside
from ribulk.rng import stream
from ribulk.rw_engine import (BoxPair, GuardedSampler, StopRule, TiltedProfile, WalkPath, box_occupation_moment,
                              default_guard_radius, equilibrium_time_sample, excursion_decompose, guard_box,
                              simulate_srw, simulate_tilted, simulate_with_guard, tilted_green_matrix,
                              tilted_resolvent, truncated_occupation)


def test_srw_exit_box_stops_outside():
    p = simulate_srw([0, 0, 0], StopRule.exit_box([-3] * 3, [3] * 3), stream(1))
    assert np.all(np.abs(p.sites[:-1]).max(1) <= 3)
    assert np.abs(p.sites[-1]).max() == 4
    steps = np.abs(np.diff(p.sites, axis=0)).sum(1)
    assert np.all(steps == 1)


def test_srw_jumps_and_time_rules():
    p = simulate_srw([0, 0, 0], StopRule.after_jumps(50), stream(2))
    assert len(p) == 51
    q = simulate_srw([0, 0, 0], StopRule.after_time(20.0), stream(3))
    # the last holding time is cut at the stopping time
    assert q.clock[-1] == pytest.approx(20.0) and q.clock[-2] < 20.0


def test_holding_times_are_exponential():
    p = simulate_srw([0, 0, 0], StopRule.after_jumps(5000), stream(4))
    assert stats.kstest(p.holding_times[:-1], "expon").pvalue > 1e-3


def test_stop_rule_validation():
    with pytest.raises(ValidationError):
        simulate_srw([0, 0, 0], StopRule("exit", None), stream(0))
    with pytest.raises(ValidationError):
        simulate_srw([0, 0, 0], StopRule.after_time(math.inf), stream(0))
    with pytest.raises(ValidationError):
        StopRule("nope").validate()


def test_path_csv_columns(tmp_path):
    p = simulate_srw([0, 0, 0], StopRule.after_jumps(3), stream(5))
    out = p.to_csv(tmp_path / "p.csv")
    head = out.read_text().splitlines()[0]
    assert head == "step,x1,x2,x3,holding_time,teleport_flag"
    assert len(out.read_text().splitlines()) == 5


def test_exit_probability_matches_killed_green(T):
    # P_0[hit 0 again before leaving U] = 1 - 1/g_U(0,0)
    U = box([-2] * 3, [2] * 3)
    gU = kill_outside(T, U, [0, 0, 0], [0, 0, 0])
    rng = stream(6)
    n = 4000
    returns = 0
    for _ in range(n):
        p = simulate_srw([0, 0, 0], StopRule.exit_box([-2] * 3, [2] * 3), rng)
        returns += bool(np.any(np.all(p.sites[1:] == 0, axis=1)))
    q = 1 - 1 / gU
    assert abs(returns / n - q) < 4 * math.sqrt(q * (1 - q) / n)


# tilted walks


def test_flat_profile_is_simple_walk(T):
    prof = TiltedProfile.flat(3)
    assert prof.is_flat()
    assert len(prof.V()[0]) == 0
    assert tilted_resolvent(prof, ([[0, 0, 0]], [1.0]), [0, 0, 0], T) == pytest.approx(T.g00, abs=1e-12)


def _bump(amp=0.3):
    return TiltedProfile.from_function(sup_ball(1, 3), lambda x: 1 + amp * (np.abs(x).sum() == 0) + 0.1 * amp)


def test_tilted_green_reversibility(T):
    prof = _bump()
    S = sup_ball(2, 3)
    G = tilted_green_matrix(prof, T, S, S)
    lam = prof.lam(S)
    M = lam[:, None] * G
    np.testing.assert_allclose(M, M.T, atol=1e-12)


def test_tilted_green_matches_simulation(T):
    prof = _bump(0.5)
    G = tilted_green_matrix(prof, T, [[0, 0, 0]], [[0, 0, 0]])[0, 0]
    # total time at 0 with exact re-entry into a window that contains the tilt
    W = sup_ball(3, 3)
    sol = capacity_and_equilibrium(W, T)
    eng = GuardedSampler(W, sol, guard_box(W, 3), profile=prof)
    n = 20000
    rec = eng.run(np.zeros((n, 3), dtype=np.int64), np.arange(n), stream(7), times=True)
    at0 = np.all(W[rec.site] == 0, axis=1)
    tot = np.bincount(rec.traj[at0], weights=rec.time[at0], minlength=n)
    assert abs(tot.mean() - G) < 4 * tot.std() / math.sqrt(n)


def test_scalar_tilted_walk_prefers_high_f():
    prof = TiltedProfile(np.array([[1, 0, 0]]), [3.0])
    rng = stream(17)
    first = [simulate_tilted([0, 0, 0], prof, StopRule.after_jumps(1), rng).sites[1] for _ in range(3000)]
    frac = np.mean([np.all(x == [1, 0, 0]) for x in first])
    # jump law from 0: f(y) / sum f = 3 / 8
    assert abs(frac - 3 / 8) < 4 * math.sqrt(3 / 8 * 5 / 8 / 3000)


def test_tilted_rates():
    prof = TiltedProfile(np.array([[0, 0, 0]]), [2.0])
    # at 0 every neighbour has f = 1: rate (1/6) * 6 * 1/2
    assert prof.rates(np.array([[0, 0, 0]]))[0] == pytest.approx(0.5)
    # at a neighbour one target has f = 2
    assert prof.rates(np.array([[1, 0, 0]]))[0] == pytest.approx((5 + 2) / 6)


def test_profile_validation():
    with pytest.raises(ValidationError):
        TiltedProfile([[0, 0, 0]], [0.0])
    with pytest.raises(ValidationError):
        TiltedProfile([[0, 0, 0]], [1.0, 2.0])


# guarded sampler


def test_guarded_sampler_reproduces_hitting_probability(T):
    A = sup_ball(1, 3)
    sol = capacity_and_equilibrium(A, T)
    x = np.array([4, 0, 0])
    target = float(sol.h(x[None])[0])
    rng = stream(8)
    n = 20000
    eng = GuardedSampler(A, sol, guard_box(np.vstack([A, x]), 2))
    rec = eng.run(np.repeat(x[None], n, 0), np.arange(n), rng, times=False)
    hit = np.unique(rec.traj).size / n
    assert abs(hit - target) < 4 * math.sqrt(target * (1 - target) / n)


def test_guarded_sampler_total_time_mean(T):
    # from the equilibrium measure, the expected total time in A is sum_y ebar(x) g(x, y) = |A| / cap(A)
    A = cube_L([0, 0, 0], 2)
    sol = capacity_and_equilibrium(A, T)
    rng = stream(9)
    n = 20000
    starts = A[rng.choice(len(A), size=n, p=sol.e_bar)]
    eng = GuardedSampler(A, sol, guard_box(A, 3))
    rec = eng.run(starts, np.arange(n), rng, times=True)
    tot = np.bincount(rec.traj, weights=rec.time, minlength=n)
    assert abs(tot.mean() - len(A) / sol.cap) < 4 * tot.std() / math.sqrt(n)


def test_simulate_with_guard_teleports_land_in_window(T):
    W = sup_ball(1, 3)
    p = simulate_with_guard([0, 0, 0], W, 2, T, stream(10))
    tele = p.sites[p.teleport]
    assert np.all(np.abs(tele).max(1) <= 1)


def test_default_guard_radius_respects_extent(T):
    W = sup_ball(3, 3)
    r = default_guard_radius(W, T)
    assert 0 <= r and 6 + 2 * r <= T.extent - 1


# excursions


def _toy_path(coords, teleport=None):
    s = np.array(coords)
    return WalkPath(s, np.ones(len(s)), np.zeros(len(s), bool) if teleport is None else np.array(teleport))


def test_excursion_decompose_counts():
    pair = BoxPair((0, 0, 0), 1, 2)  # B = {0}, U = [-1, 0]^3 after flooring
    (ulo, uhi) = pair.U
    out = [int(uhi[0]) + 1, 0, 0]
    path = _toy_path([[0, 0, 0], out, [0, 0, 0], out, [5, 5, 5]])
    exc, n = excursion_decompose(path, pair)
    assert n == 2
    assert all(np.all(e.path.sites[0] == 0) for e in exc)


def test_excursion_incomplete_is_dropped():
    pair = BoxPair((0, 0, 0), 2, 3)
    path = _toy_path([[0, 0, 0], [1, 0, 0]])
    assert excursion_decompose(path, pair)[1] == 0


def test_truncated_occupation_monotone_in_a():
    pair = BoxPair((0, 0, 0), 2, 3)
    rng = stream(11)
    p = simulate_srw([0, 0, 0], StopRule.exit_box([-30] * 3, [30] * 3), rng)
    exc, n = excursion_decompose(p, pair)
    B = cube_L([0, 0, 0], 2)
    prev = np.zeros(len(B))
    for a in [0.5, 1, 2, 3, n + 1]:
        cur = truncated_occupation(exc, a, B)
        assert np.all(cur >= prev)
        prev = cur
    assert np.all(truncated_occupation(exc, 0.99, B) == 0)


def test_box_pair_validation():
    with pytest.raises(ValidationError):
        BoxPair((0, 0, 0), 4, 0.5).validate()


# equilibrium functional


def test_equilibrium_time_exponential(T):
    x = equilibrium_time_sample(cube_L([0, 0, 0], 3), None, T, stream(12), 5000)
    assert stats.kstest(x, "expon").pvalue > 0.01
    assert abs(x.mean() - 1) < 4 / math.sqrt(5000)


def test_equilibrium_time_truncated_by_U_is_dominated(T):
    pair = BoxPair((0, 0, 0), 2, 3)
    B = cube_L([0, 0, 0], 2)
    full = equilibrium_time_sample(B, None, T, stream(13), 5000)
    trunc = equilibrium_time_sample(B, pair.U, T, stream(13), 5000)
    assert trunc.mean() < full.mean()


def test_box_occupation_moment(T):
    a = box_occupation_moment(2, 0.1, T)
    b = box_occupation_moment(2, 0.2, T)
    assert 1 < a < b < math.inf


@given(st.integers(1, 4))
def test_box_pair_geometry(L):
    pair = BoxPair((0, 0, 0), L, 3)
    pair.validate()
    (blo, bhi), (ulo, uhi) = pair.B, pair.U
    assert np.all(bhi - blo + 1 == L)
    assert np.all(ulo == -3 * L + 1) and np.all(uhi == 3 * L - 2)
