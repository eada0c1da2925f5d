import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ribulk.errors import ExtentError, NumericalError, ValidationError
from ribulk.lattice import box, cube_L, sup_ball, unit_steps
from ribulk.lattice_potential import (apply_generator, build_green_table, cache_path, capacity,
                                      capacity_and_equilibrium, dirichlet_form, green_bessel, green_fourier,
                                      green_table, hitting_distribution, kill_outside, load_green_table,
                                      save_green_table)

# Fourier-route values (closed-form last coordinate + pyramid split), frozen
FOURIER = {
    (0, 0, 0): 1.5163860591519769,
    (1, 0, 0): 0.5163860591519801,
    (1, 1, 0): 0.33114860212642483,
    (1, 1, 1): 0.2614701263863548,
    (2, 0, 0): 0.25733588725419654,
    (2, 1, 0): 0.21558962084094244,
    (3, 2, 1): 0.12694597180737946,
    (5, 0, 0): 0.09660645200364096,
}
CUBE_CAP_OVER_L = {2: 0.9258273061640692, 4: 1.123853462069368, 8: 1.243623120534254, 12: 1.2873067460742311}

offsets3 = st.tuples(*[st.integers(-8, 8)] * 3)


def test_green_table_matches_frozen_fourier_values(T):
    for x, v in FOURIER.items():
        assert float(T(np.array(x))) == pytest.approx(v, abs=1e-11)


def test_bessel_route_direct_matches_fourier():
    x = np.array(list(FOURIER))
    np.testing.assert_allclose(green_bessel(x, 3), list(FOURIER.values()), atol=1e-11)


def test_fourier_route_independent_of_table():
    assert green_fourier(np.array([2, 2, 1]), 3) == pytest.approx(float(green_table(3, 20)(np.array([2, 2, 1]))),
                                                                  abs=1e-10)


def test_neighbour_identity(T):
    # harmonicity at 0: g00 - mean of neighbours = 1
    assert float(T(np.array([1, 0, 0]))) == pytest.approx(T.g00 - 1, abs=1e-12)


def test_harmonicity_residual(T):
    assert T.harmonicity_residual() < 1e-10


@given(offsets3)
def test_green_symmetries(x):
    T = green_table(3, 20)
    x = np.array(x)
    v = float(T(x))
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            assert float(T(x[list(perm)] * np.array(signs))) == v


@given(offsets3)
def test_green_positive_and_below_g00(x):
    T = green_table(3, 20)
    v = float(T(np.array(x)))
    assert 0 < v <= T.g00


def test_green_decay_asymptotics(T40):
    # g(x) ~ 3 / (2 pi |x|) in d = 3
    x = np.array([30, 0, 0])
    assert float(T40(x)) * 30 * 2 * np.pi / 3 == pytest.approx(1, abs=2e-3)


def test_extent_error(T):
    with pytest.raises(ExtentError):
        T(np.array([21, 0, 0]))


def test_table_cache_roundtrip(tmp_path):
    T = build_green_table(3, 6)
    p = save_green_table(T, tmp_path / "t.grnt")
    U = load_green_table(p)
    assert U.digest() == T.digest()
    np.testing.assert_array_equal(U.grid, T.grid)


def test_corrupted_cache_detected(tmp_path):
    T = build_green_table(3, 6)
    p = save_green_table(T, tmp_path / "t.grnt")
    raw = bytearray(p.read_bytes())
    raw[-12] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises((NumericalError, ValidationError)):
        load_green_table(p)


def test_cache_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("RIBULK_CACHE_DIR", str(tmp_path))
    assert cache_path(3, 7, 1e-12).parent == tmp_path


def test_build_rejects_low_dimension():
    with pytest.raises(ValidationError):
        build_green_table(2, 5)


# capacities


def test_capacity_point(T):
    assert capacity([[0, 0, 0]], T) == pytest.approx(1 / T.g00, abs=1e-12)


@given(offsets3.filter(lambda x: any(x)))
def test_capacity_pair(x):
    T = green_table(3, 20)
    assert capacity([[0, 0, 0], x], T) == pytest.approx(2 / (T.g00 + float(T(np.array(x)))), abs=1e-9)


def test_cube_capacity_frozen_and_bounded(T40):
    for L, v in CUBE_CAP_OVER_L.items():
        assert capacity(cube_L([0, 0, 0], L), T40) / L == pytest.approx(v, rel=1e-9)
    vals = [capacity(cube_L([0, 0, 0], L), T40) / L for L in range(2, 13)]
    assert np.all(np.diff(vals) > 0) and max(vals) < 1.5


@given(st.lists(offsets3, min_size=1, max_size=6, unique=True), offsets3)
def test_capacity_monotone_under_inclusion(A, extra):
    T = green_table(3, 20)
    A = np.array(A)
    B = np.unique(np.vstack([A, extra]), axis=0)
    assert capacity(B, T) >= capacity(A, T) - 1e-12


@given(st.lists(offsets3, min_size=1, max_size=4, unique=True), st.lists(offsets3, min_size=1, max_size=4, unique=True))
def test_capacity_subadditive(A, B):
    T = green_table(3, 20)
    U = np.unique(np.vstack([A, B]), axis=0)
    assert capacity(U, T) <= capacity(A, T) + capacity(B, T) + 1e-12


def test_translation_invariance(T):
    A = sup_ball(1, 3)
    assert capacity(A + np.array([3, -2, 5]), T) == pytest.approx(capacity(A, T), abs=1e-12)


def test_equilibrium_measure_solves_the_system(T):
    A = cube_L([0, 0, 0], 4)
    sol = capacity_and_equilibrium(A, T)
    h = T.pair_matrix(A, A) @ sol.e
    np.testing.assert_allclose(h, 1.0, atol=1e-10)
    assert np.all(sol.e >= -1e-14)
    # interior sites carry no charge
    interior = np.all((A > 0) & (A < 3), axis=1)
    assert np.all(sol.e[interior] == 0)


def test_hitting_probability_properties(T):
    A = sup_ball(1, 3)
    sol = capacity_and_equilibrium(A, T)
    np.testing.assert_allclose(sol.h(A), 1.0, atol=1e-10)
    far = np.array([[6, 0, 0], [0, 7, 1], [5, 5, 5]])
    h = sol.h(far)
    assert np.all((h > 0) & (h < 1))
    # harmonic off A
    pts = box([-5, -5, -5], [5, 5, 5])
    hv = sol.h(pts).reshape(11, 11, 11)
    Lh = apply_generator(hv)[2:-2, 2:-2, 2:-2]
    off = np.ones((9, 9, 9), dtype=bool)
    off[3:6, 3:6, 3:6] = False
    assert np.abs(Lh[off]).max() < 1e-10


def test_hitting_distribution_mass(T):
    A = cube_L([0, 0, 0], 3)
    x = np.array([6, 1, 0])
    mu = hitting_distribution(x, A, T)
    sol = capacity_and_equilibrium(A, T)
    assert mu.sum() == pytest.approx(float(sol.h(x[None])[0]), abs=1e-10)
    assert np.all(mu >= -1e-14)
    inside = hitting_distribution(np.array([1, 1, 1]), A, T)
    assert inside.sum() == pytest.approx(1.0) and inside.max() == pytest.approx(1.0)


def test_hitting_distribution_matches_killing_identity(T):
    # from a neighbour of a single site, P[hit] = g(e1)/g00
    mu = hitting_distribution(np.array([1, 0, 0]), [[0, 0, 0]], T)
    assert mu.sum() == pytest.approx(float(T(np.array([1, 0, 0]))) / T.g00, abs=1e-12)


def test_kill_outside_bounded_by_green(T):
    U = box([-3, -3, -3], [3, 3, 3])
    gU = kill_outside(T, U, [0, 0, 0], [0, 0, 0])
    assert 1 <= gU < T.g00
    assert kill_outside(T, U, [0, 0, 0], [9, 0, 0]) == 0.0
    # symmetry
    assert kill_outside(T, U, [1, 0, 0], [0, 2, 0]) == pytest.approx(kill_outside(T, U, [0, 2, 0], [1, 0, 0]))


def test_kill_outside_grows_to_green(T):
    vals = [kill_outside(T, box([-n] * 3, [n] * 3), [0, 0, 0], [0, 0, 0]) for n in (2, 4, 8)]
    assert vals[0] < vals[1] < vals[2] < T.g00


# Dirichlet forms


def test_dirichlet_form_point_mass():
    # ordered-pair convention: E(1_{0}) = (1/2) * 2d * (1/2d) * 2 = 1
    assert dirichlet_form(([[0, 0, 0]], [1.0])).value == pytest.approx(1.0)


@given(st.integers(0, 2**32 - 1))
def test_dirichlet_form_equals_minus_generator_pairing(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(4, 5, 3))
    lhs = dirichlet_form(h).value
    rhs = -float(np.sum(np.pad(h, 1) * apply_generator(h)))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(-3, 3))
def test_dirichlet_form_quadratic_and_constant_shift(seed, c):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(3, 3, 3))
    assert dirichlet_form(c * h).value == pytest.approx(c * c * dirichlet_form(h).value, rel=1e-12, abs=1e-12)
    assert dirichlet_form(h).value >= 0


def test_dirichlet_form_scaled_convention():
    h = np.zeros((3, 3, 3))
    h[1, 1, 1] = 1
    assert dirichlet_form(h, spacing=1).value == pytest.approx(3 * dirichlet_form(h).value)
    assert dirichlet_form(h, spacing=2).value == pytest.approx(dirichlet_form(h, spacing=1).value / 2)


def test_generator_of_equilibrium_potential_is_capacity(T40):
    # -L h_A = e_A, so <h_A, -L h_A> over any region containing A equals cap(A)
    A = sup_ball(1, 3)
    sol = capacity_and_equilibrium(A, T40)
    pts = box([-6] * 3, [6] * 3)
    hv = sol.h(pts).reshape((13,) * 3)
    Lh = apply_generator(hv)[2:-2, 2:-2, 2:-2]
    assert -float(np.sum(hv[1:-1, 1:-1, 1:-1] * Lh)) == pytest.approx(sol.cap, rel=1e-9)


def test_unit_steps_layout():
    s = unit_steps(3)
    assert s.shape == (6, 3)
    np.testing.assert_array_equal(s[:3], np.eye(3, dtype=int))
    np.testing.assert_array_equal(s[3:], -np.eye(3, dtype=int))
