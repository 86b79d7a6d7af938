import numpy as np
import pytest

from rilab import Box, capacity_mc, centered_box, cube_orbit_equilibrium, equilibrium, hitting_potential
from rilab.errors import HaloTooSmallError
from rilab.green import internal_boundary

# Frozen oracle values, computed before the build (tools/oracles.py):
# Fourier quadrature of the lattice Green integral and the classical closed
# form agree on g(0) to 2e-12 in d=3.
G0_D3 = 1.51638605915197802
FAR_CONST_D3 = 0.477464829275686


def test_green_origin_matches_quadrature_oracle(green):
    assert green.g0 == pytest.approx(G0_D3, abs=1e-10)


def test_green_symmetry(green, rng):
    v = rng.integers(-50, 51, size=(200, 3))
    assert np.allclose(green(v), green(-v))
    perm = v[:, [2, 0, 1]]
    assert np.allclose(green(v), green(perm))


def test_green_far_field_limit(green):
    for r in (40, 60, 200, 1000):
        assert green((r, 0, 0)) * r == pytest.approx(FAR_CONST_D3, rel=5e-3)
    # measured crossover error stays within the build rule
    assert green.crossover_rel_error < 1e-4


def test_green_harmonic_off_origin(green, rng):
    steps = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])
    for _ in range(100):
        v = rng.integers(-40, 41, size=3)
        if np.all(v == 0):
            continue
        assert green(v) == pytest.approx(np.mean(green(v + steps)), abs=1e-12)
    # at the origin the defect is exactly one unit of holding time
    assert green.g0 - np.mean(green(steps)) == pytest.approx(1.0, abs=1e-12)


def test_c_star_is_nearest_neighbor_value(green):
    assert green.c_star == pytest.approx(green.g0 - 1.0, abs=1e-12)


def test_equilibrium_empty(green):
    eq = equilibrium(np.zeros((0, 3)), green)
    assert eq.capacity == 0.0
    assert eq.support == []


def test_equilibrium_singleton(green):
    eq = equilibrium(np.array([[5, -3, 2]]), green)
    assert eq.capacity == pytest.approx(1.0 / G0_D3, abs=1e-6)


def test_equilibrium_residual_on_random_sets(green, rng):
    for _ in range(10):
        pts = np.unique(rng.integers(-6, 7, size=(60, 3)), axis=0)
        eq = equilibrium(pts, green)
        h = green.pair_matrix(pts, eq.points) @ eq.masses
        assert np.max(np.abs(h - 1.0)) < 1e-10
        assert np.all(eq.masses >= 0)


def test_equilibrium_support_on_internal_boundary(green):
    box = Box((0, 0, 0), 5)
    eq = equilibrium(box, green)
    bnd = set(map(tuple, internal_boundary(box.points()).tolist()))
    for p, m in eq.support:
        assert p in bnd
        assert m > 0


def test_box_capacity_scaling_bracket(green, cubes):
    caps = {L: cubes.capacity(L) for L in (2, 4, 8, 16)}
    ratios = [caps[L] / L for L in (2, 4, 8, 16)]
    assert max(ratios) / min(ratios) < 4
    assert all(r > 0 for r in ratios)


def test_hitting_potential_basics(green, rng):
    pts = np.unique(rng.integers(-3, 4, size=(25, 3)), axis=0)
    eq = equilibrium(pts, green)
    # equals 1 on the set
    h_on = hitting_potential(eq, pts, green)
    assert np.max(np.abs(h_on - 1.0)) < 1e-10
    # bounded by [0, 1] at random off-set points
    off = rng.integers(-30, 31, size=(200, 3))
    h_off = hitting_potential(eq, off, green)
    assert np.all(h_off >= 0)
    assert np.all(h_off <= 1 + 1e-8)


def test_hitting_potential_far_decay(green):
    eq = equilibrium(np.array([[0, 0, 0]]), green)
    # distance 10x the diameter of a singleton's query scale
    h = hitting_potential(eq, (10, 0, 0), green)
    assert h == pytest.approx(eq.capacity * green((10, 0, 0)), abs=1e-12)
    assert h < 0.05


def test_hitting_monotone_in_set(green, rng):
    small = np.array([[0, 0, 0], [1, 0, 0]])
    big = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 3, 3]])
    eq_s = equilibrium(small, green)
    eq_b = equilibrium(big, green)
    for _ in range(50):
        x = rng.integers(-20, 21, size=3)
        assert hitting_potential(eq_s, x, green) <= hitting_potential(eq_b, x, green) + 1e-9


def test_capacity_monotone_under_inclusion(green, rng):
    for _ in range(100):
        pts = np.unique(rng.integers(-5, 6, size=(12, 3)), axis=0)
        k = rng.integers(1, pts.shape[0] + 1)
        sub = pts[rng.choice(pts.shape[0], size=k, replace=False)]
        assert equilibrium(sub, green).capacity <= equilibrium(pts, green).capacity + 1e-9


def test_capacity_variational_lower_bound(green, rng):
    # cap(A) >= 1 / <rho x rho, g> for any probability measure rho on A,
    # with equality at the normalized equilibrium measure
    for _ in range(5):
        pts = np.unique(rng.integers(-4, 5, size=(20, 3)), axis=0)
        eq = equilibrium(pts, green)
        G = green.pair_matrix(pts)
        rho = np.full(pts.shape[0], 1.0 / pts.shape[0])
        assert eq.capacity >= 1.0 / float(rho @ G @ rho) - 1e-8
        Gb = green.pair_matrix(eq.points)
        rho_eq = eq.normalized_masses()
        assert eq.capacity == pytest.approx(1.0 / float(rho_eq @ Gb @ rho_eq), rel=1e-9)


def test_green_operator_box_scaling(green):
    # (G 1_B)(center) / L^2 stays within a factor 4 across dyadic sides
    vals = []
    for L in (4, 8, 16, 32):
        box = Box((0, 0, 0), L)
        x = (L // 2,) * 3
        vals.append(green.operator_on_box(box, x) / L**2)
    assert max(vals) / min(vals) < 4


def test_capacity_mc_singleton(green):
    est, se = capacity_mc(np.array([[0, 0, 0]]), 20000, centered_box(40, 3), 7, green)
    assert abs(est - 1.0 / G0_D3) < 3 * se


def test_capacity_mc_separation_monotone(green):
    near = np.array([[0, 0, 0], [1, 0, 0]])
    far = np.array([[0, 0, 0], [100, 0, 0]])
    halo = centered_box(160, 3)
    est_near, se_n = capacity_mc(near, 4000, halo, 3, green)
    est_far, se_f = capacity_mc(far, 4000, halo, 3, green)
    # exact values agree and the MC picks up the ordering
    assert equilibrium(near, green).capacity < equilibrium(far, green).capacity
    assert est_near < est_far + 3 * (se_n + se_f)


def test_capacity_mc_subadditive(green, rng):
    halo = centered_box(50, 3)
    for trial in range(3):
        pts = np.unique(rng.integers(-4, 5, size=(10, 3)), axis=0)
        est, se = capacity_mc(pts, 3000, halo, 100 + trial, green)
        singletons = sum(capacity_mc(p[None, :], 3000, halo, 200 + trial, green)[0] for p in pts)
        assert est <= singletons + 3 * se + 0.05 * singletons


def test_capacity_mc_halo_too_small(green):
    with pytest.raises(HaloTooSmallError):
        capacity_mc(np.array([[0, 0, 0]]), 500, centered_box(2, 3), 1, green, precision=1e-9)


def test_cube_orbit_matches_direct_solve(green):
    for L in (3, 5, 8):
        direct = equilibrium(Box((0, 0, 0), L), green)
        orbit = cube_orbit_equilibrium(L, green)
        assert orbit.capacity == pytest.approx(direct.capacity, rel=1e-12)
