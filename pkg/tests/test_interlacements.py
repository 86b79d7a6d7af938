import math

import numpy as np
import pytest
from scipy import stats

from rilab import Box, centered_box
from rilab.errors import BiasBudgetError, GeometryError
from rilab.green import hitting_potential
from rilab.interlacements import (
    MASTER_STREAM,
    _philox,
    excursions,
    local_level,
    occupation,
    sample_soup,
    vacant_set,
)

W3 = centered_box(1, 3)  # the 3^3 window used throughout
G0 = 1.51638605915197802


def test_empty_soup_at_zero_level(cubes):
    soup = sample_soup(W3, 0.0, 8.0, 5, cubes)
    assert soup.trajectories == []
    assert vacant_set(soup, 0.0).count == 27
    assert occupation(soup, 0.0).total() == 0.0


def test_determinism_bit_identical(cubes):
    a = sample_soup(W3, 1.3, 16.0, 99, cubes, bias_budget=1.0)
    b = sample_soup(W3, 1.3, 16.0, 99, cubes, bias_budget=1.0)
    assert len(a.trajectories) == len(b.trajectories)
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert ta.label == tb.label
        assert np.array_equal(ta.positions, tb.positions)
        assert np.array_equal(ta.holds, tb.holds)


def test_bias_budget_enforced(cubes):
    with pytest.raises(BiasBudgetError):
        sample_soup(W3, 2.0, 4.0, 1, cubes, bias_budget=1e-6)


def test_trajectories_start_on_boundary_and_end_outside(cubes):
    soup = sample_soup(W3, 2.0, 12.0, 3, cubes, bias_budget=1.0)
    for t in soup.trajectories:
        assert W3.contains_point(tuple(t.entry))
        assert np.array_equal(t.positions[0], t.entry)
        assert not soup.halo.contains_point(tuple(t.positions[-1]))
        # all but the last position stay in the halo
        inside = soup.halo.contains_points_mask(t.positions[:-1].astype(np.int64))
        assert inside.all()


def test_poisson_count_mean_and_gof(cubes):
    # trajectory counts over many seeds against Poisson(u cap(W))
    u = 1.0
    capw = cubes.for_box(W3).capacity
    mean = u * capw
    n = 6000
    counts = np.array([_philox(s, MASTER_STREAM).poisson(mean) for s in range(n)])
    assert abs(counts.mean() - mean) < 3 * math.sqrt(mean / n)
    kmax = int(stats.poisson.ppf(0.999, mean)) + 1
    observed = np.bincount(np.minimum(counts, kmax), minlength=kmax + 1)
    probs = stats.poisson.pmf(np.arange(kmax + 1), mean)
    probs[kmax] = 1.0 - probs[:kmax].sum()
    chi2 = float(((observed - n * probs) ** 2 / (n * probs)).sum())
    pval = stats.chi2.sf(chi2, df=kmax)
    assert pval > 0.01


def test_entry_law_matches_equilibrium(cubes, green):
    # empirical entry distribution vs the normalized equilibrium measure;
    # total-variation distance within a 3 sigma multinomial bootstrap band
    u, n_seeds = 2.0, 1200
    eq = cubes.for_box(W3)
    probs = eq.masses / eq.capacity
    key = {tuple(p): i for i, p in enumerate(eq.points.tolist())}
    counts = np.zeros(len(probs))
    total = 0
    for seed in range(n_seeds):
        soup = sample_soup(W3, u, 8.0, seed, cubes, time_mode="discrete", bias_budget=1.0)
        for t in soup.trajectories:
            counts[key[tuple(int(c) for c in t.entry)]] += 1
            total += 1
    tv = 0.5 * np.abs(counts / total - probs).sum()
    boot = np.random.default_rng(0)
    tvs = [
        0.5 * np.abs(boot.multinomial(total, probs) / total - probs).sum() for _ in range(300)
    ]
    assert tv < np.mean(tvs) + 3 * np.std(tvs)


def test_vacancy_law_quick(cubes, green):
    # P[0 vacant] ~ exp(-u cap({0})); a slice of the full acceptance run
    u, n = 1.0, 1500
    vac = 0
    for seed in range(n):
        soup = sample_soup(W3, u, 30.0, seed, cubes, time_mode="discrete", bias_budget=1.0)
        hit = any(bool(np.all(t.positions == 0, axis=1).any()) for t in soup.trajectories)
        vac += not hit
    target = math.exp(-u / G0)
    sigma = math.sqrt(target * (1 - target) / n)
    assert abs(vac / n - target) < 3 * sigma + soup.bias_bound


def test_occupation_monotone_and_zero(cubes):
    soup = sample_soup(W3, 2.0, 12.0, 17, cubes, bias_budget=1.0)
    assert occupation(soup, 0.0).total() == 0.0
    f1 = occupation(soup, 1.0)
    f2 = occupation(soup, 2.0)
    pts = W3.points()
    assert np.all(f1.values_at(pts) <= f2.values_at(pts) + 1e-12)


def test_occupation_mean_is_level(cubes):
    u, n = 1.0, 600
    tot = 0.0
    for seed in range(n):
        soup = sample_soup(W3, u, 30.0, seed, cubes, bias_budget=1.0)
        tot += occupation(soup, u).value((0, 0, 0))
    # Var(L_0) is about 2 g(0) u per seed
    sigma = math.sqrt(2 * G0 * u / n)
    assert abs(tot / n - u) < 3 * sigma + 0.02


def test_vacant_set_monotone_in_level(cubes):
    soup = sample_soup(W3, 2.0, 12.0, 21, cubes, time_mode="discrete", bias_budget=1.0)
    v1 = vacant_set(soup, 0.7)
    v2 = vacant_set(soup, 2.0)
    assert np.all(v1.mask >= v2.mask)
    assert vacant_set(soup, 0.0).count == W3.volume


def test_label_thinning_distribution(cubes):
    # occupation at the origin: soup at level u filtered to v vs fresh soup at v
    u, v, n = 2.0, 0.8, 400
    filtered, direct = [], []
    for seed in range(n):
        s_u = sample_soup(W3, u, 16.0, seed, cubes, bias_budget=1.0)
        filtered.append(occupation(s_u, v).value((0, 0, 0)))
        s_v = sample_soup(W3, v, 16.0, 10_000 + seed, cubes, bias_budget=1.0)
        direct.append(occupation(s_v, v).value((0, 0, 0)))
    res = stats.ks_2samp(filtered, direct)
    assert res.pvalue > 0.01


def test_excursions_geometry_error(cubes):
    soup = sample_soup(W3, 1.0, 12.0, 2, cubes, bias_budget=1.0)
    with pytest.raises(GeometryError):
        excursions(soup, centered_box(5, 3), centered_box(3, 3), 1.0)


def test_excursions_count_monotone_in_level(cubes):
    soup = sample_soup(W3, 2.0, 20.0, 13, cubes, bias_budget=1.0)
    inner = centered_box(1, 3)
    outer = centered_box(8, 3)
    counts = [excursions(soup, inner, outer, v).count for v in (0.0, 0.5, 1.0, 1.5, 2.0)]
    assert counts[0] == 0
    assert all(a <= b for a, b in zip(counts, counts[1:]))
    assert all(isinstance(c, int) for c in counts)


def test_excursion_ordering_and_segments(cubes):
    soup = sample_soup(W3, 2.0, 20.0, 29, cubes, bias_budget=1.0)
    inner = centered_box(1, 3)
    outer = centered_box(7, 3)
    rec = excursions(soup, inner, outer, 2.0)
    labels = [s.label for s in rec.segments]
    assert labels == sorted(labels)
    for seg in rec.segments:
        assert inner.contains_point(tuple(seg.positions[0]))
        # segment leaves the outer box exactly at its last position, unless
        # the trajectory was killed first
        interior = outer.contains_points_mask(seg.positions[:-1].astype(np.int64))
        tail_inside = bool(outer.contains_point(tuple(seg.positions[-1])))
        assert interior.all() or not tail_inside


def test_excursions_per_hit_approach_one_with_K(cubes, green):
    # E[N(inner)] / (u cap(inner)) decreases toward 1 as the outer box grows
    u = 1.5
    inner = centered_box(1, 3)
    cap_inner = cubes.capacity(3)
    ratios = []
    for K in (5, 10, 20):
        outer = centered_box(K * 3, 3)
        total = 0
        n = 150
        for seed in range(n):
            soup = sample_soup(W3, u, max(4.0, (2 * K * 3 + 6) / 3), seed, cubes, time_mode="discrete", bias_budget=1.0)
            total += excursions(soup, inner, outer, u).count
        ratios.append(total / n / (u * cap_inner))
    assert ratios[0] > ratios[1] > ratios[2]
    assert ratios[2] < 1.25


def test_local_level_zero_iff_untouched(cubes):
    soup = sample_soup(W3, 0.0, 8.0, 4, cubes)
    assert local_level(soup, W3, centered_box(6, 3), cubes) == 0.0
    soup = sample_soup(W3, 2.0, 12.0, 6, cubes, bias_budget=1.0)
    lvl = local_level(soup, W3, centered_box(6, 3), cubes)
    touched = any(W3.contains_points_mask(t.positions.astype(np.int64)).any() for t in soup.trajectories)
    assert (lvl > 0) == touched


def test_bias_bound_covers_observed_discrepancy(cubes):
    # high-precision vacancy run with a deliberately tight halo: the reported
    # bound must cover the systematic part of the error
    u, n = 1.0, 4000
    vac = 0
    bias = None
    for seed in range(n):
        soup = sample_soup(W3, u, 6.0, seed, cubes, time_mode="discrete", bias_budget=1.0)
        bias = soup.bias_bound
        hit = any(bool(np.all(t.positions == 0, axis=1).any()) for t in soup.trajectories)
        vac += not hit
    target = math.exp(-u / G0)
    sigma = math.sqrt(target * (1 - target) / n)
    assert vac / n - target <= bias + 3 * sigma
    assert vac / n >= target - 3 * sigma  # truncation only inflates vacancy
