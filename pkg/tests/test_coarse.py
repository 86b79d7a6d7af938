import math

import numpy as np
import pytest

from rilab import Box, MadicTree, ScaleConfig, centered_box, equilibrium, tower
from rilab.coarse import (
    BadCounts,
    CaseTag,
    CoarseParams,
    ComplementCounts,
    SummedArea,
    attachment,
    boundary_anchor_candidates,
    build_c_omega,
    classify_goodness_j,
    decay_depth,
    enforce_spacing,
    extract_columns,
    find_bbar,
    maximal_bprimes,
    rarefied_mass_profile,
    sparse_rarefied,
    sparseness_constant,
    thin_capacity,
    union_boundary_points,
    union_capacity,
    verify_contract,
    volume_of_union,
)
from rilab.errors import BaseBoxFailsError, ProjectionTooThinError
from rilab.lattice import grid_boxes_in
from rilab.observables import BoxLabelGrid, build_u1, bubble_set


class RegionCounts:
    """Stub complement counts: the complement is an explicit box list."""

    def __init__(self, boxes):
        self.boxes = boxes

    def complement_sites(self, box):
        return sum(box.intersection_volume(b) for b in self.boxes)


def _tree(L0=1, k=30, depth=2):
    L1 = k * L0
    M = 6
    cfg = ScaleConfig(N=M**depth * L1, d=3, L0=L0, L1=L1, K=100, M=M, ell_n=depth)
    return cfg, MadicTree(cfg)


# -- towers ------------------------------------------------------------------


def test_find_bbar_everything_vacant():
    cfg, tree = _tree()
    b1 = tree.box_at(cfg.ell_n, (0, 0, 0))

    class AllCounts:
        def complement_sites(self, box):
            return box.volume

    assert find_bbar(b1, AllCounts(), tree) == tree.box_at(0, (0, 0, 0))


def test_find_bbar_deep_interior_only():
    # complement is exactly the peeled interior of one bottom box: the bottom
    # box passes the half test (k >= 30), its parent cannot
    cfg, tree = _tree(L0=1, k=30, depth=1)
    b1 = tree.box_at(cfg.ell_n, (0, 0, 0))
    deep = Box(tuple(b + 3 * cfg.L0 for b in b1.base), (cfg.k_ratio - 6) * cfg.L0)
    counts = RegionCounts([deep])
    assert 2 * deep.volume >= b1.volume
    assert find_bbar(b1, counts, tree) == b1


def test_find_bbar_base_fails():
    cfg, tree = _tree(L0=1, k=10, depth=1)  # peeled interior below half at k=10
    b1 = tree.box_at(cfg.ell_n, (0, 0, 0))
    deep = Box(tuple(b + 3 for b in b1.base), cfg.k_ratio - 6)
    with pytest.raises(BaseBoxFailsError):
        find_bbar(b1, RegionCounts([deep]), tree)


def test_maximal_bprimes_single_and_sandwich():
    cfg, tree = _tree(L0=1, k=30, depth=2)
    b1 = tree.box_at(cfg.ell_n, (0, 0, 0))
    deep = Box(tuple(b + 3 for b in b1.base), cfg.k_ratio - 6)
    counts = RegionCounts([deep])
    bps = maximal_bprimes([b1], counts, tree)
    assert len(bps) == 1
    assert bps[0] == tree.parent(b1)
    # the sandwich carried by maximality
    c = counts.complement_sites(bps[0])
    assert bps[0].volume <= 2 * cfg.M**3 * c
    assert 2 * c < bps[0].volume


def test_maximal_bprimes_nested_keeps_outermost(rng):
    cfg, tree = _tree(L0=1, k=30, depth=2)
    bottoms = [tree.box_at(2, (30 * i, 0, 0)) for i in range(6)]
    # make the whole depth-1 box above the first bottoms half-vacant
    parent1 = tree.box_at(1, (0, 0, 0))
    counts = RegionCounts([parent1])
    bps = maximal_bprimes(bottoms, counts, tree)
    assert len(bps) == 1
    assert bps[0] == tree.box_at(0, (0, 0, 0))
    for b in bottoms:
        assert bps[0].contains_box(b)


def test_maximal_bprimes_disjoint_cover(rng):
    cfg, tree = _tree(L0=1, k=30, depth=2)
    picks = []
    for _ in range(12):
        z = tuple(int(rng.integers(-2, 2)) * cfg.L1 for _ in range(3))
        picks.append(tree.box_at(cfg.ell_n, z))
    deep_boxes = [Box(tuple(b + 3 for b in p.base), cfg.k_ratio - 6) for p in picks]
    counts = RegionCounts(deep_boxes)
    bps = maximal_bprimes(picks, counts, tree)
    for i, a in enumerate(bps):
        assert tree.in_root_region(a) or True
        for b in bps[i + 1 :]:
            assert not a.intersects(b)
    for p in picks:
        assert any(bp.contains_box(p) for bp in bps)


# -- patch goodness ------------------------------------------------------------


def test_classify_goodness_thresholds():
    cfg, tree = _tree(L0=2, k=15, depth=1)
    bp = tree.box_at(1, (0, 0, 0))  # side 30, 15^3 L0-boxes
    columns = (bp.volume / cfg.L0**3) ** (2 / 3)
    thr = 0.5 * 1.0 * columns
    assert classify_goodness_j(bp, 0, 1.0, cfg)
    assert classify_goodness_j(bp, math.floor(thr), 1.0, cfg)
    assert not classify_goodness_j(bp, math.floor(thr) + 1, 1.0, cfg)
    # everything bad: spoiled for any feasible c4
    assert not classify_goodness_j(bp, 15**3, 1.0, cfg)


# -- sparse / rarefied -----------------------------------------------------------


def test_sparseness_constant_value(green, cubes):
    eta = sparseness_constant(green, 6, (1, 8), cubes=cubes)
    assert eta == pytest.approx(1.0 / (green.c_star * 216), rel=1e-9)
    assert eta < cubes.capacity(1)


def test_sparse_rarefied_literal_definition(green, cubes, rng):
    cfg, tree = _tree(L0=1, k=4, depth=3)
    # a handful of disjoint bottom boxes clustered near the origin
    members = []
    for i in range(4):
        for j in range(2):
            members.append(tree.box_at(3, (4 * i, 4 * j, 0)))
    smap = sparse_rarefied(tree, members, green, CoarseParams(), cubes=cubes)
    # patches themselves are never sparse
    for bp in members:
        assert not smap.is_sparse(bp)
    # literal recursion: rarefied <=> sparse and parent rarefied
    for (side, base) in smap.rarefied:
        box = Box(base, side)
        depth = tree.depth_of(box)
        expect = smap.is_sparse(box)
        if depth > 0:
            expect = expect and smap.is_rarefied(tree.parent(box))
        assert smap.is_rarefied(box) == expect
    # a faraway box containing no patch is sparse
    far = tree.box_at(3, (4 * 6**3 // 2, 0, 0))
    far_map = sparse_rarefied(tree, members + [far], green, CoarseParams(), cubes=cubes)
    assert not far_map.is_sparse(far)


def test_rarefied_mass_monotone(green, cubes, rng):
    cfg, tree = _tree(L0=1, k=4, depth=3)
    members = []
    taken = []
    for _ in range(10):
        depth = int(rng.integers(1, 4))
        side = tree.side_at_depth(depth)
        z = tuple(int(rng.integers(0, cfg.N // side)) * side for _ in range(3))
        cand = Box(z, side)
        if any(cand.intersects(t) for t in taken):
            continue
        taken.append(cand)
        members.append(cand)
    smap = sparse_rarefied(tree, members, green, CoarseParams(), cubes=cubes)
    masses = rarefied_mass_profile(tree, members, smap, range(0, 4))
    assert all(a >= b for a, b in zip(masses, masses[1:]))


def test_volume_capacity_bound_random_sets(green, rng):
    # |A|/|B| <= c6 cap(A)/|B|^{(d-2)/d}: the measured constant is finite and
    # stable across box sizes
    worst = {}
    for side in (6, 10, 14):
        B = Box((0, 0, 0), side)
        ratios = []
        for _ in range(67):
            pts = B.points()
            take = rng.random(pts.shape[0]) < rng.uniform(0.05, 0.6)
            if not take.any():
                continue
            A = pts[take]
            cap = equilibrium(A, green).capacity
            ratios.append((A.shape[0] / B.volume) * B.volume ** (1 / 3) / cap)
        worst[side] = max(ratios)
    vals = list(worst.values())
    assert max(vals) < math.inf
    assert max(vals) / min(vals) < 2.5


def test_decay_depth():
    # smallest k with c5 (36/28)^{-k} <= eps/2
    assert decay_depth(1.0, 1.0, 6, 3, 10) == math.ceil(math.log(2 / 1.0) / math.log(36 / 28))
    assert decay_depth(1e-6, 1.0, 6, 3, 4) == 4  # capped at the tree depth
    assert decay_depth(10.0, 1.0, 6, 3, 10) == 0


# -- attachment -------------------------------------------------------------------


def _random_madic_family(tree, rng, n_target=12):
    cfg = tree.cfg
    taken = []
    guard = 0
    while len(taken) < n_target and guard < 200:
        guard += 1
        depth = int(rng.integers(0, cfg.ell_n + 1))
        side = tree.side_at_depth(depth)
        span = tree.root_region.side // side
        z = tuple(
            tree.root_region.base[a] + int(rng.integers(0, span)) * side for a in range(3)
        )
        cand = Box(z, side)
        if any(cand.intersects(t) for t in taken):
            continue
        taken.append(cand)
    return sorted(taken, key=lambda b: (-b.side, b.base))


def test_attachment_identity_when_far():
    cfg, tree = _tree(L0=1, k=4, depth=1)
    boxes = [Box((0, 0, 0), 4), Box((12, 0, 0), 4), Box((0, 16, 0), 4)]
    phi = attachment(boxes)
    assert phi == [0, 1, 2]


def test_attachment_one_giant():
    boxes = [Box((0, 0, 0), 24)] + [Box((i * 4, 4, 4), 4) for i in range(4)]
    phi = attachment(boxes)
    assert phi == [0, 0, 0, 0, 0]


def test_attachment_properties_random(rng):
    cfg, tree = _tree(L0=1, k=4, depth=2)
    for _ in range(100):
        boxes = _random_madic_family(tree, rng)
        if not boxes:
            continue
        phi = attachment(boxes)
        n = len(boxes)
        # idempotence
        assert all(phi[phi[i]] == phi[i] for i in range(n))
        for i in range(n):
            r = phi[i]
            # attached boxes sit inside the root's own-size neighborhood
            assert boxes[r].inflate(boxes[r].side).contains_box(boxes[i])
        roots = sorted(set(phi))
        for ai in roots:
            for bi in roots:
                if ai >= bi:
                    continue
                dist = boxes[ai].sup_distance(boxes[bi])
                assert dist >= max(boxes[ai].side, boxes[bi].side)


# -- columns and thinning -----------------------------------------------------------


def test_extract_columns_slab_counts():
    cfg, tree = _tree(L0=1, k=30, depth=1)  # Kbar = 203
    B = Box((0, 0, 0), 500)
    slab = [Box((0, y, z), 1) for y in range(0, 500, 1) for z in range(0, 500, 2)]
    out = extract_columns(slab, B, cfg, a_min=0.0)
    # brute-force densest residue class count
    bases = np.array([b.base for b in slab])
    proj = bases[:, 1:]
    classes = proj % 203
    _, counts = np.unique(classes, axis=0, return_counts=True)
    assert out["kept_columns"] == counts.max()
    assert out["kept_columns"] >= out["n_columns"] / 203**2
    sel = np.array([b.base for b in out["boxes"]])
    for i in range(sel.shape[0]):
        for j in range(i + 1, sel.shape[0]):
            assert np.abs(sel[i, 1:] - sel[j, 1:]).max() >= 203


def test_extract_columns_pigeonhole_random(rng):
    cfg, tree = _tree(L0=1, k=30, depth=1)
    B = Box((-250, -250, -250), 500)
    pts = rng.integers(-250, 250, size=(400, 3))
    boxes = [Box(tuple(p), 1) for p in {tuple(q) for q in pts.tolist()}]
    out = extract_columns(boxes, B, cfg, a_min=0.0)
    assert out["kept_columns"] >= out["n_columns"] / 203 ** 2
    assert out["kept_columns"] >= 1


def test_extract_columns_too_thin():
    cfg, tree = _tree(L0=1, k=30, depth=1)
    B = Box((0, 0, 0), 500)
    with pytest.raises(ProjectionTooThinError):
        extract_columns([Box((0, 0, 0), 1)], B, cfg, a_min=0.5)


def test_thin_capacity_single_box(green, cubes):
    cfg, tree = _tree(L0=2, k=15, depth=1)
    cap_b0 = cubes.capacity(cfg.L0)
    out = thin_capacity([Box((0, 0, 0), 2)], green, cfg, cap_b0, CoarseParams())
    assert out["boxes"] == [Box((0, 0, 0), 2)]
    assert out["cap_ratio"] == 1.0
    assert out["count_ratio"] == pytest.approx(1.0, rel=1e-9)


def test_thin_capacity_separated_keeps_capacity(green, cubes):
    cfg, tree = _tree(L0=2, k=15, depth=1)
    cap_b0 = cubes.capacity(2)
    boxes = [Box((100 * i, 0, 0), 2) for i in range(8)]  # separation 50 L0
    params = CoarseParams(thin_budget_factor=1.1)
    out = thin_capacity(boxes, green, cfg, cap_b0, params)
    assert out["cap_ratio"] >= 0.9
    assert out["count_ratio"] <= params.thin_budget_factor + 1e-9


def test_thin_capacity_dense_cluster_count_bound(green, cubes):
    cfg, tree = _tree(L0=1, k=30, depth=1)  # Kbar L0 = 203
    cap_b0 = cubes.capacity(1)
    boxes = [Box((203 * i, 203 * j, 0), 1) for i in range(3) for j in range(3)]
    params = CoarseParams()
    out = thin_capacity(boxes, green, cfg, cap_b0, params)
    assert len(out["boxes"]) <= max(1, math.floor(params.thin_budget_factor * out["cap_total"] / cap_b0))
    assert out["count_ratio"] <= params.thin_budget_factor + 1e-9
    assert out["cap_ratio"] > 0.5


def test_union_capacity_matches_direct(green):
    boxes = [Box((0, 0, 0), 3), Box((10, 0, 0), 3)]
    pts = np.concatenate([b.points() for b in boxes])
    direct = equilibrium(pts, green).capacity
    cap, method = union_capacity(boxes, green, CoarseParams())
    assert method == "exact"
    assert cap == pytest.approx(direct, rel=1e-10)


def test_union_boundary_merges_touching_boxes():
    a = Box((0, 0, 0), 4)
    b = Box((4, 0, 0), 4)  # touching: shared face is interior of the union
    pts = union_boundary_points([a, b])
    keys = set(map(tuple, pts.tolist()))
    assert (3, 1, 1) not in keys
    assert (4, 1, 1) not in keys
    assert (0, 1, 1) in keys


def test_volume_of_union_overlaps(rng):
    boxes = [Box((0, 0, 0), 6), Box((3, 3, 3), 6), Box((20, 0, 0), 2)]
    lo = np.array([-2, -2, -2])
    mask = np.zeros((30, 14, 14), dtype=bool)
    for b in boxes:
        sl = tuple(slice(bb - l, bb - l + b.side) for bb, l in zip(b.base, lo))
        mask[sl] = True
    assert volume_of_union(boxes) == int(mask.sum())


def test_enforce_spacing():
    boxes = [Box((0, 0, 0), 1), Box((100, 0, 0), 1), Box((150, 0, 0), 1), Box((400, 0, 0), 1)]
    kept = enforce_spacing(boxes, 203)
    assert [b.base[0] for b in kept] == [0, 400]


# -- the full construction -----------------------------------------------------------


def _small_pipeline_cfg():
    # smallest hierarchy with one level: L0=2, L1=4, top side 24
    return ScaleConfig(N=24, d=3, L0=2, L1=4, K=100, M=6, ell_n=1)


def _fresh_grid(cfg):
    grid = BoxLabelGrid.create(cfg)
    grid.cap_d0[:] = 10.0
    grid.good[:] = True
    grid.n_u[:] = 8.0  # above beta cap for beta = 0.5
    return grid


def test_build_c_omega_empty_case(green, cubes):
    cfg = _small_pipeline_cfg()
    grid = _fresh_grid(cfg)
    grid.in_u1[:] = True
    grid.in_bub[:] = False
    tree = MadicTree(cfg)
    res = build_c_omega(grid, tree, eps=0.1, beta=0.5, green=green, cubes=cubes)
    assert res.tag == CaseTag.EMPTY
    assert res.boxes == []
    rep = verify_contract(res, grid, green, 0.1, cfg.N, beta=0.5)
    assert rep["quality_exact"] and rep["spacing_exact"]
    assert rep["c0_empirical"] == 0.0


def test_build_c_omega_top_scale(green, cubes):
    cfg = _small_pipeline_cfg()
    grid = _fresh_grid(cfg)
    # U1 misses a thick slab inside [-3N, 3N]: towers reach the top scale
    from rilab.coarse import SummedArea
    from rilab.observables import outside_mask

    n0 = grid.b0_shape[0]
    coords = (np.arange(n0) + grid.b0_lo) * cfg.L0
    inside3n = ~outside_mask(grid)
    slab = np.zeros(grid.b0_shape, dtype=bool)
    slab[np.abs(coords) <= cfg.N] = True  # |x| <= N, all y, z
    grid.in_u1[:] = ~(slab & inside3n)
    grid.in_bub[:] = True
    tree = MadicTree(cfg)
    res = build_c_omega(grid, tree, eps=0.05, beta=0.5, green=green, cubes=cubes)
    assert res.tag == CaseTag.TOP_SCALE
    assert len(res.boxes) >= 1
    rep = verify_contract(res, grid, green, 0.05, cfg.N, beta=0.5)
    assert rep["quality_exact"]
    assert rep["spacing_exact"]
    assert rep["c0_empirical"] > 0
    assert rep["n_threshold_warning"]  # desk-scale N cannot meet the volume budget


def test_build_c_omega_sub_scale(green, cubes):
    cfg = _small_pipeline_cfg()
    grid = _fresh_grid(cfg)
    # complement pockets: a few isolated L1-boxes inside D_N
    grid.in_u1[:] = True
    tree = MadicTree(cfg)
    pockets = [Box((0, 0, 0), 4), Box((-8, -8, -8), 4), Box((8, 8, 8), 4)]
    for p in pockets:
        idx = grid.b0_index(p.base)
        sl = tuple(slice(i, i + 2) for i in idx)
        grid.in_u1[sl] = False
    grid.in_bub[:] = False
    for p in pockets:
        grid.in_bub[grid.b1_index(p.base)] = True
    res = build_c_omega(grid, tree, eps=0.0005, beta=0.5, green=green, cubes=cubes)
    assert res.tag == CaseTag.SUB_SCALE
    assert len(res.boxes) >= 1
    rep = verify_contract(res, grid, green, 0.0005, cfg.N, beta=0.5)
    assert rep["quality_exact"]
    assert rep["spacing_exact"]
    assert rep["c0_empirical"] > 0


def test_build_c_omega_quality_filter(green, cubes):
    # boxes failing the count threshold are never selected
    cfg = _small_pipeline_cfg()
    grid = _fresh_grid(cfg)
    grid.n_u[:] = 1.0  # below beta cap = 5: no eligible anchors anywhere
    grid.in_u1[:] = False
    grid.in_bub[:] = True
    tree = MadicTree(cfg)
    res = build_c_omega(grid, tree, eps=0.05, beta=0.5, green=green, cubes=cubes)
    assert res.boxes == []
    assert not res.diagnostics["conforming"]


def test_summed_area_random(rng):
    arr = rng.integers(0, 3, size=(7, 8, 9))
    sat = SummedArea(arr)
    for _ in range(50):
        lo = [int(rng.integers(0, s)) for s in arr.shape]
        hi = [int(rng.integers(l, s + 1)) for l, s in zip(lo, arr.shape)]
        assert sat.box_sum(lo, hi) == int(
            arr[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]].sum()
        )
