import math

import numpy as np
import pytest

from rilab import Box, MadicTree, ScaleConfig, centered_box, deep_interior, make_scales, smallest_branching, tower
from rilab.errors import ScalesDegenerateError
from rilab.lattice import grid_boxes_in, grid_boxes_meeting


def test_branching_d3():
    # smallest M >= 4 with M^2 > 28
    assert smallest_branching(3) == 6
    assert smallest_branching(4) == 10


def test_make_scales_L0():
    cfg = make_scales(1024, 3)
    assert cfg.L0 == 32


def test_make_scales_L1_brute_force():
    # largest multiple of L0 below N^{2/d} (log N)^{1/d}, checked exhaustively
    cfg = make_scales(1024, 3)
    target = 1024 ** (2 / 3) * math.log(1024) ** (1 / 3)
    best = max(k for k in range(1, 10_000) if k * cfg.L0 <= target)
    assert cfg.L1 == best * cfg.L0
    assert cfg.M ** cfg.ell_n * cfg.L1 <= 1024 < cfg.M ** (cfg.ell_n + 1) * cfg.L1


@pytest.mark.parametrize("N", [16, 24, 32, 100, 1024, 4096])
def test_make_scales_consistent(N):
    cfg = make_scales(N, 3)
    assert cfg.L1 % cfg.L0 == 0
    assert cfg.L0 == int(np.floor(N ** 0.5 + 1e-9)) or cfg.L0 ** 2 <= N < (cfg.L0 + 1) ** 2


def test_make_scales_rejects_degenerate():
    with pytest.raises((ScalesDegenerateError, ValueError)):
        make_scales(1, 3)


def test_box_basics():
    b = Box((-2, -2, -2), 5)
    assert b.volume == 125
    assert b.contains_point((0, 0, 0))
    assert not b.contains_point((3, 0, 0))
    assert b.contains_box(Box((-1, -1, -1), 3))
    assert b.inflate(1) == Box((-3, -3, -3), 7)
    assert b.points().shape == (125, 3)
    assert b.boundary_points().shape == (125 - 27, 3)


def test_box_sup_distance():
    a = Box((0, 0, 0), 4)
    assert a.sup_distance(Box((4, 0, 0), 4)) == 1
    assert a.sup_distance(Box((8, 0, 0), 4)) == 5
    assert a.sup_distance(Box((2, 2, 2), 4)) == 0


def test_box_overflow_guard():
    with pytest.raises(OverflowError):
        Box((2**62, 0, 0), 4)


def _synthetic_cfg(L0=4, k=10, depth=1, d=3):
    L1 = k * L0
    M = smallest_branching(d)
    N = M**depth * L1
    return ScaleConfig(N=N, d=d, L0=L0, L1=L1, K=100, M=M, ell_n=depth)


def test_deep_interior_small_ratio_empty():
    cfg = _synthetic_cfg(k=6)
    b1 = Box((0, 0, 0), cfg.L1)
    assert deep_interior(b1, cfg) == []


def test_deep_interior_counts_against_brute_force():
    cfg = _synthetic_cfg(k=10)
    b1 = Box((cfg.L1, 0, -cfg.L1), cfg.L1)
    got = set(b.base for b in deep_interior(b1, cfg))
    # brute force: every L0-box whose 7L0 query box fits inside b1
    expect = set()
    for bx in grid_boxes_in(b1.inflate(0), cfg.L0):
        query = Box(tuple(c - 3 * cfg.L0 for c in bx.base), 7 * cfg.L0)
        if b1.contains_box(query):
            expect.add(bx.base)
    assert got == expect
    assert len(got) == 4**3


def test_deep_interior_disjoint_and_contained():
    cfg = _synthetic_cfg(k=12)
    b1 = Box((0, 0, 0), cfg.L1)
    boxes = deep_interior(b1, cfg)
    for i, a in enumerate(boxes):
        assert b1.contains_box(a)
        for b in boxes[i + 1 :]:
            assert not a.intersects(b)


def test_deep_fraction_threshold():
    # ((k-6)/k)^3 >= 3/4 first holds at k = 66 in d = 3
    cfg65 = _synthetic_cfg(L0=1, k=65)
    cfg66 = _synthetic_cfg(L0=1, k=66)
    assert cfg65.deep_interior_fraction() < 0.75
    assert cfg66.deep_interior_fraction() >= 0.75


def test_madic_partition_and_tower():
    cfg = _synthetic_cfg(k=7, depth=2)
    tree = MadicTree(cfg)
    assert tree.side_at_depth(0) == cfg.M**2 * cfg.L1
    # children partition the parent
    top = tree.boxes_at_depth(0)[0]
    kids = tree.children(top)
    assert len(kids) == cfg.M**3
    assert sum(k.volume for k in kids) == top.volume
    for i, a in enumerate(kids):
        assert top.contains_box(a)
        for b in kids[i + 1 :]:
            assert not a.intersects(b)
    # tower from the bottom
    bottom = tree.box_at(cfg.ell_n, (1, 2, 3))
    tw = tower(bottom, tree)
    assert len(tw) == cfg.ell_n + 1
    assert tw[-1] == bottom
    for a, b in zip(tw[:-1], tw[1:]):
        assert a.contains_box(b)
        assert a.volume == cfg.M**3 * b.volume


def test_tower_depth0_is_identity():
    cfg = _synthetic_cfg(k=7, depth=0)
    tree = MadicTree(cfg)
    b = tree.box_at(0, (0, 0, 0))
    assert tower(b, tree) == [b]


def test_root_region_bounds():
    for depth in (0, 1, 2):
        cfg = _synthetic_cfg(k=7, depth=depth)
        tree = MadicTree(cfg)
        n = cfg.N
        dn = centered_box(n, 3)
        assert tree.root_region.contains_box(dn)
        assert centered_box(2 * n, 3).contains_box(tree.root_region)
        assert tree.root_region.volume <= 2**3 * dn.volume


def test_l1_box_is_union_of_l0_boxes():
    cfg = _synthetic_cfg(k=9)
    b1 = Box((cfg.L1, -cfg.L1, 0), cfg.L1)
    small = grid_boxes_in(b1, cfg.L0)
    assert len(small) == cfg.k_ratio**3
    assert sum(b.volume for b in small) == b1.volume


def test_grid_boxes_meeting():
    region = Box((-3, -3, -3), 7)  # sites -3..3, so bases -4 and 0 per axis
    boxes = grid_boxes_meeting(region, 4)
    for b in boxes:
        assert b.intersects(region)
    assert len(boxes) == 2**3
    full = grid_boxes_meeting(Box((-4, -4, -4), 9), 4)
    assert len(full) == 3**3
