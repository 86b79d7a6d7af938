"""Integer-lattice geometry: boxes, the two length scales, and the M-adic box hierarchy.

Everything downstream (classification grids, coarse graining, capacity bookkeeping)
is phrased in terms of axis-aligned cubes on Z^d, so this module is deliberately
minimal: points are tuples of ints, boxes are ``base + [0, side)^d``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ScalesDegenerateError

# Headroom below 2^63 so that box arithmetic (inflation, neighbor offsets)
# cannot wrap in int64.
COORD_LIMIT = 2**62

Point = tuple  # a site of Z^d, tuple of d ints


def _check_bounded(*values):
    for v in values:
        if abs(int(v)) >= COORD_LIMIT:
            raise OverflowError("lattice coordinate exceeds the signed-64-bit headroom")


@dataclass(frozen=True)
class Box:
    """Axis-aligned cube ``base + [0, side)^d`` of lattice sites."""

    base: Point
    side: int

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(int(b) for b in self.base))
        if self.side < 1:
            raise ValueError("box side must be >= 1")
        for b in self.base:
            _check_bounded(b, b + self.side)

    @property
    def d(self):
        return len(self.base)

    @property
    def volume(self):
        return self.side ** self.d

    @property
    def lo(self):
        return self.base

    @property
    def hi(self):
        """Exclusive upper corner."""
        return tuple(b + self.side for b in self.base)

    @property
    def center(self):
        """Geometric center (floats; lattice boxes of even side have no center site)."""
        return tuple(b + (self.side - 1) / 2.0 for b in self.base)

    def contains_point(self, x) -> bool:
        return all(b <= xi < b + self.side for b, xi in zip(self.base, x))

    def contains_box(self, other: "Box") -> bool:
        return all(
            b <= ob and ob + other.side <= b + self.side
            for b, ob in zip(self.base, other.base)
        )

    def intersects(self, other: "Box") -> bool:
        return all(
            max(a, b) < min(a + self.side, b + other.side)
            for a, b in zip(self.base, other.base)
        )

    def intersection_volume(self, other: "Box") -> int:
        vol = 1
        for a, b in zip(self.base, other.base):
            w = min(a + self.side, b + other.side) - max(a, b)
            if w <= 0:
                return 0
            vol *= w
        return vol

    def inflate(self, margin: int) -> "Box":
        """Sup-norm ``margin``-neighborhood, again a box."""
        _check_bounded(margin)
        return Box(tuple(b - margin for b in self.base), self.side + 2 * margin)

    def translate(self, offset) -> "Box":
        return Box(tuple(b + int(o) for b, o in zip(self.base, offset)), self.side)

    def sup_distance(self, other: "Box") -> int:
        """Mutual sup-norm distance between the two site sets (0 if they meet)."""
        dist = 0
        for a, b in zip(self.base, other.base):
            gap = max(a - (b + other.side - 1), b - (a + self.side - 1), 0)
            dist = max(dist, gap)
        return dist

    def points(self) -> np.ndarray:
        """All sites as an (volume, d) int64 array, lexicographic order."""
        axes = [np.arange(b, b + self.side, dtype=np.int64) for b in self.base]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def boundary_points(self) -> np.ndarray:
        """Internal boundary: sites of the box with a neighbor outside."""
        if self.side <= 2:
            return self.points()
        pts = self.points()
        rel = pts - np.asarray(self.base, dtype=np.int64)
        on_edge = np.any((rel == 0) | (rel == self.side - 1), axis=1)
        return pts[on_edge]

    def index_of(self, pts: np.ndarray) -> np.ndarray:
        """Flat C-order index of sites inside the box (caller checks membership)."""
        rel = np.asarray(pts, dtype=np.int64) - np.asarray(self.base, dtype=np.int64)
        idx = rel[..., 0]
        for k in range(1, self.d):
            idx = idx * self.side + rel[..., k]
        return idx

    def contains_points_mask(self, pts: np.ndarray) -> np.ndarray:
        rel = np.asarray(pts, dtype=np.int64) - np.asarray(self.base, dtype=np.int64)
        return np.all((rel >= 0) & (rel < self.side), axis=-1)


def centered_box(radius: int, d: int) -> Box:
    """The closed sup-norm ball [-radius, radius]^d as a Box."""
    return Box((-radius,) * d, 2 * radius + 1)


@dataclass(frozen=True)
class ScaleConfig:
    """The scale parameters of one experiment.

    L0 and L1 are the box scales, K sets the query-box extent (Kbar = 2K + 3 is
    the separation unit), M the hierarchy branching, ell_n the hierarchy depth.
    """

    N: int
    d: int
    L0: int
    L1: int
    K: int
    M: int
    ell_n: int

    def __post_init__(self):
        if self.d < 3:
            raise ValueError("dimension must be >= 3")
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if self.L0 < 1 or self.L1 < 1:
            raise ValueError("scales must be positive")
        if self.L1 % self.L0 != 0:
            raise ValueError("L1 must be a multiple of L0")
        if self.K < 100:
            raise ValueError("K must be >= 100")
        if self.M < 4 or self.M * self.M <= 3**self.d + 1:
            raise ValueError("M must satisfy M >= 4 and M^2 > 3^d + 1")
        if self.ell_n < 0:
            raise ValueError("ell_n must be >= 0")
        if not (self.M**self.ell_n * self.L1 <= self.N < self.M ** (self.ell_n + 1) * self.L1):
            raise ValueError("ell_n inconsistent with N and L1")

    @property
    def Kbar(self):
        return 2 * self.K + 3

    @property
    def k_ratio(self):
        """L1 / L0."""
        return self.L1 // self.L0

    def deep_interior_fraction(self) -> float:
        """Volume fraction of an L1-box kept by deep_interior."""
        k = self.k_ratio
        return (max(k - 6, 0) / k) ** self.d


def smallest_branching(d: int) -> int:
    """Smallest integer M >= 4 with M^2 > 3^d + 1."""
    M = 4
    while M * M <= 3**d + 1:
        M += 1
    return M


def _int_root(n: int, p: int) -> int:
    """floor(n ** (1/p)) computed exactly."""
    r = int(round(n ** (1.0 / p)))
    while r**p > n:
        r -= 1
    while (r + 1) ** p <= n:
        r += 1
    return r


def make_scales(N: int, d: int, K: int = 100) -> ScaleConfig:
    """Derive the two length scales and hierarchy depth for box size N.

    L0 = floor(N^{1/(d-1)}); L1 = k L0 with k the largest integer such that
    k L0 <= N^{2/d} (log N)^{1/d}; M the smallest branching admissible in
    dimension d; ell_n the largest depth with M^ell_n L1 <= N.
    """
    if N < 2 or d < 3 or K < 100:
        raise ValueError("require N >= 2, d >= 3, K >= 100")
    L0 = _int_root(N, d - 1)
    target = N ** (2.0 / d) * math.log(N) ** (1.0 / d)
    k = int(target // L0)
    while (k + 1) * L0 <= target:
        k += 1
    while k >= 1 and k * L0 > target:
        k -= 1
    if k < 1:
        raise ScalesDegenerateError(f"scales degenerate: no multiple of L0={L0} fits below {target:.3f}")
    L1 = k * L0
    if L1 > N:
        raise ScalesDegenerateError("scales degenerate: L1 exceeds N")
    M = smallest_branching(d)
    ell = 0
    while M ** (ell + 1) * L1 <= N:
        ell += 1
    return ScaleConfig(N=N, d=d, L0=L0, L1=L1, K=K, M=M, ell_n=ell)


def grid_boxes_in(region: Box, scale: int) -> list:
    """All scale-aligned boxes (base in scale * Z^d) contained in region."""
    ranges = []
    for b in region.base:
        lo = -(-b // scale) * scale  # ceil to grid
        hi = b + region.side - scale  # last admissible base
        ranges.append(range(lo, hi + 1, scale) if lo <= hi else range(0))
    out = []
    _product_boxes(ranges, (), scale, out)
    return out


def grid_boxes_meeting(region: Box, scale: int) -> list:
    """All scale-aligned boxes intersecting region."""
    ranges = []
    for b in region.base:
        lo = math.ceil((b - scale + 1) / scale) * scale
        hi = math.floor((b + region.side - 1) / scale) * scale
        ranges.append(range(lo, hi + 1, scale))
    out = []
    _product_boxes(ranges, (), scale, out)
    return out


def _product_boxes(ranges, prefix, scale, out):
    if not ranges:
        out.append(Box(prefix, scale))
        return
    for v in ranges[0]:
        _product_boxes(ranges[1:], prefix + (v,), scale, out)


def deep_interior(b1: Box, cfg: ScaleConfig) -> list:
    """L0-boxes of b1 whose 7 L0-wide query box fits inside b1.

    Peels a 3 L0 shell off every face: the kept boxes are those z + [0,L0)^d
    with z + [-3 L0, 4 L0)^d inside b1. Empty when L1 < 7 L0.
    """
    if b1.side != cfg.L1 or any(b % cfg.L1 != 0 for b in b1.base):
        raise ValueError("expected an L1-box aligned to the L1-grid")
    k = cfg.k_ratio
    if k < 7:
        return []
    offs = range(3, k - 3)  # j with j-3 >= 0 and j+4 <= k
    out = []
    _product_deep(b1.base, cfg.L0, offs, cfg.d, (), out)
    return out


def _product_deep(base, L0, offs, d, prefix, out):
    if len(prefix) == d:
        out.append(Box(tuple(b + j * L0 for b, j in zip(base, prefix)), L0))
        return
    for j in offs:
        _product_deep(base, L0, offs, d, prefix + (j,), out)


class MadicTree:
    """Origin-anchored M-adic hierarchy between scales L1 (bottom) and M^ell_n L1 (top).

    Depth ell runs from 0 (top boxes, side M^ell_n L1) to ell_n (L1-boxes).
    The root region is the union of depth-0 boxes meeting [-N, N]^d.
    """

    def __init__(self, cfg: ScaleConfig):
        self.cfg = cfg
        ts = cfg.M**cfg.ell_n * cfg.L1
        self.top_side = ts
        m = cfg.N // ts
        self.root_region = Box((-m * ts,) * cfg.d, (2 * m + 1) * ts)

    def side_at_depth(self, depth: int) -> int:
        if not 0 <= depth <= self.cfg.ell_n:
            raise ValueError("depth out of range")
        return self.cfg.M ** (self.cfg.ell_n - depth) * self.cfg.L1

    def depth_of(self, box: Box) -> int:
        side = box.side
        for depth in range(self.cfg.ell_n + 1):
            if self.side_at_depth(depth) == side:
                if any(b % side != 0 for b in box.base):
                    raise ValueError("box not aligned to its M-adic grid")
                return depth
        raise ValueError("box side is not an M-adic scale")

    def box_at(self, depth: int, point) -> Box:
        side = self.side_at_depth(depth)
        return Box(tuple(math.floor(p / side) * side for p in point), side)

    def parent(self, box: Box) -> Box:
        depth = self.depth_of(box)
        if depth == 0:
            raise ValueError("depth-0 boxes have no parent")
        return self.box_at(depth - 1, box.base)

    def children(self, box: Box) -> list:
        depth = self.depth_of(box)
        if depth == self.cfg.ell_n:
            raise ValueError("bottom boxes have no children")
        side = self.side_at_depth(depth + 1)
        out = []
        _product_boxes([range(b, b + box.side, side) for b in box.base], (), side, out)
        return out

    def boxes_at_depth(self, depth: int) -> list:
        """Depth-`depth` boxes contained in the root region."""
        return grid_boxes_in(self.root_region, self.side_at_depth(depth))

    def in_root_region(self, box: Box) -> bool:
        return self.root_region.contains_box(box)


def tower(box: Box, tree: MadicTree) -> list:
    """All M-adic ancestors of box (including box), largest first."""
    depth = tree.depth_of(box)
    return [tree.box_at(ell, box.base) for ell in range(depth + 1)]
