"""Window-restricted sampling of the interlacement point process.

The trace of the process in a finite window W is reproduced exactly by the
first-entrance representation: a Poisson(u cap(W)) number of forward random
walks started from the normalized equilibrium measure of W. The pre-entrance
past of a trajectory never touches W, so the only approximation made here is
killing walks once they leave a concentric halo box; the resulting bias is
bounded by u cap(W) sup_halo h_W and reported on the sample.

Trajectory labels are i.i.d. uniform on [0, u], which couples the soups at all
levels v <= u: filtering by label yields the process at the lower level.
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass

import numpy as np

from .errors import BiasBudgetError, GeometryError
from .green import CubeEquilibriumCache, EquilibriumData, GreenTable, hitting_potential, neighbor_steps
from .lattice import Box

MASTER_STREAM = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class Trajectory:
    label: float
    entry: np.ndarray  # (d,)
    positions: np.ndarray  # (m, d) int32; first row = entry, last row outside the halo
    holds: np.ndarray | None  # (m,) exponential holding times, None in discrete mode

    @property
    def length(self):
        return self.positions.shape[0]


@dataclass
class TrajectorySoup:
    level: float
    window: Box
    halo: Box
    seed: int
    time_mode: str
    trajectories: list
    cap_window: float
    window_equilibrium: EquilibriumData
    bias_bound: float

    def __post_init__(self):
        # trajectories sorted by label once; every excursion/occupation query
        # relies on this order
        self.trajectories.sort(key=lambda t: (t.label,))

    def count_at_level(self, v):
        labels = [t.label for t in self.trajectories]
        return bisect_right(labels, v)

    def at_level(self, v):
        """Trajectories with label <= v, in label order."""
        return self.trajectories[: self.count_at_level(v)]


def _philox(seed, stream):
    key = np.zeros(2, dtype=np.uint64)
    key[0] = np.uint64(seed)
    key[1] = np.uint64(stream)
    return np.random.Generator(np.random.Philox(key=key))


def _concentric_halo(window: Box, halo_factor: float) -> Box:
    side = int(math.ceil(halo_factor * window.side))
    if (side - window.side) % 2:
        side += 1
    margin = (side - window.side) // 2
    return window.inflate(margin)


def _walk(entry, halo: Box, rng, d, chunk=8192):
    """Forward simple random walk from entry, killed on leaving the halo."""
    lo = np.asarray(halo.base, dtype=np.int64)
    hi = lo + halo.side
    steps = neighbor_steps(d)
    parts = [np.asarray(entry, dtype=np.int64)[None, :]]
    cur = parts[0][-1]
    while True:
        dirs = rng.integers(0, 2 * d, size=chunk)
        seg = cur + np.cumsum(steps[dirs], axis=0)
        outside = np.any((seg < lo) | (seg >= hi), axis=1)
        if outside.any():
            idx = int(np.argmax(outside))
            parts.append(seg[: idx + 1])
            break
        parts.append(seg)
        cur = seg[-1]
    return np.concatenate(parts).astype(np.int32)


def sample_soup(
    window: Box,
    u: float,
    halo_factor: float,
    seed: int,
    cubes: CubeEquilibriumCache,
    time_mode: str = "continuous",
    bias_budget: float = 1.0e-3,
) -> TrajectorySoup:
    """Sample the interlacement trace in `window` at level u.

    halo_factor scales the concentric kill box. Raises when the documented
    truncation bias bound exceeds bias_budget.
    """
    if u < 0:
        raise ValueError("level u must be nonnegative")
    if halo_factor < 4:
        raise ValueError("halo_factor must be >= 4")
    if time_mode not in ("continuous", "discrete"):
        raise ValueError("time_mode must be 'continuous' or 'discrete'")
    green = cubes.green
    d = green.d
    halo = _concentric_halo(window, halo_factor)
    eq = cubes.for_box(window)
    cap_w = eq.capacity

    bias = u * cap_w * _sup_hitting_on_halo(eq, halo, green)
    if bias > bias_budget:
        raise BiasBudgetError(
            f"bias-exceeds-budget: truncation bound {bias:.3e} > budget {bias_budget:.3e}"
        )

    master = _philox(seed, MASTER_STREAM)
    count = 0 if u == 0 else int(master.poisson(u * cap_w))
    labels = master.uniform(0.0, u, size=count) if count else np.zeros(0)
    cum = np.cumsum(eq.masses / cap_w)
    entry_idx = np.searchsorted(cum, master.uniform(0.0, 1.0, size=count), side="right")
    entry_idx = np.minimum(entry_idx, eq.points.shape[0] - 1)

    trajectories = []
    for i in range(count):
        rng = _philox(seed, i)
        pos = _walk(eq.points[entry_idx[i]], halo, rng, d)
        holds = rng.standard_exponential(pos.shape[0]) if time_mode == "continuous" else None
        trajectories.append(
            Trajectory(label=float(labels[i]), entry=eq.points[entry_idx[i]].copy(), positions=pos, holds=holds)
        )
    return TrajectorySoup(
        level=u,
        window=window,
        halo=halo,
        seed=seed,
        time_mode=time_mode,
        trajectories=trajectories,
        cap_window=cap_w,
        window_equilibrium=eq,
        bias_bound=float(bias),
    )


def _sup_hitting_on_halo(eq: EquilibriumData, halo: Box, green: GreenTable):
    """Upper bound for h_W on the halo exit layer.

    h_W is harmonic off W and decays with distance, so the maximum over the
    exit layer sits at the face centers; a sparse sample of the layer guards
    the geometry.
    """
    d = green.d
    lo = np.asarray(halo.base, dtype=np.int64) - 1
    hi = lo + halo.side + 1  # just-outside layer
    mid = (lo + hi) // 2
    pts = []
    for axis in range(d):
        for val in (lo[axis], hi[axis]):
            center = mid.copy()
            center[axis] = val
            pts.append(center.copy())
            for other in range(d):
                if other == axis:
                    continue
                for frac in (0.25, 0.75):
                    q = center.copy()
                    q[other] = int(lo[other] + frac * (hi[other] - lo[other]))
                    pts.append(q)
    pts.append(lo.copy())
    pts.append(hi.copy())
    h = hitting_potential(eq, np.asarray(pts), green)
    return float(np.max(h))


# -- occupation field / vacant set ------------------------------------------


@dataclass
class OccupationField:
    """Occupation times within the window, stored sparsely by flat site index."""

    window: Box
    indices: np.ndarray  # sorted flat indices (C order within the window)
    values: np.ndarray

    def value(self, point):
        if not self.window.contains_point(point):
            return 0.0
        idx = self.window.index_of(np.asarray(point, dtype=np.int64))
        k = np.searchsorted(self.indices, idx)
        if k < self.indices.shape[0] and self.indices[k] == idx:
            return float(self.values[k])
        return 0.0

    def values_at(self, pts):
        pts = np.asarray(pts, dtype=np.int64)
        idx = self.window.index_of(pts)
        k = np.searchsorted(self.indices, idx)
        k = np.minimum(k, max(self.indices.shape[0] - 1, 0))
        out = np.zeros(pts.shape[0])
        if self.indices.shape[0]:
            hitmask = self.indices[k] == idx
            out[hitmask] = self.values[k[hitmask]]
        inside = self.window.contains_points_mask(pts)
        out[~inside] = 0.0
        return out

    def as_dict(self):
        side, d = self.window.side, self.window.d
        out = {}
        for idx, val in zip(self.indices.tolist(), self.values.tolist()):
            rel = []
            for _ in range(d):
                rel.append(idx % side)
                idx //= side
            pt = tuple(b + r for b, r in zip(self.window.base, reversed(rel)))
            out[pt] = val
        return out

    def total(self):
        return float(self.values.sum())


def occupation(soup: TrajectorySoup, v: float) -> OccupationField:
    """Field of occupation times at level v <= u, restricted to the window."""
    _check_level(soup, v)
    w = soup.window
    idx_parts, val_parts = [], []
    for traj in soup.at_level(v):
        pos = traj.positions.astype(np.int64)
        inside = w.contains_points_mask(pos)
        if not inside.any():
            continue
        idx_parts.append(w.index_of(pos[inside]))
        if soup.time_mode == "continuous":
            val_parts.append(traj.holds[inside])
        else:
            val_parts.append(np.ones(int(inside.sum())))
    if not idx_parts:
        return OccupationField(window=w, indices=np.zeros(0, dtype=np.int64), values=np.zeros(0))
    idx = np.concatenate(idx_parts)
    val = np.concatenate(val_parts)
    uniq, inv = np.unique(idx, return_inverse=True)
    acc = np.zeros(uniq.shape[0])
    np.add.at(acc, inv, val)
    return OccupationField(window=w, indices=uniq, values=acc)


@dataclass
class VacantMask:
    """The vacant set of the window as a dense boolean mask."""

    box: Box
    mask: np.ndarray  # shape (side,)*d, True = vacant

    def __contains__(self, point):
        if not self.box.contains_point(point):
            raise KeyError("point outside the masked window")
        rel = tuple(p - b for p, b in zip(point, self.box.base))
        return bool(self.mask[rel])

    def points(self):
        rel = np.argwhere(self.mask)
        return rel + np.asarray(self.box.base, dtype=np.int64)

    @property
    def count(self):
        return int(self.mask.sum())


def vacant_set(soup: TrajectorySoup, v: float) -> VacantMask:
    """Window minus the union of ranges of trajectories with label <= v."""
    _check_level(soup, v)
    w = soup.window
    mask = np.ones((w.side,) * w.d, dtype=bool)
    base = np.asarray(w.base, dtype=np.int64)
    for traj in soup.at_level(v):
        pos = traj.positions.astype(np.int64)
        inside = w.contains_points_mask(pos)
        if inside.any():
            rel = pos[inside] - base
            mask[tuple(rel.T)] = False
    return VacantMask(box=w, mask=mask)


def _check_level(soup, v):
    if not 0 <= v <= soup.level:
        raise ValueError(f"level filter v={v} outside [0, {soup.level}]")


# -- excursion decomposition -------------------------------------------------


@dataclass
class ExcursionSegment:
    label: float
    traj_index: int
    start: int  # index into the trajectory of the entry into the inner set
    end: int  # index of the first position outside the outer set
    positions: np.ndarray
    holds: np.ndarray | None


@dataclass
class ExcursionRecord:
    """Ordered excursions from an inner box to the boundary of an outer box.

    Ordering is (trajectory label, time within trajectory), which fixes the
    excursion indexing used by all downstream box classifications.
    """

    inner: Box
    outer: Box
    level: float
    segments: list

    @property
    def count(self):
        return len(self.segments)

    def prefix(self, n):
        """The first n excursions (all of them if fewer exist)."""
        return self.segments[: max(0, int(n))]

    def prefix_sites(self, n, within: Box | None = None):
        """Union of the ranges of the first n excursions, optionally clipped."""
        pts = []
        for seg in self.prefix(n):
            p = seg.positions.astype(np.int64)
            if within is not None:
                p = p[within.contains_points_mask(p)]
            pts.append(p)
        if not pts:
            return np.zeros((0, self.inner.d), dtype=np.int64)
        allp = np.concatenate(pts)
        return np.unique(allp, axis=0)


def excursions(soup: TrajectorySoup, inner: Box, outer: Box, v: float) -> ExcursionRecord:
    """Split label-<=v trajectories at entries into `inner` / exits of `outer`."""
    _check_level(soup, v)
    if not (outer.contains_box(inner) and outer != inner):
        raise GeometryError("geometry: inner set must lie strictly inside the outer box")
    if not soup.halo.contains_box(outer):
        raise GeometryError("geometry: outer box must be covered by the soup halo")
    segments = []
    for ti, traj in enumerate(soup.at_level(v)):
        pos = traj.positions.astype(np.int64)
        in_inner = inner.contains_points_mask(pos)
        in_outer = outer.contains_points_mask(pos)
        m = pos.shape[0]
        t = 0
        while True:
            rest = np.nonzero(in_inner[t:])[0]
            if rest.size == 0:
                break
            start = t + int(rest[0])
            out = np.nonzero(~in_outer[start:])[0]
            end = start + int(out[0]) if out.size else m - 1
            segments.append(
                ExcursionSegment(
                    label=traj.label,
                    traj_index=ti,
                    start=start,
                    end=end,
                    positions=traj.positions[start : end + 1],
                    holds=None if traj.holds is None else traj.holds[start : end + 1],
                )
            )
            if out.size == 0:
                break
            t = end + 1
    return ExcursionRecord(inner=inner, outer=outer, level=v, segments=segments)


def local_level(soup: TrajectorySoup, b1: Box, u1: Box, cubes: CubeEquilibriumCache) -> float:
    """Excursion count into b1 (before exiting u1) normalized by cap(b1)."""
    rec = excursions(soup, b1, u1, soup.level)
    return rec.count / cubes.capacity(b1.side)
