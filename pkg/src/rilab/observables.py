"""Connectivity observables and the box-classification layer.

Covers cluster extraction relative to a reference shell, the excess-volume
indicators, finite-volume estimates of the percolation function, the
three-clause regularity test for L0-boxes, the exploration set U1, the bubble
set, and the discretization grid for local levels.
"""

from __future__ import annotations

import math
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InsufficientExcursionsError
from .green import CubeEquilibriumCache, EquilibriumData
from .interlacements import ExcursionRecord, TrajectorySoup, sample_soup, vacant_set
from .lattice import Box, ScaleConfig, centered_box

_STRUCTURE = {d: ndimage.generate_binary_structure(d, 1) for d in (2, 3, 4, 5)}


# -- components relative to a shell ------------------------------------------


@dataclass
class ComponentMap:
    """Cluster labels of (vacant union shell) within a region.

    root_label marks the cluster containing the reference shell S_r; label 0
    is non-membership.
    """

    region: Box
    labels: np.ndarray
    root_label: int

    def in_root(self, pts) -> np.ndarray:
        rel = np.asarray(pts, dtype=np.int64) - np.asarray(self.region.base, dtype=np.int64)
        return self.labels[tuple(rel.T)] == self.root_label

    def root_mask(self) -> np.ndarray:
        return self.labels == self.root_label


def shell_mask(region: Box, r: int) -> np.ndarray:
    """Mask of S_r = {|x|_inf = r} inside the region array."""
    d = region.d
    axes = [np.abs(np.arange(b, b + region.side, dtype=np.int64)) for b in region.base]
    grids = np.meshgrid(*axes, indexing="ij")
    supnorm = np.maximum.reduce(grids)
    return supnorm == r


def component_of_shell(vacant, r: int, region: Box) -> ComponentMap:
    """The cluster of S_r in (vacant union S_r), restricted to the region."""
    if not region.contains_box(centered_box(r, region.d)):
        raise ValueError("region must contain the ball of radius r")
    mask = _vacant_mask_on(vacant, region)
    shell = shell_mask(region, r)
    mask = mask | shell
    labels, _ = ndimage.label(mask, structure=_STRUCTURE[region.d])
    shell_labels = np.unique(labels[shell])
    root = int(shell_labels[0])
    if shell_labels.shape[0] != 1:
        # S_r itself is connected, so multiple labels can only appear if the
        # labeling was fed a region clipped through the shell
        raise ValueError("reference shell is split; region too small")
    return ComponentMap(region=region, labels=labels, root_label=root)


def _vacant_mask_on(vacant, region: Box) -> np.ndarray:
    """Vacancy as a dense mask over `region` (accepts VacantMask or point sets)."""
    if hasattr(vacant, "mask") and hasattr(vacant, "box"):
        src: Box = vacant.box
        if not src.contains_box(region):
            raise ValueError("vacant mask does not cover the region")
        lo = tuple(r - s for r, s in zip(region.base, src.base))
        sl = tuple(slice(o, o + region.side) for o in lo)
        return vacant.mask[sl].copy()
    mask = np.zeros((region.side,) * region.d, dtype=bool)
    pts = np.asarray(list(vacant), dtype=np.int64)
    if pts.size:
        inside = region.contains_points_mask(pts)
        rel = pts[inside] - np.asarray(region.base, dtype=np.int64)
        mask[tuple(rel.T)] = True
    return mask


def excess_indicator(vacant, N: int, nu: float) -> dict:
    """Volume fractions of the central box disconnected from the far shells.

    fraction uses the shell at 2N (computed on [-2N, 2N]^d), fraction0 the
    shell at N; the second event implies the first.
    """
    d = vacant.box.d if hasattr(vacant, "box") else 3
    region2 = centered_box(2 * N, d)
    cm2 = component_of_shell(vacant, 2 * N, region2)
    dn = centered_box(N, d)
    lo = tuple(b - rb for b, rb in zip(dn.base, region2.base))
    sl = tuple(slice(o, o + dn.side) for o in lo)
    disconnected = cm2.labels[sl] != cm2.root_label
    fraction = float(disconnected.mean())

    cm1 = component_of_shell(vacant, N, dn)
    fraction0 = float((cm1.labels != cm1.root_label).mean())
    return {
        "A_N": fraction >= nu,
        "A0_N": fraction0 >= nu,
        "fraction": fraction,
        "fraction0": fraction0,
    }


# -- finite-volume percolation function --------------------------------------


def _origin_disconnected(vacant_mask: np.ndarray, L: int) -> bool:
    """True when the center site has no vacant path to the shell at radius L."""
    labels, _ = ndimage.label(vacant_mask, structure=_STRUCTURE[vacant_mask.ndim])
    center = (L,) * vacant_mask.ndim
    lab0 = labels[center]
    if lab0 == 0:
        return True
    shell = shell_mask(Box((-L,) * vacant_mask.ndim, 2 * L + 1), L)
    return not bool(np.any(labels[shell] == lab0))


def theta0L_estimate(v: float, L: int, n_samples: int, seed: int, cubes: CubeEquilibriumCache,
                     halo_factor: float = 6.0) -> tuple:
    """Monte Carlo estimate of P[origin not connected to the shell at L in the vacant set]."""
    if L < 2:
        raise ValueError("L must be >= 2")
    if v == 0.0:
        return 0.0, 0.0
    window = centered_box(L, cubes.green.d)
    hits = 0
    for k in range(n_samples):
        # the estimate is a finite-volume proxy by definition; halo truncation
        # only thins far returns, so no bias budget is imposed here
        soup = sample_soup(window, v, halo_factor, seed + k, cubes, time_mode="discrete", bias_budget=math.inf)
        if _origin_disconnected(vacant_set(soup, v).mask, L):
            hits += 1
    p = hits / n_samples
    return p, math.sqrt(max(p * (1 - p), 1.0 / n_samples) / n_samples)


def theta0L_curve(levels, L: int, n_samples: int, seed: int, cubes: CubeEquilibriumCache,
                  halo_factor: float = 6.0) -> list:
    """Coupled estimates of theta_{0,L} at several levels from shared soups.

    One soup per sample at the top level, filtered by trajectory label, so the
    estimates are pointwise nondecreasing in the level by construction.
    """
    levels = sorted(float(v) for v in levels)
    top = levels[-1]
    window = centered_box(L, cubes.green.d)
    hits = np.zeros(len(levels))
    for k in range(n_samples):
        if top == 0.0:
            break
        soup = sample_soup(window, top, halo_factor, seed + k, cubes, time_mode="discrete", bias_budget=math.inf)
        for i, v in enumerate(levels):
            if v == 0.0:
                continue
            if _origin_disconnected(vacant_set(soup, v).mask, L):
                hits[i] += 1
    out = []
    for i, v in enumerate(levels):
        p = float(hits[i]) / n_samples
        out.append((v, p, math.sqrt(max(p * (1 - p), 1.0 / n_samples) / n_samples)))
    return out


# -- per-box excursion records and the three-clause test ---------------------


@dataclass
class BoxRecord:
    """Label-ordered excursion data of one L0-box's query region.

    Sites are stored clipped to the box and to the query box; the boundary
    weight of excursion l is sum over its time steps of hold * ebar(site) with
    ebar the normalized equilibrium measure of the query box.
    """

    box: Box
    cap_query: float
    labels: np.ndarray  # (n_exc,) trajectory label per excursion, nondecreasing
    sites_in_box: list  # per excursion: (m_i, d) int arrays, unique sites
    sites_in_query: list
    boundary_weight: np.ndarray  # (n_exc,)

    @property
    def count(self):
        return len(self.sites_in_box)

    def count_at(self, v: float) -> int:
        return int(bisect_right(self.labels.tolist(), v))

    def removal_mask(self, n_prefix: int, target: Box, in_query: bool = False) -> np.ndarray:
        """Dense mask over `target` of sites covered by the first n_prefix excursions."""
        mask = np.zeros((target.side,) * target.d, dtype=bool)
        src = self.sites_in_query if in_query else self.sites_in_box
        base = np.asarray(target.base, dtype=np.int64)
        for sites in src[: max(0, n_prefix)]:
            if sites.shape[0] == 0:
                continue
            inside = target.contains_points_mask(sites)
            if inside.any():
                rel = sites[inside] - base
                mask[tuple(rel.T)] = True
        return mask


def query_box(b0: Box, cfg: ScaleConfig) -> Box:
    """The 7 L0-wide box around an L0-box from which excursions are counted."""
    return Box(tuple(b - 3 * cfg.L0 for b in b0.base), 7 * cfg.L0)


def outer_box(b0: Box, cfg: ScaleConfig) -> Box:
    """The K-scale box whose boundary terminates excursions."""
    return Box(tuple(b - cfg.K * cfg.L0 + 1 for b in b0.base), 2 * cfg.K * cfg.L0 - 2)


def box_record_from_excursions(rec: ExcursionRecord, b0: Box, cfg: ScaleConfig,
                               eq_query: EquilibriumData) -> BoxRecord:
    """Assemble a BoxRecord from a generic excursion record for the query box."""
    d0 = rec.inner
    ebar = _ebar_lookup(eq_query, d0)
    labels, in_box, in_query, weights = [], [], [], []
    for seg in rec.segments:
        pts = seg.positions.astype(np.int64)
        labels.append(seg.label)
        in_box.append(np.unique(pts[b0.contains_points_mask(pts)], axis=0))
        in_query.append(np.unique(pts[d0.contains_points_mask(pts)], axis=0))
        w = ebar(pts)
        if seg.holds is not None:
            w = w * seg.holds
        weights.append(float(np.sum(w)))
    return BoxRecord(
        box=b0,
        cap_query=eq_query.capacity,
        labels=np.asarray(labels, dtype=np.float64),
        sites_in_box=in_box,
        sites_in_query=in_query,
        boundary_weight=np.asarray(weights, dtype=np.float64),
    )


def _ebar_lookup(eq: EquilibriumData, d0: Box):
    dense = np.zeros((d0.side,) * d0.d)
    rel = eq.points - np.asarray(d0.base, dtype=np.int64)
    dense[tuple(rel.T)] = eq.masses / eq.capacity

    def ebar(pts):
        inside = d0.contains_points_mask(pts)
        out = np.zeros(pts.shape[0])
        if inside.any():
            r = pts[inside] - np.asarray(d0.base, dtype=np.int64)
            out[inside] = dense[tuple(r.T)]
        return out

    return ebar


@dataclass
class ClassifyResult:
    good: bool
    failed_clause: str | None  # "component" | "linkage" | "weight"


def _large_components(mask: np.ndarray, threshold: int) -> list:
    """Connected pieces of the mask with sup-norm diameter >= threshold."""
    labels, n = ndimage.label(mask, structure=_STRUCTURE[mask.ndim])
    out = []
    if n == 0:
        return out
    objects = ndimage.find_objects(labels)
    for lab, sl in enumerate(objects, start=1):
        extent = max(s.stop - s.start - 1 for s in sl)
        if extent >= threshold:
            out.append(labels == lab)
    return out


def classify_box(record: BoxRecord, neighbors: dict, alpha: float, beta: float, gamma: float,
                 cfg: ScaleConfig) -> ClassifyResult:
    """Evaluate the three regularity clauses of an L0-box.

    (component) after removing the first floor(alpha cap) excursion ranges, a
    connected set of sup-diameter >= floor(L0/10) survives in the box;
    (linkage) every such survivor links to every survivor of each of the 2d
    neighbor boxes inside the query box cleared at level beta;
    (weight) the boundary-weighted time of the first floor(beta cap)
    excursions reaches gamma.

    `neighbors` maps each unit offset to that neighbor box's own BoxRecord.
    """
    if not alpha > beta > gamma > 0:
        raise ValueError("thresholds must satisfy alpha > beta > gamma > 0")
    t = cfg.L0 // 10
    b0 = record.box
    d0 = query_box(b0, cfg)
    j_alpha = math.floor(alpha * record.cap_query)
    j_beta = math.floor(beta * record.cap_query)
    if record.count < j_alpha:
        raise InsufficientExcursionsError(
            f"insufficient-excursions: have {record.count}, prefix needs {j_alpha}"
        )

    own_mask = ~record.removal_mask(j_alpha, b0)
    own_large = _large_components(own_mask, t)
    if not own_large:
        return ClassifyResult(good=False, failed_clause="component")

    # clause (weight)
    if float(np.sum(record.boundary_weight[: max(0, j_beta)])) < gamma:
        return ClassifyResult(good=False, failed_clause="weight")

    # clause (linkage): one labeling of the cleared query box serves all pairs
    connector = ~record.removal_mask(j_beta, d0, in_query=True)
    conn_labels, _ = ndimage.label(connector, structure=_STRUCTURE[d0.d])
    base_d0 = np.asarray(d0.base, dtype=np.int64)

    def labels_of(mask_box: Box, comp_mask: np.ndarray) -> set:
        pts = np.argwhere(comp_mask) + np.asarray(mask_box.base, dtype=np.int64)
        rel = pts - base_d0
        vals = conn_labels[tuple(rel.T)]
        return set(int(x) for x in np.unique(vals) if x != 0)

    own_label_sets = [labels_of(b0, m) for m in own_large]
    for offset, nb_record in neighbors.items():
        nb_box = nb_record.box
        j_alpha_nb = math.floor(alpha * nb_record.cap_query)
        if nb_record.count < j_alpha_nb:
            raise InsufficientExcursionsError(
                f"insufficient-excursions in neighbor {offset}"
            )
        nb_mask = ~nb_record.removal_mask(j_alpha_nb, nb_box)
        for nb_comp in _large_components(nb_mask, t):
            nb_labels = labels_of(nb_box, nb_comp)
            for own_labels in own_label_sets:
                if not (own_labels & nb_labels):
                    return ClassifyResult(good=False, failed_clause="linkage")
    return ClassifyResult(good=True, failed_clause=None)


# -- the box label grid -------------------------------------------------------


@dataclass
class BoxLabelGrid:
    """Array-backed per-box state over the classification universe.

    The L0-universe covers every box meeting [-3N - L0, 3N + L0]^d; the
    L1-universe covers the boxes contained in [-N, N]^d.
    """

    cfg: ScaleConfig
    N: int
    b0_lo: int  # first L0-box index (units of L0), same on every axis
    b0_shape: tuple
    good: np.ndarray
    n_u: np.ndarray  # level-u excursion counts of the query boxes
    cap_d0: np.ndarray
    in_u1: np.ndarray
    b1_lo: int
    b1_shape: tuple
    u_b1: np.ndarray
    lam_minus: np.ndarray
    lam_plus: np.ndarray
    in_bub: np.ndarray

    @classmethod
    def create(cls, cfg: ScaleConfig, N: int | None = None) -> "BoxLabelGrid":
        N = cfg.N if N is None else N
        d, L0, L1 = cfg.d, cfg.L0, cfg.L1
        lo0 = math.floor((-3 * N - L0) / L0)
        hi0 = math.floor((3 * N + L0) / L0)
        shape0 = (hi0 - lo0 + 1,) * d
        lo1 = math.ceil(-N / L1)
        hi1 = math.floor((N - L1 + 1) / L1)
        shape1 = (max(hi1 - lo1 + 1, 0),) * d
        return cls(
            cfg=cfg,
            N=N,
            b0_lo=lo0,
            b0_shape=shape0,
            good=np.zeros(shape0, dtype=bool),
            n_u=np.zeros(shape0, dtype=np.float64),
            cap_d0=np.zeros(shape0, dtype=np.float64),
            in_u1=np.zeros(shape0, dtype=bool),
            b1_lo=lo1,
            b1_shape=shape1,
            u_b1=np.zeros(shape1, dtype=np.float64),
            lam_minus=np.zeros(shape1, dtype=np.float64),
            lam_plus=np.zeros(shape1, dtype=np.float64),
            in_bub=np.zeros(shape1, dtype=bool),
        )

    # -- indexing helpers

    def b0_index(self, base) -> tuple:
        return tuple(b // self.cfg.L0 - self.b0_lo for b in base)

    def b0_box(self, idx) -> Box:
        return Box(tuple((i + self.b0_lo) * self.cfg.L0 for i in idx), self.cfg.L0)

    def b1_index(self, base) -> tuple:
        return tuple(b // self.cfg.L1 - self.b1_lo for b in base)

    def b1_box(self, idx) -> Box:
        return Box(tuple((i + self.b1_lo) * self.cfg.L1 for i in idx), self.cfg.L1)

    def b1_boxes(self) -> list:
        return [self.b1_box(idx) for idx in np.ndindex(*self.b1_shape)]

    def b0_in_u1(self, base) -> bool:
        """U1 membership of an arbitrary L0-box; boxes beyond the universe are
        outside [-3N,3N]^d and therefore members."""
        idx = self.b0_index(base)
        if all(0 <= i < s for i, s in zip(idx, self.b0_shape)):
            return bool(self.in_u1[idx])
        return True


def outside_mask(grid: BoxLabelGrid) -> np.ndarray:
    """Boxes of the universe not contained in [-3N, 3N]^d."""
    cfg, N = grid.cfg, grid.N
    n0 = grid.b0_shape[0]
    coords = (np.arange(n0) + grid.b0_lo) * cfg.L0
    inside_1d = (coords >= -3 * N) & (coords + cfg.L0 - 1 <= 3 * N)
    inside = inside_1d
    for _ in range(cfg.d - 1):
        inside = inside[..., None] & inside_1d
    return ~inside


def build_u1(grid: BoxLabelGrid, N: int, beta: float, policy: str = "exception-layer") -> BoxLabelGrid:
    """Flood the universe from outside [-3N,3N]^d through good, low-count boxes.

    policy 'strict' keeps only the flooded region; 'exception-layer' also
    admits every box adjacent to it (the weakest reading of the one-box
    allowance in the exploration definition).
    """
    if policy not in ("strict", "exception-layer"):
        raise ValueError("policy must be 'strict' or 'exception-layer'")
    passable = grid.good & (grid.n_u < beta * grid.cap_d0)
    outside = outside_mask(grid)
    mask = passable | outside
    labels, n = ndimage.label(mask, structure=_STRUCTURE[grid.cfg.d])
    reached = np.zeros_like(mask)
    if n:
        outside_labels = np.unique(labels[outside])
        outside_labels = outside_labels[outside_labels != 0]
        reached = np.isin(labels, outside_labels)
    if policy == "exception-layer":
        layer = ndimage.binary_dilation(reached, structure=_STRUCTURE[grid.cfg.d])
        reached = reached | layer
    grid.in_u1[:] = reached
    return grid


def bubble_set(grid: BoxLabelGrid, N: int) -> BoxLabelGrid:
    """Mark the L1-boxes of the central box whose deep interior misses U1."""
    cfg = grid.cfg
    k = cfg.k_ratio
    for idx in np.ndindex(*grid.b1_shape):
        b1 = grid.b1_box(idx)
        if k < 7:
            grid.in_bub[idx] = True
            continue
        i0 = grid.b0_index(b1.base)
        sl = tuple(slice(i + 3, i + k - 3) for i in i0)
        grid.in_bub[idx] = not bool(grid.in_u1[sl].any())
    return grid


# -- level grids --------------------------------------------------------------


@dataclass
class LevelGrid:
    """Discretization grid for local levels on (0, gamma].

    Between consecutive points of {0} union the grid, the percolation function
    and the square root vary by at most 1e-3 * eps. The refined grid inserts 8
    equally spaced points in every gap.
    """

    levels: np.ndarray
    gamma: float
    u: float
    eps: float
    refined: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.refined is None:
            pts = np.concatenate([[0.0], self.levels])
            fills = [
                np.linspace(a, b, 10)[1:-1] for a, b in zip(pts[:-1], pts[1:])
            ]
            self.refined = np.unique(np.concatenate([self.levels] + fills))

    @property
    def gamma_minus(self) -> float:
        """Largest grid element strictly below gamma."""
        i = bisect_left(self.levels.tolist(), self.gamma)
        if i == 0:
            raise ValueError("grid has no element below gamma")
        return float(self.levels[i - 1])


def build_level_grid(theta0, u: float, gamma: float, eps: float) -> LevelGrid:
    """Greedy construction of the level grid from a percolation-function table."""
    if not 0 < u < gamma:
        raise ValueError("require 0 < u < gamma")
    delta = 1.0e-3 * eps
    pts = []
    a = 0.0
    while a < gamma:
        b = (math.sqrt(a) + delta) ** 2
        if theta0(min(b, gamma)) - theta0(a) > delta:
            lo, hi = a, b
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if theta0(mid) - theta0(a) > delta:
                    hi = mid
                else:
                    lo = mid
            b = lo
            if b <= a:
                b = np.nextafter(a, math.inf)
        if a < u < b:
            b = u
        b = min(b, gamma)
        pts.append(b)
        a = b
    levels = np.unique(np.asarray(pts))
    assert levels[-1] == gamma
    return LevelGrid(levels=levels, gamma=gamma, u=u, eps=eps)


def discretize_level(u_b1: float, grid: LevelGrid, gamma: float) -> tuple:
    """Bracket a local level by grid points: the largest one <= u_b1 from
    {0} union grid, and the smallest one above (gamma once u_b1 >= gamma)."""
    if u_b1 < 0:
        raise ValueError("local level must be nonnegative")
    levels = grid.levels
    i = bisect_right(levels.tolist(), u_b1)
    lam_minus = 0.0 if i == 0 else float(levels[i - 1])
    if u_b1 < gamma:
        lam_plus = float(levels[i])
    else:
        lam_plus = gamma
    return lam_minus, lam_plus


def apply_level_discretization(grid: BoxLabelGrid, levels: LevelGrid) -> BoxLabelGrid:
    for idx in np.ndindex(*grid.b1_shape):
        lm, lp = discretize_level(float(grid.u_b1[idx]), levels, levels.gamma)
        grid.lam_minus[idx] = lm
        grid.lam_plus[idx] = lp
    return grid


def theta_tilde(v, theta0, gamma_minus: float):
    """The averaging profile: the percolation function below gamma_minus, 1 beyond."""
    v = np.asarray(v, dtype=np.float64)
    out = np.where(v < gamma_minus, theta0(v), 1.0)
    return float(out) if out.ndim == 0 else out


def event_a_prime(grid: BoxLabelGrid, theta0, nu: float, eps: float, gamma_minus: float) -> dict:
    """Coarse-grained excess event: bubble volume plus averaged non-bubble mass.

    holds when |Bub| + sum over non-bubble central L1-boxes of
    theta_tilde(lam_minus) |B1| reaches (nu - 6 eps)|D_N|.
    """
    cfg = grid.cfg
    vol_b1 = cfg.L1**cfg.d
    lhs = float(grid.in_bub.sum()) * vol_b1
    for idx in np.ndindex(*grid.b1_shape):
        if not grid.in_bub[idx]:
            lhs += theta_tilde(float(grid.lam_minus[idx]), theta0, gamma_minus) * vol_b1
    dn_vol = (2 * grid.N + 1) ** cfg.d
    return {"holds": lhs >= (nu - 6 * eps) * dn_vol, "lhs": lhs}
