"""Multi-scale coarse graining: extraction of the low-complexity anchor set.

From the box-boundary of the exploration set U1 this module builds a union of
well-separated, well-behaved L0-boxes whose equilibrium potential dominates a
positive level on most of the bubble set, while the number of possible shapes
of the output stays controlled. The construction splits into the case where
some tower above a bubble box is half-filled by U1's complement all the way to
the top scale, and the case where every such tower stops strictly below it.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import BaseBoxFailsError, ProjectionTooThinError
from .green import GreenTable, equilibrium, hitting_potential, neighbor_steps
from .lattice import Box, MadicTree, ScaleConfig, centered_box, tower
from .observables import BoxLabelGrid, _STRUCTURE

logger = logging.getLogger(__name__)


class CaseTag(Enum):
    """How the anchor set was produced."""

    EMPTY = "empty"  # bubble volume below the epsilon threshold
    TOP_SCALE = "top-scale"  # some half-vacant tower reaches the top scale
    SUB_SCALE = "sub-scale"  # all half-vacant towers stop below the top scale


@dataclass
class CoarseParams:
    """Tunable constants of the pipeline (calibrated defaults; see tools/calibrate.py)."""

    c4: float = 1.0  # bad-box density threshold scale
    c5: float = 1.0  # geometric-decay envelope constant
    a_i_count_factor: float = 1.0  # boxes kept per retained patch
    a_min: float = 0.02  # minimal projected-area fraction for column extraction
    thin_budget_factor: float = 1.0  # box budget multiplier in capacity thinning
    eta_box_range: tuple = (1, 24)  # box sides scanned for the sparseness constant
    solver_cap: int = 20000
    subsample_max: int = 2500
    bub_site_sample: int = 4000  # sites sampled for the potential histogram


@dataclass
class ComegaResult:
    boxes: list
    tag: CaseTag
    diagnostics: dict = field(default_factory=dict)


class SummedArea:
    """Inclusion-exclusion box sums over an integer array."""

    def __init__(self, arr):
        sat = arr.astype(np.int64)
        for axis in range(arr.ndim):
            sat = np.cumsum(sat, axis=axis)
        self.sat = np.pad(sat, [(1, 0)] * arr.ndim)
        self.shape = arr.shape

    def box_sum(self, lo, hi):
        """Sum of the array over the index box [lo, hi), clipped to the domain."""
        lo = [min(max(v, 0), s) for v, s in zip(lo, self.shape)]
        hi = [min(max(v, 0), s) for v, s in zip(hi, self.shape)]
        if any(a >= b for a, b in zip(lo, hi)):
            return 0
        d = len(lo)
        total = 0
        for corner in range(2**d):
            idx = []
            n_lo = 0
            for axis in range(d):
                if corner >> axis & 1:
                    idx.append(hi[axis])
                else:
                    idx.append(lo[axis])
                    n_lo += 1
            total += (-1) ** n_lo * int(self.sat[tuple(idx)])
        return total


class ComplementCounts:
    """Site volume of U1's complement within L0-aligned boxes.

    Boxes outside the classification universe lie outside [-3N, 3N]^d and are
    U1 members, so clipping to the universe is exact.
    """

    def __init__(self, grid: BoxLabelGrid):
        self.grid = grid
        self._sat = SummedArea(~grid.in_u1)

    def complement_sites(self, box: Box) -> int:
        cfg, grid = self.grid.cfg, self.grid
        lo = [b // cfg.L0 - grid.b0_lo for b in box.base]
        hi = [l + box.side // cfg.L0 for l in lo]
        return self._sat.box_sum(lo, hi) * cfg.L0**cfg.d


class BadCounts:
    """Number of badly-classified L0-boxes within L0-aligned boxes."""

    def __init__(self, grid: BoxLabelGrid):
        self.grid = grid
        self._sat = SummedArea(~grid.good)

    def bad_boxes(self, box: Box) -> int:
        cfg, grid = self.grid.cfg, self.grid
        lo = [b // cfg.L0 - grid.b0_lo for b in box.base]
        hi = [l + box.side // cfg.L0 for l in lo]
        return self._sat.box_sum(lo, hi)


# -- tower extraction ----------------------------------------------------------


def find_bbar(b1: Box, counts: ComplementCounts, tree: MadicTree) -> Box:
    """Largest tower box above b1 whose volume is at least half U1-complement."""
    for box in tower(b1, tree):  # largest first
        if counts.complement_sites(box) * 2 >= box.volume:
            return box
    raise BaseBoxFailsError(
        "base-fails: the bottom box itself is less than half inside the complement"
    )


def maximal_bprimes(bub_boxes, counts: ComplementCounts, tree: MadicTree) -> list:
    """Pairwise-disjoint maximal parents of the half-vacant towers over the bubble."""
    parents = {}
    for b1 in bub_boxes:
        bbar = find_bbar(b1, counts, tree)
        if tree.depth_of(bbar) == 0:
            raise ValueError("a tower reaches the top scale; use the top-scale branch")
        parent = tree.parent(bbar)
        parents[(parent.side, parent.base)] = parent
    boxes = sorted(parents.values(), key=lambda b: (-b.side, b.base))
    kept = []
    for b in boxes:
        if not any(k.contains_box(b) for k in kept):
            kept.append(b)
    return kept


def classify_goodness_j(bprime: Box, bad_box_count: int, c4: float, cfg: ScaleConfig) -> bool:
    """A patch is good when it is not spoiled by too many bad L0-boxes."""
    if c4 <= 0:
        raise ValueError("c4 must be positive")
    columns = (bprime.volume / cfg.L0**cfg.d) ** ((cfg.d - 1) / cfg.d)
    return bad_box_count <= 0.5 * c4 * columns


# -- capacities of unions --------------------------------------------------------


def union_boundary_points(boxes) -> np.ndarray:
    """Internal boundary of a union of boxes (sites with a neighbor outside)."""
    if not boxes:
        return np.zeros((0, 0), dtype=np.int64)
    d = boxes[0].d
    cand = np.unique(np.concatenate([b.boundary_points() for b in boxes]), axis=0)
    steps = neighbor_steps(d)
    neigh = cand[:, None, :] + steps[None, :, :]
    flat = neigh.reshape(-1, d)
    inside = np.zeros(flat.shape[0], dtype=bool)
    for b in boxes:
        inside |= b.contains_points_mask(flat)
    has_outside_neighbor = ~inside.reshape(cand.shape[0], steps.shape[0]).all(axis=1)
    return cand[has_outside_neighbor]


def union_capacity(boxes, green: GreenTable, params: CoarseParams) -> tuple:
    """cap of a union of boxes: exact Gram solve on the union boundary, or a
    stride-subsampled solve with Richardson extrapolation beyond the cap."""
    pts = union_boundary_points(boxes)
    n = pts.shape[0]
    if n == 0:
        return 0.0, "empty"
    if n <= params.subsample_max:
        return equilibrium(pts, green, solver_cap=params.solver_cap).capacity, "exact"
    stride = math.ceil(n / params.subsample_max)
    sub1 = pts[::stride]
    sub2 = pts[:: 2 * stride]
    cap1 = equilibrium(sub1, green, solver_cap=params.solver_cap).capacity
    cap2 = equilibrium(sub2, green, solver_cap=params.solver_cap).capacity
    return 2.0 * cap1 - cap2, "subsampled-richardson"


def sparseness_constant(green: GreenTable, M: int, box_range=(1, 24), cubes=None) -> float:
    """min of 1/(c_star M^d) and the scanned minimum of cap(L-box)/L^{d-2}."""
    lo, hi = box_range
    best = math.inf
    for L in range(lo, hi + 1):
        cap = cubes.capacity(L) if cubes is not None else equilibrium(Box((0,) * green.d, L), green).capacity
        best = min(best, cap / L ** (green.d - 2))
    return min(1.0 / (green.c_star * M**green.d), best)


# -- sparse / rarefied classification --------------------------------------------


@dataclass
class SparseMap:
    """Sparse/rarefied status of the M-adic boxes relevant to the good patches."""

    eta: float
    sparse: dict  # (side, base) -> bool
    rarefied: dict

    def is_sparse(self, box: Box) -> bool:
        return self.sparse[(box.side, box.base)]

    def is_rarefied(self, box: Box) -> bool:
        return self.rarefied[(box.side, box.base)]


def sparse_rarefied(tree: MadicTree, good_bprimes, green: GreenTable,
                    params: CoarseParams, cubes=None) -> SparseMap:
    """Classify every box in the towers above the good patches.

    A box is sparse when the capacity of its intersection with the union of
    good patches stays below eta |box|^{(d-2)/d}; rarefied when it and all its
    ancestors are sparse. Boxes inside a good patch are never sparse because a
    full box already meets the capacity floor defining eta.
    """
    eta = sparseness_constant(green, tree.cfg.M, params.eta_box_range, cubes=cubes)
    sparse = {}
    relevant = set()
    for bp in good_bprimes:
        for anc in tower(bp, tree):
            relevant.add((anc.side, anc.base))
    for side, base in sorted(relevant, key=lambda t: (-t[0], t[1])):
        box = Box(base, side)
        members = [bp for bp in good_bprimes if box.contains_box(bp)]
        inside_any = any(bp.contains_box(box) for bp in good_bprimes)
        if inside_any:
            sparse[(side, base)] = False
            continue
        if not members:
            sparse[(side, base)] = True
            continue
        cap, _method = union_capacity(members, green, params)
        sparse[(side, base)] = cap < eta * box.volume ** ((green.d - 2) / green.d)
    rarefied = {}
    # towers are ancestor-closed, so parents precede children in the size order
    for side, base in sorted(relevant, key=lambda t: (-t[0], t[1])):
        box = Box(base, side)
        if tree.depth_of(box) == 0:
            rarefied[(side, base)] = sparse[(side, base)]
        else:
            parent = tree.parent(box)
            rarefied[(side, base)] = bool(sparse[(side, base)] and rarefied[(parent.side, parent.base)])
    return SparseMap(eta=eta, sparse=sparse, rarefied=rarefied)


def rarefied_mass_profile(tree: MadicTree, good_bprimes, sparse_map: SparseMap, depths) -> list:
    """Good-patch volume sitting inside rarefied boxes, by depth.

    Only ancestors of good patches can carry mass: a rarefied box can never
    lie inside a patch, so its intersection with the union is the union of the
    patches it contains.
    """
    out = []
    for k in depths:
        seen = set()
        total = 0
        for bp in good_bprimes:
            if tree.depth_of(bp) < k:
                continue
            anc = tree.box_at(k, bp.base)
            key = (anc.side, anc.base)
            if key in seen:
                continue
            seen.add(key)
            if not tree.in_root_region(anc):
                continue
            if sparse_map.is_rarefied(anc):
                total += sum(b.volume for b in good_bprimes if anc.contains_box(b))
        out.append(total)
    return out


def decay_depth(eps: float, c5: float, M: int, d: int, ell_n: int) -> int:
    """Smallest depth k with c5 (M^2/(3^d+1))^{-k} <= eps/2, capped at the tree depth."""
    ratio = M * M / (3**d + 1)
    k = 0
    while c5 * ratio ** (-k) > eps / 2 and k < ell_n:
        k += 1
    return k


# -- attachment maps --------------------------------------------------------------


def attachment(boxes) -> list:
    """Greedy idempotent attachment of boxes to earlier, not-smaller boxes.

    Input must be sorted by nonincreasing side. Returns phi with phi[i] the
    index attached to (phi[i] == i for retained roots). For disjoint M-adic
    boxes the construction guarantees that two roots are at mutual sup-distance
    at least the larger of their sides.
    """
    n = len(boxes)
    for a, b in zip(boxes[:-1], boxes[1:]):
        if a.side < b.side:
            raise ValueError("boxes must be sorted by nonincreasing size")
    phi = [-1] * n
    for i in range(n):
        if phi[i] >= 0:
            continue
        phi[i] = i
        hood = boxes[i].inflate(boxes[i].side)
        for j in range(n):
            if phi[j] < 0 and hood.contains_box(boxes[j]):
                phi[j] = i
    return phi


# -- column extraction and thinning ------------------------------------------------


def extract_columns(a_boxes, b: Box, cfg: ScaleConfig, a_min: float = 0.0) -> dict:
    """One L0-box per column along the widest coordinate projection, restricted
    to the densest residue class so that retained columns are Kbar L0-spaced.

    Returns the selection plus the projection bookkeeping; raises when no
    projection covers an a_min fraction of the enclosing box's face area.
    """
    if not a_boxes:
        raise ProjectionTooThinError("projection-too-thin: empty box collection")
    d = cfg.d
    bases = np.asarray([bx.base for bx in a_boxes], dtype=np.int64)
    best_axis, best_cols = -1, None
    for axis in range(d):
        cols = np.unique(np.delete(bases, axis, axis=1), axis=0)
        if best_cols is None or cols.shape[0] > best_cols.shape[0]:
            best_axis, best_cols = axis, cols
    proj_area = best_cols.shape[0] * cfg.L0 ** (d - 1)
    if proj_area < a_min * b.volume ** ((d - 1) / d):
        raise ProjectionTooThinError(
            f"projection-too-thin: best projection covers {proj_area} "
            f"< {a_min} |B|^((d-1)/d)"
        )
    axis = best_axis
    proj = np.delete(bases, axis, axis=1)
    # densest residue class of Kbar-spaced columns
    classes = (proj // cfg.L0) % cfg.Kbar
    uniq, inv, counts = np.unique(classes, axis=0, return_inverse=True, return_counts=True)
    order = np.lexsort(uniq.T[::-1])
    best = max(order, key=lambda i: (counts[i], -i))
    chosen = inv == best
    # one box per column: the least base along the projection axis
    sel = {}
    for i in np.nonzero(chosen)[0]:
        key = tuple(proj[i])
        if key not in sel or bases[i, axis] < bases[sel[key], axis]:
            sel[key] = int(i)
    picked = sorted(sel.values(), key=lambda i: tuple(bases[i]))
    selected = [a_boxes[i] for i in picked]
    return {
        "boxes": selected,
        "axis": axis,
        "n_columns": int(best_cols.shape[0]),
        "proj_area": int(proj_area),
        "kept_columns": len(selected),
    }


def thin_capacity(a_boxes, green: GreenTable, cfg: ScaleConfig, cap_b0: float,
                  params: CoarseParams, count_budget: int | None = None) -> dict:
    """Greedy capacity-preserving thinning of a spaced box collection.

    Repeatedly keeps the box with the largest potential-screened marginal gain
    until the budget (count_budget or thin_budget_factor cap(A)/cap(B0)) is
    reached. The achieved capacity and count ratios are measured and returned,
    not assumed.
    """
    if not a_boxes:
        return {"boxes": [], "cap_ratio": 1.0, "count_ratio": 0.0, "cap_total": 0.0, "cap_kept": 0.0}
    cap_total, _ = union_capacity(a_boxes, green, params)
    if count_budget is None:
        count_budget = max(1, math.floor(params.thin_budget_factor * cap_total / cap_b0))
    if len(a_boxes) <= count_budget:
        return {
            "boxes": list(a_boxes),
            "cap_ratio": 1.0,
            "count_ratio": len(a_boxes) * cap_b0 / max(cap_total, 1e-300),
            "cap_total": cap_total,
            "cap_kept": cap_total,
        }
    remaining = sorted(a_boxes, key=lambda bx: bx.base)
    probes = [bx.points()[:: max(1, bx.volume // 8)] for bx in remaining]
    selected = []
    eq_sel = None
    while remaining and len(selected) < count_budget:
        if eq_sel is None:
            pick = 0  # first pick: lexicographically first (all boxes congruent)
        else:
            # marginal capacity gain screened by the current potential: a box
            # already shadowed by the selection adds little
            scores = [1.0 - float(np.mean(hitting_potential(eq_sel, p, green))) for p in probes]
            pick = int(np.argmax(scores))
        selected.append(remaining.pop(pick))
        probes.pop(pick)
        pts = union_boundary_points(selected)
        if pts.shape[0] <= params.subsample_max:
            eq_sel = equilibrium(pts, green, solver_cap=params.solver_cap)
        else:
            stride = math.ceil(pts.shape[0] / params.subsample_max)
            eq_sel = equilibrium(pts[::stride], green, solver_cap=params.solver_cap)
    cap_kept, _ = union_capacity(selected, green, params)
    return {
        "boxes": selected,
        "cap_ratio": cap_kept / max(cap_total, 1e-300),
        "count_ratio": len(selected) * cap_b0 / max(cap_total, 1e-300),
        "cap_total": cap_total,
        "cap_kept": cap_kept,
    }


def enforce_spacing(boxes, min_dist: int) -> list:
    """Deterministically drop boxes closer than min_dist (sup-norm, base points)."""
    kept = []
    for bx in sorted(boxes, key=lambda b: b.base):
        ok = True
        for k in kept:
            if max(abs(a - b) for a, b in zip(bx.base, k.base)) < min_dist:
                ok = False
                break
        if ok:
            kept.append(bx)
    return kept


# -- volume of a union --------------------------------------------------------------


def volume_of_union(boxes) -> int:
    """Exact site volume of a union of boxes via slab-wise 2D compression."""
    if not boxes:
        return 0
    d = boxes[0].d
    if d != 3:
        # small fallback: dense mask over the joint bounding box
        lo = np.min([b.base for b in boxes], axis=0)
        hi = np.max([np.asarray(b.base) + b.side for b in boxes], axis=0)
        mask = np.zeros(tuple(hi - lo), dtype=bool)
        for b in boxes:
            sl = tuple(slice(bb - l, bb - l + b.side) for bb, l in zip(b.base, lo))
            mask[sl] = True
        return int(mask.sum())
    xs = np.unique(np.concatenate([[b.base[0], b.base[0] + b.side] for b in boxes]))
    ys = np.unique(np.concatenate([[b.base[1], b.base[1] + b.side] for b in boxes]))
    zs = np.unique(np.concatenate([[b.base[2], b.base[2] + b.side] for b in boxes]))
    total = 0
    for x0, x1 in zip(xs[:-1], xs[1:]):
        active = [b for b in boxes if b.base[0] <= x0 and x1 <= b.base[0] + b.side]
        if not active:
            continue
        area = np.zeros((ys.shape[0] - 1, zs.shape[0] - 1), dtype=bool)
        for b in active:
            iy0, iy1 = np.searchsorted(ys, [b.base[1], b.base[1] + b.side])
            iz0, iz1 = np.searchsorted(zs, [b.base[2], b.base[2] + b.side])
            area[iy0:iy1, iz0:iz1] = True
        cell = np.outer(np.diff(ys), np.diff(zs))
        total += int(x1 - x0) * int(cell[area].sum())
    return total


# -- the full construction -----------------------------------------------------------


def boundary_anchor_candidates(grid: BoxLabelGrid, beta: float) -> list:
    """Good high-count boxes on the box-boundary of U1 (not in U1, adjacent to it)."""
    adjacent = ndimage.binary_dilation(grid.in_u1, structure=_STRUCTURE[grid.cfg.d])
    on_boundary = adjacent & ~grid.in_u1
    eligible = on_boundary & grid.good & (grid.n_u >= beta * grid.cap_d0)
    return [grid.b0_box(tuple(idx)) for idx in np.argwhere(eligible)]


def build_c_omega(grid: BoxLabelGrid, tree: MadicTree, eps: float, beta: float,
                  green: GreenTable, params: CoarseParams | None = None,
                  cubes=None) -> ComegaResult:
    """Construct the anchor set from the current labels.

    Requires in_u1, in_bub, good and the query-box counts to be filled in.
    Sub-extraction failures degrade to warnings and a partial output flagged
    non-conforming.
    """
    params = params or CoarseParams()
    cfg = grid.cfg
    d = cfg.d
    cap_b0 = cubes.capacity(cfg.L0) if cubes is not None else equilibrium(Box((0,) * d, cfg.L0), green).capacity
    dn_vol = (2 * grid.N + 1) ** d
    bub_boxes = [grid.b1_box(tuple(idx)) for idx in np.argwhere(grid.in_bub)]
    bub_vol = sum(b.volume for b in bub_boxes)
    diag = {
        "bub_volume": bub_vol,
        "bub_fraction": bub_vol / dn_vol,
        "warnings": [],
        "complexity_log_count": 0.0,
        "conforming": True,
    }
    if bub_vol < eps * dn_vol:
        diag["capacity"] = 0.0
        diag["c0_empirical"] = 0.0
        diag["neighborhood_volume"] = 0
        return ComegaResult(boxes=[], tag=CaseTag.EMPTY, diagnostics=diag)

    counts = ComplementCounts(grid)
    bbars = {}
    for b1 in bub_boxes:
        try:
            bbars[b1] = find_bbar(b1, counts, tree)
        except BaseBoxFailsError as exc:
            diag["warnings"].append(str(exc))
            diag["conforming"] = False
    top_hit = any(tree.depth_of(b) == 0 for b in bbars.values())

    if top_hit:
        tag = CaseTag.TOP_SCALE
        region = centered_box(4 * grid.N, d)
        candidates = [bx for bx in boundary_anchor_candidates(grid, beta) if region.contains_box(bx)]
        boxes = _extract_and_thin(candidates, region, grid, green, cap_b0, params, diag, budget=None)
    else:
        tag = CaseTag.SUB_SCALE
        boxes = _sub_scale_selection(grid, tree, bbars, counts, eps, beta, green, cap_b0, params, diag, cubes)

    boxes = enforce_spacing(boxes, cfg.Kbar * cfg.L0)
    _finalize_diagnostics(boxes, grid, bub_boxes, eps, green, params, diag, cubes)
    return ComegaResult(boxes=boxes, tag=tag, diagnostics=diag)


def _extract_and_thin(candidates, region, grid, green, cap_b0, params, diag, budget):
    cfg = grid.cfg
    if not candidates:
        diag["warnings"].append("no anchor candidates on the U1 boundary")
        diag["conforming"] = False
        return []
    try:
        cols = extract_columns(candidates, region, cfg, a_min=params.a_min)
    except ProjectionTooThinError as exc:
        diag["warnings"].append(str(exc))
        diag["conforming"] = False
        return []
    diag["complexity_log_count"] += len(cols["boxes"]) * math.log(max(len(candidates), 2))
    thin = thin_capacity(cols["boxes"], green, cfg, cap_b0, params, count_budget=budget)
    diag.setdefault("thin_ratios", []).append((thin["cap_ratio"], thin["count_ratio"]))
    return thin["boxes"]


def _sub_scale_selection(grid, tree, bbars, counts, eps, beta, green, cap_b0, params, diag, cubes):
    cfg = grid.cfg
    d = cfg.d
    bprimes = maximal_bprimes(list(bbars.keys()), counts, tree)
    # sandwich carried by the construction: each parent patch holds between
    # 1/(2 M^d) and 1/2 of complement volume
    for bp in bprimes:
        c = counts.complement_sites(bp)
        if not (bp.volume <= 2 * cfg.M**d * c and 2 * c < bp.volume):
            diag["warnings"].append(f"half-volume sandwich violated at {bp.base}")
    bad_counts = BadCounts(grid)
    good_js = [bp for bp in bprimes if classify_goodness_j(bp, bad_counts.bad_boxes(bp), params.c4, cfg)]
    diag["n_bprimes"] = len(bprimes)
    diag["n_good_bprimes"] = len(good_js)
    if not good_js:
        diag["warnings"].append("all patches spoiled by bad boxes")
        diag["conforming"] = False
        return []
    smap = sparse_rarefied(tree, good_js, green, params, cubes=cubes)
    k_eps = decay_depth(eps, params.c5, cfg.M, d, cfg.ell_n)
    diag["k_eps"] = k_eps
    btilde_of = {}
    for bp in good_js:
        for anc in tower(bp, tree):  # largest first
            if not smap.is_sparse(anc):
                btilde_of[bp] = anc
                break
    very_good = [bp for bp in good_js if tree.depth_of(btilde_of[bp]) <= k_eps]
    diag["n_very_good"] = len(very_good)
    if not very_good:
        diag["warnings"].append("no patch is felt at depth <= k_eps")
        diag["conforming"] = False
        return []
    anchor_pool = boundary_anchor_candidates(grid, beta)
    patches = {}
    for bp in very_good:
        bt = btilde_of[bp]
        patches[(bt.side, bt.base)] = bt
    btildes = sorted(patches.values(), key=lambda b: (-b.side, b.base))
    phi = attachment(btildes)
    diag["complexity_log_count"] += len(btildes) * math.log(max(len(list(tree.boxes_at_depth(k_eps))), 2))
    out = []
    for i, bt in enumerate(btildes):
        if phi[i] != i:
            continue
        members = sorted(
            (bp for bp in good_js if bt.contains_box(bp)), key=lambda b: (-b.side, b.base)
        )
        if not members:
            continue
        phi_i = attachment(members)
        harvested = []
        for j, bp in enumerate(members):
            if phi_i[j] != j:
                continue
            cands = [bx for bx in anchor_pool if bp.contains_box(bx)]
            if not cands:
                continue
            try:
                cols = extract_columns(cands, bp, cfg, a_min=params.a_min)
            except ProjectionTooThinError as exc:
                diag["warnings"].append(f"{exc} (patch at {bp.base})")
                diag["conforming"] = False
                continue
            diag["complexity_log_count"] += len(cols["boxes"]) * math.log(max(len(cands), 2))
            harvested.extend(cols["boxes"])
        if not harvested:
            continue
        budget = max(1, math.floor(params.a_i_count_factor * (bt.volume / cfg.L0**d) ** ((d - 2) / d)))
        thin = thin_capacity(harvested, green, cfg, cap_b0, params, count_budget=budget)
        diag.setdefault("thin_ratios", []).append((thin["cap_ratio"], thin["count_ratio"]))
        out.extend(thin["boxes"])
    return out


def _finalize_diagnostics(boxes, grid, bub_boxes, eps, green, params, diag, cubes):
    cfg = grid.cfg
    d = cfg.d
    dn_vol = (2 * grid.N + 1) ** d
    if boxes:
        diag["capacity"], diag["capacity_method"] = union_capacity(boxes, green, params)
        inflated = [b.inflate(2 * cfg.Kbar * cfg.L1) for b in boxes]
        diag["neighborhood_volume"] = volume_of_union(inflated)
    else:
        diag["capacity"] = 0.0
        diag["neighborhood_volume"] = 0
    single_nbhd = (cfg.L0 + 4 * cfg.Kbar * cfg.L1) ** d
    diag["n_threshold_warning"] = single_nbhd > eps * dn_vol
    if diag["n_threshold_warning"] and boxes:
        logger.warning("neighborhood-volume budget structurally unreachable at this N")
    # potential over the bubble set
    if boxes and bub_boxes:
        pts = union_boundary_points(boxes)
        if pts.shape[0] > params.subsample_max:
            pts = pts[:: math.ceil(pts.shape[0] / params.subsample_max)]
        eq = equilibrium(pts, green, solver_cap=params.solver_cap)
        sites = _sample_bub_sites(bub_boxes, params.bub_site_sample)
        h = hitting_potential(eq, sites, green)
        bub_vol = sum(b.volume for b in bub_boxes)
        weight = bub_vol / sites.shape[0]
        h_sorted = np.sort(h)
        budget = eps * dn_vol
        k = min(int(budget / weight), h_sorted.shape[0] - 1)
        diag["c0_empirical"] = float(h_sorted[k])
        diag["h_on_bub"] = np.histogram(h, bins=20, range=(0.0, 1.0))
    else:
        diag["c0_empirical"] = 0.0
        diag["h_on_bub"] = None


def _sample_bub_sites(bub_boxes, n_sample):
    total = sum(b.volume for b in bub_boxes)
    if total <= n_sample:
        return np.concatenate([b.points() for b in bub_boxes])
    per_box = max(1, n_sample // len(bub_boxes))
    parts = []
    for b in bub_boxes:
        pts = b.points()
        stride = max(1, pts.shape[0] // per_box)
        parts.append(pts[::stride])
    return np.concatenate(parts)


def verify_contract(result: ComegaResult, grid: BoxLabelGrid, green: GreenTable,
                    eps: float, N: int, beta: float, params: CoarseParams | None = None) -> dict:
    """Check the anchor-set contract on a built result.

    Box quality and spacing are exact checks; the neighborhood volume check is
    reported together with the structural small-N warning; the potential floor
    is the largest level c such that the bubble sites below c have volume at
    most eps |D_N|; the complexity log-count is informational.
    """
    params = params or CoarseParams()
    cfg = grid.cfg
    d = cfg.d
    dn_vol = (2 * N + 1) ** d
    report = {}
    ok_quality = True
    for bx in result.boxes:
        idx = grid.b0_index(bx.base)
        if not (grid.good[idx] and grid.n_u[idx] >= beta * grid.cap_d0[idx]):
            ok_quality = False
            break
    report["quality_exact"] = ok_quality
    ok_spacing = True
    for i, a in enumerate(result.boxes):
        for b in result.boxes[i + 1 :]:
            if max(abs(x - y) for x, y in zip(a.base, b.base)) < cfg.Kbar * cfg.L0:
                ok_spacing = False
    report["spacing_exact"] = ok_spacing
    nbhd = result.diagnostics.get("neighborhood_volume", 0)
    report["neighborhood_volume"] = nbhd
    report["neighborhood_ok"] = nbhd <= eps * dn_vol
    report["n_threshold_warning"] = result.diagnostics.get("n_threshold_warning", False)
    report["c0_empirical"] = result.diagnostics.get("c0_empirical", 0.0)
    report["complexity_log_count"] = result.diagnostics.get("complexity_log_count", 0.0)
    report["complexity_ratio"] = report["complexity_log_count"] / N ** (d - 2)
    report["tag"] = result.tag.value
    return report
