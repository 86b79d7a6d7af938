"""Batched per-box excursion statistics for whole-universe classification.

Evaluating the regularity clauses needs, for every L0-box of the universe, the
label-ordered excursions of the soup relative to that box's query region. Done
naively this scans every trajectory once per box. The kernel here exploits two
facts: visits can be bucketed by L0-cell once and gathered per box, and the
K-scale outer boxes are so much larger than the classification region that a
trajectory can only close an excursion during rare far crossings, which are
precomputed once. Per-box records are then assembled transiently and fed to
the ordinary classifier.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError, InsufficientExcursionsError
from .green import CubeEquilibriumCache, EquilibriumData
from .interlacements import TrajectorySoup
from .lattice import Box, ScaleConfig
from .observables import BoxLabelGrid, BoxRecord, classify_box, query_box

logger = logging.getLogger(__name__)


def classification_level(alpha: float, cap_query: float, tail_sigmas: float = 6.0) -> float:
    """Soup level guaranteeing the alpha-prefix exists with overwhelming odds.

    Excursion prefixes are indexed by rank, not label, so the sampled level
    must exceed alpha by enough Poisson margin that the recorded count covers
    floor(alpha cap) for every box.
    """
    target = alpha * cap_query
    u = alpha
    while u * cap_query - tail_sigmas * math.sqrt(u * cap_query) < target:
        u *= 1.05
    return u


@dataclass
class _TrajLocal:
    """Per-trajectory bookkeeping restricted to the classification region."""

    label: float
    far_times_b0: np.ndarray  # time indices of candidate far crossings (L0 scale)
    far_pos_b0: np.ndarray
    far_times_b1: np.ndarray
    far_pos_b1: np.ndarray


class SoupBoxKernel:
    """Cell-bucketed visit store over the classification region of one soup."""

    def __init__(self, soup: TrajectorySoup, cfg: ScaleConfig, N: int, cubes: CubeEquilibriumCache):
        self.soup = soup
        self.cfg = cfg
        self.N = N
        self.cubes = cubes
        d = cfg.d
        if d != 3:
            raise NotImplementedError("the batched kernel is written for d = 3")
        L0 = cfg.L0
        bound = 3 * N + 5 * L0  # covers every query box of the universe
        halo_half = (soup.halo.side - 1) // 2
        need = max(3 * N + L0 + cfg.K * L0, N + cfg.K * cfg.L1)
        if halo_half < need:
            raise GeometryError(
                f"geometry: halo half-side {halo_half} cannot contain the outer "
                f"boxes of both scales (need {need}); raise halo_factor"
            )
        self.cell_lo = -(bound // L0) - 1
        n_cells = 2 * (bound // L0 + 1) + 1
        self.n_cells = n_cells

        rows_cell, rows_traj, rows_time = [], [], []
        rows_pos, rows_hold = [], []
        self.locals: list = []
        far_b0_threshold = cfg.K * L0 - 2 - (3 * N + L0)
        far_b1_threshold = cfg.K * cfg.L1 - 2 - N
        for ti, traj in enumerate(soup.trajectories):
            pos = traj.positions.astype(np.int64)
            supn = np.max(np.abs(pos), axis=1)
            local = supn <= bound
            idx = np.nonzero(local)[0]
            if idx.size:
                p = pos[idx]
                cell = p // L0 - self.cell_lo
                key = (cell[:, 0] * n_cells + cell[:, 1]) * n_cells + cell[:, 2]
                rows_cell.append(key.astype(np.int64))
                rows_traj.append(np.full(idx.size, ti, dtype=np.int32))
                rows_time.append(idx.astype(np.int32))
                rows_pos.append(p.astype(np.int32))
                if traj.holds is not None:
                    rows_hold.append(traj.holds[idx])
                else:
                    rows_hold.append(np.ones(idx.size))
            fb0 = np.nonzero(supn >= far_b0_threshold)[0]
            fb1 = np.nonzero(supn >= far_b1_threshold)[0]
            self.locals.append(
                _TrajLocal(
                    label=traj.label,
                    far_times_b0=fb0.astype(np.int64),
                    far_pos_b0=pos[fb0],
                    far_times_b1=fb1.astype(np.int64),
                    far_pos_b1=pos[fb1],
                )
            )
        if rows_cell:
            cell = np.concatenate(rows_cell)
            order = np.lexsort((np.concatenate(rows_time), np.concatenate(rows_traj), cell))
            self.cell = cell[order]
            self.traj = np.concatenate(rows_traj)[order]
            self.time = np.concatenate(rows_time)[order]
            self.pos = np.concatenate(rows_pos)[order]
            self.hold = np.concatenate(rows_hold)[order]
        else:
            self.cell = np.zeros(0, dtype=np.int64)
            self.traj = np.zeros(0, dtype=np.int32)
            self.time = np.zeros(0, dtype=np.int32)
            self.pos = np.zeros((0, 3), dtype=np.int32)
            self.hold = np.zeros(0)
        # dense per-cell offsets into the sorted store
        counts = np.bincount(self.cell, minlength=n_cells**3) if self.cell.size else np.zeros(n_cells**3, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(counts)])
        # shared query-box equilibrium template
        side_d0 = 7 * L0
        eq = cubes.get(side_d0)
        self.cap_d0 = eq.capacity
        self.ebar_template = np.zeros((side_d0,) * 3)
        self.ebar_template[tuple(eq.points.T)] = eq.masses / eq.capacity
        self.cap_b1 = cubes.capacity(cfg.L1)

    # -- gathering -----------------------------------------------------------

    def _cells_block(self, c0, width):
        """Store rows for the width^3 block of cells at corner c0 (cell units)."""
        n = self.n_cells
        axes = [np.arange(c, c + width) for c in c0]
        axes = [a[(a >= 0) & (a < n)] for a in axes]  # clip per axis before flattening
        if any(a.size == 0 for a in axes):
            return np.zeros(0, dtype=np.int64)
        keys = ((axes[0][:, None, None] * n + axes[1][None, :, None]) * n + axes[2][None, None, :]).ravel()
        starts = self.offsets[keys]
        ends = self.offsets[keys + 1]
        take = ends > starts
        if not take.any():
            return np.zeros(0, dtype=np.int64)
        pieces = [np.arange(s, e) for s, e in zip(starts[take], ends[take])]
        return np.concatenate(pieces)

    def visits_for_query_box(self, b0: Box):
        """All store rows inside the query box of b0, ordered by (traj, time)."""
        L0 = self.cfg.L0
        c0 = tuple(b // L0 - self.cell_lo - 3 for b in b0.base)
        rows = self._cells_block(c0, 7)
        if rows.size == 0:
            return rows
        order = np.lexsort((self.time[rows], self.traj[rows]))
        return rows[order]

    # -- per-box records -------------------------------------------------------

    def record_for_box(self, b0: Box) -> BoxRecord:
        """Transient label-ordered excursion record of one L0-box."""
        cfg = self.cfg
        d0 = query_box(b0, cfg)
        rows = self.visits_for_query_box(b0)
        labels, in_box, in_query, weights = [], [], [], []
        lo_u0 = np.asarray(b0.base, dtype=np.int64) - (cfg.K * cfg.L0 - 1)
        hi_u0 = np.asarray(b0.base, dtype=np.int64) + cfg.K * cfg.L0 - 1  # exclusive
        base_d0 = np.asarray(d0.base, dtype=np.int64)
        if rows.size:
            tr = self.traj[rows]
            bounds = np.nonzero(np.diff(tr))[0] + 1
            groups = np.split(rows, bounds)
        else:
            groups = []
        for grp in groups:
            ti = int(self.traj[grp[0]])
            info = self.locals[ti]
            times = self.time[grp].astype(np.int64)
            pos = self.pos[grp].astype(np.int64)
            holds = self.hold[grp]
            out_times = self._exact_far_times(info.far_times_b0, info.far_pos_b0, lo_u0, hi_u0)
            if out_times.size:
                k = np.searchsorted(out_times, times)
                new_exc = np.ones(times.shape[0], dtype=bool)
                new_exc[1:] = k[1:] > k[:-1]
                exc_id = np.cumsum(new_exc) - 1
                n_exc = int(exc_id[-1]) + 1
            else:
                exc_id = np.zeros(times.shape[0], dtype=np.int64)
                n_exc = 1
            rel = pos - base_d0
            w = holds * self.ebar_template[rel[:, 0], rel[:, 1], rel[:, 2]]
            inside_b0 = b0.contains_points_mask(pos)
            for e in range(n_exc):
                sel = exc_id == e
                labels.append(info.label)
                in_query.append(np.unique(pos[sel], axis=0))
                in_box.append(np.unique(pos[sel & inside_b0], axis=0))
                weights.append(float(np.sum(w[sel])))
        return BoxRecord(
            box=b0,
            cap_query=self.cap_d0,
            labels=np.asarray(labels),
            sites_in_box=in_box,
            sites_in_query=in_query,
            boundary_weight=np.asarray(weights),
        )

    @staticmethod
    def _exact_far_times(cand_times, cand_pos, lo, hi):
        if cand_times.size == 0:
            return cand_times
        outside = np.any((cand_pos < lo) | (cand_pos >= hi), axis=1)
        return cand_times[outside]

    # -- L1-scale excursion counts ----------------------------------------------

    def b1_excursion_count(self, b1: Box, level: float) -> int:
        """Excursions from b1 to the boundary of its K-scale box, label <= level."""
        cfg = self.cfg
        lo_u1 = np.asarray(b1.base, dtype=np.int64) - (cfg.K * cfg.L1 - 1)
        hi_u1 = np.asarray(b1.base, dtype=np.int64) + cfg.K * cfg.L1 - 1
        k = cfg.k_ratio
        c0 = tuple(b // cfg.L0 - self.cell_lo for b in b1.base)
        rows = self._cells_block(c0, k)
        total = 0
        if rows.size == 0:
            return 0
        order = np.lexsort((self.time[rows], self.traj[rows]))
        rows = rows[order]
        tr = self.traj[rows]
        bounds = np.nonzero(np.diff(tr))[0] + 1
        for grp in np.split(rows, bounds):
            ti = int(self.traj[grp[0]])
            info = self.locals[ti]
            if info.label > level:
                continue
            times = self.time[grp].astype(np.int64)
            out_times = self._exact_far_times(info.far_times_b1, info.far_pos_b1, lo_u1, hi_u1)
            if out_times.size:
                kk = np.searchsorted(out_times, times)
                total += 1 + int(np.sum(kk[1:] > kk[:-1]))
            else:
                total += 1
        return total


def classify_universe(soup: TrajectorySoup, cfg: ScaleConfig, N: int, u: float,
                      alpha: float, beta: float, gamma: float,
                      cubes: CubeEquilibriumCache, grid: BoxLabelGrid | None = None) -> BoxLabelGrid:
    """Fill a label grid from one soup: goodness, counts and local levels.

    The soup must be sampled at a level covering the alpha-prefix (see
    classification_level); boxes whose records still fall short are counted
    and conservatively marked bad. Only boxes with all 2d neighbors inside the
    universe are classified; the outermost ring lies outside the exploration
    region where goodness is never consulted.
    """
    kernel = SoupBoxKernel(soup, cfg, N, cubes)
    if grid is None:
        grid = BoxLabelGrid.create(cfg, N)
    grid.cap_d0[:] = kernel.cap_d0
    shape = grid.b0_shape
    layers = {}  # leading index -> {idx: record}, a rolling 3-layer window

    def load_layer(x):
        if x < 0 or x >= shape[0] or x in layers:
            return
        layer = {}
        for rest in np.ndindex(*shape[1:]):
            idx = (x,) + rest
            rec = kernel.record_for_box(grid.b0_box(idx))
            grid.n_u[idx] = rec.count_at(u)
            layer[idx] = rec
        layers[x] = layer

    def get_record(idx):
        return layers[idx[0]][idx]

    n_insufficient = 0
    for x in range(shape[0]):
        for xx in (x - 1, x, x + 1):
            load_layer(xx)
        for rest in np.ndindex(*shape[1:]):
            idx = (x,) + rest
            if any(i == 0 or i == s - 1 for i, s in zip(idx, shape)):
                grid.good[idx] = False
                continue
            rec = get_record(idx)
            neighbors = {}
            for axis in range(cfg.d):
                for step in (-1, 1):
                    off = [0, 0, 0]
                    off[axis] = step
                    nidx = tuple(i + o for i, o in zip(idx, off))
                    neighbors[tuple(off)] = get_record(nidx)
            try:
                res = classify_box(rec, neighbors, alpha, beta, gamma, cfg)
                grid.good[idx] = res.good
            except InsufficientExcursionsError:
                n_insufficient += 1
                grid.good[idx] = False
        layers.pop(x - 1, None)
    if n_insufficient:
        logger.warning("%d boxes lacked the excursion prefix and were marked bad", n_insufficient)
    grid.meta_insufficient = n_insufficient
    # local levels of the central L1-boxes
    for idx1 in np.ndindex(*grid.b1_shape):
        b1 = grid.b1_box(idx1)
        grid.u_b1[idx1] = kernel.b1_excursion_count(b1, u) / kernel.cap_b1
    return grid
