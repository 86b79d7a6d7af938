"""Discrete potential theory for the simple random walk on Z^d.

Green function values come from a one-time numerical quadrature of the
Bessel-product integral

    g(v) = int_0^infty  prod_i  e^{-t/d} I_{|v_i|}(t/d)  dt,

tabulated inside a sup-norm radius and matched to the power-law far field
beyond it. Equilibrium measures and capacities are dense symmetric solves of
the Gram system ``sum_y g(x, y) e(y) = 1`` on the internal boundary.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gamma, ive

from .errors import HaloTooSmallError, SingularSystemError, SupportViolationError
from .lattice import Box

logger = logging.getLogger(__name__)

CACHE_VERSION = 2

_NEIGHBOR_STEPS = {}


def neighbor_steps(d):
    """The 2d unit steps, cached per dimension."""
    if d not in _NEIGHBOR_STEPS:
        steps = np.zeros((2 * d, d), dtype=np.int64)
        for i in range(d):
            steps[2 * i, i] = 1
            steps[2 * i + 1, i] = -1
        _NEIGHBOR_STEPS[d] = steps
    return _NEIGHBOR_STEPS[d]


def far_field_constant(d):
    """Leading coefficient of g: (d/2) Gamma(d/2 - 1) pi^{-d/2}."""
    return 0.5 * d * gamma(0.5 * d - 1.0) * math.pi ** (-0.5 * d)


def _quad_panels(t_cut=1.0e6, ratio=1.4, nodes=24):
    """Gauss-Legendre nodes/weights on geometric panels covering [0, t_cut]."""
    x, w = np.polynomial.legendre.leggauss(nodes)
    edges = [0.0, 1.0]
    while edges[-1] < t_cut:
        edges.append(min(edges[-1] * ratio, t_cut))
    ts, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        ts.append(0.5 * (b - a) * (x + 1.0) + a)
        ws.append(0.5 * (b - a) * w)
    return np.concatenate(ts), np.concatenate(ws)


def _tail_integral(ns, d, t_cut):
    """Analytic tail int_{t_cut}^infty of the Bessel product, via the large-z
    asymptotics of e^{-z} I_n(z) to third order."""
    n = np.asarray(ns, dtype=np.float64)
    mu1 = (4 * n**2 - 1) / 8.0
    mu2 = (4 * n**2 - 1) * (4 * n**2 - 9) / 128.0
    mu3 = (4 * n**2 - 1) * (4 * n**2 - 9) * (4 * n**2 - 25) / 3072.0
    a = -mu1
    b = mu2
    c = -mu3
    # product of (1 + a_i/z + b_i/z^2 + c_i/z^3) over the d axes
    c1 = np.sum(a, axis=-1)
    c2 = np.sum(b, axis=-1)
    c3 = np.sum(c, axis=-1)
    for i in range(d):
        for j in range(d):
            if i != j:
                c3 = c3 + a[..., i] * b[..., j]
        for j in range(i + 1, d):
            c2 = c2 + a[..., i] * a[..., j]
    for i in range(d):
        for j in range(i + 1, d):
            for k in range(j + 1, d):
                c3 = c3 + a[..., i] * a[..., j] * a[..., k]
    z0 = t_cut / d
    pref = d * (2 * math.pi) ** (-0.5 * d)
    out = 0.0
    for m, cm in enumerate((1.0, c1, c2, c3)):
        p = 0.5 * d - 1.0 + m  # integral of z^{-d/2 - m} dz from z0
        out = out + pref * cm * z0 ** (-p) / p
    return out


@dataclass
class GreenTable:
    """Tabulated lattice Green function with a far-field power law.

    table is indexed by the coordinatewise absolute displacement, shape
    (exact_radius+1,)*d; beyond the sup-norm radius the value is
    far_const * |v|^{2-d}.
    """

    d: int
    exact_radius: int
    table: np.ndarray
    quad_nodes: int
    crossover_rel_error: float

    @property
    def far_const(self):
        return far_field_constant(self.d)

    @property
    def g0(self):
        return float(self.table[(0,) * self.d])

    @property
    def c_star(self):
        """Measured sup over the table of g(v) |v|^{d-2} (Euclidean norm)."""
        idx = np.indices(self.table.shape).reshape(self.d, -1).T
        r = np.sqrt((idx.astype(np.float64) ** 2).sum(axis=1))
        vals = self.table.reshape(-1)
        mask = r > 0
        return float(np.max(vals[mask] * r[mask] ** (self.d - 2)))

    # -- evaluation ---------------------------------------------------------

    def __call__(self, v):
        """Green value g(0, v); v is a (..., d) integer array of displacements."""
        v = np.asarray(v, dtype=np.int64)
        scalar = v.ndim == 1
        v = np.atleast_2d(v)
        a = np.abs(v)
        out = np.empty(a.shape[0], dtype=np.float64)
        near = np.max(a, axis=1) <= self.exact_radius
        if np.any(near):
            out[near] = self.table[tuple(a[near].T)]
        if np.any(~near):
            r = np.sqrt((a[~near].astype(np.float64) ** 2).sum(axis=1))
            out[~near] = self.far_const * r ** (2 - self.d)
        return float(out[0]) if scalar else out

    def pair_matrix(self, xs, ys=None):
        """Matrix g(x_i, y_j), built in row blocks to bound memory."""
        xs = np.asarray(xs, dtype=np.int64)
        ys = xs if ys is None else np.asarray(ys, dtype=np.int64)
        out = np.empty((xs.shape[0], ys.shape[0]), dtype=np.float64)
        block = max(1, int(2.0e7 // max(ys.shape[0], 1)))
        for i0 in range(0, xs.shape[0], block):
            i1 = min(i0 + block, xs.shape[0])
            diff = xs[i0:i1, None, :] - ys[None, :, :]
            out[i0:i1] = self(diff.reshape(-1, self.d)).reshape(i1 - i0, ys.shape[0])
        return out

    def operator_on_box(self, box: Box, x) -> float:
        """(G 1_box)(x) = sum over the box of g(x, y)."""
        diff = box.points() - np.asarray(x, dtype=np.int64)
        return float(np.sum(self(diff)))

    # -- construction / persistence -----------------------------------------

    @classmethod
    def build(cls, d=3, exact_radius=60, t_cut=1.0e6, nodes=24):
        t, w = _quad_panels(t_cut=t_cut, nodes=nodes)
        z = t / d
        orders = np.arange(exact_radius + 1)
        bess = ive(orders[:, None], z[None, :])  # e^{-z} I_n(z)
        shape = (exact_radius + 1,) * d
        idx = np.indices(shape).reshape(d, -1).T
        vals = np.empty(idx.shape[0], dtype=np.float64)
        chunk = max(1, int(4.0e7 // max(len(t), 1)))
        for i0 in range(0, idx.shape[0], chunk):
            sl = idx[i0 : i0 + chunk]
            prod = bess[sl[:, 0]]
            for k in range(1, d):
                prod = prod * bess[sl[:, k]]
            vals[i0 : i0 + chunk] = prod @ w + _tail_integral(sl, d, t_cut)
        table = vals.reshape(shape)
        obj = cls(d=d, exact_radius=exact_radius, table=table, quad_nodes=len(t), crossover_rel_error=0.0)
        obj.crossover_rel_error = obj._measure_crossover()
        return obj

    def _measure_crossover(self):
        """Relative far-field error on the sup-norm shell at the table edge."""
        R = self.exact_radius
        worst = 0.0
        for v in _shell_samples(self.d, R):
            exact = self.table[tuple(np.abs(v))]
            r = math.sqrt(sum(c * c for c in v))
            approx = self.far_const * r ** (2 - self.d)
            worst = max(worst, abs(approx / exact - 1.0))
        return worst

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        np.savez_compressed(
            path,
            version=CACHE_VERSION,
            d=self.d,
            exact_radius=self.exact_radius,
            quad_nodes=self.quad_nodes,
            crossover_rel_error=self.crossover_rel_error,
            table=self.table,
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            if int(z["version"]) != CACHE_VERSION:
                raise ValueError(f"green cache version mismatch in {path}")
            return cls(
                d=int(z["d"]),
                exact_radius=int(z["exact_radius"]),
                table=z["table"],
                quad_nodes=int(z["quad_nodes"]),
                crossover_rel_error=float(z["crossover_rel_error"]),
            )

    @classmethod
    def cached(cls, d=3, exact_radius=60, cache_path=None):
        """Load from the cache file if present and matching, else build and save."""
        if cache_path is None:
            root = os.environ.get("RILAB_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "rilab"))
            cache_path = os.path.join(root, f"green_d{d}_r{exact_radius}.npz")
        if os.path.exists(cache_path):
            try:
                obj = cls.load(cache_path)
                if obj.d == d and obj.exact_radius == exact_radius:
                    return obj
            except Exception:
                logger.warning("green cache at %s unreadable, rebuilding", cache_path)
        obj = cls.build(d=d, exact_radius=exact_radius)
        try:
            obj.save(cache_path)
        except OSError:
            logger.warning("could not write green cache to %s", cache_path)
        return obj


def _shell_samples(d, R):
    """A few displacements on the sup-norm shell of radius R (face, edge, corner)."""
    out = [(R,) + (0,) * (d - 1), (R,) * d]
    v = [R] * d
    v[-1] = R // 2
    out.append(tuple(v))
    out.append((R,) + (1,) * (d - 1))
    return out


# -- equilibrium measure / capacity ----------------------------------------


@dataclass
class EquilibriumData:
    """Equilibrium measure of a finite set: boundary sites, masses, capacity."""

    points: np.ndarray  # (m, d) supporting sites
    masses: np.ndarray  # (m,)
    capacity: float
    residual: float = 0.0

    @property
    def support(self):
        return [(tuple(int(c) for c in p), float(m)) for p, m in zip(self.points, self.masses)]

    def normalized_masses(self):
        return self.masses / self.capacity


def _as_points(A):
    if isinstance(A, Box):
        return A.points()
    pts = np.asarray(list(A) if not isinstance(A, np.ndarray) else A, dtype=np.int64)
    if pts.size == 0:
        return pts.reshape(0, 0)
    return np.atleast_2d(pts)


def internal_boundary(pts: np.ndarray) -> np.ndarray:
    """Sites of the set with at least one lattice neighbor outside it."""
    d = pts.shape[1]
    members = set(map(tuple, pts.tolist()))
    steps = neighbor_steps(d)
    keep = []
    for p in pts.tolist():
        for s in steps:
            q = tuple(p[i] + int(s[i]) for i in range(d))
            if q not in members:
                keep.append(p)
                break
    return np.asarray(keep, dtype=np.int64).reshape(-1, d)


NEG_MASS_TOL = 1.0e-9
RESIDUAL_TOL = 1.0e-10


def equilibrium(A, green: GreenTable, solver_cap=20000) -> EquilibriumData:
    """Solve ``sum_y g(x,y) e(y) = 1`` on A with e supported on the internal boundary.

    The boundary-restricted Gram solve is exact for the full problem (the true
    measure vanishes in the interior); the residual is verified on all of A and
    the solve falls back to the full set if it exceeds tolerance.
    """
    pts = _as_points(A)
    if pts.shape[0] == 0:
        return EquilibriumData(points=pts.reshape(0, green.d), masses=np.zeros(0), capacity=0.0)
    if pts.shape[0] > solver_cap:
        raise ValueError(f"set of {pts.shape[0]} points exceeds the solver cap {solver_cap}")
    if isinstance(A, Box):
        bnd = A.boundary_points()
    else:
        bnd = internal_boundary(pts)
    e = _gram_solve(bnd, green)
    res = _residual(pts, bnd, e, green)
    if res > RESIDUAL_TOL and bnd.shape[0] < pts.shape[0]:
        logger.warning("boundary-restricted equilibrium residual %.3e, retrying on the full set", res)
        bnd = pts
        e = _gram_solve(bnd, green)
        res = _residual(pts, bnd, e, green)
    neg = e < 0
    if np.any(e < -NEG_MASS_TOL):
        raise SupportViolationError(
            f"support-violation: equilibrium mass {e.min():.3e} below -{NEG_MASS_TOL:g}"
        )
    if np.any(neg):
        logger.warning("clamping %d slightly negative equilibrium masses", int(neg.sum()))
        e = np.where(neg, 0.0, e)
    keep = e > 0
    return EquilibriumData(points=bnd[keep], masses=e[keep], capacity=float(e.sum()), residual=res)


def _gram_solve(bnd, green):
    G = green.pair_matrix(bnd)
    try:
        cf = cho_factor(G, lower=True, check_finite=False)
        return cho_solve(cf, np.ones(bnd.shape[0]), check_finite=False)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - table is PD
        raise SingularSystemError(f"singular-system: {exc}") from exc
    except ValueError as exc:
        raise SingularSystemError(f"singular-system: {exc}") from exc


def _residual(pts, bnd, e, green, block=1024):
    worst = 0.0
    for i0 in range(0, pts.shape[0], block):
        chunk = pts[i0 : i0 + block]
        h = green.pair_matrix(chunk, bnd) @ e
        worst = max(worst, float(np.max(np.abs(h - 1.0))))
    return worst


def hitting_potential(eq: EquilibriumData, x, green: GreenTable):
    """h_A(x) = sum_y g(x, y) e_A(y); 1 on A, decaying like cap * g off A."""
    x = np.asarray(x, dtype=np.int64)
    if eq.points.shape[0] == 0:
        return 0.0 if x.ndim == 1 else np.zeros(x.shape[0])
    if x.ndim == 1:
        return float(np.dot(green(x[None, :] - eq.points), eq.masses))
    return green.pair_matrix(x, eq.points) @ eq.masses


# -- exact cube equilibria via symmetry orbits ------------------------------


def cube_orbit_equilibrium(side: int, green: GreenTable):
    """Equilibrium measure of [0, side)^d using the cube symmetry group.

    The measure is constant on orbits of the hyperoctahedral group acting on
    the boundary, so the Gram system reduces to one row per orbit; this keeps
    even large windows exact.
    """
    d = green.d
    box = Box((0,) * d, side)
    bnd = box.boundary_points()
    # orbit key: sorted folded distances to the nearer face per axis
    folded = np.minimum(bnd, side - 1 - bnd)
    keys = np.sort(folded, axis=1)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    first = np.full(uniq.shape[0], -1, dtype=np.int64)
    for i, inv in enumerate(inverse):
        if first[inv] < 0:
            first[inv] = i
    reps = bnd[first]
    # reduced system: sum_j m_j * [sum_{y in orbit j} g(x_i, y)] = 1
    n_orb = uniq.shape[0]
    Gred = np.empty((n_orb, n_orb), dtype=np.float64)
    order = np.argsort(inverse, kind="stable")
    bnd_sorted = bnd[order]
    inv_sorted = inverse[order]
    starts = np.searchsorted(inv_sorted, np.arange(n_orb + 1))
    for i in range(n_orb):
        row = green(bnd_sorted - reps[i])
        Gred[i] = np.add.reduceat(row, starts[:-1])
    try:
        masses_per_site = np.linalg.solve(Gred, np.ones(n_orb))
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise SingularSystemError(f"singular-system: {exc}") from exc
    if np.any(masses_per_site < -NEG_MASS_TOL):
        raise SupportViolationError("support-violation in cube orbit solve")
    masses_per_site = np.clip(masses_per_site, 0.0, None)
    site_masses = masses_per_site[inverse]
    cap = float(site_masses.sum())
    return EquilibriumData(points=bnd, masses=site_masses, capacity=cap)


class CubeEquilibriumCache:
    """Per-side cache of cube equilibria (they are translation invariant).

    Large sides are also cached on disk because the orbit solve for a window
    is the dominant setup cost of a simulation run.
    """

    def __init__(self, green: GreenTable, disk_threshold=40):
        self.green = green
        self._cache = {}
        self.disk_threshold = disk_threshold

    def _disk_path(self, side):
        root = os.environ.get("RILAB_CACHE", os.path.join(os.path.expanduser("~"), ".cache", "rilab"))
        return os.path.join(root, f"cube_eq_d{self.green.d}_r{self.green.exact_radius}_s{side}.npz")

    def get(self, side: int) -> EquilibriumData:
        if side not in self._cache:
            path = self._disk_path(side)
            if side >= self.disk_threshold and os.path.exists(path):
                with np.load(path) as z:
                    self._cache[side] = EquilibriumData(
                        points=z["points"], masses=z["masses"], capacity=float(z["capacity"])
                    )
            else:
                eq = cube_orbit_equilibrium(side, self.green)
                self._cache[side] = eq
                if side >= self.disk_threshold:
                    try:
                        os.makedirs(os.path.dirname(path), exist_ok=True)
                        np.savez_compressed(path, points=eq.points, masses=eq.masses, capacity=eq.capacity)
                    except OSError:
                        pass
        return self._cache[side]

    def capacity(self, side: int) -> float:
        return self.get(side).capacity

    def for_box(self, box: Box) -> EquilibriumData:
        eq = self.get(box.side)
        return EquilibriumData(
            points=eq.points + np.asarray(box.base, dtype=np.int64),
            masses=eq.masses,
            capacity=eq.capacity,
        )


# -- Monte Carlo capacity cross-check ---------------------------------------


def capacity_mc(A, n_walks: int, halo: Box, seed, green: GreenTable, precision=None):
    """Estimate cap(A) by escape counts of walks launched from the boundary.

    e_A(x) is the no-return probability; walks are killed on leaving the halo
    and the first-order return bias is removed with the far-field potential of
    the first-pass estimate. Returns (estimate, standard error).
    """
    pts = _as_points(A)
    d = green.d
    if pts.shape[0] == 0:
        return 0.0, 0.0
    if not np.all(halo.inflate(-1).contains_points_mask(pts)):
        raise ValueError("A must lie strictly inside the halo")
    bnd = internal_boundary(pts) if not isinstance(A, Box) else A.boundary_points()
    members = _PointMask(pts)
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    b = bnd.shape[0]
    starts = np.repeat(bnd, n_walks, axis=0)
    owner = np.repeat(np.arange(b), n_walks)
    escaped_owner, exit_points = _run_escape_walks(starts, owner, members, halo, rng, d)
    esc_counts = np.bincount(escaped_owner, minlength=b).astype(np.float64)
    p_hat = esc_counts / n_walks
    cap0 = float(p_hat.sum())
    # first-order correction: subtract the chance of returning from the exit
    if exit_points.shape[0]:
        h_exit = green.pair_matrix(exit_points, bnd) @ p_hat
        corr = np.bincount(escaped_owner, weights=h_exit, minlength=b) / n_walks
        h_max = float(h_exit.max())
    else:
        corr = np.zeros(b)
        h_max = 0.0
    estimate = float((p_hat - corr).sum())
    se = float(np.sqrt(np.sum(p_hat * (1.0 - p_hat) / n_walks)))
    bias_bound = cap0 * h_max * h_max  # second order after correction
    budget = precision if precision is not None else max(se, 1.0e-12)
    if bias_bound > budget:
        raise HaloTooSmallError(
            f"halo-too-small: residual bias bound {bias_bound:.3e} exceeds budget {budget:.3e}"
        )
    return estimate, se


class _PointMask:
    """Vectorized membership test for a small point set (dense over its bbox)."""

    def __init__(self, pts):
        self.lo = pts.min(axis=0)
        self.mask = np.zeros(tuple(pts.max(axis=0) - self.lo + 1), dtype=bool)
        self.mask[tuple((pts - self.lo).T)] = True

    def contains(self, pos):
        rel = pos - self.lo
        inside = np.all((rel >= 0) & (rel < np.asarray(self.mask.shape)), axis=1)
        out = np.zeros(pos.shape[0], dtype=bool)
        if np.any(inside):
            out[inside] = self.mask[tuple(rel[inside].T)]
        return out


def _run_escape_walks(pos, owner, members, halo: Box, rng, d, max_steps=2_000_000_000):
    pos = pos.astype(np.int64).copy()
    owner = owner.copy()
    lo = np.asarray(halo.base, dtype=np.int64)
    hi = lo + halo.side
    steps = neighbor_steps(d)
    esc_owner = []
    esc_points = []
    total = 0
    while pos.shape[0]:
        dirs = rng.integers(0, 2 * d, size=pos.shape[0])
        pos += steps[dirs]
        total += pos.shape[0]
        if total > max_steps:
            raise HaloTooSmallError("halo-too-small: walk budget exhausted")
        outside = np.any((pos < lo) | (pos >= hi), axis=1)
        if np.any(outside):
            esc_owner.append(owner[outside])
            esc_points.append(pos[outside])
            keep = ~outside
            pos, owner = pos[keep], owner[keep]
        if pos.shape[0] == 0:
            break
        hit = members.contains(pos)
        if np.any(hit):
            keep = ~hit
            pos, owner = pos[keep], owner[keep]
    if esc_owner:
        return np.concatenate(esc_owner), np.concatenate(esc_points)
    return np.zeros(0, dtype=np.int64), np.zeros((0, d), dtype=np.int64)
