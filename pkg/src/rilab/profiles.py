"""Percolation-function tables and the profile family for the variational solver.

The true percolation function of the vacant set is unknown; everything here
works from a user-supplied or Monte Carlo-estimated table, interpolated
monotonically. Profiles are expressed in the square-root variable b, i.e.
eta(b) = theta(b^2).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator


@dataclass
class ThetaTable:
    """Monotone interpolant of percolation-probability samples.

    Saturates at 1 for levels >= saturation_level when one is supplied, which
    encodes the (unknown) critical level of a synthetic stand-in table.
    """

    levels: np.ndarray
    values: np.ndarray
    saturation_level: float | None = None
    _interp: PchipInterpolator = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.levels.ndim != 1 or self.levels.shape != self.values.shape:
            raise ValueError("levels and values must be equal-length 1d arrays")
        if np.any(np.diff(self.levels) <= 0):
            raise ValueError("levels must be strictly increasing")
        if np.any(np.diff(self.values) < 0):
            raise ValueError("table values must be nondecreasing")
        if np.any((self.values < 0) | (self.values > 1)):
            raise ValueError("table values must lie in [0, 1]")
        self._interp = PchipInterpolator(self.levels, self.values, extrapolate=False)

    def __call__(self, v):
        v = np.asarray(v, dtype=np.float64)
        out = self._interp(np.clip(v, self.levels[0], self.levels[-1]))
        out = np.where(v <= self.levels[0], self.values[0], out)
        out = np.where(v >= self.levels[-1], self.values[-1], out)
        if self.saturation_level is not None:
            out = np.where(v >= self.saturation_level, 1.0, out)
        return float(out) if out.ndim == 0 else out

    def derivative(self, v):
        v = np.asarray(v, dtype=np.float64)
        inside = (v > self.levels[0]) & (v < self.levels[-1])
        if self.saturation_level is not None:
            inside &= v < self.saturation_level
        out = np.zeros_like(v, dtype=np.float64)
        dv = self._interp.derivative()(np.clip(v, self.levels[0], self.levels[-1]))
        out = np.where(inside, dv, 0.0)
        return float(out) if out.ndim == 0 else out

    @classmethod
    def from_csv(cls, path, saturation_level=None):
        levels, values = [], []
        with open(path, newline="") as fh:
            reader = csv.reader(row for row in fh if not row.startswith("#"))
            header = next(reader)
            if [h.strip() for h in header[:2]] != ["v", "theta0"]:
                raise ValueError(f"expected columns v,theta0 in {path}")
            for row in reader:
                if not row:
                    continue
                levels.append(float(row[0]))
                values.append(float(row[1]))
        return cls(np.asarray(levels), np.asarray(values), saturation_level=saturation_level)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["v", "theta0"])
            for v, t in zip(self.levels, self.values):
                writer.writerow([repr(float(v)), repr(float(t))])


def synthetic_theta_table(u_star: float = 3.0, n: int = 200, exponent: float = 1.5,
                          floor: float = 0.08) -> ThetaTable:
    """A smooth monotone stand-in table rising from a positive floor to 1 at u_star."""
    v = np.linspace(0.0, u_star, n)
    t = floor + (1.0 - floor) * (v / u_star) ** exponent
    return ThetaTable(v, np.clip(t, 0.0, 1.0), saturation_level=u_star)


@dataclass
class ProfileFunction:
    """Nondecreasing profile b -> [0, 1] entering the volume constraint.

    kind is one of 'theta0_table' (eta(b) = theta(b^2)), 'theta_star' (table
    up to the jump point, 1 beyond), 'indicator_step' (0 below b_star, 1 at or
    above), 'eta_hat' (pointwise max of a base profile and a piecewise-linear
    ramp on [a_n, b_n]).
    """

    kind: str
    theta: ThetaTable | None = None
    jump_b: float | None = None  # jump location in the sqrt variable
    ramp: tuple | None = None  # (a_n, b_n)
    base: "ProfileFunction" = None

    def __call__(self, b):
        b = np.asarray(b, dtype=np.float64)
        if self.kind == "theta0_table":
            out = self.theta(b * b)
        elif self.kind == "theta_star":
            out = np.where(b >= self.jump_b, 1.0, self.theta(b * b))
        elif self.kind == "indicator_step":
            out = np.where(b >= self.jump_b, 1.0, 0.0)
        elif self.kind == "eta_hat":
            a_n, b_n = self.ramp
            ramp = np.clip((b - a_n) / max(b_n - a_n, 1e-300), 0.0, 1.0)
            out = np.maximum(self.base(b), ramp)
        else:
            raise ValueError(f"unknown profile kind {self.kind!r}")
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    def derivative(self, b):
        """A.e. derivative in b (jumps contribute nothing)."""
        b = np.asarray(b, dtype=np.float64)
        if self.kind == "theta0_table":
            out = 2.0 * b * self.theta.derivative(b * b)
        elif self.kind == "theta_star":
            out = np.where(b >= self.jump_b, 0.0, 2.0 * b * self.theta.derivative(b * b))
        elif self.kind == "indicator_step":
            out = np.zeros_like(b)
        elif self.kind == "eta_hat":
            a_n, b_n = self.ramp
            on_ramp = (b >= a_n) & (b <= b_n)
            dramp = np.where(on_ramp, 1.0 / max(b_n - a_n, 1e-300), 0.0)
            base_v = np.asarray(self.base(b))
            ramp_v = np.clip((b - a_n) / max(b_n - a_n, 1e-300), 0.0, 1.0)
            out = np.where(ramp_v >= base_v, dramp, np.asarray(self.base.derivative(b)))
        else:
            raise ValueError(self.kind)
        out = np.asarray(out)
        return float(out) if out.ndim == 0 else out

    @property
    def saturation_b(self) -> float:
        """Smallest b with profile(b) >= 1 (inf over a fine scan; may be inf)."""
        if self.kind == "indicator_step":
            return float(self.jump_b)
        if self.kind == "theta_star":
            sat = _table_saturation_b(self.theta)
            return min(float(self.jump_b), sat)
        if self.kind == "theta0_table":
            return _table_saturation_b(self.theta)
        if self.kind == "eta_hat":
            a_n, b_n = self.ramp
            return min(float(b_n), self.base.saturation_b)
        raise ValueError(self.kind)


def _table_saturation_b(theta: ThetaTable) -> float:
    if theta.saturation_level is not None:
        return math.sqrt(theta.saturation_level)
    hits = np.nonzero(theta.values >= 1.0)[0]
    if hits.size == 0:
        return math.inf
    return math.sqrt(float(theta.levels[hits[0]]))


def jump_location(u: float, ubar: float, c0: float) -> float:
    """The jump of the upper-bound profile in the sqrt variable: sqrt(u) + c0 (sqrt(ubar) - sqrt(u))."""
    return math.sqrt(u) + c0 * (math.sqrt(ubar) - math.sqrt(u))


def theta0_profile(theta: ThetaTable) -> ProfileFunction:
    return ProfileFunction(kind="theta0_table", theta=theta)


def theta_star_profile(theta: ThetaTable, u: float, ubar: float, c0: float) -> ProfileFunction:
    return ProfileFunction(kind="theta_star", theta=theta, jump_b=jump_location(u, ubar, c0))


def indicator_profile(b_star: float) -> ProfileFunction:
    return ProfileFunction(kind="indicator_step", jump_b=b_star)


def eta_hat_profile(base: ProfileFunction, a_n: float, b_n: float) -> ProfileFunction:
    if not 0 <= a_n < b_n:
        raise ValueError("need 0 <= a_n < b_n")
    return ProfileFunction(kind="eta_hat", base=base, ramp=(a_n, b_n))


def eta_hat_family(base: ProfileFunction, limit_b: float, sqrt_u: float, n_stages: int) -> list:
    """Ramps with feet a_n < b_n increasing to limit_b; profiles decrease
    pointwise to the discontinuous limit as the stage index grows.

    The first ramp starts at sqrt_u itself so the constraint responds to
    arbitrarily small fields (no dead zone at the start of the continuation).
    """
    out = []
    span = limit_b - sqrt_u
    if span <= 0:
        raise ValueError("limit must exceed sqrt(u)")
    for n in range(n_stages):
        a_n = sqrt_u + span * (1.0 - 2.0 ** (-n))
        b_n = sqrt_u + span * (1.0 - 2.0 ** (-n - 1))
        out.append(eta_hat_profile(base, a_n, b_n))
    return out
