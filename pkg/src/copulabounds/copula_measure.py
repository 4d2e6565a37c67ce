"""Grid copula measures built from relaxed assignment solutions.

A solution with right-hand side 1/n assigns each grid cube a mass; spreading
that mass uniformly inside its cube yields a d-fold stochastic measure and
hence a copula.  This module exposes the copula as a CDF (multilinear
interpolation of the cumulative cell-mass tensor), computes box volumes by
the alternating vertex sum, integrates piecewise-constant functions, samples
points, and reads off the Shuffle-of-M form of integral 2-dimensional
solutions.
"""

from __future__ import annotations

import csv
import itertools
import json
import threading
from dataclasses import dataclass, field

import numpy as np

from .dap_lp import DapSolution, Permutation2D
from .funcgrid import CellIndex, EnvelopeGrid, GridSpec, cell_bounds

STOCH_TOL = 1e-9


class StochasticityError(ValueError):
    """Cell masses do not form a d-fold stochastic measure at grid level."""


@dataclass(frozen=True, eq=False)
class DiscreteCopula:
    """d-fold stochastic cell-mass measure: masses sum to 1 and every axis
    slice carries exactly 1/n.  Immutable; the cumulative tensor backing
    the CDF is built once on first use and shared read-only."""

    spec: GridSpec
    mass: dict = field(compare=False)  # CellIndex -> mass > 0

    def __post_init__(self):
        spec = self.spec
        sums = np.zeros((spec.d, spec.n))
        for idx, m in self.mass.items():
            if len(idx) != spec.d:
                raise StochasticityError(f"cell {idx} has wrong dimension")
            if m <= 0.0:
                raise StochasticityError(f"cell {idx} carries nonpositive mass {m}")
            for k, i in enumerate(idx):
                if not 1 <= i <= spec.n:
                    raise StochasticityError(f"cell {idx} out of range")
                sums[k, i - 1] += m
        target = 1.0 / spec.n
        worst = float(np.max(np.abs(sums - target)))
        if worst > STOCH_TOL:
            k, m = np.unravel_index(np.argmax(np.abs(sums - target)), sums.shape)
            raise StochasticityError(
                f"axis {k + 1} slice {m + 1} sums to {sums[k, m]:.12f}, "
                f"expected {target:.12f} (violation {worst:.3e})"
            )
        object.__setattr__(self, "_cum_lock", threading.Lock())
        object.__setattr__(self, "_cum", None)

    def total_mass(self) -> float:
        return float(sum(self.mass.values()))

    def slice_sums(self) -> np.ndarray:
        sums = np.zeros((self.spec.d, self.spec.n))
        for idx, m in self.mass.items():
            for k, i in enumerate(idx):
                sums[k, i - 1] += m
        return sums

    def _cumulative(self) -> np.ndarray:
        cum = self._cum
        if cum is None:
            with self._cum_lock:
                cum = self._cum
                if cum is None:
                    spec = self.spec
                    dense = np.zeros(spec.shape)
                    for idx, m in self.mass.items():
                        dense[tuple(i - 1 for i in idx)] = m
                    for axis in range(spec.d):
                        dense = np.cumsum(dense, axis=axis)
                    cum = np.pad(dense, [(1, 0)] * spec.d)
                    cum.flags.writeable = False
                    object.__setattr__(self, "_cum", cum)
        return cum

    def to_json_dict(self) -> dict:
        return {
            "d": self.spec.d,
            "n": self.spec.n,
            "support": [
                {"index": list(idx), "mass": self.mass[idx]}
                for idx in sorted(self.mass)
            ],
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")


def from_solution(sol: DapSolution, spec: GridSpec) -> DiscreteCopula:
    """Copula measure of an optimal solution.

    Accepts solutions of the copula-scaled form (rhs = 1/n, masses used
    as-is) and of the canonical form (rhs = 1, masses divided by n).
    A slice-sum violation beyond 1e-9 signals a solver bug and raises.
    """
    total = sum(m for _, m in sol.support)
    if abs(total - 1.0) <= 1e-6:
        masses = {tuple(idx): float(m) for idx, m in sol.support}
    elif abs(total - spec.n) <= 1e-6 * spec.n:
        masses = {tuple(idx): float(m) / spec.n for idx, m in sol.support}
    else:
        raise StochasticityError(
            f"support mass {total:.12f} matches neither 1 nor n={spec.n}"
        )
    return DiscreteCopula(spec=spec, mass=masses)


def cdf(c: DiscreteCopula, point) -> float:
    """C(x) = measure of [0, x_1] x ... x [0, x_d] under within-cell-uniform
    spreading: multilinear interpolation of the cumulative mass tensor."""
    spec = c.spec
    pt = np.asarray(point, dtype=float)
    if pt.shape != (spec.d,):
        raise ValueError(f"point must have {spec.d} coordinates")
    if np.any(pt < 0.0) or np.any(pt > 1.0):
        raise ValueError(f"point {tuple(pt)} outside the unit cube")
    n = spec.n
    cum = c._cumulative()
    base = np.minimum((pt * n).astype(int), n - 1)
    w = np.clip(pt * n - base, 0.0, 1.0)
    value = 0.0
    for bits in itertools.product((0, 1), repeat=spec.d):
        coef = 1.0
        for k, bit in enumerate(bits):
            coef *= w[k] if bit else 1.0 - w[k]
        if coef != 0.0:
            value += coef * cum[tuple(base + np.asarray(bits))]
    return float(value)


def c_volume(c: DiscreteCopula, lower, upper) -> float:
    """Alternating vertex sum assigning the box [lower, upper] its measure."""
    spec = c.spec
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if lo.shape != (spec.d,) or hi.shape != (spec.d,):
        raise ValueError(f"box corners must have {spec.d} coordinates")
    if np.any(lo > hi):
        raise ValueError("box corners must satisfy lower <= upper")
    total = 0.0
    for bits in itertools.product((0, 1), repeat=spec.d):
        vertex = np.where(np.asarray(bits) == 1, hi, lo)
        sign = -1.0 if (spec.d - sum(bits)) % 2 else 1.0
        total += sign * cdf(c, vertex)
    return float(total)


def cell_volume(c: DiscreteCopula, index: CellIndex) -> float:
    """Measure of grid cube I_i^n; equals the stored cell mass."""
    lo, hi = cell_bounds(index, c.spec)
    return c_volume(c, lo, hi)


def integrate_cellwise(c: DiscreteCopula, grid: EnvelopeGrid) -> float:
    """Integral of the piecewise-constant grid function: sum a_i * mass_i."""
    if grid.spec != c.spec:
        raise ValueError(
            f"grid {grid.spec} does not match copula grid {c.spec}"
        )
    return float(
        sum(grid.coeffs[tuple(i - 1 for i in idx)] * m for idx, m in c.mass.items())
    )


@dataclass(frozen=True)
class ShuffleOfM:
    """2-dimensional shuffle with the equidistant n-cell partition: mass 1/n
    on the diagonal (omega +1) of each square (s_{i-1}, s_i) x
    (s_{pi(i)-1}, s_{pi(i)})."""

    n: int
    pi: Permutation2D
    omega: tuple

    def __post_init__(self):
        if len(self.omega) != self.n or any(o not in (-1, 1) for o in self.omega):
            raise ValueError("omega must be n values in {-1, +1}")

    def cell_masses(self) -> dict:
        return {(i, self.pi.pi[i - 1]): 1.0 / self.n for i in range(1, self.n + 1)}


def to_shuffle_of_m(sol: DapSolution, tol: float = 1e-9) -> ShuffleOfM:
    """Shuffle-of-M form of an integral 2-dimensional solution.

    Vertex solutions of the 2-dimensional relaxation are permutation
    matrices, so the support must hold n cells of mass 1/n forming a
    bijection; anything else signals a solver bug.  The within-cell
    orientation is never distinguished by the relaxation, so omega is +1.
    """
    if not sol.support:
        raise ValueError("empty support")
    if any(len(idx) != 2 for idx, _ in sol.support):
        raise ValueError("shuffle-of-M form requires d = 2")
    n = len(sol.support)
    pi = [0] * n
    for idx, m in sol.support:
        i, j = idx
        if i > n or j > n:
            raise ValueError(
                f"support cell {idx} incompatible with a permutation on n={n}"
            )
        if abs(m * n - 1.0) > tol * n:
            raise ValueError(
                f"non-integral solution: cell {idx} has mass {m}, expected 1/{n}"
            )
        if pi[i - 1] != 0:
            raise ValueError(f"two support cells share row {i}")
        pi[i - 1] = j
    perm = Permutation2D(pi=tuple(pi), value=sol.value)
    return ShuffleOfM(n=n, pi=perm, omega=(1,) * n)


def sample(c: DiscreteCopula, count: int, seed: int = 0) -> np.ndarray:
    """Draw points: cells proportional to mass, uniform inside the cell.
    Deterministic for a given seed; returns an array of shape (count, d)."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    spec = c.spec
    if count == 0:
        return np.empty((0, spec.d))
    rng = np.random.default_rng(seed)
    cells = sorted(c.mass)
    probs = np.array([c.mass[idx] for idx in cells])
    probs = probs / probs.sum()
    picks = rng.choice(len(cells), size=count, p=probs)
    lowers = (np.array(cells, dtype=float) - 1.0) / spec.n
    offsets = rng.random((count, spec.d)) / spec.n
    return lowers[picks] + offsets


def export_cdf_grid(c: DiscreteCopula, points_per_axis: int, path) -> None:
    """CSV of CDF values on the uniform lattice with the given points per
    axis (endpoints included), one row per lattice point, for plotting."""
    if points_per_axis < 2:
        raise ValueError("points_per_axis must be at least 2")
    spec = c.spec
    axis = np.linspace(0.0, 1.0, points_per_axis)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{k + 1}" for k in range(spec.d)] + ["cdf"])
        for pt in itertools.product(axis, repeat=spec.d):
            writer.writerow([repr(float(v)) for v in pt] + [repr(cdf(c, pt))])


def export_samples_csv(points: np.ndarray, path) -> None:
    """CSV of sampled points, one row per point."""
    d = points.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{k + 1}" for k in range(d)])
        for row in points:
            writer.writerow([repr(float(v)) for v in row])
