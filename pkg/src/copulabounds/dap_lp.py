"""Continuous relaxation of the axial d-dimensional assignment problem.

The LP has one variable per grid cell and one equality constraint per
(axis, level) slice: for every axis k and level m, the masses of all cells
whose k-th coordinate equals m must sum to a common right-hand side.
Feasible points with rhs = 1/n are exactly the cell-mass vectors of
d-fold stochastic measures that spread mass uniformly inside cells.

The solver is a revised simplex specialized to this structure: columns
are never materialized (each has exactly d ones, read off the mixed-radix
cell code), the working basis has size d*n - (d-1) after dropping one
redundant slice constraint per axis beyond the first, pricing is a
vectorized tensor sweep (Dantzig rule), and Bland's rule takes over after
a degeneracy streak so termination is guaranteed.  For d = 2 the vertex
solutions are permutation matrices, so an exact Hungarian-method solver
is provided as well.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import linear_sum_assignment

from .funcgrid import CellIndex, EnvelopeGrid, GridSpec, cell_from_code

FEAS_TOL = 1e-9  # slice-sum feasibility, absolute
OPT_TOL = 1e-9  # reduced-cost optimality on the scaled problem
CERT_TOL = 1e-8  # dual certificate slack allowed at the reported optimum
_PIVOT_TOL = 1e-10
_DEGENERATE_STEP = 1e-12
_DEGENERACY_STREAK = 64  # consecutive degenerate pivots before Bland kicks in

STATUS_OPTIMAL = "optimal"
STATUS_ITERATION_LIMIT = "iteration_limit"


class IterationLimitError(RuntimeError):
    """Pivot budget exhausted; signals a cycling/degeneracy pathology."""


@dataclass(frozen=True, eq=False)
class DapInstance:
    """Relaxed axial assignment instance over an n^d cost tensor."""

    spec: GridSpec
    sense: str  # "minimize" | "maximize"
    costs: np.ndarray = field(compare=False)  # shape (n,)*d, not copied
    rhs: float = 1.0

    def __post_init__(self):
        if self.sense not in ("minimize", "maximize"):
            raise ValueError("sense must be 'minimize' or 'maximize'")
        if self.costs.shape != self.spec.shape:
            raise ValueError(
                f"cost shape {self.costs.shape} != grid shape {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.costs)):
            raise ValueError("costs must all be finite")
        if not self.rhs > 0.0:
            raise ValueError("rhs must be positive")

    @property
    def n_constraints(self) -> int:
        return self.spec.d * self.spec.n

    @property
    def n_variables(self) -> int:
        return self.spec.cell_count


def build_dap(grid: EnvelopeGrid, sense: str, rhs: float) -> DapInstance:
    """Instance for min/max of sum a_i x_i over all slice sums equal to rhs."""
    return DapInstance(spec=grid.spec, sense=sense, costs=grid.coeffs, rhs=rhs)


@dataclass(frozen=True, eq=False)
class DapSolution:
    """Optimal basic solution of the relaxed instance.

    `support` lists (cell index, mass) with mass > 0, ordered by cell code;
    at a vertex its size is at most d*n - (d-1).  `duals` holds one value
    per (axis, level) slice; together with the costs they form the
    reduced-cost certificate (see `optimality_certificate`).
    """

    value: float
    support: tuple
    iterations: int
    status: str
    duals: np.ndarray = field(compare=False)  # shape (d, n)
    sense: str = "minimize"
    rhs: float = 1.0

    def mass_map(self) -> dict:
        return {idx: m for idx, m in self.support}

    def to_json_dict(self) -> dict:
        return {
            "value": self.value,
            "status": self.status,
            "iterations": self.iterations,
            "support": [
                {"index": list(idx), "mass": m} for idx, m in self.support
            ],
        }

    def duals_json(self) -> list:
        return [
            {"axis": k + 1, "level": m + 1, "dual": float(self.duals[k, m])}
            for k in range(self.duals.shape[0])
            for m in range(self.duals.shape[1])
        ]

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")


@dataclass(frozen=True)
class Permutation2D:
    """A permutation assignment pi (1-based) with its objective value."""

    pi: tuple
    value: float

    def __post_init__(self):
        n = len(self.pi)
        if sorted(self.pi) != list(range(1, n + 1)):
            raise ValueError("pi must be a bijection on {1,...,n}")


# ---------------------------------------------------------------------------
# Revised simplex
# ---------------------------------------------------------------------------

def _initial_basis(spec: GridSpec) -> list:
    """Generalized north-west-corner basis: diagonal cells carry the mass,
    plus one zero-mass staircase cell per (axis >= 2, level < n)."""
    d, n = spec.d, spec.n
    diag_step = sum(n ** p for p in range(d))  # code of (m,...,m) is m * step
    basis = []
    for m in range(n):
        basis.append(m * diag_step)
        if m < n - 1:
            for k in range(1, d):
                # all coordinates m+1 except axis k at m
                basis.append((m + 1) * diag_step - n ** (d - 1 - k))
    return basis


def _column_rows(code: int, spec: GridSpec, row_pos: np.ndarray) -> list:
    """Kept-row indices of the constraint column for a cell code."""
    d, n = spec.d, spec.n
    rows = []
    for k in range(d - 1, -1, -1):
        digit = code % n
        code //= n
        pos = row_pos[k * n + digit]
        if pos >= 0:
            rows.append(pos)
    return rows


def _slice_sums(support, spec: GridSpec) -> np.ndarray:
    sums = np.zeros((spec.d, spec.n))
    for idx, m in support:
        for k, i in enumerate(idx):
            sums[k, i - 1] += m
    return sums


def solve_relaxed(instance: DapInstance, max_iterations: int | None = None) -> DapSolution:
    """Solve the relaxed instance to proven optimality.

    The relaxation is always feasible (the uniform point) and bounded, so
    the only non-optimal outcome is an exhausted pivot budget, reported as
    status "iteration_limit"; a suboptimal point is never labeled optimal.
    """
    spec = instance.spec
    d, n = spec.d, spec.n
    nvar = spec.cell_count
    r = d * n - (d - 1)

    minimize = instance.sense == "minimize"
    costs = np.ascontiguousarray(instance.costs, dtype=float)
    c_tensor = costs if minimize else -costs
    scale = max(1.0, float(np.max(np.abs(c_tensor))))
    c_tensor = c_tensor / scale
    c_flat = c_tensor.ravel()

    if max_iterations is None:
        max_iterations = max(100, int(50 * d * n * math.log(max(nvar, 2))))

    # keep all axis-1 rows and levels 1..n-1 of every other axis
    row_pos = np.full(d * n, -1, dtype=int)
    kept = 0
    for k in range(d):
        top = n if k == 0 else n - 1
        for m in range(top):
            row_pos[k * n + m] = kept
            kept += 1
    assert kept == r

    basis = _initial_basis(spec)
    assert len(basis) == r
    b_vec = np.full(r, instance.rhs)

    B = np.zeros((r, r))
    for t, code in enumerate(basis):
        B[_column_rows(code, spec, row_pos), t] = 1.0

    iterations = 0
    degen_streak = 0
    bland = False
    status = STATUS_OPTIMAL
    y_full = np.zeros((d, n))

    while True:
        lu = lu_factor(B, check_finite=False)
        x_b = lu_solve(lu, b_vec, check_finite=False)
        c_b = c_flat[basis]
        y_kept = lu_solve(lu, c_b, trans=1, check_finite=False)

        y_full[:] = 0.0
        for k in range(d):
            top = n if k == 0 else n - 1
            base = row_pos[k * n]
            y_full[k, :top] = y_kept[base:base + top]

        # reduced costs as a tensor sweep: rc = c - sum_k y[k, i_k]
        rc = c_tensor.copy()
        for k in range(d):
            shape = [1] * d
            shape[k] = n
            rc -= y_full[k].reshape(shape)
        rc_flat = rc.ravel()

        if bland:
            negative = rc_flat < -OPT_TOL
            if not negative.any():
                break
            enter = int(np.argmax(negative))
        else:
            enter = int(np.argmin(rc_flat))
            if rc_flat[enter] >= -OPT_TOL:
                break

        if iterations >= max_iterations:
            status = STATUS_ITERATION_LIMIT
            break

        a_col = np.zeros(r)
        a_col[_column_rows(enter, spec, row_pos)] = 1.0
        u = lu_solve(lu, a_col, check_finite=False)

        ratios = np.full(r, np.inf)
        movable = u > _PIVOT_TOL
        ratios[movable] = np.maximum(x_b[movable], 0.0) / u[movable]
        theta = ratios.min()
        if not np.isfinite(theta):
            raise RuntimeError(
                "unbounded direction in a bounded polytope; solver invariant broken"
            )
        candidates = np.nonzero(ratios <= theta * (1.0 + 1e-12) + 1e-300)[0]
        # Bland-compatible leaving rule: smallest basic column code among ties
        leave = min(candidates, key=lambda t: basis[t])

        basis[leave] = enter
        B[:, leave] = a_col
        iterations += 1

        if theta <= _DEGENERATE_STEP:
            degen_streak += 1
            if degen_streak >= _DEGENERACY_STREAK:
                bland = True
        else:
            degen_streak = 0
            bland = False

    masses = np.maximum(x_b, 0.0)
    value = float(np.dot(costs.ravel()[basis], masses))
    if not minimize:
        y_full = -y_full
    duals = y_full * scale

    order = np.argsort(np.asarray(basis))
    support = tuple(
        (cell_from_code(basis[t], spec), float(masses[t]))
        for t in order
        if masses[t] > 1e-12
    )

    solution = DapSolution(
        value=value,
        support=support,
        iterations=iterations,
        status=status,
        duals=duals,
        sense=instance.sense,
        rhs=instance.rhs,
    )

    worst = np.max(np.abs(_slice_sums(support, spec) - instance.rhs))
    if not worst <= FEAS_TOL:
        raise RuntimeError(
            f"slice-sum violation {worst:.3e} exceeds {FEAS_TOL}; "
            "solver invariant broken"
        )
    return solution


def optimality_certificate(instance: DapInstance, solution: DapSolution) -> dict:
    """Reduced-cost / complementary-slackness check of a reported optimum.

    For minimize, every reduced cost a_i - sum_k y_{k,i_k} must be >= -tol
    and vanish on the support; for maximize the inequality is reversed.
    """
    spec = instance.spec
    d, n = spec.d, spec.n
    rc = np.asarray(instance.costs, dtype=float).copy()
    for k in range(d):
        shape = [1] * d
        shape[k] = n
        rc -= solution.duals[k].reshape(shape)
    if instance.sense == "minimize":
        worst_sign = -float(rc.min())
    else:
        worst_sign = float(rc.max())
    worst_slack = 0.0
    for idx, _ in solution.support:
        worst_slack = max(worst_slack, abs(float(rc[tuple(i - 1 for i in idx)])))
    scale = max(1.0, float(np.max(np.abs(instance.costs))))
    passed = worst_sign <= CERT_TOL * scale and worst_slack <= CERT_TOL * scale
    return {
        "worst_reduced_cost_violation": max(worst_sign, 0.0),
        "worst_support_slack": worst_slack,
        "tolerance": CERT_TOL * scale,
        "passed": bool(passed),
    }


def solve_hungarian(costs, sense: str = "minimize") -> Permutation2D:
    """Exact 2-dimensional assignment via the Hungarian method (O(n^3)).

    The value equals solve_relaxed on the same costs with rhs = 1: the
    2-dimensional polytope has only permutation vertices.
    """
    mat = np.asarray(costs, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("costs must be a square matrix")
    if not np.all(np.isfinite(mat)):
        raise ValueError("costs must all be finite")
    if sense not in ("minimize", "maximize"):
        raise ValueError("sense must be 'minimize' or 'maximize'")
    rows, cols = linear_sum_assignment(mat if sense == "minimize" else -mat)
    value = float(mat[rows, cols].sum())
    pi = tuple(int(c) + 1 for c in cols[np.argsort(rows)])
    return Permutation2D(pi=pi, value=value)
