"""Independent brute-force solvers and optimality certificates.

These are deliberately slow, simple implementations used to cross-check
the simplex solver: exhaustive permutation search for the 2-dimensional
problem, exact basic-feasible-solution enumeration (in rational
arithmetic) for tiny relaxed instances, and a randomized cost-exchange
certificate that probes the support of a claimed optimum: removing mass
from N support cells and re-adding it along any axis-wise permutation of
their coordinates preserves all slice sums, so at a true optimum no such
exchange may lower (raise, when maximizing) the total cell cost.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .copula_measure import DiscreteCopula
from .dap_lp import CERT_TOL, DapInstance, Permutation2D
from .funcgrid import EnvelopeGrid

MAX_2AP_SIZE = 9
MAX_VERTEX_VARIABLES = 12


@dataclass(frozen=True)
class MonotonicityCertificate:
    """Result of the randomized exchange check; passed iff the worst
    observed violation is within tolerance."""

    checked_tuples: int
    worst_violation: float
    tolerance: float
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "checked_tuples": self.checked_tuples,
            "worst_violation": self.worst_violation,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")


def brute_force_2ap(costs, sense: str = "minimize") -> Permutation2D:
    """Exact 2-dimensional assignment by enumerating all n! permutations.

    Ties are broken lexicographically.  Guarded to n <= 9.
    """
    mat = np.asarray(costs, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError("costs must be a square matrix")
    n = mat.shape[0]
    if n > MAX_2AP_SIZE:
        raise ValueError(f"n={n} exceeds the factorial guard ({MAX_2AP_SIZE})")
    if sense not in ("minimize", "maximize"):
        raise ValueError("sense must be 'minimize' or 'maximize'")
    better = float.__lt__ if sense == "minimize" else float.__gt__
    best_pi = None
    best_val = None
    for perm in itertools.permutations(range(n)):
        val = float(sum(mat[i, perm[i]] for i in range(n)))
        if best_val is None or better(val, best_val):
            best_val = val
            best_pi = perm
    return Permutation2D(pi=tuple(p + 1 for p in best_pi), value=best_val)


def _exact_solve(matrix, rhs):
    """Gaussian elimination over Fractions; returns None when singular."""
    m = [row[:] for row in matrix]
    b = rhs[:]
    size = len(m)
    for col in range(size):
        pivot = next((r for r in range(col, size) if m[r][col] != 0), None)
        if pivot is None:
            return None
        if pivot != col:
            m[col], m[pivot] = m[pivot], m[col]
            b[col], b[pivot] = b[pivot], b[col]
        inv = Fraction(1, 1) / m[col][col]
        m[col] = [v * inv for v in m[col]]
        b[col] *= inv
        for r in range(size):
            if r != col and m[r][col] != 0:
                factor = m[r][col]
                m[r] = [v - factor * w for v, w in zip(m[r], m[col])]
                b[r] -= factor * b[col]
    return b


def brute_force_dap_vertices(instance: DapInstance) -> float:
    """Exact optimum of a tiny relaxed instance by enumerating all basic
    feasible solutions of the slice-constraint system in exact rational
    arithmetic (every float cost is an exact rational, so no vertex is
    falsely rejected).  Guarded to n^d <= 12 variables.
    """
    spec = instance.spec
    d, n = spec.d, spec.n
    nvar = spec.cell_count
    if nvar > MAX_VERTEX_VARIABLES:
        raise ValueError(
            f"instance has {nvar} variables, exceeding the guard "
            f"({MAX_VERTEX_VARIABLES})"
        )
    rank = d * n - (d - 1)

    # kept rows: all of axis 1, levels 1..n-1 of the others (the dropped
    # ones are implied once these hold)
    rows = [(0, m) for m in range(n)]
    for k in range(1, d):
        rows.extend((k, m) for m in range(n - 1))

    columns = []
    for code in range(nvar):
        digits = []
        rest = code
        for _ in range(d):
            digits.append(rest % n)
            rest //= n
        digits.reverse()
        columns.append(
            [Fraction(1) if digits[k] == m else Fraction(0) for (k, m) in rows]
        )

    cost_flat = np.asarray(instance.costs, dtype=float).ravel()
    rhs = [Fraction(instance.rhs)] * rank
    better = Fraction.__lt__ if instance.sense == "minimize" else Fraction.__gt__

    best = None
    for combo in itertools.combinations(range(nvar), rank):
        matrix = [[columns[j][r] for j in combo] for r in range(rank)]
        x = _exact_solve(matrix, rhs)
        if x is None or any(v < 0 for v in x):
            continue
        val = sum(Fraction(cost_flat[j]) * v for j, v in zip(combo, x))
        if best is None or better(val, best):
            best = val
    if best is None:
        raise RuntimeError("no basic feasible solution found; guard logic broken")
    return float(best)


def check_cyclical_monotonicity(
    c: DiscreteCopula,
    grid: EnvelopeGrid,
    sense: str = "min",
    tuples: int = 1000,
    tuple_size: int = 2,
    seed: int = 0,
    tolerance: float = CERT_TOL,
) -> MonotonicityCertificate:
    """Randomized exchange certificate on the support of a claimed optimum.

    Samples N-tuples of support cells plus permutations of axes 2..d and
    compares the original cell costs with the exchanged ones; for a true
    optimum of the grid costs every exchange is non-improving up to
    solver tolerance.
    """
    if sense not in ("min", "max"):
        raise ValueError("sense must be 'min' or 'max'")
    if tuple_size < 2:
        raise ValueError("tuple_size must be at least 2")
    support = sorted(c.mass)
    if not support:
        raise ValueError("empty support")
    coeffs = grid.coeffs
    d = c.spec.d
    rng = np.random.default_rng(seed)
    cells = np.asarray(support, dtype=int) - 1  # 0-based coordinate rows

    worst = 0.0
    for _ in range(tuples):
        pick = rng.integers(0, len(support), size=tuple_size)
        chosen = cells[pick]
        original = coeffs[tuple(chosen.T)].sum()
        exchanged_cells = chosen.copy()
        for axis in range(1, d):
            sigma = rng.permutation(tuple_size)
            exchanged_cells[:, axis] = chosen[sigma, axis]
        exchanged = coeffs[tuple(exchanged_cells.T)].sum()
        violation = original - exchanged if sense == "min" else exchanged - original
        worst = max(worst, float(violation))

    scale = max(1.0, float(np.max(np.abs(coeffs))))
    tol = tolerance * scale
    return MonotonicityCertificate(
        checked_tuples=tuples,
        worst_violation=worst,
        tolerance=tol,
        passed=bool(worst <= tol),
    )
