"""Integrand expressions and cell-wise min/max envelope grids on [0,1]^d.

The integrand language is a minimal arithmetic grammar over the variables
``x1 ... xd``: literals, ``+ - * / ^``, parentheses and the functions
``min, max, abs, exp, log, sqrt``.  Precedence is ``^`` over unary minus
over ``* /`` over ``+ -``; all binary operators associate to the left.

An envelope grid stores, for every cube of the uniform n-per-axis grid,
an approximation of the minimum (or maximum) of the integrand over that
cube, obtained by evaluating the integrand on an m-per-axis lattice that
always contains all 2^d cell corners.  For integrands that are monotone
in every coordinate the corner lattice attains the true cell extrema, so
the envelope is exact already at m=2.
"""

from __future__ import annotations

import csv
import json
import math
import re
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

CellIndex = tuple  # 1-based multi-index (i_1, ..., i_d), each coordinate in {1,...,n}

MONO_NONDECREASING = "coordinatewise-nondecreasing"
MONO_MIXED = "coordinatewise-nonincreasing-in-some"
MONO_UNKNOWN = "unknown"

_FUNCTIONS = ("min", "max", "abs", "exp", "log", "sqrt")


class ExpressionError(ValueError):
    """Malformed integrand source; carries the character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvaluationDomainError(ValueError):
    """Integrand evaluation left the real domain (division by zero, log of a
    nonpositive number, ...); carries the offending point."""

    def __init__(self, message: str, point: tuple, cell: CellIndex | None = None):
        where = f" in cell {cell}" if cell is not None else ""
        super().__init__(f"{message} at point {point}{where}")
        self.reason = message
        self.point = point
        self.cell = cell


class GridSizeError(ValueError):
    """n^d does not fit the addressable-size type."""


class EnvelopeApproximationWarning(UserWarning):
    """Envelope coefficients are lattice approximations, not certified extrema."""


# ---------------------------------------------------------------------------
# Expression parsing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None or m.end() == pos:
            stripped = source[pos:].lstrip()
            if not stripped:
                break
            bad_at = len(source) - len(stripped)
            raise ExpressionError(f"unexpected character {stripped[0]!r}", bad_at)
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num")), m.start("num")))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name"), m.start("name")))
        else:
            tokens.append(("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(("end", None, len(source)))
    return tokens


# AST nodes are plain tuples: ("num", v) | ("var", k) | ("neg", e)
# | ("bin", op, a, b) | ("call", name, [args])


class _Parser:
    def __init__(self, source: str, d: int):
        self.tokens = _tokenize(source)
        self.i = 0
        self.d = d

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, op: str):
        kind, val, pos = self.next()
        if kind != "op" or val != op:
            raise ExpressionError(f"expected {op!r}", pos)

    def parse(self):
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExpressionError(f"unexpected token {val!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "+-":
                self.next()
                rhs = self.term()
                node = ("bin", val, node, rhs)
            else:
                return node

    def term(self):
        node = self.unary()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val in "*/":
                self.next()
                rhs = self.unary()
                node = ("bin", val, node, rhs)
            else:
                return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return ("neg", self.unary())
        return self.power()

    def power(self):
        node = self.atom()
        while True:
            kind, val, _ = self.peek()
            if kind == "op" and val == "^":
                self.next()
                node = ("bin", "^", node, self.exponent())
            else:
                return node

    def exponent(self):
        # a leading sign is the only unary construct allowed after '^'
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.next()
            return ("neg", self.exponent())
        return self.atom()

    def atom(self):
        kind, val, pos = self.next()
        if kind == "num":
            return ("num", val)
        if kind == "name":
            m = re.fullmatch(r"x(\d+)", val)
            if m:
                k = int(m.group(1))
                if not 1 <= k <= self.d:
                    raise ExpressionError(
                        f"variable x{k} exceeds dimension d={self.d}", pos
                    )
                return ("var", k)
            if val in _FUNCTIONS:
                self.expect("(")
                args = [self.expr()]
                while True:
                    k2, v2, p2 = self.peek()
                    if k2 == "op" and v2 == ",":
                        self.next()
                        args.append(self.expr())
                    else:
                        break
                self.expect(")")
                if val in ("abs", "exp", "log", "sqrt") and len(args) != 1:
                    raise ExpressionError(f"{val} takes exactly one argument", pos)
                if val in ("min", "max") and len(args) < 2:
                    raise ExpressionError(f"{val} takes at least two arguments", pos)
                return ("call", val, args)
            raise ExpressionError(f"unknown name {val!r}", pos)
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise ExpressionError(f"unexpected token {val!r}", pos)


class _BatchDomainError(Exception):
    """Internal: domain violation at row `row` of a batch of points."""

    def __init__(self, message: str, row: int):
        self.message = message
        self.row = row


def _eval_batch(node, pts: np.ndarray) -> np.ndarray:
    """Evaluate an AST over pts of shape (N, d); returns shape (N,)."""
    kind = node[0]
    if kind == "num":
        return np.full(pts.shape[0], node[1], dtype=float)
    if kind == "var":
        return pts[:, node[1] - 1]
    if kind == "neg":
        return -_eval_batch(node[1], pts)
    if kind == "bin":
        op, lhs, rhs = node[1], node[2], node[3]
        a = _eval_batch(lhs, pts)
        b = _eval_batch(rhs, pts)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            bad = np.nonzero(b == 0.0)[0]
            if bad.size:
                raise _BatchDomainError("division by zero", int(bad[0]))
            return a / b
        # op == "^"
        frac = b != np.floor(b)
        bad = np.nonzero((a < 0.0) & frac)[0]
        if bad.size:
            raise _BatchDomainError(
                "negative base with non-integer exponent", int(bad[0])
            )
        bad = np.nonzero((a == 0.0) & (b < 0.0))[0]
        if bad.size:
            raise _BatchDomainError("zero base with negative exponent", int(bad[0]))
        return np.power(a, b)
    # kind == "call"
    name, args = node[1], node[2]
    vals = [_eval_batch(arg, pts) for arg in args]
    if name == "min":
        return np.minimum.reduce(vals)
    if name == "max":
        return np.maximum.reduce(vals)
    if name == "abs":
        return np.abs(vals[0])
    if name == "exp":
        return np.exp(vals[0])
    if name == "log":
        bad = np.nonzero(vals[0] <= 0.0)[0]
        if bad.size:
            raise _BatchDomainError("log of a nonpositive number", int(bad[0]))
        return np.log(vals[0])
    # name == "sqrt"
    bad = np.nonzero(vals[0] < 0.0)[0]
    if bad.size:
        raise _BatchDomainError("sqrt of a negative number", int(bad[0]))
    return np.sqrt(vals[0])


# ---------------------------------------------------------------------------
# Monotonicity analysis (drives the envelope-exactness hint only).
# Tracks per-variable direction signs plus an interval bound over [0,1]^d.
# ---------------------------------------------------------------------------

_FULL = (-math.inf, math.inf)


@dataclass
class _Shape:
    dirs: dict | None  # var -> -1/0/+1, or None when unknown
    lo: float  # interval bound of values over [0,1]^d
    hi: float


def _flip(s: _Shape) -> _Shape:
    dirs = None if s.dirs is None else {k: -v for k, v in s.dirs.items()}
    return _Shape(dirs, -s.hi, -s.lo)


def _merge_same_sign(a: dict | None, b: dict | None) -> dict | None:
    if a is None or b is None:
        return None
    out = dict(a)
    for k, v in b.items():
        u = out.get(k, 0)
        if u * v < 0:
            return None
        out[k] = u if v == 0 else v
    return out


def _emul(x: float, y: float) -> float:
    # interval-endpoint product; 0 * inf -> 0 by convention
    if x == 0.0 or y == 0.0:
        return 0.0
    return x * y


def _safe_exp(t: float) -> float:
    return math.exp(t) if t < 700.0 else math.inf


def _safe_pow(t: float, c: float) -> float:
    if t == 0.0 and c < 0:
        return math.inf
    if math.isinf(t):
        return math.inf if c > 0 else 0.0
    try:
        return t ** c
    except OverflowError:
        return math.inf


def _analyze(node) -> _Shape:
    kind = node[0]
    if kind == "num":
        v = node[1]
        return _Shape({}, v, v)
    if kind == "var":
        return _Shape({node[1]: 1}, 0.0, 1.0)
    if kind == "neg":
        return _flip(_analyze(node[1]))
    if kind == "bin":
        op = node[1]
        a = _analyze(node[2])
        b = _analyze(node[3])
        if op == "+":
            return _Shape(_merge_same_sign(a.dirs, b.dirs), a.lo + b.lo, a.hi + b.hi)
        if op == "-":
            return _analyze(("bin", "+", node[2], ("neg", node[3])))
        if op == "*":
            return _mul_shape(a, b)
        if op == "/":
            if b.lo > 0.0 or b.hi < 0.0:
                inv = _Shape(
                    None if b.dirs is None else {k: -v for k, v in b.dirs.items()},
                    1.0 / b.hi, 1.0 / b.lo,
                )
                return _mul_shape(a, inv)
            return _Shape(None, *_FULL)
        # op == "^"
        return _pow_shape(a, node[3])
    name, args = node[1], node[2]
    shapes = [_analyze(arg) for arg in args]
    if name in ("min", "max"):
        dirs = shapes[0].dirs
        for s in shapes[1:]:
            dirs = _merge_same_sign(dirs, s.dirs)
        if name == "min":
            return _Shape(dirs, min(s.lo for s in shapes), min(s.hi for s in shapes))
        return _Shape(dirs, max(s.lo for s in shapes), max(s.hi for s in shapes))
    s = shapes[0]
    if name == "abs":
        if s.lo >= 0.0:
            return s
        if s.hi <= 0.0:
            return _flip(s)
        return _Shape(None, 0.0, max(-s.lo, s.hi))
    if name == "exp":
        return _Shape(s.dirs, _safe_exp(s.lo), _safe_exp(s.hi))
    if name == "log":
        lo = math.log(s.lo) if s.lo > 0.0 else -math.inf
        hi = math.log(s.hi) if s.hi > 0.0 else -math.inf
        return _Shape(s.dirs, lo, hi)
    # sqrt
    return _Shape(s.dirs, math.sqrt(max(s.lo, 0.0)), math.sqrt(max(s.hi, 0.0)))


def _mul_shape(a: _Shape, b: _Shape) -> _Shape:
    prods = [_emul(a.lo, b.lo), _emul(a.lo, b.hi), _emul(a.hi, b.lo),
             _emul(a.hi, b.hi)]
    lo, hi = min(prods), max(prods)
    # reduce to the nonneg*nonneg case by flipping signs
    if a.hi <= 0.0:
        return _Shape(_flip(_mul_shape(_flip(a), b)).dirs, lo, hi)
    if b.hi <= 0.0:
        return _Shape(_flip(_mul_shape(a, _flip(b))).dirs, lo, hi)
    if a.lo < 0.0 or b.lo < 0.0 or a.dirs is None or b.dirs is None:
        dirs = {} if not (_vars_of(a) | _vars_of(b)) else None
        return _Shape(dirs, lo, hi)
    # f,g >= 0: (fg)' = f'g + fg' keeps any shared sign of f' and g'
    return _Shape(_merge_same_sign(a.dirs, b.dirs), lo, hi)


def _vars_of(s: _Shape) -> set:
    return set() if s.dirs is None else {k for k, v in s.dirs.items() if v != 0}


def _pow_shape(base: _Shape, exp_node) -> _Shape:
    if exp_node[0] == "num" or (exp_node[0] == "neg" and exp_node[1][0] == "num"):
        c = exp_node[1] if exp_node[0] == "num" else -exp_node[1][1]
        if c == 0.0:
            return _Shape({}, 1.0, 1.0)
        if base.lo >= 0.0:
            if c > 0:
                return _Shape(base.dirs, _safe_pow(base.lo, c), _safe_pow(base.hi, c))
            dirs = None if base.dirs is None else {k: -v for k, v in base.dirs.items()}
            return _Shape(dirs, _safe_pow(base.hi, c), _safe_pow(base.lo, c))
        if c == math.floor(c) and c > 0:
            if int(c) % 2 == 1:
                return _Shape(base.dirs, _safe_pow(base.lo, c), _safe_pow(base.hi, c))
            if base.hi <= 0.0:
                dirs = (None if base.dirs is None
                        else {k: -v for k, v in base.dirs.items()})
                return _Shape(dirs, _safe_pow(base.hi, c), _safe_pow(base.lo, c))
            return _Shape(None, 0.0,
                          max(_safe_pow(base.lo, c), _safe_pow(base.hi, c)))
    return _Shape(None, *_FULL)


def _referenced_vars(node) -> set:
    kind = node[0]
    if kind == "num":
        return set()
    if kind == "var":
        return {node[1]}
    if kind == "neg":
        return _referenced_vars(node[1])
    if kind == "bin":
        return _referenced_vars(node[2]) | _referenced_vars(node[3])
    out: set = set()
    for arg in node[2]:
        out |= _referenced_vars(arg)
    return out


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Integrand:
    """A parsed integrand on [0,1]^d.

    `evaluator` is the pure point-to-real mapping; `evaluate_batch` is the
    equivalent vectorized form used by the grid builder.  Both are
    deterministic and reentrant.
    """

    source: str
    arity: int
    evaluator: Callable[[Sequence[float]], float] = field(compare=False)
    monotonicity_hint: str = MONO_UNKNOWN
    _ast: tuple = field(default=None, repr=False, compare=False)

    def __call__(self, point: Sequence[float]) -> float:
        return self.evaluator(point)

    def evaluate_batch(self, points: np.ndarray) -> np.ndarray:
        """Evaluate at an (N, d) array of points; returns an (N,) array."""
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.arity:
            raise ValueError(f"points must have shape (N, {self.arity})")
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                vals = _eval_batch(self._ast, pts)
        except _BatchDomainError as err:
            point = tuple(float(v) for v in pts[err.row])
            raise EvaluationDomainError(err.message, point) from None
        return np.asarray(vals, dtype=float)


def parse_integrand(source: str, d: int) -> Integrand:
    """Parse an expression over x1..xd into an Integrand.

    Raises ExpressionError (with position) for syntax errors and for
    references to variables with index > d.  Domain violations
    (division by zero, log/sqrt outside their domain) are deferred to
    evaluation time and reported with the offending point.
    """
    if d < 1:
        raise ValueError("dimension d must be positive")
    ast = _Parser(source, d).parse()
    shape = _analyze(ast)
    if shape.dirs is None:
        hint = MONO_UNKNOWN
    elif any(v < 0 for v in shape.dirs.values()):
        hint = MONO_MIXED
    else:
        hint = MONO_NONDECREASING

    def evaluator(point: Sequence[float]) -> float:
        pts = np.asarray(point, dtype=float).reshape(1, d)
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                return float(_eval_batch(ast, pts)[0])
        except _BatchDomainError as err:
            point = tuple(float(v) for v in pts[0])
            raise EvaluationDomainError(err.message, point) from None

    return Integrand(source=source, arity=d, evaluator=evaluator,
                     monotonicity_hint=hint, _ast=ast)


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on [0,1]^d with n cells per axis."""

    d: int
    n: int

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("dimension d must be at least 2")
        if self.n < 1:
            raise ValueError("cells per axis n must be at least 1")
        if self.n ** self.d >= 2 ** 63:
            raise GridSizeError(
                f"grid has {self.n}^{self.d} cells, exceeding the addressable size"
            )

    @property
    def cell_count(self) -> int:
        return self.n ** self.d

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    def cell_width(self) -> float:
        return 1.0 / self.n


def cell_code(index: CellIndex, spec: GridSpec) -> int:
    """Mixed-radix encoding of a 1-based cell index; axis 1 varies slowest."""
    code = 0
    for k, i in enumerate(index):
        if not 1 <= i <= spec.n:
            raise IndexError(f"cell coordinate {i} out of range 1..{spec.n}")
        code = code * spec.n + (i - 1)
    return code


def cell_from_code(code: int, spec: GridSpec) -> CellIndex:
    """Inverse of cell_code."""
    if not 0 <= code < spec.cell_count:
        raise IndexError(f"cell code {code} out of range")
    out = []
    for _ in range(spec.d):
        out.append(code % spec.n + 1)
        code //= spec.n
    return tuple(reversed(out))


def cell_bounds(index: CellIndex, spec: GridSpec) -> tuple:
    """Corners of cube I_i^n: ((i_k-1)/n, ...) and (i_k/n, ...).

    Cells are half-open except the last cell on each axis, which is
    closed at 1, so the grid partitions [0,1]^d exactly.
    """
    if len(index) != spec.d:
        raise IndexError(f"index has {len(index)} coordinates, expected {spec.d}")
    for i in index:
        if not 1 <= i <= spec.n:
            raise IndexError(f"cell coordinate {i} out of range 1..{spec.n}")
    lower = tuple((i - 1) / spec.n for i in index)
    upper = tuple(i / spec.n for i in index)
    return lower, upper


def cell_of_point(point: Sequence[float], spec: GridSpec) -> CellIndex:
    """The unique grid cell containing a point of [0,1]^d."""
    out = []
    for x in point:
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"coordinate {x} outside [0,1]")
        out.append(min(int(x * spec.n) + 1, spec.n))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class EnvelopeGrid:
    """Cell-wise lower or upper envelope coefficients a_i of an integrand.

    `coeffs` is the dense (n, ..., n) tensor in C order (axis 1 slowest);
    it is frozen after construction and safe to share across threads.
    """

    spec: GridSpec
    kind: str  # "lower" | "upper"
    coeffs: np.ndarray = field(compare=False)
    sample_density: int = 2

    def __post_init__(self):
        if self.kind not in ("lower", "upper"):
            raise ValueError("kind must be 'lower' or 'upper'")
        if self.coeffs.shape != self.spec.shape:
            raise ValueError(
                f"coeffs shape {self.coeffs.shape} != grid shape {self.spec.shape}"
            )
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("envelope coefficients must all be finite")
        self.coeffs.flags.writeable = False

    def coefficient(self, index: CellIndex) -> float:
        return float(self.coeffs[tuple(i - 1 for i in index)])

    def to_json_dict(self) -> dict:
        return {
            "d": self.spec.d,
            "n": self.spec.n,
            "kind": self.kind,
            "coeffs": self.coeffs.ravel(order="C").tolist(),
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh)
            fh.write("\n")

    def write_csv(self, path) -> None:
        spec = self.spec
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"i_{k + 1}" for k in range(spec.d)] + ["a_i"])
            flat = self.coeffs.ravel(order="C")
            for code, a in enumerate(flat):
                writer.writerow(list(cell_from_code(code, spec)) + [repr(float(a))])


_BLOCK_POINT_TARGET = 2_000_000  # evaluation chunk size, points per block


def build_envelope(f: Integrand, spec: GridSpec, kind: str,
                   sample_density: int = 2, warn: bool = True) -> EnvelopeGrid:
    """Cell-wise min (kind='lower') or max (kind='upper') of f on every grid cube.

    Extrema are taken over the m-per-axis lattice of each closed cube
    (m = sample_density >= 2), which contains all 2^d corners.  The result
    is exact whenever f attains its cell extremum on that lattice, in
    particular for coordinatewise monotone f already at m=2.
    """
    if kind not in ("lower", "upper"):
        raise ValueError("kind must be 'lower' or 'upper'")
    if sample_density < 2:
        raise ValueError("sample_density must be at least 2")
    if f.arity != spec.d:
        raise ValueError(f"integrand arity {f.arity} != grid dimension {spec.d}")
    if warn and f.monotonicity_hint == MONO_UNKNOWN:
        warnings.warn(
            "integrand is not provably coordinatewise monotone; envelope "
            "coefficients are lattice approximations (increase sample_density "
            "to tighten them)",
            EnvelopeApproximationWarning,
            stacklevel=2,
        )

    d, n, m = spec.d, spec.n, sample_density
    offsets = np.linspace(0.0, 1.0, m)
    reduce_fn = np.min if kind == "lower" else np.max

    per_first = n ** (d - 1) * m ** d
    block = max(1, _BLOCK_POINT_TARGET // per_first)
    coeffs = np.empty(spec.shape, dtype=float)

    for start in range(0, n, block):
        stop = min(n, start + block)
        axes = ([np.arange(start, stop)] + [np.arange(n)] * (d - 1)
                + [offsets] * d)
        grids = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(
            [(grids[k].ravel() + grids[d + k].ravel()) / n for k in range(d)],
            axis=1,
        )
        try:
            vals = f.evaluate_batch(pts)
        except EvaluationDomainError as err:
            raise EvaluationDomainError(
                err.reason, err.point, cell=cell_of_point(err.point, spec)
            ) from None
        vals = vals.reshape((stop - start,) + (n,) * (d - 1) + (m,) * d)
        bad = ~np.isfinite(vals)
        if bad.any():
            row = int(np.argmax(bad.ravel()))
            point = tuple(float(v) for v in pts[row])
            raise EvaluationDomainError(
                "non-finite integrand value", point, cell=cell_of_point(point, spec)
            )
        coeffs[start:stop] = reduce_fn(vals, axis=tuple(range(d, 2 * d)))

    return EnvelopeGrid(spec=spec, kind=kind, coeffs=coeffs,
                        sample_density=sample_density)
