"""Standard-form conic programs, a Clarabel adapter, and optimal-value sensitivity.

Programs use the form

    minimize    c'x
    subject to  b - A x in K

where ``K`` is a product of zero, nonnegative, second-order and PSD cones.
PSD blocks use the scaled upper-triangular column-major layout (off-diagonal
entries multiplied by sqrt(2)), so the Euclidean inner product of two ``svec``
vectors equals the trace inner product of the matrices.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp

import clarabel

CONE_KINDS = ("zero", "nonneg", "soc", "psd")
SQRT2 = np.sqrt(2.0)


class AssemblyError(ValueError):
    pass


class GradientUnavailable(RuntimeError):
    """Optimal-value sensitivity requested from a non-optimal solution."""


class CheckInconclusive(RuntimeError):
    pass


# ---------------------------------------------------------------- svec helpers

def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def svec_side(m: int) -> int:
    n = int(round((np.sqrt(8 * m + 1) - 1) / 2))
    if svec_dim(n) != m:
        raise AssemblyError(f"{m} is not a triangular number")
    return n


def svec_indices(n: int):
    """Row/column indices of the upper triangle in layout order, plus scale factors."""
    j, i = np.triu_indices(n)[::-1]
    order = np.lexsort((i, j))
    i, j = i[order], j[order]
    i, j = np.minimum(i, j), np.maximum(i, j)
    return i, j, np.where(i == j, 1.0, SQRT2)


_SVEC_CACHE: dict[int, tuple] = {}


def _svec_idx(n):
    if n not in _SVEC_CACHE:
        _SVEC_CACHE[n] = svec_indices(n)
    return _SVEC_CACHE[n]


def svec(M):
    """Scaled triangle of a symmetric matrix (or a stack of them along axis 0...-2)."""
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    i, j, s = _svec_idx(n)
    return M[..., i, j] * s


def smat(v):
    v = np.asarray(v, dtype=float)
    n = svec_side(v.shape[-1])
    i, j, s = _svec_idx(n)
    out = np.zeros(v.shape[:-1] + (n, n))
    out[..., i, j] = v / s
    out[..., j, i] = v / s
    return out


# ---------------------------------------------------------------- program types

@dataclass(frozen=True, eq=False)
class ConicProgram:
    """``min c'x s.t. b - A x in K``.

    ``cones`` is a list of ``(kind, size)`` pairs with ``size`` the PSD side
    length for ``psd`` and the row count otherwise. ``var_blocks`` and
    ``row_blocks`` map names to slices; ``tags`` holds free-form provenance.
    """

    c: np.ndarray
    A: sp.csc_matrix
    b: np.ndarray
    cones: list
    var_blocks: dict = field(default_factory=dict)
    row_blocks: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.A.shape
        if self.c.shape != (n,) or self.b.shape != (m,):
            raise AssemblyError(f"shape mismatch: A {self.A.shape}, c {self.c.shape}, b {self.b.shape}")
        if sum(_cone_rows(k, s) for k, s in self.cones) != m:
            raise AssemblyError("cone dimensions do not cover the constraint rows")
        for kind, size in self.cones:
            if kind not in CONE_KINDS or size < 0 or (kind == "soc" and size < 1):
                raise AssemblyError(f"malformed cone ({kind}, {size})")

    @property
    def shape(self):
        return self.A.shape

    def to_json(self) -> str:
        """Debug dump with sparse triplets, for cross-solver reproduction."""
        A = self.A.tocoo()
        doc = {
            "format": "drl2o-conic/1",
            "sense": "minimize c'x subject to b - A x in K",
            "psd_layout": "upper triangle, column-major, off-diagonals scaled by sqrt(2)",
            "c": self.c.tolist(),
            "b": self.b.tolist(),
            "A": {"shape": list(A.shape), "rows": A.row.tolist(), "cols": A.col.tolist(),
                  "vals": A.data.tolist()},
            "cones": [{"kind": k, "size": int(s)} for k, s in self.cones],
            "var_blocks": {k: [v.start, v.stop] for k, v in self.var_blocks.items()},
            "row_blocks": {k: [v.start, v.stop] for k, v in self.row_blocks.items()},
        }
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "ConicProgram":
        doc = json.loads(text)
        a = doc["A"]
        A = sp.csc_matrix((a["vals"], (a["rows"], a["cols"])), shape=tuple(a["shape"]))
        return cls(np.asarray(doc["c"], float), A, np.asarray(doc["b"], float),
                   [(d["kind"], d["size"]) for d in doc["cones"]],
                   {k: slice(*v) for k, v in doc["var_blocks"].items()},
                   {k: slice(*v) for k, v in doc["row_blocks"].items()})


def _cone_rows(kind, size):
    return svec_dim(size) if kind == "psd" else size


@dataclass(frozen=True)
class SolverSettings:
    tol_feas: float = 1e-5
    tol_gap_abs: float = 1e-5
    tol_gap_rel: float = 1e-5
    max_iter: int = 200
    verbose: bool = False

    def __post_init__(self):
        if min(self.tol_feas, self.tol_gap_abs, self.tol_gap_rel) <= 0:
            raise ValueError("solver tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")

    @classmethod
    def tight(cls, tol=1e-9):
        return cls(tol, tol, tol, 400)


    def as_dict(self):
        return dict(tol_feas=self.tol_feas, tol_gap_abs=self.tol_gap_abs,
                    tol_gap_rel=self.tol_gap_rel, max_iter=self.max_iter)

    @property
    def slack(self) -> float:
        """Comparison slack for solved values: ten times the loosest tolerance."""
        return 10.0 * max(self.tol_feas, self.tol_gap_abs, self.tol_gap_rel)


@dataclass(frozen=True, eq=False)
class ConicSolution:
    x: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: str
    obj: float
    dual_obj: float
    r_prim: float
    r_dual: float
    iterations: int
    raw_status: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"

    @property
    def gap(self) -> float:
        return abs(self.obj - self.dual_obj)

    def block(self, program: ConicProgram, name: str, dual=False):
        if dual:
            return self.z[program.row_blocks[name]]
        return self.x[program.var_blocks[name]]


_STATUS = {
    "Solved": "optimal",
    "AlmostSolved": "optimal",
    "PrimalInfeasible": "infeasible",
    "AlmostPrimalInfeasible": "infeasible",
    "DualInfeasible": "unbounded",
    "AlmostDualInfeasible": "unbounded",
}


def _clarabel_cone(kind, size):
    if kind == "zero":
        return clarabel.ZeroConeT(size)
    if kind == "nonneg":
        return clarabel.NonnegativeConeT(size)
    if kind == "soc":
        return clarabel.SecondOrderConeT(size)
    return clarabel.PSDTriangleConeT(size)


# fallbacks tried in order when the factorization breaks down
_RETRIES = ({}, {"static_regularization_constant": 1e-7}, {"equilibrate_enable": False})
_RETRY_ON = ("NumericalError", "InsufficientProgress")


def _clarabel_settings(settings: SolverSettings, extra):
    st = clarabel.DefaultSettings()
    st.verbose = settings.verbose
    st.tol_feas = settings.tol_feas
    st.tol_gap_abs = settings.tol_gap_abs
    st.tol_gap_rel = settings.tol_gap_rel
    st.max_iter = settings.max_iter
    # "almost solved" then means within the 10x comparison slack
    st.reduced_tol_feas = settings.slack
    st.reduced_tol_gap_abs = settings.slack
    st.reduced_tol_gap_rel = settings.slack
    st.presolve_enable = False
    st.max_threads = 1
    for k, v in extra.items():
        setattr(st, k, v)
    return st


def solve(program: ConicProgram, settings: SolverSettings | None = None) -> ConicSolution:
    """Solve with Clarabel; non-optimal outcomes come back as a status value."""
    settings = settings or SolverSettings()
    n = program.c.size
    P = sp.csc_matrix((n, n))
    A = sp.csc_matrix(program.A)
    cones = [_clarabel_cone(k, s) for k, s in program.cones if _cone_rows(k, s) > 0]
    trail = []
    for extra in _RETRIES:
        st = _clarabel_settings(settings, extra)
        sol = clarabel.DefaultSolver(P, program.c, A, program.b, cones, st).solve()
        raw = str(sol.status).split(".")[-1]
        trail.append(raw)
        if raw not in _RETRY_ON:
            break
    return ConicSolution(
        x=np.array(sol.x), z=np.array(sol.z), s=np.array(sol.s),
        status=_STATUS.get(raw, "numerical-limit"),
        obj=float(sol.obj_val), dual_obj=float(sol.obj_val_dual),
        r_prim=float(sol.r_prim), r_dual=float(sol.r_dual),
        iterations=int(sol.iterations), raw_status="->".join(trail),
    )


# ---------------------------------------------------------------- sensitivity

@dataclass(frozen=True, eq=False)
class DataPerturbation:
    """A direction in program-data space: ``(dc, dA, db)``."""

    dc: np.ndarray
    dA: sp.spmatrix
    db: np.ndarray


@dataclass(frozen=True, eq=False)
class ValueGradient:
    """Gradient of the optimal value: ``dp/dc = x``, ``dp/dA = z x'``, ``dp/db = -z``.

    ``dA`` is kept in factored form; ``on_pattern`` materializes it on a
    sparsity pattern.
    """

    x: np.ndarray
    z: np.ndarray

    @property
    def dc(self):
        return self.x

    @property
    def db(self):
        return -self.z

    def on_pattern(self, A: sp.spmatrix) -> sp.csc_matrix:
        coo = sp.coo_matrix(A)
        vals = self.z[coo.row] * self.x[coo.col]
        return sp.csc_matrix((vals, (coo.row, coo.col)), shape=coo.shape)

    def rows(self, program: ConicProgram, name: str):
        """``dp/db`` restricted to a named row block."""
        return -self.z[program.row_blocks[name]]

    def contract(self, d: DataPerturbation) -> float:
        return float(d.dc @ self.x + self.z @ (d.dA @ self.x) - self.z @ d.db)


def optimal_value_gradient(program: ConicProgram, solution: ConicSolution) -> ValueGradient:
    """Lagrangian sensitivity of the optimal value at a primal-dual optimum.

    With ``L(x, z) = c'x + z'(A x - b)`` the value derivative in any data
    direction is the partial derivative of ``L`` with ``(x, z)`` frozen.
    """
    if not solution.optimal:
        raise GradientUnavailable(f"solver status {solution.status} ({solution.raw_status})")
    if solution.x.size != program.c.size or solution.z.size != program.b.size:
        raise GradientUnavailable("solution does not match the program dimensions")
    return ValueGradient(solution.x, solution.z)


def program_difference(p1: ConicProgram, p0: ConicProgram, scale=1.0) -> DataPerturbation:
    """``(p1 - p0) * scale`` as a data perturbation (same cone structure required)."""
    if p1.A.shape != p0.A.shape or list(p1.cones) != list(p0.cones):
        raise AssemblyError("programs differ in structure")
    return DataPerturbation((p1.c - p0.c) * scale, (p1.A - p0.A) * scale, (p1.b - p0.b) * scale)


def directional_derivative(program, solution, perturbation: DataPerturbation) -> float:
    return optimal_value_gradient(program, solution).contract(perturbation)


def finite_diff_check(builder: Callable[[np.ndarray], ConicProgram], w, h,
                      settings: SolverSettings | None = None, data_jacobian=None,
                      data_step=1e-7):
    """Compare envelope gradients in ``w`` against central differences of re-solves.

    ``data_jacobian(w)`` may return one ``DataPerturbation`` per coordinate of
    ``w``; otherwise the data derivative is itself taken by central differences
    of ``builder`` with step ``data_step`` (exact when the data are at most
    quadratic in ``w``).
    """
    if not h > 0:
        raise ValueError("finite-difference step h must be positive")
    w = np.asarray(w, dtype=float)
    settings = settings or SolverSettings.tight()
    prog = builder(w)
    sol = solve(prog, settings)
    if not sol.optimal:
        raise CheckInconclusive(f"base solve status {sol.status}")
    grad = optimal_value_gradient(prog, sol)
    analytic = np.zeros(w.size)
    fd = np.zeros(w.size)
    for j in range(w.size):
        e = np.zeros(w.size)
        e[j] = 1.0
        if data_jacobian is not None:
            dp = data_jacobian(w)[j]
        else:
            dp = program_difference(builder(w + data_step * e), builder(w - data_step * e),
                                    0.5 / data_step)
        analytic[j] = grad.contract(dp)
        vals = []
        for sgn in (1.0, -1.0):
            s = solve(builder(w + sgn * h * e), settings)
            if not s.optimal:
                raise CheckInconclusive(f"re-solve at coordinate {j} status {s.status}")
            vals.append(s.obj)
        fd[j] = (vals[0] - vals[1]) / (2 * h)
    scale = max(np.max(np.abs(fd)), 1e-12)
    return dict(analytic=analytic, fd=fd, max_abs_error=float(np.max(np.abs(analytic - fd))),
                max_rel_error=float(np.max(np.abs(analytic - fd)) / scale), value=sol.obj)


# ---------------------------------------------------------------- builder

class ProgramBuilder:
    """Incremental assembly of a :class:`ConicProgram`.

    Constraints are written as ``sum_k coef_k @ x[var_k] + const in K``;
    internally this is ``A = -coef``, ``b = const``.
    """

    def __init__(self):
        self._nvar = 0
        self.var_blocks: dict[str, slice] = {}
        self._rows = []  # (kind, size, [(var, coef)], const, name)
        self._obj: dict[str, np.ndarray] = {}
        self.tags: dict = {}

    def var(self, name, size) -> slice:
        if name in self.var_blocks:
            raise AssemblyError(f"duplicate variable {name}")
        sl = slice(self._nvar, self._nvar + int(size))
        self.var_blocks[name] = sl
        self._nvar += int(size)
        return sl

    def size(self, name):
        sl = self.var_blocks[name]
        return sl.stop - sl.start

    def objective(self, name, vec):
        vec = np.broadcast_to(np.asarray(vec, dtype=float), (self.size(name),))
        self._obj[name] = self._obj.get(name, 0.0) + vec

    def constrain(self, kind, size, terms, const=None, name=None):
        rows = _cone_rows(kind, size)
        checked = []
        for var, coef in terms:
            coef = sp.csr_matrix(coef) if not sp.issparse(coef) else coef.tocsr()
            if coef.shape != (rows, self.size(var)):
                raise AssemblyError(
                    f"constraint {name}: coefficient for {var} has shape {coef.shape}, "
                    f"expected {(rows, self.size(var))}")
            checked.append((var, coef))
        const = np.zeros(rows) if const is None else np.broadcast_to(np.asarray(const, float), (rows,))
        self._rows.append((kind, size, checked, np.array(const), name))

    def build(self) -> ConicProgram:
        n = self._nvar
        c = np.zeros(n)
        for name, vec in self._obj.items():
            c[self.var_blocks[name]] += vec
        blocks, bs, cones, row_blocks = [], [], [], {}
        r = 0
        for kind, size, terms, const, name in self._rows:
            rows = _cone_rows(kind, size)
            M = sp.lil_matrix((rows, n)) if not terms else None
            if terms:
                parts = []
                for var, coef in terms:
                    sl = self.var_blocks[var]
                    pad = sp.csr_matrix((coef.data, coef.indices + sl.start, coef.indptr),
                                        shape=(rows, n))
                    parts.append(pad)
                M = parts[0]
                for p in parts[1:]:
                    M = M + p
            blocks.append(-sp.csr_matrix(M))
            bs.append(const)
            cones.append((kind, size))
            if name is not None:
                if name in row_blocks:
                    raise AssemblyError(f"duplicate constraint name {name}")
                row_blocks[name] = slice(r, r + rows)
            r += rows
        A = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
        b = np.concatenate(bs) if bs else np.zeros(0)
        return ConicProgram(c, A, b, cones, dict(self.var_blocks), row_blocks, dict(self.tags))
