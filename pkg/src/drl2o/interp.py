"""Interpolation constraints, initial conditions and loss coefficients in lifted coordinates.

Everything is expressed as linear functionals on the lifted vector
``v = (svec G_1, ..., svec G_B, F)`` together with their derivatives in the
flat schedule vector ``theta``. A functional ``a`` evaluates to
``Tr(A G) + b'F = a'v`` where ``a = (svec A, b)``.

Conventions
-----------
* ``LmiSet`` rows satisfy ``a_m'v <= 0`` on every in-class lifted sample.
  Equalities appear as a pair of opposing rows (listed in ``eq_pairs``).
* ``PsdBlock`` ``H`` with ``H_kl = C[k, l]'v`` must be positive semidefinite.
* The optimum is the origin of the shifted coordinates (``x* -> 0``,
  ``g* -> 0``, ``f* -> 0``).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conic import svec_dim, _svec_idx
from .lifting import BasisLayout, LayoutError, layout_for
from .unroll import StepSchedule, loss_weights


class InvalidClass(ValueError):
    pass


# ---------------------------------------------------------------- coefficient algebra

class Coef:
    """Coefficient vector of one lifted vector in a basis block, with ``d/dtheta``."""

    __slots__ = ("block", "val", "jac")

    def __init__(self, block, val, jac):
        self.block = block
        self.val = val
        self.jac = jac

    @classmethod
    def unit(cls, layout: BasisLayout, role: str, p: int):
        b, i = layout.role(role)
        val = np.zeros(layout.sizes[b])
        val[i] = 1.0
        return cls(b, val, np.zeros((p, val.size)))

    @classmethod
    def zero(cls, layout: BasisLayout, block: int, p: int):
        n = layout.sizes[block]
        return cls(block, np.zeros(n), np.zeros((p, n)))

    def _same(self, other):
        if self.block != other.block:
            raise LayoutError("cannot combine coefficients from different blocks")

    def __add__(self, other):
        self._same(other)
        return Coef(self.block, self.val + other.val, self.jac + other.jac)

    def __sub__(self, other):
        self._same(other)
        return Coef(self.block, self.val - other.val, self.jac - other.jac)

    def __mul__(self, s: float):
        return Coef(self.block, self.val * s, self.jac * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def times(self, theta, j):
        """``theta[j] * self`` with the product rule applied."""
        jac = theta[j] * self.jac
        jac[j] += self.val
        return Coef(self.block, theta[j] * self.val, jac)


class Lin:
    """Linear functional on lifted vectors, with ``d/dtheta``."""

    __slots__ = ("val", "jac")

    def __init__(self, val, jac):
        self.val = val
        self.jac = jac

    @classmethod
    def zero(cls, nv, p):
        return cls(np.zeros(nv), np.zeros((p, nv)))

    @classmethod
    def fvalue(cls, layout: BasisLayout, role: str, p: int):
        out = cls.zero(layout.nv, p)
        out.val[layout.f_offset + layout.f_index(role)] = 1.0
        return out

    def __add__(self, other):
        return Lin(self.val + other.val, self.jac + other.jac)

    def __sub__(self, other):
        return Lin(self.val - other.val, self.jac - other.jac)

    def __mul__(self, s: float):
        return Lin(self.val * s, self.jac * s)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def inner(layout: BasisLayout, a: Coef, b: Coef) -> Lin:
    """``<P a, P b>`` as ``Tr(sym(a b') G)``."""
    a._same(b)
    n = layout.sizes[a.block]
    i, j, s = _svec_idx(n)
    half = 0.5 * s
    val = half * (a.val[i] * b.val[j] + a.val[j] * b.val[i])
    jac = half * (a.jac[:, i] * b.val[j] + a.val[i] * b.jac[:, j]
                  + a.jac[:, j] * b.val[i] + a.val[j] * b.jac[:, i])
    p = a.jac.shape[0]
    out = Lin.zero(layout.nv, p)
    o = layout.svec_offsets()[a.block]
    out.val[o:o + val.size] = val
    out.jac[:, o:o + val.size] = jac
    return out


def sqnorm(layout, a: Coef) -> Lin:
    return inner(layout, a, a)


@dataclass(frozen=True)
class Point:
    """Interpolation point: iterate, (sub)gradient and function value."""

    name: str
    x: Coef
    g: Coef
    f: Lin


# ---------------------------------------------------------------- coefficient vectors

def coefficient_vectors(layout: BasisLayout, schedule: StepSchedule) -> dict:
    """Express every iterate in the lifted basis (shifted so that the optimum is 0).

    * gd:   x_{k+1} = x_k - theta_k g_k
    * ista: x_{k+1} = x_k - theta_k (gh_k + s_{k+1})
    * pdhg: x_{k+1} = x_k + tau_k MTu_k - tau_k sf_{k+1};
            xbar_{k+1} = x_{k+1} + rho_k (x_{k+1} - x_k);
            u_{k+1} = u_k - sigma_k Mxbar_{k+1} - sigma_k sphi_{k+1}
    """
    th = schedule.theta
    p, K = th.size, schedule.K
    e = lambda role: Coef.unit(layout, role, p)  # noqa: E731
    out = {"x0": e("x0")}
    if schedule.kind == "gd":
        for k in range(K):
            out[f"x{k + 1}"] = out[f"x{k}"] - e(f"g{k}").times(th, k)
        for k in range(K + 1):
            out[f"g{k}"] = e(f"g{k}")
    elif schedule.kind == "ista":
        for k in range(K):
            out[f"x{k + 1}"] = out[f"x{k}"] - (e(f"gh{k}") + e(f"s{k + 1}")).times(th, k)
        for k in range(K + 1):
            out[f"gh{k}"] = e(f"gh{k}")
        for k in range(1, K + 1):
            out[f"s{k}"] = e(f"s{k}")
    elif schedule.kind == "pdhg":
        out["u0"] = e("u0")
        for k in range(K):
            jt, jr, js = 3 * k, 3 * k + 1, 3 * k + 2
            xn = out[f"x{k}"] + (e(f"MTu{k}") - e(f"sf{k + 1}")).times(th, jt)
            out[f"x{k + 1}"] = xn
            out[f"xbar{k + 1}"] = xn + (xn - out[f"x{k}"]).times(th, jr)
            out[f"u{k + 1}"] = out[f"u{k}"] - (e(f"Mxbar{k + 1}") + e(f"sphi{k + 1}")).times(th, js)
            out[f"MTu{k}"] = e(f"MTu{k}")
            out[f"Mxbar{k + 1}"] = e(f"Mxbar{k + 1}")
            out[f"sf{k + 1}"] = e(f"sf{k + 1}")
            out[f"sphi{k + 1}"] = e(f"sphi{k + 1}")
    else:
        raise LayoutError(f"unknown kind {schedule.kind!r}")
    return out


# ---------------------------------------------------------------- constraint containers

@dataclass(eq=False)
class LmiSet:
    rows: np.ndarray  # (M, nv); a_m'v <= 0
    jac: np.ndarray  # (p, M, nv)
    labels: list
    eq_pairs: list = field(default_factory=list)

    @property
    def count(self):
        return self.rows.shape[0]

    def matrices(self, layout: BasisLayout):
        """``(A_m, b_m)`` pairs with ``A_m`` block-diagonal over the full basis."""
        from .conic import smat
        out = []
        offs = layout.svec_offsets()
        for r in self.rows:
            A = np.zeros((layout.dim, layout.dim))
            o = 0
            for off, n in zip(offs, layout.sizes):
                A[o:o + n, o:o + n] = smat(r[off:off + svec_dim(n)])
                o += n
            out.append((A, r[layout.f_offset:].copy()))
        return out

    def split(self):
        """Indices of inequality rows, and of one representative row per equality pair."""
        partner = {j for _, j in self.eq_pairs}
        eq = [i for i, _ in self.eq_pairs]
        ineq = [m for m in range(self.count) if m not in partner and m not in set(eq)]
        return np.array(ineq, dtype=int), np.array(eq, dtype=int)

    def evaluate(self, v):
        return self.rows @ v


def concat_lmis(sets, nv, p) -> LmiSet:
    rows, jacs, labels, pairs = [], [], [], []
    o = 0
    for s in sets:
        rows.append(s.rows)
        jacs.append(s.jac)
        labels.extend(s.labels)
        pairs.extend((i + o, j + o) for i, j in s.eq_pairs)
        o += s.count
    if not rows:
        return LmiSet(np.zeros((0, nv)), np.zeros((p, 0, nv)), [], [])
    return LmiSet(np.vstack(rows), np.concatenate(jacs, axis=1), labels, pairs)


def _lmiset(ineqs, eqs, nv, p) -> LmiSet:
    """``ineqs``: (label, Lin) with Lin <= 0; ``eqs``: (label, Lin) with Lin == 0."""
    items = list(ineqs)
    pairs = []
    for label, lin in eqs:
        pairs.append((len(items), len(items) + 1))
        items.append((label + "[+]", lin))
        items.append((label + "[-]", -lin))
    if not items:
        return LmiSet(np.zeros((0, nv)), np.zeros((p, 0, nv)), [], [])
    rows = np.array([lin.val for _, lin in items])
    jac = np.stack([lin.jac for _, lin in items], axis=1)
    return LmiSet(rows, jac, [lab for lab, _ in items], pairs)


@dataclass(eq=False)
class PsdBlock:
    C: np.ndarray  # (r, r, nv)
    dC: np.ndarray  # (p, r, r, nv)
    label: str

    @property
    def side(self):
        return self.C.shape[0]

    def evaluate(self, v):
        return self.C @ v


def _psd_block(entries, label) -> PsdBlock:
    """``entries[k][l]`` is a Lin; symmetrized on assembly."""
    r = len(entries)
    C = np.array([[entries[k][l].val for l in range(r)] for k in range(r)])
    dC = np.array([[entries[k][l].jac for l in range(r)] for k in range(r)]).transpose(2, 0, 1, 3)
    C = 0.5 * (C + C.transpose(1, 0, 2))
    dC = 0.5 * (dC + dC.transpose(0, 2, 1, 3))
    return PsdBlock(C, dC, label)


# ---------------------------------------------------------------- function classes

def smooth_strongly_convex_lmis(layout, points, mu, L, p, label="f") -> LmiSet:
    """Interpolation inequalities over all ordered pairs of ``points``.

    For ``i != j``:
    ``f_i - f_j - <g_j, x_i - x_j> - 1/(2(1 - mu/L)) [ (1/L)||g_i - g_j||^2
    + mu ||x_i - x_j||^2 - (2 mu / L) <g_j - g_i, x_j - x_i> ] >= 0``.
    ``L = inf`` is allowed; ``mu = 0, L = inf`` is plain convexity.
    """
    if not (0 <= mu < L):
        raise InvalidClass(f"need 0 <= mu < L, got mu={mu}, L={L}")
    inv_L = 0.0 if np.isinf(L) else 1.0 / L
    c = 1.0 / (2.0 * (1.0 - mu * inv_L))
    ineqs = []
    for a in points:
        for b in points:
            if a is b:
                continue
            dx = a.x - b.x
            dg = a.g - b.g
            expr = a.f - b.f - inner(layout, b.g, dx)
            quad = Lin.zero(layout.nv, p)
            if inv_L:
                quad = quad + inv_L * sqnorm(layout, dg)
            if mu:
                quad = quad + mu * sqnorm(layout, dx)
                if inv_L:
                    # <g_j - g_i, x_j - x_i> = <dg, dx>
                    quad = quad - (2 * mu * inv_L) * inner(layout, dg, dx)
            expr = expr - c * quad
            ineqs.append((f"{label}:{a.name}>{b.name}", -expr))
    return _lmiset(ineqs, [], layout.nv, p)


def quadratic_class_constraints(layout, points, mu, L, p, label="q"):
    """Convex-quadratic class with curvature in ``[mu, L]``.

    ``points`` must exclude the optimum (it is the origin). Returns the
    equalities ``<x_i, g_j> = <x_j, g_i>`` and ``f_i = <x_i, g_i>/2`` and the PSD
    block ``H_kl = <g_k - mu x_k, L x_l - g_l>``.
    """
    if not (0 < mu <= L) or np.isinf(L):
        raise InvalidClass(f"need 0 < mu <= L < inf, got mu={mu}, L={L}")
    eqs = []
    for i, a in enumerate(points):
        for b in points[i + 1:]:
            eqs.append((f"{label}:sym({a.name},{b.name})",
                        inner(layout, a.x, b.g) - inner(layout, b.x, a.g)))
    for a in points:
        eqs.append((f"{label}:value({a.name})", a.f - 0.5 * inner(layout, a.x, a.g)))
    left = [a.g - mu * a.x for a in points]
    right = [L * a.x - a.g for a in points]
    H = [[inner(layout, left[k], right[l]) for l in range(len(points))] for k in range(len(points))]
    return _lmiset([], eqs, layout.nv, p), [_psd_block(H, f"{label}:H")]


def linear_operator_constraints(layout, X, Y, U, V, L_bound, p, label="M"):
    """Interpolation of a linear operator ``M`` with ``||M|| <= L_bound``.

    Columns satisfy ``Y = M X`` and ``V = M' U``. Conditions: ``X'V = Y'U``,
    ``L^2 X'X - Y'Y >= 0`` and ``L^2 U'U - V'V >= 0`` (PSD).
    """
    if not L_bound > 0 or np.isinf(L_bound):
        raise InvalidClass("operator norm bound must be positive and finite")
    if len(X) != len(Y) or len(U) != len(V):
        raise LayoutError("operator columns must come in pairs")
    eqs = []
    for i in range(len(X)):
        for j in range(len(U)):
            eqs.append((f"{label}:adj({i},{j})", inner(layout, X[i], V[j]) - inner(layout, Y[i], U[j])))
    L2 = L_bound**2
    B1 = [[L2 * inner(layout, X[k], X[l]) - inner(layout, Y[k], Y[l]) for l in range(len(X))]
          for k in range(len(X))]
    B2 = [[L2 * inner(layout, U[k], U[l]) - inner(layout, V[k], V[l]) for l in range(len(U))]
          for k in range(len(U))]
    return _lmiset([], eqs, layout.nv, p), [_psd_block(B1, f"{label}:range"), _psd_block(B2, f"{label}:adjoint")]


# ---------------------------------------------------------------- objective / initial condition

@dataclass(eq=False)
class PepObjective:
    """Loss ``a_obj'v``, initial condition ``a0'v + c0 <= 0``."""

    a_obj: np.ndarray
    da_obj: np.ndarray
    a0: np.ndarray
    c0: float
    per_iterate: list = field(default_factory=list)  # Lin for l^1..l^K

    @property
    def lipschitz(self) -> float:
        return float(np.linalg.norm(self.a_obj))

    def loss(self, v):
        return float(self.a_obj @ v)


def initial_condition(layout: BasisLayout, bound: float, p: int = 0):
    """``(a0, c0)``: the squared initial distance(s) bounded by ``bound^2``."""
    if not bound > 0 or np.isinf(bound):
        raise ValueError("initial-condition bound must be positive and finite")
    lin = sqnorm(layout, Coef.unit(layout, "x0", p))
    if layout.kind == "pdhg":
        lin = lin + sqnorm(layout, Coef.unit(layout, "u0", p))
    return lin.val, -float(bound) ** 2


def per_iterate_losses(layout: BasisLayout, p: int):
    """Lin for the loss at iterates 1..K in shifted lifted coordinates."""
    fv = lambda r: Lin.fvalue(layout, r, p)  # noqa: E731
    K = layout.K
    if layout.kind == "gd":
        return [fv(f"f{k}") for k in range(1, K + 1)]
    if layout.kind == "ista":
        return [fv(f"h{k}") + fv(f"r{k}") for k in range(1, K + 1)]
    return [fv(f"f{k}") + fv(f"phi{k}") for k in range(1, K + 1)]


def pep_objective(layout: BasisLayout, bound: float, p: int, weighted=False, base=0.9):
    losses = per_iterate_losses(layout, p)
    if weighted:
        w = loss_weights(layout.K, base)
        obj = Lin.zero(layout.nv, p)
        for wk, lk in zip(w, losses):
            obj = obj + wk * lk
    else:
        obj = losses[-1]
    a0, c0 = initial_condition(layout, bound, p)
    return PepObjective(obj.val, obj.jac, a0, c0, losses)


# ---------------------------------------------------------------- family assembly

@dataclass(eq=False)
class PepData:
    """Everything the PEP / DRO programs need at one schedule."""

    layout: BasisLayout
    lmis: LmiSet
    blocks: list
    objective: PepObjective
    schedule: StepSchedule

    @property
    def p(self):
        return self.schedule.size


def _points(layout, coeffs, xs, gs, fs, p, star_block=0):
    pts = [Point("*", Coef.zero(layout, star_block, p), Coef.zero(layout, star_block, p),
                 Lin.zero(layout.nv, p))]
    for name, x, g, f in zip(fs, xs, gs, fs):
        pts.append(Point(name, coeffs[x], coeffs[g], Lin.fvalue(layout, f, p)))
    return pts


def gd_constraints(layout, coeffs, mu, L, p, function_class="quadratic"):
    K = layout.K
    ks = range(K + 1)
    pts = _points(layout, coeffs, [f"x{k}" for k in ks], [f"g{k}" for k in ks], [f"f{k}" for k in ks], p)
    if function_class == "quadratic":
        lm, blocks = quadratic_class_constraints(layout, pts[1:], mu, L, p)
        return lm, blocks
    if function_class == "smooth":
        return smooth_strongly_convex_lmis(layout, pts, mu, L, p), []
    raise InvalidClass(f"unknown function class {function_class!r}")


def ista_constraints(layout, coeffs, L, p):
    K = layout.K
    ks = range(K + 1)
    h = _points(layout, coeffs, [f"x{k}" for k in ks], [f"gh{k}" for k in ks], [f"h{k}" for k in ks], p)
    k1 = range(1, K + 1)
    r = _points(layout, coeffs, [f"x{k}" for k in k1], [f"s{k}" for k in k1], [f"r{k}" for k in k1], p)
    return concat_lmis([smooth_strongly_convex_lmis(layout, h, 0.0, L, p, "h"),
                        smooth_strongly_convex_lmis(layout, r, 0.0, np.inf, p, "r")], layout.nv, p), []


def pdhg_constraints(layout, coeffs, M_max, p):
    K = layout.K
    k1 = range(1, K + 1)
    f = _points(layout, coeffs, [f"x{k}" for k in k1], [f"sf{k}" for k in k1], [f"f{k}" for k in k1], p, 0)
    phi = _points(layout, coeffs, [f"u{k}" for k in k1], [f"sphi{k}" for k in k1], [f"phi{k}" for k in k1], p, 1)
    X = [coeffs[f"xbar{k}"] for k in k1]
    Y = [coeffs[f"Mxbar{k}"] for k in k1]
    U = [coeffs[f"u{k}"] for k in range(K)]
    V = [coeffs[f"MTu{k}"] for k in range(K)]
    op, blocks = linear_operator_constraints(layout, X, Y, U, V, M_max, p)
    lm = concat_lmis([smooth_strongly_convex_lmis(layout, f, 0.0, np.inf, p, "f"),
                      smooth_strongly_convex_lmis(layout, phi, 0.0, np.inf, p, "phi"), op], layout.nv, p)
    return lm, blocks


def lmi_jacobian(obj):
    """Derivative tensors stored alongside any constraint container."""
    if isinstance(obj, LmiSet):
        return obj.jac
    if isinstance(obj, PsdBlock):
        return obj.dC
    if isinstance(obj, PepObjective):
        return obj.da_obj
    raise TypeError(type(obj).__name__)


def assemble(family, schedule: StepSchedule, weighted=False) -> PepData:
    """Build lifted constraints for ``family`` (see :mod:`drl2o.families`)."""
    layout = layout_for(schedule.kind, schedule.K)
    p = schedule.size
    coeffs = coefficient_vectors(layout, schedule)
    if schedule.kind == "gd":
        lm, blocks = gd_constraints(layout, coeffs, family.mu, family.L, p, family.function_class)
    elif schedule.kind == "ista":
        lm, blocks = ista_constraints(layout, coeffs, family.L, p)
    else:
        lm, blocks = pdhg_constraints(layout, coeffs, family.M_max, p)
    obj = pep_objective(layout, family.bound, p, weighted=weighted)
    return PepData(layout, lm, blocks, obj, schedule)
