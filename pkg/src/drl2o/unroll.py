"""Unrolled first-order methods with trajectory recording and forward-mode tangents."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .instances import (LassoInstance, QuadraticInstance, Reference, TvLpInstance,
                        reference_optimum, soft_threshold)

KINDS = ("gd", "ista", "pdhg")
FAMILY_KIND = {"quadratic": "gd", "lasso": "ista", "tv": "pdhg"}
LOSS_WEIGHT_BASE = 0.9


class DivergenceError(FloatingPointError):
    def __init__(self, step, message=""):
        super().__init__(message or f"non-finite iterate at step {step}")
        self.step = step


class ReferenceInconsistency(ValueError):
    """A loss came out clearly negative: the reference optimum is not optimal."""


@dataclass(frozen=True, eq=False)
class StepSchedule:
    """Per-step parameters. PDHG rows are ``(tau, rho, sigma)``."""

    kind: str
    values: np.ndarray
    bounds: tuple = (1e-12, np.inf)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        vals = np.array(self.values, dtype=float)
        if self.kind == "pdhg":
            vals = vals.reshape(-1, 3)
        else:
            vals = vals.reshape(-1)
        object.__setattr__(self, "values", vals)
        lo, hi = self.bounds
        if not lo > 0 or hi < lo:
            raise ValueError("bounds need 0 < theta_min <= theta_max")
        if vals.shape[0] < 1:
            raise ValueError("schedule needs at least one step")
        if not np.all(np.isfinite(vals)) or vals.min() < lo or vals.max() > hi:
            raise ValueError(f"schedule entries must lie in [{lo}, {hi}]")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def theta(self) -> np.ndarray:
        """Flat parameter vector (PDHG rows are flattened step-major)."""
        return self.values.ravel()

    @property
    def size(self) -> int:
        return self.values.size

    def with_theta(self, theta) -> "StepSchedule":
        return StepSchedule(self.kind, np.asarray(theta, float).reshape(self.values.shape), self.bounds)

    def clip(self, theta) -> np.ndarray:
        return np.clip(theta, *self.bounds)

    def to_dict(self):
        return dict(kind=self.kind, values=self.values.tolist(), bounds=[float(b) for b in self.bounds])

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.asarray(d["values"], float), tuple(d.get("bounds", (1e-12, np.inf))))

    @classmethod
    def constant(cls, kind, K, value, bounds=(1e-12, np.inf)):
        if kind == "pdhg":
            return cls(kind, np.tile(np.asarray(value, float), (K, 1)), bounds)
        return cls(kind, np.full(K, float(value)), bounds)


@dataclass(eq=False)
class Trajectory:
    """Recorded run.

    ``records`` maps a role name to an array ``(count, dim)``; ``values`` maps
    a function-value name to ``(count,)``. Row ``k`` of ``x`` is iterate k.

    * gd: ``x``, ``g`` (K+1 rows each); values ``f``.
    * ista: ``x``, ``gh`` (smooth gradients), ``s`` (l1 subgradients, row 0 is a
      canonical choice at x0); values ``h``, ``r``.
    * pdhg: ``x``, ``u`` (K+1 rows); ``MTu`` (rows k = 0..K-1); ``xbar``,
      ``Mxbar``, ``sf``, ``sphi`` (rows k = 1..K); values ``f`` = c'x,
      ``phi`` = -q'u.
    """

    instance: object
    schedule: StepSchedule
    records: dict
    values: dict
    reference: Reference | None = None
    losses: np.ndarray | None = None

    @property
    def kind(self):
        return self.schedule.kind

    @property
    def K(self):
        return self.schedule.K

    @property
    def x(self):
        return self.records["x"]


@dataclass(eq=False)
class TrajectoryJacobian:
    """``records[name]`` has shape ``(p, count, dim)``; ``values[name]`` ``(p, count)``;
    ``losses`` ``(p, K+1)``. Axis 0 indexes the flat schedule vector."""

    records: dict
    values: dict
    losses: np.ndarray | None = None


def _check_kind(instance, schedule):
    expected = FAMILY_KIND[instance.family]
    if schedule.kind != expected:
        raise ValueError(f"{instance.family} instances need a {expected!r} schedule, got {schedule.kind!r}")


def _finite(step, *arrs):
    for a in arrs:
        if not np.all(np.isfinite(a)):
            raise DivergenceError(step)


# ---------------------------------------------------------------- forward passes

def _run_gd(inst: QuadraticInstance, th, tangents):
    K = th.size
    Q = inst.Q
    x = inst.x0.astype(float)
    dx = np.zeros((K, x.size))
    xs, gs, dxs, dgs = [x], [Q @ x], [dx], [dx @ Q]
    for k in range(K):
        g = gs[-1]
        x = x - th[k] * g
        _finite(k + 1, x)
        xs.append(x)
        gs.append(Q @ x)
        if tangents:
            dx = dx - th[k] * (dx @ Q)
            dx[k] -= g
            dxs.append(dx)
            dgs.append(dx @ Q)
    X, G = np.array(xs), np.array(gs)
    rec = dict(x=X, g=G)
    vals = dict(f=0.5 * np.einsum("kd,kd->k", X, G))
    if not tangents:
        return rec, vals, None
    dX = np.stack(dxs, axis=1)
    dG = np.stack(dgs, axis=1)
    drec = dict(x=dX, g=dG)
    dvals = dict(f=np.einsum("pkd,kd->pk", dX, G))
    return rec, vals, (drec, dvals)


def _canonical_l1_subgradient(x, grad, lam):
    return np.where(np.abs(x) > 0, lam * np.sign(x), np.clip(-grad, -lam, lam))


def _run_ista(inst: LassoInstance, th, tangents):
    K = th.size
    A, b, lam = inst.A, inst.b, inst.lambda_reg
    H = A.T @ A
    x = inst.x0.astype(float)
    n = x.size
    gh = A.T @ (A @ x - b)
    xs, ghs, ss = [x], [gh], [_canonical_l1_subgradient(x, gh, lam)]
    dx = np.zeros((K, n))
    dxs, dghs, dss = [dx], [dx @ H], [np.zeros((K, n))]
    for k in range(K):
        t = th[k]
        v = x - t * gh
        xn = soft_threshold(v, lam * t)
        _finite(k + 1, xn)
        s = (v - xn) / t
        if tangents:
            dv = dx - t * (dx @ H)
            dv[k] -= gh
            active = np.abs(v) > lam * t  # kinks fall to the zero branch
            dxn = np.where(active, dv, 0.0)
            dxn[k] -= np.where(active, lam * np.sign(v), 0.0)
            ds = (dv - dxn) / t
            ds[k] -= (v - xn) / t**2
            dx = dxn
            dxs.append(dx)
            dghs.append(dx @ H)
            dss.append(ds)
        x = xn
        gh = A.T @ (A @ x - b)
        xs.append(x)
        ghs.append(gh)
        ss.append(s)
    X = np.array(xs)
    R = X @ A.T - b
    rec = dict(x=X, gh=np.array(ghs), s=np.array(ss))
    vals = dict(h=0.5 * np.sum(R * R, axis=1), r=lam * np.abs(X).sum(axis=1))
    if not tangents:
        return rec, vals, None
    dX = np.stack(dxs, axis=1)
    drec = dict(x=dX, gh=np.stack(dghs, axis=1), s=np.stack(dss, axis=1))
    dvals = dict(h=np.einsum("pkd,kd->pk", dX, rec["gh"]),
                 r=np.einsum("pkd,kd->pk", dX, lam * np.sign(X)))
    return rec, vals, (drec, dvals)


def _run_pdhg(inst: TvLpInstance, th, tangents):
    th = th.reshape(-1, 3)
    K = th.shape[0]
    p = th.size
    M, MT = inst.M_stack, inst.M_stack.T.tocsr()
    c, q, lo, up = inst.c, inst.q, inst.lower, inst.upper
    ne = inst.n_eq
    x, u = inst.x0.astype(float), inst.u0.astype(float)
    n, m = x.size, u.size
    out = {k: [] for k in ("x", "u", "MTu", "xbar", "Mxbar", "sf", "sphi")}
    dout = {k: [] for k in out}
    dx, du = np.zeros((p, n)), np.zeros((p, m))
    out["x"].append(x)
    out["u"].append(u)
    dout["x"].append(dx)
    dout["u"].append(du)
    for k in range(K):
        tau, rho, sig = th[k]
        jt, jr, js = 3 * k, 3 * k + 1, 3 * k + 2
        mtu = MT @ u
        w = x + tau * (mtu - c)
        xn = np.clip(w, lo, up)
        sf = (w - xn) / tau + c
        xbar = xn + rho * (xn - x)
        mxbar = M @ xbar
        y = u + sig * (q - mxbar)
        un = y.copy()
        un[ne:] = np.maximum(un[ne:], 0.0)
        sphi = (y - un) / sig - q
        _finite(k + 1, xn, un)
        if tangents:
            dmtu = (MT @ du.T).T
            dw = dx + tau * dmtu
            dw[jt] += mtu - c
            inside = (w >= lo) & (w <= up)  # boundary counts as interior
            dxn = np.where(inside, dw, 0.0)
            dsf = (dw - dxn) / tau
            dsf[jt] -= (w - xn) / tau**2
            dxbar = (1 + rho) * dxn - rho * dx
            dxbar[jr] += xn - x
            dmx = (M @ dxbar.T).T
            dy = du - sig * dmx
            dy[js] += q - mxbar
            keep = np.ones(m, dtype=bool)
            keep[ne:] = y[ne:] >= 0
            dun = np.where(keep, dy, 0.0)
            dsphi = (dy - dun) / sig
            dsphi[js] -= (y - un) / sig**2
            dout["MTu"].append(dmtu)
            dout["xbar"].append(dxbar)
            dout["Mxbar"].append(dmx)
            dout["sf"].append(dsf)
            dout["sphi"].append(dsphi)
            dout["x"].append(dxn)
            dout["u"].append(dun)
            dx, du = dxn, dun
        out["MTu"].append(mtu)
        out["xbar"].append(xbar)
        out["Mxbar"].append(mxbar)
        out["sf"].append(sf)
        out["sphi"].append(sphi)
        out["x"].append(xn)
        out["u"].append(un)
        x, u = xn, un
    rec = {k: np.array(v) for k, v in out.items()}
    vals = dict(f=rec["x"] @ c, phi=-(rec["u"] @ q))
    if not tangents:
        return rec, vals, None
    drec = {k: np.stack(v, axis=1) for k, v in dout.items()}
    dvals = dict(f=drec["x"] @ c, phi=-(drec["u"] @ q))
    return rec, vals, (drec, dvals)


_RUNNERS = {"gd": _run_gd, "ista": _run_ista, "pdhg": _run_pdhg}


def run_algorithm(instance, schedule: StepSchedule, with_losses=True) -> Trajectory:
    """Run the family's method for ``schedule.K`` steps and record everything."""
    _check_kind(instance, schedule)
    with np.errstate(over="ignore", invalid="ignore"):  # reported as DivergenceError
        rec, vals, _ = _RUNNERS[schedule.kind](instance, schedule.theta, False)
    traj = Trajectory(instance, schedule, rec, vals, instance.reference)
    if with_losses:
        traj.reference = reference_optimum(instance)
        traj.losses = eval_loss(traj, traj.reference)
    return traj


def trajectory_jacobian(instance, schedule: StepSchedule):
    """Forward-mode derivatives of every record with respect to the flat schedule.

    Returns ``(trajectory, jacobian)``. At soft-threshold kinks the zero branch
    is used; projections onto a box or cone treat the boundary as interior.
    """
    _check_kind(instance, schedule)
    with np.errstate(over="ignore", invalid="ignore"):
        rec, vals, (drec, dvals) = _RUNNERS[schedule.kind](instance, schedule.theta, True)
    ref = reference_optimum(instance)
    traj = Trajectory(instance, schedule, rec, vals, ref)
    traj.losses = eval_loss(traj, ref)
    jac = TrajectoryJacobian(drec, dvals)
    jac.losses = loss_jacobian(traj, jac)
    return traj, jac


# ---------------------------------------------------------------- losses

def _raw_losses(traj: Trajectory, ref: Reference):
    inst = traj.instance
    if traj.kind == "gd":
        return traj.values["f"] - ref.f_star
    if traj.kind == "ista":
        return traj.values["h"] + traj.values["r"] - ref.f_star
    c, q, M = inst.c, inst.q, inst.M_stack
    xs, us = traj.records["x"], traj.records["u"]
    mtu_star = M.T @ ref.u_star
    mx_star = M @ ref.x_star
    # L(x, u*) - L(x*, u) with L(x, u) = c'x - u'(Mx - q)
    lx = xs @ (c - mtu_star) + ref.u_star @ q
    lu = float(c @ ref.x_star) - us @ (mx_star - q)
    return lx - lu


def eval_loss(traj: Trajectory, reference: Reference | None = None, floor=1e-9):
    """Per-iterate losses ``l^0..l^K``.

    Values in ``[-floor * (1 + |f*|), 0)`` are reference noise and clipped to
    zero; anything lower raises :class:`ReferenceInconsistency`.
    """
    ref = reference or traj.reference or reference_optimum(traj.instance)
    raw = np.asarray(_raw_losses(traj, ref), dtype=float)
    tol = floor * (1.0 + abs(ref.f_star))
    if np.any(raw < -tol):
        k = int(np.argmax(raw < -tol))
        raise ReferenceInconsistency(f"loss {raw[k]:.3e} at iterate {k} is below -{tol:.1e}")
    return np.maximum(raw, 0.0)


def loss_jacobian(traj: Trajectory, jac: TrajectoryJacobian):
    """``(p, K+1)`` derivatives of the per-iterate losses."""
    if traj.kind == "gd":
        return jac.values["f"]
    if traj.kind == "ista":
        return jac.values["h"] + jac.values["r"]
    inst, ref = traj.instance, traj.reference
    gx = inst.c - inst.M_stack.T @ ref.u_star
    gu = inst.M_stack @ ref.x_star - inst.q
    return jac.records["x"] @ gx + jac.records["u"] @ gu


def loss_weights(K, base=LOSS_WEIGHT_BASE):
    """``w_k = base^(K-k)`` for k = 1..K."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return base ** (K - np.arange(1, K + 1, dtype=float))


def weighted_training_loss(per_iterate_losses, K, base=LOSS_WEIGHT_BASE) -> float:
    """``sum_{k=1..K} base^(K-k) l^k``.

    Accepts either ``(l^1, ..., l^K)`` or the full ``(l^0, ..., l^K)``.
    """
    losses = np.asarray(per_iterate_losses, dtype=float)
    if losses.size == K + 1:
        losses = losses[1:]
    if losses.size != K:
        raise ValueError(f"expected {K} or {K + 1} losses, got {losses.size}")
    return float(loss_weights(K, base) @ losses)


def span_residual(traj: Trajectory):
    """Max relative least-squares residual of ``x^k - x^0`` against the recorded directions."""
    X = traj.records["x"]
    if traj.kind == "gd":
        dirs = traj.records["g"]
    elif traj.kind == "ista":
        dirs = np.vstack([traj.records["gh"], traj.records["s"][1:]])
    else:
        dirs = np.vstack([traj.records["MTu"], traj.records["sf"]])
    worst = 0.0
    for k in range(1, X.shape[0]):
        target = X[k] - X[0]
        nrm = np.linalg.norm(target)
        if nrm == 0:
            continue
        D = dirs[: (k if traj.kind == "gd" else None)].T
        coef, *_ = np.linalg.lstsq(D, target, rcond=None)
        worst = max(worst, float(np.linalg.norm(D @ coef - target) / nrm))
    return worst
