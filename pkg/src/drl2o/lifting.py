"""Gram lifting of trajectories and its derivative.

A lifted sample stores one Gram matrix per basis block (GD and ISTA use a
single block; PDHG uses a primal block and a dual block, i.e. a block-diagonal
Gram) plus the vector ``F`` of shifted function values. Its vector form
``v = (svec G_1, ..., svec G_B, F)`` is what the conic programs consume; the
Euclidean norm of ``v`` equals ``sqrt(||G||_F^2 + ||F||^2)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .conic import svec, svec_dim
from .unroll import Trajectory, TrajectoryJacobian


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BasisLayout:
    kind: str
    K: int
    blocks: tuple  # ((block_name, (role, ...)), ...)
    f_roles: tuple

    def __post_init__(self):
        roles = [r for _, rs in self.blocks for r in rs]
        if len(set(roles)) != len(roles) or len(set(self.f_roles)) != len(self.f_roles):
            raise LayoutError("layout roles must be unique")

    @property
    def sizes(self):
        return tuple(len(rs) for _, rs in self.blocks)

    @property
    def dim(self):
        """Total Gram side (sum over blocks)."""
        return sum(self.sizes)

    @property
    def nF(self):
        return len(self.f_roles)

    @property
    def nv(self):
        return sum(svec_dim(n) for n in self.sizes) + self.nF

    def role(self, name):
        """``(block index, column index)`` of a basis role."""
        for b, (_, rs) in enumerate(self.blocks):
            if name in rs:
                return b, rs.index(name)
        raise LayoutError(f"role {name!r} not in layout")

    def f_index(self, name):
        try:
            return self.f_roles.index(name)
        except ValueError:
            raise LayoutError(f"function role {name!r} not in layout") from None

    def svec_offsets(self):
        out, o = [], 0
        for n in self.sizes:
            out.append(o)
            o += svec_dim(n)
        return out

    @property
    def f_offset(self):
        return self.nv - self.nF

    def to_dict(self):
        return dict(kind=self.kind, K=self.K, blocks=[[b, list(r)] for b, r in self.blocks],
                    f_roles=list(self.f_roles))


def layout_for(kind: str, K: int) -> BasisLayout:
    ks = range(K + 1)
    if kind == "gd":
        return BasisLayout(kind, K, (("main", ("x0",) + tuple(f"g{k}" for k in ks)),),
                           tuple(f"f{k}" for k in ks))
    if kind == "ista":
        roles = ("x0",) + tuple(f"gh{k}" for k in ks) + tuple(f"s{k}" for k in range(1, K + 1))
        f_roles = tuple(f"h{k}" for k in ks) + tuple(f"r{k}" for k in range(1, K + 1))
        return BasisLayout(kind, K, (("main", roles),), f_roles)
    if kind == "pdhg":
        primal = ("x0",) + tuple(f"MTu{k}" for k in range(K)) + tuple(f"sf{k}" for k in range(1, K + 1))
        dual = ("u0",) + tuple(f"Mxbar{k}" for k in range(1, K + 1)) + tuple(f"sphi{k}" for k in range(1, K + 1))
        f_roles = tuple(f"f{k}" for k in range(1, K + 1)) + tuple(f"phi{k}" for k in range(1, K + 1))
        return BasisLayout(kind, K, (("primal", primal), ("dual", dual)), f_roles)
    raise LayoutError(f"unknown kind {kind!r}")


@dataclass(frozen=True, eq=False)
class LiftedSample:
    grams: tuple
    F: np.ndarray
    layout: BasisLayout

    @property
    def G(self) -> np.ndarray:
        """Block-diagonal Gram over all basis roles."""
        n = self.layout.dim
        out = np.zeros((n, n))
        o = 0
        for g in self.grams:
            out[o:o + g.shape[0], o:o + g.shape[0]] = g
            o += g.shape[0]
        return out

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([svec(g) for g in self.grams] + [self.F])

    def inner(self, a, b) -> float:
        """``<column a, column b>`` read back from the Gram (0 across blocks)."""
        ba, ia = self.layout.role(a)
        bb, ib = self.layout.role(b)
        return float(self.grams[ba][ia, ib]) if ba == bb else 0.0


@dataclass(frozen=True, eq=False)
class LiftedJacobian:
    dgrams: tuple  # per block, (p, n_b, n_b)
    dF: np.ndarray  # (p, nF)
    layout: BasisLayout

    @property
    def dG(self):
        p = self.dF.shape[0]
        n = self.layout.dim
        out = np.zeros((p, n, n))
        o = 0
        for g in self.dgrams:
            s = g.shape[1]
            out[:, o:o + s, o:o + s] = g
            o += s
        return out

    @property
    def dvector(self) -> np.ndarray:
        return np.concatenate([svec(g) for g in self.dgrams] + [self.dF], axis=1)


def _columns(traj: Trajectory, jac: TrajectoryJacobian | None):
    """Per-block ``P`` (dim, n_b) with optional ``dP`` (p, dim, n_b), plus ``F``/``dF``."""
    rec, ref, inst = traj.records, traj.reference, traj.instance
    kind = traj.kind
    dr = jac.records if jac is not None else None

    def stack(cols, dcols):
        P = np.column_stack(cols)
        dP = np.stack(dcols, axis=2) if jac is not None else None
        return P, dP

    def zeros_like_tangent(v):
        return np.zeros((jac.records["x"].shape[0], v.size)) if jac is not None else None

    if kind == "gd":
        x0 = rec["x"][0] - ref.x_star
        cols = [x0] + list(rec["g"])
        dcols = ([zeros_like_tangent(x0)] + [dr["g"][:, k] for k in range(traj.K + 1)]) if jac else None
        F = traj.values["f"] - ref.f_star
        dF = jac.values["f"] if jac else None
        return [stack(cols, dcols)], F, dF

    if kind == "ista":
        xs = ref.x_star
        gstar = inst.smooth_grad(xs)
        hstar, rstar = inst.smooth_value(xs), inst.l1_value(xs)
        x0 = rec["x"][0] - xs
        cols = [x0] + [g - gstar for g in rec["gh"]] + [s + gstar for s in rec["s"][1:]]
        dcols = None
        if jac:
            dcols = ([zeros_like_tangent(x0)] + [dr["gh"][:, k] for k in range(traj.K + 1)]
                     + [dr["s"][:, k] for k in range(1, traj.K + 1)])
        dx_star = rec["x"] - xs
        h_t = traj.values["h"] - hstar - dx_star @ gstar
        r_t = traj.values["r"][1:] - rstar + dx_star[1:] @ gstar
        F = np.concatenate([h_t, r_t])
        dF = None
        if jac:
            dxg = dr["x"] @ gstar
            dF = np.concatenate([jac.values["h"] - dxg, jac.values["r"][:, 1:] + dxg[:, 1:]], axis=1)
        return [stack(cols, dcols)], F, dF

    if kind == "pdhg":
        M = inst.M_stack
        xs, us = ref.x_star, ref.u_star
        mtu_s, mx_s = M.T @ us, M @ xs
        pc = [rec["x"][0] - xs] + [v - mtu_s for v in rec["MTu"]] + [v - mtu_s for v in rec["sf"]]
        dc = [rec["u"][0] - us] + [v - mx_s for v in rec["Mxbar"]] + [v + mx_s for v in rec["sphi"]]
        dpc = ddc = None
        if jac:
            K = traj.K
            dpc = ([zeros_like_tangent(pc[0])] + [dr["MTu"][:, k] for k in range(K)]
                   + [dr["sf"][:, k] for k in range(K)])
            ddc = ([zeros_like_tangent(dc[0])] + [dr["Mxbar"][:, k] for k in range(K)]
                   + [dr["sphi"][:, k] for k in range(K)])
        X, U = rec["x"][1:], rec["u"][1:]
        f_t = X @ (inst.c - mtu_s) - float(inst.c @ xs) + float(mtu_s @ xs)
        phi_t = -(U @ inst.q) + float(inst.q @ us) + (U - us) @ mx_s
        F = np.concatenate([f_t, phi_t])
        dF = None
        if jac:
            dF = np.concatenate([dr["x"][:, 1:] @ (inst.c - mtu_s),
                                 dr["u"][:, 1:] @ (mx_s - inst.q)], axis=1)
        return [stack(pc, dpc), stack(dc, ddc)], F, dF

    raise LayoutError(f"unknown trajectory kind {kind!r}")


def lift(traj: Trajectory) -> LiftedSample:
    if traj.reference is None:
        raise LayoutError("trajectory has no reference optimum")
    layout = layout_for(traj.kind, traj.K)
    blocks, F, _ = _columns(traj, None)
    grams = []
    for (P, _), n in zip(blocks, layout.sizes):
        if P.shape[1] != n:
            raise LayoutError(f"expected {n} columns, trajectory produced {P.shape[1]}")
        G = P.T @ P
        grams.append(0.5 * (G + G.T))
    if F.size != layout.nF:
        raise LayoutError("function-value count does not match layout")
    return LiftedSample(tuple(grams), F, layout)


def lift_jacobian(traj: Trajectory, jac: TrajectoryJacobian) -> LiftedJacobian:
    layout = layout_for(traj.kind, traj.K)
    blocks, _, dF = _columns(traj, jac)
    dgrams = []
    for P, dP in blocks:
        if dP.shape[1:] != P.shape:
            raise LayoutError("trajectory Jacobian does not match the trajectory")
        t = np.einsum("pdi,dj->pij", dP, P)
        dgrams.append(t + t.transpose(0, 2, 1))
    return LiftedJacobian(tuple(dgrams), dF, layout)


def lifted_norm(a: LiftedSample, b: LiftedSample) -> float:
    if a.layout != b.layout:
        raise LayoutError("samples have different layouts")
    return float(np.linalg.norm(a.vector - b.vector))


def basis_columns(traj: Trajectory):
    """Raw basis columns per block (for audits)."""
    blocks, _, _ = _columns(traj, None)
    return [P for P, _ in blocks]
