"""Worst-case performance estimation as a conic program, with its design gradient."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .conic import ProgramBuilder, SolverSettings, smat, svec, svec_dim, _svec_idx
from .interp import PepData, assemble


class PepUnbounded(RuntimeError):
    """The worst case is unbounded: the class or initial condition is misconfigured."""


class PepSolveFailed(RuntimeError):
    pass


@dataclass(eq=False)
class PepArrays:
    """Dense constraint data in lifted coordinates, split by cone, with derivatives."""

    layout: object
    L_in: np.ndarray  # (Mi, nv), rows <= 0
    dL_in: np.ndarray  # (p, Mi, nv)
    L_eq: np.ndarray
    dL_eq: np.ndarray
    B: list  # per PSD block: (svec_dim(r), nv)
    dB: list  # per PSD block: (p, svec_dim(r), nv)
    sides: list
    a_obj: np.ndarray
    da_obj: np.ndarray
    a0: np.ndarray
    c0: float

    @property
    def nv(self):
        return self.a_obj.size

    @property
    def p(self):
        return self.da_obj.shape[0]

    @property
    def lipschitz(self):
        return float(np.linalg.norm(self.a_obj))

    def gram_slices(self):
        offs = self.layout.svec_offsets()
        return [slice(o, o + svec_dim(n)) for o, n in zip(offs, self.layout.sizes)]

    @property
    def f_slice(self):
        return slice(self.layout.f_offset, self.nv)

    @classmethod
    def from_pepdata(cls, data: PepData) -> "PepArrays":
        ineq, eq = data.lmis.split()
        rows, jac = data.lmis.rows, data.lmis.jac
        B, dB, sides = [], [], []
        for blk in data.blocks:
            i, j, s = _svec_idx(blk.side)
            B.append(blk.C[i, j, :] * s[:, None])
            dB.append(blk.dC[:, i, j, :] * s[None, :, None])
            sides.append(blk.side)
        ob = data.objective
        return cls(data.layout, rows[ineq], jac[:, ineq], rows[eq], jac[:, eq], B, dB, sides,
                   ob.a_obj, ob.da_obj, ob.a0, ob.c0)

    def feasibility_slack(self, v):
        """Smallest slack across all constraint groups on lifted vector ``v``."""
        slacks = [np.inf]
        if self.L_in.size:
            slacks.append(float(np.min(-self.L_in @ v)))
        if self.L_eq.size:
            slacks.append(float(-np.max(np.abs(self.L_eq @ v))))
        for sl in self.gram_slices():
            slacks.append(float(np.linalg.eigvalsh(smat(v[sl]))[0]))
        for B in self.B:
            slacks.append(float(np.linalg.eigvalsh(smat(B @ v))[0]))
        return min(slacks)


@dataclass(eq=False)
class PepCertificate:
    value: float
    y: np.ndarray  # inequality multipliers (>= 0)
    y_eq: np.ndarray  # equality multipliers (free)
    tau: float
    S: list  # per Gram block
    H: list  # per PSD interpolation block
    v: np.ndarray  # worst-case lifted point
    theta: np.ndarray
    status: str
    solution: conic.ConicSolution
    program: conic.ConicProgram
    settings: SolverSettings
    timestamp: float = field(default_factory=time.time)

    @property
    def optimal(self):
        return self.status == "optimal"

    def to_json(self) -> str:
        return json.dumps(dict(
            kind="pep", theta=self.theta.tolist(), value=self.value, status=self.status,
            tau=self.tau, y=self.y.tolist(), y_eq=self.y_eq.tolist(),
            S=[s.tolist() for s in self.S], H=[h.tolist() for h in self.H],
            settings=self.settings.as_dict(),
            residuals=dict(primal=self.solution.r_prim, dual=self.solution.r_dual,
                           gap=self.solution.gap),
            timestamp=self.timestamp,
        ))


def build_pep_program(arr: PepArrays) -> conic.ConicProgram:
    """``min -a_obj'v`` over the lifted class (the negated worst case)."""
    pb = ProgramBuilder()
    pb.var("v", arr.nv)
    pb.objective("v", -arr.a_obj)
    if arr.L_in.shape[0]:
        pb.constrain("nonneg", arr.L_in.shape[0], [("v", -arr.L_in)], name="lmi")
    if arr.L_eq.shape[0]:
        pb.constrain("zero", arr.L_eq.shape[0], [("v", arr.L_eq)], name="lmi_eq")
    pb.constrain("nonneg", 1, [("v", -arr.a0[None, :])], -arr.c0, name="init")
    for b, (sl, n) in enumerate(zip(arr.gram_slices(), arr.layout.sizes)):
        sel = sp.csr_matrix((np.ones(sl.stop - sl.start), (np.arange(sl.stop - sl.start),
                             np.arange(sl.start, sl.stop))), shape=(sl.stop - sl.start, arr.nv))
        pb.constrain("psd", n, [("v", sel)], name=f"gram{b}")
    for r, (B, side) in enumerate(zip(arr.B, arr.sides)):
        pb.constrain("psd", side, [("v", B)], name=f"block{r}")
    return pb.build()


def _as_data(lmis_or_data, blocks=None, objective=None):
    if isinstance(lmis_or_data, PepArrays):
        return lmis_or_data, None
    if isinstance(lmis_or_data, PepData):
        return PepArrays.from_pepdata(lmis_or_data), lmis_or_data.schedule.theta
    raise TypeError("expected PepData or PepArrays")


def solve_pep(data, settings: SolverSettings | None = None) -> PepCertificate:
    """Maximize the lifted loss over the class at one schedule."""
    settings = settings or SolverSettings()
    arr, theta = _as_data(data)
    prog = build_pep_program(arr)
    sol = conic.solve(prog, settings)
    if sol.status == "unbounded":
        raise PepUnbounded("worst-case problem is unbounded; check the class and initial bound")
    z = sol.z
    rb = prog.row_blocks
    get = lambda name: z[rb[name]] if name in rb else np.zeros(0)  # noqa: E731
    S = [smat(get(f"gram{b}")) for b in range(len(arr.layout.sizes))]
    H = [smat(get(f"block{r}")) for r in range(len(arr.B))]
    return PepCertificate(
        value=-sol.obj, y=get("lmi"), y_eq=get("lmi_eq"), tau=float(get("init")[0]),
        S=S, H=H, v=sol.x[prog.var_blocks["v"]],
        theta=np.zeros(arr.p) if theta is None else np.asarray(theta),
        status=sol.status, solution=sol, program=prog, settings=settings,
    )


def pep_value_gradient(cert: PepCertificate, arr: PepArrays) -> np.ndarray:
    """Envelope derivative of the worst-case value in each schedule entry."""
    if not cert.optimal:
        raise conic.GradientUnavailable(f"PEP status {cert.status}")
    v = cert.v
    g = arr.da_obj @ v
    if arr.L_in.shape[0]:
        g -= (arr.dL_in @ v) @ cert.y
    if arr.L_eq.shape[0]:
        g += (arr.dL_eq @ v) @ cert.y_eq
    for dB, z in zip(arr.dB, cert.H):
        g += (dB @ v) @ svec(z)
    return g


def dual_residual(cert: PepCertificate, arr: PepArrays):
    """``(min eigenvalue of the implied S, max |F-part|)`` from the dual multipliers."""
    vec = arr.L_in.T @ cert.y - arr.L_eq.T @ cert.y_eq + cert.tau * arr.a0 - arr.a_obj
    for B, H in zip(arr.B, cert.H):
        vec = vec - B.T @ svec(H)
    mins = [np.linalg.eigvalsh(smat(vec[sl]))[0] for sl in arr.gram_slices()]
    return float(min(mins)), float(np.max(np.abs(vec[arr.f_slice]), initial=0.0))


def pep_value(family, schedule, settings=None, weighted=False) -> PepCertificate:
    return solve_pep(assemble(family, schedule, weighted=weighted), settings)


def worst_case_gradient(theta, family, settings=None, weighted=False, schedule=None):
    """``(certificate, gradient)`` of the worst-case value at ``theta``."""
    base = schedule or family.initial_schedule(_K_from(theta, family))
    sched = base.with_theta(theta)
    data = assemble(family, sched, weighted=weighted)
    arr = PepArrays.from_pepdata(data)
    cert = solve_pep(data, settings)
    return cert, pep_value_gradient(cert, arr)


def _K_from(theta, family):
    n = np.asarray(theta).size
    return n // 3 if family.kind == "pdhg" else n
