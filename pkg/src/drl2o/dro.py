"""Wasserstein distributionally robust PEP: dual and primal conic forms, risk and gradient.

Lifted samples live in ``v = (svec G, F)`` with the Euclidean norm, which is
self-dual; the dual-norm ball ``||w_i|| <= lambda`` is therefore the same
second-order-cone row as the primal transport budget.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import conic
from .conic import ProgramBuilder, SolverSettings, smat, svec, svec_dim
from .interp import assemble
from .lifting import LiftedSample, lift, lift_jacobian
from .pep import PepArrays, solve_pep
from .unroll import run_algorithm, trajectory_jacobian


class DroSolveFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class DroConfig:
    epsilon: float
    weighted: bool = False  # weighted per-iterate loss instead of the terminal loss
    form: str = "dual"

    def __post_init__(self):
        if not self.epsilon >= 0 or not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be a finite nonnegative number")
        if self.form not in ("dual", "primal"):
            raise ValueError("form must be 'dual' or 'primal'")


@dataclass(eq=False)
class DroCertificate:
    risk: float
    epsilon: float
    N: int
    empirical: float
    lipschitz: float
    status: str
    anchors: np.ndarray  # (N, nv)
    lam: float | None = None
    s: np.ndarray | None = None
    tau: np.ndarray | None = None
    y: list = field(default_factory=list)
    y_eq: list = field(default_factory=list)
    w: np.ndarray | None = None
    H: list = field(default_factory=list)
    pep_value: float | None = None
    solution: conic.ConicSolution | None = None
    program: conic.ConicProgram | None = None
    extended: bool = False
    theta: np.ndarray | None = None

    @property
    def optimal(self):
        return self.status == "optimal"

    @property
    def regularization_bound(self):
        return self.empirical + self.epsilon * self.lipschitz

    def sandwich(self, slack=0.0):
        """Lower/upper bound checks as a dict of booleans."""
        out = dict(empirical_le_risk=self.empirical <= self.risk + slack,
                   risk_le_regularized=self.risk <= self.regularization_bound + slack)
        if self.pep_value is not None:
            out["risk_le_pep"] = self.risk <= self.pep_value + slack
        return out

    def to_json(self) -> str:
        sol = self.solution
        return json.dumps(dict(
            kind="dro", risk=self.risk, epsilon=self.epsilon, N=self.N, status=self.status,
            empirical=self.empirical, pep=self.pep_value, lipschitz=self.lipschitz,
            theta=None if self.theta is None else np.asarray(self.theta).tolist(),
            lam=self.lam,
            dual_norms=None if self.w is None else dict(
                w=np.linalg.norm(self.w, axis=1).tolist(), tau=self.tau.tolist(),
                y=[float(np.linalg.norm(v)) for v in self.y]),
            residuals=None if sol is None else dict(primal=sol.r_prim, dual=sol.r_dual, gap=sol.gap),
        ))


def _anchors(samples):
    V = [s.vector if isinstance(s, LiftedSample) else np.asarray(s, float) for s in samples]
    if not V:
        raise ValueError("need at least one sample")
    layouts = {s.layout for s in samples if isinstance(s, LiftedSample)}
    if len(layouts) > 1:
        raise ValueError("samples have different layouts")
    V = np.array(V)
    return V


def _class_constraints(pb: ProgramBuilder, var: str, arr: PepArrays, tag: str):
    """Membership of the lifted vector ``var`` in the class set."""
    if arr.L_in.shape[0]:
        pb.constrain("nonneg", arr.L_in.shape[0], [(var, -arr.L_in)], name=f"lmi{tag}")
    if arr.L_eq.shape[0]:
        pb.constrain("zero", arr.L_eq.shape[0], [(var, arr.L_eq)], name=f"lmi_eq{tag}")
    pb.constrain("nonneg", 1, [(var, -arr.a0[None, :])], -arr.c0, name=f"init{tag}")
    for b, (sl, n) in enumerate(zip(arr.gram_slices(), arr.layout.sizes)):
        size = sl.stop - sl.start
        sel = sp.csr_matrix((np.ones(size), (np.arange(size), np.arange(sl.start, sl.stop))),
                            shape=(size, arr.nv))
        pb.constrain("psd", n, [(var, sel)], name=f"gram{b}{tag}")
    for r, (B, side) in enumerate(zip(arr.B, arr.sides)):
        pb.constrain("psd", side, [(var, B)], name=f"block{r}{tag}")


def build_dro_dual(samples, arr: PepArrays, epsilon: float) -> conic.ConicProgram:
    """Minimize ``lambda eps + (1/N) sum_i s'_i`` written with per-sample epigraphs.

    Per sample ``i``:
    ``s_i + c0 tau_i + <w_i, v_i> - eps lambda >= 0``,
    ``L_in' y_i + L_eq' ye_i + tau_i a0 - sum_r B_r' h_ir - a_obj - w_i`` in PSD on each
    Gram block and zero on the F coordinates, ``h_ir`` PSD, ``||w_i|| <= lambda``.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    V = _anchors(samples)
    N, nv = V.shape
    if nv != arr.nv:
        raise ValueError("sample dimension does not match the constraint layout")
    Mi, Me = arr.L_in.shape[0], arr.L_eq.shape[0]
    pb = ProgramBuilder()
    pb.var("lam", 1)
    eye = sp.identity(nv, format="csr")
    soc_w = sp.vstack([sp.csr_matrix((1, nv)), eye], format="csr")
    soc_l = sp.csr_matrix(([1.0], ([0], [0])), shape=(nv + 1, 1))
    for i in range(N):
        pb.var(f"s{i}", 1)
        pb.var(f"tau{i}", 1)
        if Mi:
            pb.var(f"y{i}", Mi)
        if Me:
            pb.var(f"ye{i}", Me)
        pb.var(f"w{i}", nv)
        for r, side in enumerate(arr.sides):
            pb.var(f"h{i}_{r}", svec_dim(side))
        pb.objective(f"s{i}", 1.0 / N)

        pb.constrain("nonneg", 1, [(f"s{i}", [[1.0]]), (f"tau{i}", [[arr.c0]]),
                                   (f"w{i}", V[i][None, :]), ("lam", [[-epsilon]])], name=f"epi{i}")
        pb.constrain("nonneg", 1, [(f"tau{i}", [[1.0]])], name=f"taupos{i}")
        if Mi:
            pb.constrain("nonneg", Mi, [(f"y{i}", sp.identity(Mi))], name=f"ypos{i}")
        for part, sl, kind, n in _coefficient_parts(arr):
            terms = []
            if Mi:
                terms.append((f"y{i}", arr.L_in[:, sl].T))
            if Me:
                terms.append((f"ye{i}", arr.L_eq[:, sl].T))
            terms.append((f"tau{i}", arr.a0[sl][:, None]))
            for r, B in enumerate(arr.B):
                terms.append((f"h{i}_{r}", -B[:, sl].T))
            terms.append((f"w{i}", -eye[sl]))
            pb.constrain(kind, n, terms, -arr.a_obj[sl], name=f"{part}{i}")
        for r, side in enumerate(arr.sides):
            pb.constrain("psd", side, [(f"h{i}_{r}", sp.identity(svec_dim(side)))], name=f"hpsd{i}_{r}")
        pb.constrain("soc", nv + 1, [("lam", soc_l), (f"w{i}", soc_w)], name=f"ball{i}")
    return pb.build()


def _coefficient_parts(arr: PepArrays):
    """``(name, slice, cone, size)`` for each Gram block and the F coordinates."""
    out = [(f"S{b}_", sl, "psd", n) for b, (sl, n) in enumerate(zip(arr.gram_slices(), arr.layout.sizes))]
    f = arr.f_slice
    if f.stop > f.start:
        out.append(("Fzero", f, "zero", f.stop - f.start))
    return out


def build_dro_primal(samples, arr: PepArrays, epsilon: float) -> conic.ConicProgram:
    """Minimize ``-(1/N) sum_i a_obj'v_i`` with ``sum_i ||v_i - anchor_i|| <= N eps``."""
    if not epsilon > 0:
        raise ValueError("the primal form needs epsilon > 0")
    V = _anchors(samples)
    N, nv = V.shape
    pb = ProgramBuilder()
    soc_v = sp.vstack([sp.csr_matrix((1, nv)), sp.identity(nv, format="csr")], format="csr")
    soc_t = sp.csr_matrix(([1.0], ([0], [0])), shape=(nv + 1, 1))
    for i in range(N):
        pb.var(f"v{i}", nv)
        pb.var(f"t{i}", 1)
        pb.objective(f"v{i}", -arr.a_obj / N)
    pb.constrain("nonneg", 1, [(f"t{i}", [[-1.0]]) for i in range(N)], N * epsilon, name="budget")
    for i in range(N):
        pb.constrain("soc", nv + 1, [(f"t{i}", soc_t), (f"v{i}", soc_v)],
                     np.concatenate([[0.0], -V[i]]), name=f"dist{i}")
        _class_constraints(pb, f"v{i}", arr, f"_{i}")
    return pb.build()


def solve_dro(samples, arr: PepArrays, config: DroConfig, settings: SolverSettings | None = None,
              pep_value=None) -> DroCertificate:
    settings = settings or SolverSettings()
    V = _anchors(samples)
    N = V.shape[0]
    losses = V @ arr.a_obj
    empirical = float(losses.mean())
    base = dict(epsilon=config.epsilon, N=N, empirical=empirical, lipschitz=arr.lipschitz,
                anchors=V, pep_value=pep_value, extended=bool(arr.B))
    if config.epsilon == 0:
        # the ambiguity set is the empirical distribution itself
        return DroCertificate(risk=empirical, status="optimal", **base)
    if config.form == "primal":
        prog = build_dro_primal(V, arr, config.epsilon)
        sol = conic.solve(prog, settings)
        return DroCertificate(risk=-sol.obj, status=sol.status, solution=sol, program=prog, **base)
    prog = build_dro_dual(V, arr, config.epsilon)
    sol = conic.solve(prog, settings)
    x = sol.x
    blk = lambda name: x[prog.var_blocks[name]] if name in prog.var_blocks else np.zeros(0)  # noqa: E731
    return DroCertificate(
        risk=float(sol.obj), status=sol.status, solution=sol, program=prog,
        lam=float(blk("lam")[0]),
        s=np.array([blk(f"s{i}")[0] for i in range(N)]),
        tau=np.array([blk(f"tau{i}")[0] for i in range(N)]),
        y=[blk(f"y{i}") for i in range(N)], y_eq=[blk(f"ye{i}") for i in range(N)],
        w=np.array([blk(f"w{i}") for i in range(N)]),
        H=[[smat(blk(f"h{i}_{r}")) for r in range(len(arr.B))] for i in range(N)],
        **base,
    )


def dro_value_gradient(cert: DroCertificate, arr: PepArrays, dV: np.ndarray) -> np.ndarray:
    """Envelope derivative of the dual-form risk.

    ``dV`` is ``(N, p, nv)``: derivatives of the lifted anchors.
    """
    if cert.epsilon == 0:
        return (dV @ arr.a_obj).mean(axis=0) + (arr.da_obj @ cert.anchors.T).mean(axis=1)
    if not cert.optimal or cert.program is None or cert.w is None:
        raise conic.GradientUnavailable(f"DRO status {cert.status}")
    prog, z = cert.program, cert.solution.z
    rb = prog.row_blocks
    grad = np.zeros(arr.p)
    for i in range(cert.N):
        z_epi = z[rb[f"epi{i}"]][0]
        grad -= z_epi * (dV[i] @ cert.w[i])
        zE = np.zeros(arr.nv)
        for part, sl, _, _ in _coefficient_parts(arr):
            zE[sl] = z[rb[f"{part}{i}"]]
        dE = -(arr.da_obj @ zE)
        if arr.L_in.shape[0]:
            dE += (arr.dL_in @ zE) @ cert.y[i]
        if arr.L_eq.shape[0]:
            dE += (arr.dL_eq @ zE) @ cert.y_eq[i]
        for r, dB in enumerate(arr.dB):
            dE -= (dB @ zE) @ svec(cert.H[i][r])
        grad -= dE
    return grad


# ---------------------------------------------------------------- end-to-end

@dataclass(eq=False)
class RiskEvaluation:
    certificate: DroCertificate
    arrays: PepArrays
    samples: list
    trajectories: list
    dV: np.ndarray | None = None


def evaluate_risk(schedule, minibatch, family, config: DroConfig, settings=None,
                  with_pep=False, with_jacobian=False) -> RiskEvaluation:
    """Run, lift and certify a minibatch at one schedule."""
    trajs, samples, dVs = [], [], []
    for inst in minibatch:
        if with_jacobian:
            tr, jac = trajectory_jacobian(inst, schedule)
            dVs.append(lift_jacobian(tr, jac).dvector)
        else:
            tr = run_algorithm(inst, schedule)
        trajs.append(tr)
        samples.append(lift(tr))
    arr = PepArrays.from_pepdata(assemble(family, schedule, weighted=config.weighted))
    pep = solve_pep(arr, settings).value if with_pep else None
    cert = solve_dro(samples, arr, config, settings, pep_value=pep)
    cert.theta = schedule.theta
    return RiskEvaluation(cert, arr, samples, trajs, np.array(dVs) if with_jacobian else None)


def dro_risk(schedule, minibatch, family, config: DroConfig, settings=None, with_pep=True) -> DroCertificate:
    return evaluate_risk(schedule, minibatch, family, config, settings, with_pep).certificate


def dro_risk_gradient(schedule, minibatch, family, config: DroConfig, settings=None):
    """``(certificate, gradient)`` of the risk in the flat schedule vector."""
    ev = evaluate_risk(schedule, minibatch, family, config, settings, with_jacobian=True)
    return ev.certificate, dro_value_gradient(ev.certificate, ev.arrays, ev.dV)
