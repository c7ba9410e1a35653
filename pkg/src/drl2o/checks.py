"""Invariant suite shared by the ``check`` command and the test-suite."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import instances as inst_mod
from .conic import SolverSettings
from .dro import DroConfig, dro_risk, dro_risk_gradient
from .families import GdFamily, family_from_dataset
from .interp import assemble
from .lifting import lift
from .pep import PepArrays, pep_value
from .unroll import StepSchedule, run_algorithm


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def tiny_dataset(family: str, seed=0, count=6):
    """Small in-class datasets for smoke checks."""
    sizes = {"train": count, "val": 2, "test": 2}
    if family == "quadratic":
        return inst_mod.sample_quadratic_dataset(5, 1.0, 10.0, 1.0, sizes, seed)
    if family == "lasso":
        return inst_mod.sample_lasso_dataset(4, 6, 0.1, 1.0, 0.1, 0.5, sizes, seed, presolve_count=50)
    if family == "tv":
        imgs = inst_mod.synthetic_images(count + 4, (4, 4), seed)
        return inst_mod.sample_tv_dataset(imgs, sizes, seed)
    raise ValueError(f"unknown family {family!r}")


def quadratic_oracle(theta, mu, L, R, grid=20001):
    """``R^2/2 * max over lambda in [mu, L] of lambda * prod_k (1 - theta_k lambda)^2``.

    Evaluated on a dense grid refined around the best grid point.
    """
    theta = np.asarray(theta, dtype=float)

    def h(lam):
        lam = np.asarray(lam, dtype=float)
        return lam * np.prod((1.0 - np.outer(lam, theta)) ** 2, axis=1)

    lam = np.linspace(mu, L, grid)
    vals = h(lam)
    i = int(np.argmax(vals))
    lo, hi = lam[max(i - 1, 0)], lam[min(i + 1, grid - 1)]
    fine = np.linspace(lo, hi, grid)
    return 0.5 * R**2 * max(float(vals.max()), float(h(fine).max()))


def run_checks(family_name: str, quick=True, seed=0, settings=None) -> list[CheckResult]:
    settings = settings or SolverSettings.tight(1e-8)
    slack = settings.slack
    out = []
    ds = tiny_dataset(family_name, seed)
    fam = family_from_dataset(ds)
    K = 2
    sched = fam.initial_schedule(K)
    batch = ds.train[: 3 if quick else 6]

    if family_name == "quadratic":
        g = GdFamily(1.0, 10.0, 1.0)
        val = pep_value(g, StepSchedule("gd", [2 / 11]), settings).value
        ref = quadratic_oracle([2 / 11], 1.0, 10.0, 1.0)
        out.append(CheckResult("pep-oracle", abs(val - ref) <= 1e-4 * abs(ref),
                               f"pep {val:.7f} vs oracle {ref:.7f}"))

    arr = PepArrays.from_pepdata(assemble(fam, sched))
    worst = min(arr.feasibility_slack(lift(run_algorithm(x, sched)).vector) for x in ds.train)
    out.append(CheckResult("interpolation-soundness", worst >= -1e-7, f"min slack {worst:.2e}"))

    eps = (0.0, 0.1, 1.0) if quick else (0.0, 1e-2, 0.1, 1.0, 10.0)
    risks, certs = [], []
    for e in eps:
        c = dro_risk(sched, batch, fam, DroConfig(e), settings, with_pep=True)
        certs.append(c)
        risks.append(c.risk)
    mono = all(b >= a - 1e-6 - slack for a, b in zip(risks, risks[1:]))
    out.append(CheckResult("epsilon-monotone", mono, " <= ".join(f"{r:.6g}" for r in risks)))
    sand = all(all(c.sandwich(1e-6 + slack * max(1.0, abs(c.risk))).values()) for c in certs)
    out.append(CheckResult("sandwich", sand, f"{len(certs)} certificates"))

    cfgP = DroConfig(0.1, form="primal")
    p = dro_risk(sched, batch, fam, cfgP, settings, with_pep=False).risk
    d = certs[1].risk
    rel = abs(p - d) / max(1.0, abs(d))
    out.append(CheckResult("strong-duality", rel <= 1e-5, f"primal {p:.8g} dual {d:.8g}"))

    if not quick or family_name == "quadratic":
        cfg = DroConfig(0.1)
        _, grad = dro_risk_gradient(sched, batch, fam, cfg, settings)
        h = 1e-5
        rng = np.random.default_rng(seed)
        direction = rng.standard_normal(sched.size)
        direction /= np.linalg.norm(direction)
        th = sched.theta
        up = dro_risk(sched.with_theta(th + h * direction), batch, fam, cfg, settings, False).risk
        dn = dro_risk(sched.with_theta(th - h * direction), batch, fam, cfg, settings, False).risk
        fd, an = (up - dn) / (2 * h), float(grad @ direction)
        ok = abs(fd - an) <= 1e-3 * max(abs(fd), 1e-8) + 1e-6
        out.append(CheckResult("gradient-fd", ok, f"analytic {an:.6g} vs fd {fd:.6g}"))
    return out
