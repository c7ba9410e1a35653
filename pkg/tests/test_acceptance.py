"""Acceptance suite: one PASS/FAIL line per criterion (run with ``-s`` to see them inline).

Standalone: ``python3 tests/test_acceptance.py``.
"""
import sys
import time

import numpy as np
import pytest

from conftest import record
from drl2o import instances as I
from drl2o.conic import SolverSettings
from drl2o.dro import DroConfig, dro_risk, dro_risk_gradient
from drl2o.evaluate import fraction_solved, quantiles
from drl2o.families import GdFamily, family_from_dataset
from drl2o.interp import assemble
from drl2o.lifting import lift
from drl2o.pep import PepArrays, pep_value
from drl2o.train import TrainConfig, empirical_risk, lr_at, train_dr_l2o, train_l2o, train_opt_pep
from drl2o.unroll import StepSchedule, run_algorithm, trajectory_jacobian, weighted_training_loss

SETTINGS = SolverSettings.tight(1e-9)
SLACK = SETTINGS.slack
CERTIFICATES = []  # every DRO certificate produced here, audited by criterion 4


def oracle(theta, mu, L, R):
    """(R^2/2) max over lambda in [mu, L] of lambda prod (1 - theta_k lambda)^2: grid then bounded refine."""
    from scipy.optimize import minimize_scalar
    theta = np.asarray(theta, float)
    h = lambda lam: lam * np.prod((1 - theta * lam) ** 2)  # noqa: E731
    grid = np.linspace(mu, L, 20001)
    vals = np.array([h(x) for x in grid])
    i = int(np.argmax(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    best = vals[i]
    if hi > lo:
        r = minimize_scalar(lambda x: -h(x), bounds=(lo, hi), method="bounded", options={"xatol": 1e-14})
        best = max(best, -r.fun)
    return 0.5 * R**2 * best


def _cert(sched, batch, fam, eps, form="dual", weighted=False, with_pep=True):
    c = dro_risk(sched, batch, fam, DroConfig(eps, weighted=weighted, form=form), SETTINGS, with_pep=with_pep)
    if form == "dual":
        CERTIFICATES.append((c, sched, fam, weighted))
    return c


@pytest.fixture(scope="module")
def quad():
    return I.sample_quadratic_dataset(5, 1.0, 10.0, 1.0, {"train": 30}, seed=101)


@pytest.fixture(scope="module")
def lasso():
    return I.sample_lasso_dataset(5, 8, 0.2, 1.0, 0.05, 0.5, {"train": 30}, seed=102, presolve_count=200)


def test_criterion_1_pep_oracle():
    t0 = time.perf_counter()
    fam = GdFamily(1.0, 10.0, 1.0)
    rng = np.random.default_rng(1)
    cases = [np.array([2 / 11])] + [rng.uniform(0.01, 0.3, 1 + i % 3) for i in range(19)]
    worst, anchored = 0.0, None
    for th in cases:
        val = pep_value(fam, StepSchedule("gd", th), SETTINGS).value
        ref = oracle(th, 1.0, 10.0, 1.0)
        worst = max(worst, abs(val - ref) / abs(ref))
        anchored = val if anchored is None else anchored
    dt = time.perf_counter() - t0
    ok = worst <= 1e-4 and abs(anchored - 3.3471) <= 1e-4 and dt < 60
    record(1, ok, f"20 schedules, max rel err {worst:.2e}; theta=2/11 -> {anchored:.6f}; {dt:.1f}s")
    assert ok


def test_criterion_2_strong_duality(quad, lasso):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(20):
        ds = quad if i % 2 == 0 else lasso
        fam = family_from_dataset(ds)
        K, N, eps = 1 + i % 3, 1 + (i // 2) % 3, (0.1, 1.0)[(i // 3) % 2]
        base = fam.initial_schedule(K)
        sched = base.with_theta(base.theta * rng.uniform(0.5, 1.5, base.size))
        batch = [ds.train[j] for j in rng.choice(len(ds.train), N, replace=False)]
        d = _cert(sched, batch, fam, eps)
        p = _cert(sched, batch, fam, eps, form="primal", with_pep=False)
        assert d.optimal and p.optimal
        worst = max(worst, abs(p.risk - d.risk) / max(1.0, abs(d.risk)))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 120
    record(2, ok, f"20 cases, max relative primal-dual gap {worst:.2e}; {dt:.1f}s")
    assert ok


def test_criterion_3_epsilon_interpolation(quad, lasso):
    t0 = time.perf_counter()
    grid = (1e-6, 1e-2, 1e-1, 1.0, 10.0, 1e6)
    details, ok = [], True
    for name, ds in (("quadratic", quad), ("lasso", lasso)):
        fam = family_from_dataset(ds)
        sched = fam.initial_schedule(2)
        batch = ds.train[:5]
        certs = [_cert(sched, batch, fam, e) for e in grid]
        risks = [c.risk for c in certs]
        mono = all(b >= a - 1e-6 - SLACK * max(1.0, abs(a)) for a, b in zip(risks, risks[1:]))
        emp = np.mean([run_algorithm(x, sched).losses[-1] for x in batch])
        low = abs(risks[0] - emp) / abs(emp)
        high = abs(risks[-1] - certs[-1].pep_value) / abs(certs[-1].pep_value)
        ok &= mono and low <= 1e-4 and high <= 1e-3
        details.append(f"{name}: monotone={mono} low-end rel {low:.1e} high-end rel {high:.1e}")
    dt = time.perf_counter() - t0
    ok &= dt < 120
    record(3, ok, "; ".join(details) + f"; {dt:.1f}s")
    assert ok


def _pattern(inst, sched):
    tr = run_algorithm(inst, sched)
    return (tr.x != 0).tobytes() if tr.kind == "ista" else b""


def test_criterion_5_gradients(quad, lasso):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    h = 1e-5
    worst, skipped = {}, 0
    for name, ds in (("quadratic", quad), ("lasso", lasso)):
        fam = family_from_dataset(ds)
        worst[name] = 0.0
        done = 0
        while done < 20:
            K = 1 + done % 3
            base = fam.initial_schedule(K)
            sched = base.with_theta(base.theta * rng.uniform(0.6, 1.4, base.size))
            batch = [ds.train[j] for j in rng.choice(len(ds.train), 3, replace=False)]
            eps = (0.1, 1.0)[done % 2]
            cfg = DroConfig(eps, weighted=bool(done % 3 == 0))
            # the risk is only differentiable away from soft-threshold support changes
            steps = [sched.with_theta(sched.theta + s * h * e) for e in np.eye(sched.size) for s in (-1, 1)]
            if any(len({_pattern(x, s) for s in [sched] + steps}) > 1 for x in batch):
                skipped += 1
                continue
            cert, grad = dro_risk_gradient(sched, batch, fam, cfg, SETTINGS)
            CERTIFICATES.append((cert, sched, fam, cfg.weighted))
            fd = np.zeros(sched.size)
            for j in range(sched.size):
                e = np.zeros(sched.size)
                e[j] = h
                up = dro_risk(sched.with_theta(sched.theta + e), batch, fam, cfg, SETTINGS, False).risk
                dn = dro_risk(sched.with_theta(sched.theta - e), batch, fam, cfg, SETTINGS, False).risk
                fd[j] = (up - dn) / (2 * h)
            worst[name] = max(worst[name], np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-8))
            done += 1
    # trajectory and LMI Jacobians against central differences
    jac_err = 0.0
    for ds in (quad, lasso):
        fam = family_from_dataset(ds)
        for i in range(5):
            base = fam.initial_schedule(3)
            sched = base.with_theta(base.theta * rng.uniform(0.6, 1.4, base.size))
            inst = ds.train[i]
            tr, jac = trajectory_jacobian(inst, sched)
            data = assemble(fam, sched)
            for j in range(sched.size):
                e = np.zeros(sched.size)
                e[j] = 1e-6
                up, dn = sched.with_theta(sched.theta + e), sched.with_theta(sched.theta - e)
                if not (_pattern(inst, up) == _pattern(inst, dn) == _pattern(inst, sched)):
                    continue
                fd_x = (run_algorithm(inst, up).x - run_algorithm(inst, dn).x) / 2e-6
                jac_err = max(jac_err, np.abs(jac.records["x"][j] - fd_x).max() / max(1.0, np.abs(fd_x).max()))
                fd_l = (assemble(fam, up).lmis.rows - assemble(fam, dn).lmis.rows) / 2e-6
                jac_err = max(jac_err, np.abs(data.lmis.jac[j] - fd_l).max() / max(1.0, np.abs(fd_l).max()))
    dt = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-3 and jac_err <= 1e-4 and dt < 600
    record(5, ok, f"risk-gradient rel err quadratic {worst['quadratic']:.1e}, lasso {worst['lasso']:.1e} "
                  f"({skipped} kink draws redrawn); Jacobian rel err {jac_err:.1e}; {dt:.1f}s")
    assert ok


@pytest.fixture(scope="module")
def desk():
    t0 = time.perf_counter()
    ds = I.sample_quadratic_dataset(20, 1.0, 10.0, 10.0, {"train": 100, "val": 50, "test": 50}, seed=0)
    fam = family_from_dataset(ds)
    cfg = TrainConfig(total_iterations=200, batch_size=10, lr_max=1e-2, epsilon=10.0)
    out = dict(ds=ds, fam=fam, cfg=cfg, K=5)
    out["dr"] = train_dr_l2o(ds, fam, 5, cfg)
    out["l2o"] = train_l2o(ds, fam, 5, cfg)
    out["pep"] = train_opt_pep(fam, 5, cfg)
    out["time"] = time.perf_counter() - t0
    return out


def test_criterion_6_training(desk):
    t0 = time.perf_counter()
    ds, fam, cfg = desk["ds"], desk["fam"], desk["cfg"]
    eps = cfg.epsilon
    init = desk["dr"].initial_schedule
    th_dr, th_l2o, th_pep = desk["dr"].schedule, desk["l2o"].schedule, desk["pep"].schedule
    r_init = _cert(init, ds.train, fam, eps, weighted=True, with_pep=False).risk
    r_dr = _cert(th_dr, ds.train, fam, eps, weighted=True, with_pep=False).risk
    r_l2o = _cert(th_l2o, ds.train, fam, eps, weighted=True, with_pep=False).risk
    e_dr, e_l2o = empirical_risk(th_dr, ds.train), empirical_risk(th_l2o, ds.train)
    a = r_dr < r_init
    b = e_l2o <= e_dr + 1e-6 and r_dr <= r_l2o + 1e-6
    cert = pep_value(fam, th_pep, SETTINGS).value
    test_losses = [run_algorithm(x, th_pep).losses[-1] for x in ds.test]
    c = max(test_losses) <= cert + 1e-6
    dt = desk["time"] + time.perf_counter() - t0
    ok = a and b and c and dt < 1800
    record(6, ok, f"(a) R_eps {r_init:.4f} -> {r_dr:.4f}; (b) empirical L2O {e_l2o:.4f} <= DR {e_dr:.4f}, "
                  f"R_eps DR {r_dr:.4f} <= L2O {r_l2o:.4f}; (c) max test loss {max(test_losses):.4f} "
                  f"<= PEP {cert:.4f}; eps={eps:g}; {dt:.0f}s")
    assert ok


def _random_theta(fam, K, rng):
    base = fam.initial_schedule(K)
    return base.with_theta(base.theta * rng.uniform(0.3, 1.8, base.size))


def test_criterion_7_interpolation_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    sets = {
        "quadratic": I.sample_quadratic_dataset(6, 1.0, 10.0, 1.0, {"train": 40}, seed=71),
        "lasso": I.sample_lasso_dataset(6, 9, 0.2, 1.0, 0.05, 0.5, {"train": 40}, seed=72, presolve_count=50),
        "tv": I.sample_tv_dataset(I.synthetic_images(40, (4, 4), seed=73), {"train": 40}, seed=73),
    }
    worst = {}
    for name, ds in sets.items():
        fam = family_from_dataset(ds)
        worst[name] = np.inf
        for t in range(200):
            sched = _random_theta(fam, 1 + t % 4, rng)
            arr = PepArrays.from_pepdata(assemble(fam, sched))
            v = lift(run_algorithm(ds.train[t % 40], sched)).vector
            worst[name] = min(worst[name], arr.feasibility_slack(v))
    tiny = np.inf
    for shape in ((2, 3), (3, 3), (5, 4), (6, 6), (8, 8)):
        ds = I.sample_tv_dataset(I.synthetic_images(4, shape, seed=shape[0] * 10 + shape[1]), {"train": 4},
                                 seed=shape[0])
        fam = family_from_dataset(ds)
        for inst in ds.train:
            sched = _random_theta(fam, 3, rng)
            data = assemble(fam, sched)
            v = lift(run_algorithm(inst, sched)).vector
            for blk in data.blocks:
                tiny = min(tiny, float(np.linalg.eigvalsh(blk.evaluate(v))[0]))
            tiny = min(tiny, PepArrays.from_pepdata(data).feasibility_slack(v))
    dt = time.perf_counter() - t0
    ok = min(worst.values()) >= -1e-7 and tiny >= -1e-7 and dt < 300
    record(7, ok, "min slack " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
           + f"; 20 tiny TV operator-block instances min slack {tiny:.1e}; {dt:.1f}s")
    assert ok


def test_criterion_8_metric_plumbing():
    cfg = TrainConfig(total_iterations=1000, lr_max=1e-3)
    checks = {
        "fraction (0.05,0.5) eta=0.1": fraction_solved([0.05, 0.5], [1.0, 1.0], 0.1) == 0.5,
        "fraction all zero": fraction_solved([0.0, 0.0], [0.0, 2.0], 0.01) == 1.0,
        "fraction f*=0 threshold eta": fraction_solved([0.1, 0.1000001], [0.0, 0.0], 0.1) == 0.5,
        "quantile median 1..10": quantiles(np.arange(1, 11), [0.5])[0] == 5.5,
        "quantile ends": list(quantiles([4.0, -2.0, 9.0], [0.0, 1.0])) == [-2.0, 9.0],
        "quantile constant": bool(np.all(quantiles(np.full(5, 3.5), [0.0, 0.1, 0.9, 1.0]) == 3.5)),
        "weighted (1,1,1)": abs(weighted_training_loss([1, 1, 1], 3) - 2.71) <= 4e-16,
        "weighted K=1": weighted_training_loss([0.42], 1) == 0.42,
        "weighted zeros": weighted_training_loss([0.0] * 4, 4) == 0.0,
        "lr at 0.1T": lr_at(100, cfg) == 1e-3,
        "lr at T-1": abs(lr_at(999, cfg)) <= 1e-8,
        "lr at 0": lr_at(0, cfg) == 0.0,
    }
    bad = [k for k, v in checks.items() if not v]
    record(8, not bad, f"{len(checks) - len(bad)}/{len(checks)} examples reproduced" + (f"; failing {bad}" if bad else ""))
    assert not bad


def test_criterion_4_sandwich():
    # runs last in file order, after every certificate above has been produced
    assert CERTIFICATES, "no certificates collected"
    worst = dict(lower=np.inf, upper=np.inf, reg=np.inf)
    for cert, sched, fam, weighted in CERTIFICATES:
        pep = cert.pep_value
        if pep is None:
            pep = pep_value(fam, sched, SETTINGS, weighted=weighted).value
        worst["lower"] = min(worst["lower"], cert.risk - cert.empirical)
        worst["upper"] = min(worst["upper"], pep - cert.risk)
        worst["reg"] = min(worst["reg"], cert.empirical + cert.epsilon * cert.lipschitz - cert.risk)
    tol = 1e-6 + SLACK * max(1.0, max(abs(c.risk) for c, *_ in CERTIFICATES))
    ok = min(worst.values()) >= -tol
    record(4, ok, f"{len(CERTIFICATES)} certificates; min margins empirical {worst['lower']:.1e}, "
                  f"PEP {worst['upper']:.1e}, regularization {worst['reg']:.1e} (tol {tol:.1e})")
    assert ok


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
