"""Training loops for DR-L2O, L2O and OPT-PEP schedules, plus cross-validation."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .conic import GradientUnavailable, SolverSettings
from .dro import DroConfig, dro_risk, dro_risk_gradient
from .pep import PepSolveFailed, PepUnbounded, pep_value, worst_case_gradient
from .unroll import DivergenceError, StepSchedule, loss_weights, run_algorithm, trajectory_jacobian

log = logging.getLogger(__name__)

METHODS = ("dr_l2o", "l2o", "opt_pep")


class TrainingAborted(RuntimeError):
    pass


class CrossValidationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_iterations: int = 1000
    warmup_fraction: float = 0.1
    lr_max: float = 1e-3
    weight_decay: float = 0.0
    epsilon: float = 0.1
    batch_size: int = 20
    loss_base: float = 0.9
    weighted: bool = True
    seed: int = 0
    checkpoint_every: int = 25
    abort_window: int = 20
    abort_fraction: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_grid: tuple = (1e-5, 1e-4, 1e-3)
    weight_decay_grid: tuple = (0.0, 1e-5, 1e-4, 1e-3)
    epsilon_grid: tuple = (1e-2, 1e-1, 1.0, 5.0, 10.0)
    bounds: tuple | None = None
    tol: float = 1e-5
    max_iter: int = 200
    val_limit: int | None = None

    def __post_init__(self):
        if self.total_iterations < 1:
            raise ValueError("total_iterations must be >= 1")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if not (self.lr_grid and self.weight_decay_grid and self.epsilon_grid):
            raise ValueError("hyperparameter grids must be nonempty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def settings(self) -> SolverSettings:
        return SolverSettings(self.tol, self.tol, self.tol, self.max_iter)

    def to_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in known}
        return cls(**kw)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Linear warm-up to ``lr_max`` then cosine annealing to zero."""
    T = config.total_iterations
    if not 0 <= iteration < T:
        raise ValueError(f"iteration {iteration} outside [0, {T})")
    W = config.warmup_fraction * T
    if iteration < W:
        return config.lr_max * iteration / W
    progress = (iteration - W) / (T - W)
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """AdamW state over ``u`` with ``theta = u**2``."""

    u: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_theta(cls, theta, config: TrainConfig | None = None):
        u = np.sqrt(np.asarray(theta, dtype=float))
        c = config or TrainConfig()
        return cls(u, np.zeros_like(u), np.zeros_like(u), 0, c.beta1, c.beta2, c.adam_eps)

    @property
    def theta(self):
        return self.u**2

    def update(self, grad_theta, lr, weight_decay, bounds):
        g = 2.0 * self.u * np.asarray(grad_theta, dtype=float)  # chain rule through u**2
        self.step += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        mhat = self.m / (1 - self.beta1**self.step)
        vhat = self.v / (1 - self.beta2**self.step)
        self.u = self.u - lr * (mhat / (np.sqrt(vhat) + self.eps) + weight_decay * self.u)
        self.u = np.sqrt(np.clip(self.u**2, *bounds))
        return self.theta


@dataclass(eq=False)
class TrainedSchedule:
    schedule: StepSchedule
    method: str
    K: int
    curve: list
    hyperparameters: dict
    val_score: float
    initial_schedule: StepSchedule | None = None
    failures: int = 0
    checkpoints: list = field(default_factory=list)

    def to_dict(self):
        return dict(method=self.method, K=self.K, schedule=self.schedule.to_dict(),
                    initial=None if self.initial_schedule is None else self.initial_schedule.to_dict(),
                    hyperparameters=self.hyperparameters, val_score=self.val_score,
                    failures=self.failures,
                    checkpoints=[dict(iteration=i, theta=t.tolist(), score=s) for i, t, s in self.checkpoints])

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_curve(self, path):
        write_curve_csv(self.curve, path)


CURVE_COLUMNS = ("iteration", "lr", "objective", "val_risk", "wall_time")


def write_curve_csv(curve, path):
    with open(path, "w", newline="") as fh:
        fh.write("# drl2o training curve v1\n")
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in curve:
            w.writerow(["" if row.get(c) is None else row[c] for c in CURVE_COLUMNS])


def load_schedule(path) -> StepSchedule:
    with open(path) as fh:
        doc = json.load(fh)
    return StepSchedule.from_dict(doc.get("schedule", doc))


# ---------------------------------------------------------------- objectives

def empirical_risk(schedule, instances, weighted=True, base=0.9, with_grad=False):
    """Mean (weighted or terminal) loss; divergent runs count as ``inf``."""
    K = schedule.K
    w = loss_weights(K, base) if weighted else np.eye(K)[-1]
    vals, grads = [], []
    for inst in instances:
        try:
            if with_grad:
                tr, jac = trajectory_jacobian(inst, schedule)
                grads.append(jac.losses[:, 1:] @ w)
            else:
                tr = run_algorithm(inst, schedule)
        except DivergenceError:
            if with_grad:
                raise
            vals.append(np.inf)
            continue
        vals.append(float(tr.losses[1:] @ w))
    value = float(np.mean(vals))
    return (value, np.mean(grads, axis=0)) if with_grad else value


def _objective(method, family, config: TrainConfig, settings):
    dro_cfg = DroConfig(config.epsilon, weighted=config.weighted)

    if method == "dr_l2o":
        def fn(schedule, batch):
            cert, g = dro_risk_gradient(schedule, batch, family, dro_cfg, settings)
            return cert.risk, g
    elif method == "l2o":
        def fn(schedule, batch):
            return empirical_risk(schedule, batch, config.weighted, config.loss_base, with_grad=True)
    elif method == "opt_pep":
        def fn(schedule, batch):
            cert, g = worst_case_gradient(schedule.theta, family, settings, config.weighted, schedule)
            if not cert.optimal:
                raise GradientUnavailable(cert.status)
            return cert.value, g
    else:
        raise ValueError(f"unknown method {method!r}")
    return fn


def validation_score(method, schedule, instances, family, config: TrainConfig, settings=None):
    """Each method is checkpointed on its own objective, evaluated on held-out data."""
    settings = settings or config.settings
    if method == "opt_pep":
        return pep_value(family, schedule, settings, weighted=config.weighted).value
    if method == "l2o":
        return empirical_risk(schedule, instances, config.weighted, config.loss_base)
    try:
        cert = dro_risk(schedule, instances, family, DroConfig(config.epsilon, config.weighted),
                        settings, with_pep=False)
    except DivergenceError:
        return np.inf
    return cert.risk if cert.optimal else np.inf


_RECOVERABLE = (GradientUnavailable, DivergenceError, PepSolveFailed, PepUnbounded, FloatingPointError)


def train(method, dataset, family, K, config: TrainConfig, initial: StepSchedule | None = None,
          progress=None) -> TrainedSchedule:
    """Algorithm loop shared by all three methods."""
    settings = config.settings
    bounds = config.bounds or family.default_bounds()
    sched0 = initial or family.initial_schedule(K)
    sched0 = StepSchedule(sched0.kind, np.clip(sched0.values, *bounds), bounds)
    state = OptimizerState.from_theta(sched0.theta, config)
    fn = _objective(method, family, config, settings)
    train_set = list(dataset["train"]) if method != "opt_pep" else []
    val_set = list(dataset["val"]) if method != "opt_pep" else []
    if config.val_limit:
        val_set = val_set[: config.val_limit]
    if method != "opt_pep" and not train_set:
        raise ValueError("dataset has no training instances")
    rng = np.random.default_rng(config.seed)
    window = deque(maxlen=config.abort_window)
    curve, checkpoints = [], []
    best = (np.inf, sched0.theta.copy(), -1)
    failures = 0
    t0 = time.perf_counter()

    def checkpoint(it, theta):
        nonlocal best
        score = validation_score(method, sched0.with_theta(theta), val_set or train_set, family, config, settings)
        checkpoints.append((it, theta.copy(), score))
        if score < best[0]:
            best = (score, theta.copy(), it)
        return score

    T = config.total_iterations
    for it in range(T):
        lr = lr_at(it, config)
        theta = state.theta
        schedule = sched0.with_theta(theta)
        val = checkpoint(it, theta) if it % config.checkpoint_every == 0 else None
        if method == "opt_pep":
            batch = []
        else:
            size = min(config.batch_size, len(train_set))
            batch = [train_set[i] for i in rng.choice(len(train_set), size=size, replace=False)]
        try:
            obj, g = fn(schedule, batch)
            ok = bool(np.all(np.isfinite(g)))
        except _RECOVERABLE as exc:
            log.info("iteration %d: gradient unavailable (%s)", it, exc)
            obj, ok = None, False
        window.append(not ok)
        if ok:
            state.update(g, lr, config.weight_decay, bounds)
        else:
            failures += 1
            if len(window) == window.maxlen and sum(window) > config.abort_fraction * len(window):
                raise TrainingAborted(f"{sum(window)} of the last {len(window)} steps had no gradient")
        curve.append(dict(iteration=it, lr=lr, objective=obj, val_risk=val,
                          wall_time=time.perf_counter() - t0, theta=theta.tolist()))
        if progress:
            progress(curve[-1])
    final = checkpoint(T, state.theta)
    curve.append(dict(iteration=T, lr=0.0, objective=None, val_risk=final,
                      wall_time=time.perf_counter() - t0))
    score, theta, _ = best
    hp = dict(lr_max=config.lr_max, weight_decay=config.weight_decay, seed=config.seed)
    if method == "dr_l2o":
        hp["epsilon"] = config.epsilon
    return TrainedSchedule(sched0.with_theta(theta), method, K, curve, hp, float(score), sched0,
                           failures, checkpoints)


def train_dr_l2o(dataset, family, K, config: TrainConfig, **kw) -> TrainedSchedule:
    return train("dr_l2o", dataset, family, K, config, **kw)


def train_l2o(dataset, family, K, config: TrainConfig, **kw) -> TrainedSchedule:
    return train("l2o", dataset, family, K, config, **kw)


def train_opt_pep(family, K, config: TrainConfig, **kw) -> TrainedSchedule:
    return train("opt_pep", {"train": [], "val": []}, family, K, config, **kw)


def train_horizons(method, dataset, family, Ks, config: TrainConfig, warm_start=False):
    """One schedule per horizon; optionally warm-start K from the K-1 result."""
    out, prev = {}, None
    for K in sorted(Ks):
        init = None
        if warm_start and prev is not None:
            pad = family.initial_schedule(K).values
            pad[: prev.K] = prev.values
            init = StepSchedule(prev.kind, pad, prev.bounds)
        res = train(method, dataset, family, K, config, initial=init)
        out[K] = res
        prev = res.schedule
    return out


# ---------------------------------------------------------------- cross-validation

def grid_cells(method, config: TrainConfig):
    if method == "dr_l2o":
        return [dict(epsilon=e, lr_max=l, weight_decay=w) for e, l, w in
                itertools.product(config.epsilon_grid, config.lr_grid, config.weight_decay_grid)]
    if method == "l2o":
        return [dict(lr_max=l, weight_decay=w) for l, w in
                itertools.product(config.lr_grid, config.weight_decay_grid)]
    if method == "opt_pep":
        return [dict(lr_max=l) for l in config.lr_grid]
    raise ValueError(f"unknown method {method!r}")


def select_cell(results, rel_tol=1e-12):
    """Lowest score; ties (within ``rel_tol``) go to smaller epsilon, then smaller lr.

    ``results`` is a list of ``(cell, score)``; aborted cells carry ``None``.
    """
    valid = [(c, s) for c, s in results if s is not None and np.isfinite(s)]
    if not valid:
        raise CrossValidationFailed("every cross-validation cell failed")
    best = min(s for _, s in valid)
    tied = [(c, s) for c, s in valid if s <= best + rel_tol * (1 + abs(best))]
    tied.sort(key=lambda cs: (cs[0].get("epsilon", 0.0), cs[0].get("lr_max", 0.0),
                              cs[0].get("weight_decay", 0.0)))
    return tied[0]


def cross_validate(method, dataset, family, K, config: TrainConfig, trainer=None, scorer=None):
    """Train every grid cell; pick by validation empirical (terminal) risk.

    Returns ``(best TrainedSchedule, [(cell, score), ...])``.
    """
    if not dataset["val"] and method != "opt_pep":
        raise ValueError("cross-validation needs a validation split")
    trainer = trainer or (lambda cfg: train(method, dataset, family, K, cfg))
    scorer = scorer or (lambda res: empirical_risk(res.schedule, dataset["val"], weighted=False))
    results, trained = [], {}
    for i, cell in enumerate(grid_cells(method, config)):
        cfg = replace(config, **cell)
        try:
            res = trainer(cfg)
            score = scorer(res)
            trained[i] = res
        except (TrainingAborted, GradientUnavailable, DivergenceError) as exc:
            log.warning("cell %s aborted: %s", cell, exc)
            score = None
        results.append((cell, score))
    cell, _ = select_cell(results)
    idx = next(i for i, (c, _) in enumerate(results) if c is cell)
    return trained[idx], results
