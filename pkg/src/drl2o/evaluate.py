"""Test-time metrics, reports and run manifests.

CSV schemas (first line is a versioned comment, second the header):

* evaluation: ``# drl2o evaluation v1`` then
  ``instance_id,split,method,K,loss,diverged,solved@<eta>...``
* summary: ``# drl2o summary v1`` then
  ``split,method,K,count,diverged,mean,q10,q50,q90,coverage,solved@<eta>...``
* timing: ``# drl2o timing v1`` then ``method,K,iterations,mean,two_sigma``
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .unroll import DivergenceError, loss_weights, run_algorithm

DEFAULT_ETAS = (1e-1, 1e-2, 1e-3)
QUANTILE_LEVELS = (0.1, 0.5, 0.9)
TIMING_WARMUP = 5
EVAL_HEADER = "# drl2o evaluation v1"
SUMMARY_HEADER = "# drl2o summary v1"
TIMING_HEADER = "# drl2o timing v1"


def fraction_solved(losses, f_stars, eta) -> float:
    """Share of instances with ``loss <= eta * (1 + |f*|)``; ``nan``/``inf`` losses count as unsolved."""
    losses = np.asarray(losses, dtype=float).ravel()
    f_stars = np.broadcast_to(np.asarray(f_stars, dtype=float), losses.shape)
    if losses.size == 0:
        raise ValueError("fraction_solved needs at least one loss")
    if not eta > 0:
        raise ValueError("eta must be positive")
    ok = losses <= eta * (1.0 + np.abs(f_stars))
    return float(np.mean(ok))


def quantiles(values, levels=QUANTILE_LEVELS) -> np.ndarray:
    """Linear-interpolation quantiles (numpy's default estimator, type 7)."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("quantiles need at least one value")
    return np.quantile(values, np.asarray(levels, dtype=float), method="linear")


@dataclass(frozen=True)
class TimingSummary:
    iterations: int
    mean: float
    two_sigma: float

    @classmethod
    def from_times(cls, times, discard=TIMING_WARMUP):
        kept = np.asarray(times, dtype=float)[discard:]
        if kept.size == 0:
            return cls(0, float("nan"), float("nan"))
        return cls(int(kept.size), float(kept.mean()), float(2.0 * kept.std()))


@dataclass(frozen=True)
class EvalRow:
    instance_id: str
    split: str
    method: str
    K: int
    loss: float
    f_star: float
    diverged: bool
    weighted_loss: float


@dataclass
class GroupSummary:
    count: int
    diverged: int
    mean: float
    quantiles: tuple
    solved: dict
    coverage: float | None = None


@dataclass(eq=False)
class EvalReport:
    etas: tuple
    rows: list = field(default_factory=list)
    certificates: dict = field(default_factory=dict)  # (method, K) -> (value, weighted)
    timings: dict = field(default_factory=dict)  # (method, K) -> TimingSummary

    def extend(self, other: "EvalReport"):
        if tuple(other.etas) != tuple(self.etas):
            raise ValueError("cannot merge reports with different eta lists")
        self.rows.extend(other.rows)
        self.certificates.update(other.certificates)
        self.timings.update(other.timings)
        return self

    def groups(self):
        keys = []
        for r in self.rows:
            k = (r.split, r.method, r.K)
            if k not in keys:
                keys.append(k)
        return keys

    def summary(self, split, method, K) -> GroupSummary:
        rows = [r for r in self.rows if (r.split, r.method, r.K) == (split, method, K)]
        losses = np.array([r.loss for r in rows])
        fs = np.array([r.f_star for r in rows])
        finite = losses[np.isfinite(losses)]
        q = tuple(quantiles(finite)) if finite.size else (float("nan"),) * len(QUANTILE_LEVELS)
        cov = None
        if (method, K) in self.certificates:
            value, weighted = self.certificates[(method, K)]
            cov = coverage([r.weighted_loss if weighted else r.loss for r in rows], value)
        return GroupSummary(
            count=len(rows), diverged=sum(r.diverged for r in rows),
            mean=float(np.mean(losses)) if rows else float("nan"), quantiles=q,
            solved={eta: fraction_solved(losses, fs, eta) for eta in self.etas},
            coverage=cov,
        )

    def fraction_table(self):
        return {g: self.summary(*g).solved for g in self.groups()}

    def _eta_cols(self):
        return [f"solved@{eta:g}" for eta in self.etas]

    def rows_csv(self) -> str:
        buf = io.StringIO()
        buf.write(EVAL_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["instance_id", "split", "method", "K", "loss", "diverged", *self._eta_cols()])
        for r in self.rows:
            thr = [int(r.loss <= eta * (1 + abs(r.f_star))) for eta in self.etas]
            w.writerow([r.instance_id, r.split, r.method, r.K, _fmt(r.loss), int(r.diverged), *thr])
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        buf.write(SUMMARY_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "method", "K", "count", "diverged", "mean", "q10", "q50", "q90",
                    "coverage", *self._eta_cols()])
        for g in self.groups():
            s = self.summary(*g)
            w.writerow([*g, s.count, s.diverged, _fmt(s.mean), *map(_fmt, s.quantiles),
                        "" if s.coverage is None else _fmt(s.coverage),
                        *(_fmt(s.solved[eta]) for eta in self.etas)])
        return buf.getvalue()

    def timing_csv(self) -> str:
        buf = io.StringIO()
        buf.write(TIMING_HEADER + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "K", "iterations", "mean", "two_sigma"])
        for (method, K), t in self.timings.items():
            w.writerow([method, K, t.iterations, _fmt(t.mean), _fmt(t.two_sigma)])
        return buf.getvalue()


def _fmt(x) -> str:
    return repr(float(x))


def coverage(losses, certificate_value, slack=0.0) -> float:
    """Share of losses not exceeding the certificate (plus ``slack``)."""
    losses = np.asarray(losses, dtype=float)
    if losses.size == 0:
        raise ValueError("coverage needs at least one loss")
    return float(np.mean(losses <= certificate_value + slack))


def _one(inst, schedule, split, method, base):
    ref = inst.reference
    f_star = float(ref.f_star) if ref is not None else 0.0
    try:
        tr = run_algorithm(inst, schedule)
    except DivergenceError:
        return EvalRow(inst.uid, split, method, schedule.K, float("inf"), f_star, True, float("inf"))
    losses = tr.losses
    w = float(loss_weights(schedule.K, base) @ losses[1:])
    return EvalRow(inst.uid, split, method, schedule.K, float(losses[-1]), f_star, False, w)


def evaluate_schedule(schedule, dataset, family=None, etas=DEFAULT_ETAS, method="schedule",
                      splits=("test", "test_ood"), certificate=None, certificate_weighted=False,
                      base=0.9, workers=None) -> EvalReport:
    """Run ``schedule`` on the test splits and collect terminal losses.

    ``certificate`` is an optional scalar bound (PEP value or DRO risk) used for
    the coverage column; ``certificate_weighted`` compares it against the
    weighted per-iterate loss instead of the terminal one. Divergent runs are
    recorded with ``inf`` loss, flagged, and count as unsolved at every eta.
    """
    if family is not None and getattr(family, "kind", schedule.kind) != schedule.kind:
        raise ValueError(f"schedule kind {schedule.kind!r} does not match family {family.kind!r}")
    etas = tuple(float(e) for e in etas)
    if not etas or min(etas) <= 0:
        raise ValueError("etas must be a nonempty list of positive tolerances")
    report = EvalReport(etas)
    for split in splits:
        items = list(dataset.splits.get(split, []))
        if not items:
            continue
        with ThreadPoolExecutor(max_workers=workers or 1) as pool:
            rows = list(pool.map(lambda inst: _one(inst, schedule, split, method, base), items))
        report.rows.extend(rows)
    if certificate is not None:
        report.certificates[(method, schedule.K)] = (float(certificate), bool(certificate_weighted))
    return report


# ---------------------------------------------------------------- manifest

def code_version() -> str:
    """Package version plus a digest of the installed sources."""
    import importlib.metadata
    import pathlib

    try:
        version = importlib.metadata.version("artifact")
    except importlib.metadata.PackageNotFoundError:
        version = "0+unknown"
    h = hashlib.sha256()
    for path in sorted(pathlib.Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{version}+{h.hexdigest()[:12]}"


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    dataset: dict
    solver: dict
    etas: tuple = DEFAULT_ETAS
    code_version: str = field(default_factory=code_version)
    python: str = field(default_factory=platform.python_version)
    numpy: str = np.__version__

    def to_json(self) -> str:
        d = asdict(self)
        d["etas"] = list(self.etas)
        return json.dumps(d, indent=2, sort_keys=True, default=_jsonable)

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json() + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        d["etas"] = tuple(d.get("etas", DEFAULT_ETAS))
        return cls(**d)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    raise TypeError(type(obj).__name__)
