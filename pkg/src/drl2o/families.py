"""Function-class descriptions shared by the PEP, DRO and training layers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .unroll import StepSchedule


@dataclass(frozen=True)
class GdFamily:
    """Quadratics (or smooth strongly convex functions) with ``||x0 - x*|| <= R``."""

    mu: float
    L: float
    R: float
    function_class: str = "quadratic"

    kind = "gd"
    name = "quadratic"

    @property
    def bound(self):
        return self.R

    def initial_step(self):
        return 1.5 / (self.mu + self.L)

    def default_bounds(self):
        return (1e-6, 10.0 * self.initial_step())

    def initial_schedule(self, K):
        return StepSchedule.constant("gd", K, self.initial_step(), self.default_bounds())


@dataclass(frozen=True)
class IstaFamily:
    """LASSO: L-smooth convex least squares plus an l1 term, ``||x0 - x*|| <= dist_bound``."""

    L: float
    dist_bound: float
    lambda_reg: float = 0.0

    kind = "ista"
    name = "lasso"

    @property
    def bound(self):
        return self.dist_bound

    def initial_step(self):
        return 1.0 / self.L

    def default_bounds(self):
        return (1e-6, 10.0 * self.initial_step())

    def initial_schedule(self, K):
        return StepSchedule.constant("ista", K, self.initial_step(), self.default_bounds())


@dataclass(frozen=True)
class PdhgFamily:
    """LPs with ``||M|| <= M_max`` and joint initial distance ``<= dist_bound``."""

    M_max: float
    dist_bound: float

    kind = "pdhg"
    name = "tv"

    @property
    def bound(self):
        return self.dist_bound

    def initial_step(self):
        return np.array([0.5 / self.M_max, 1.0, 0.5 / self.M_max])

    def default_bounds(self):
        return (1e-6, float(10.0 * self.initial_step().max()))

    def initial_schedule(self, K):
        return StepSchedule.constant("pdhg", K, self.initial_step(), self.default_bounds())


def family_from_dataset(dataset, function_class="quadratic"):
    prov = dataset.provenance
    first = next((items[0] for items in dataset.splits.values() if items), None)
    if dataset.family == "quadratic":
        # the in-distribution class; the OOD split is only evaluated
        mu = prov.get("mu", first.mu if first else None)
        L = prov.get("L", first.L if first else None)
        R = prov.get("R", first.R if first else None)
        return GdFamily(mu, L, R, function_class)
    if dataset.family == "lasso":
        return IstaFamily(first.smooth_L, first.dist_bound, first.lambda_reg)
    if dataset.family == "tv":
        return PdhgFamily(first.M_max, first.dist_bound)
    raise ValueError(f"unknown family {dataset.family!r}")


def family_for_kind(kind):
    return {"gd": GdFamily, "ista": IstaFamily, "pdhg": PdhgFamily}[kind]
