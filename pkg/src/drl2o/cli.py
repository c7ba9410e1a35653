"""Command-line entry points: generate, train, sweep, certify, evaluate, check.

Every command reads an optional JSON config (``--config``) with the sections
below; explicit flags and ``--set section.key=value`` override it::

    {
      "seed": 0,
      "dataset": {"family": "quadratic", "d": 20, "mu": 1, "L": 10, "R": 10,
                  "sizes": {"train": 100, "val": 50, "test": 50, "test_ood": 0}},
      "train":   {"total_iterations": 200, "batch_size": 10, "lr_max": 0.01, "epsilon": 0.1},
      "solver":  {"tol_feas": 1e-5, "tol_gap_abs": 1e-5, "tol_gap_rel": 1e-5, "max_iter": 200},
      "etas":    [0.1, 0.01, 0.001]
    }

Outputs go to ``--out`` or, failing that, ``$DRL2O_OUTPUT_DIR`` (default
``./drl2o-out``). Exit status: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import instances as I
from .checks import run_checks
from .conic import SolverSettings
from .dro import DroConfig, dro_risk
from .evaluate import DEFAULT_ETAS, RunManifest, evaluate_schedule
from .families import family_from_dataset
from .pep import pep_value
from .train import METHODS, TrainConfig, cross_validate, empirical_risk, load_schedule, train

OUTPUT_ENV = "DRL2O_OUTPUT_DIR"
FAMILIES = ("quadratic", "lasso", "tv")

DATASET_DEFAULTS = {
    "quadratic": dict(d=20, mu=1.0, L=10.0, R=10.0, L_ood=None),
    "lasso": dict(m=50, n=30, lambda_reg=0.1, sigma_x=1.0, sigma_err=0.1, p_mask=0.5,
                  sigma_x_ood=None, presolve_count=1000),
    "tv": dict(images=None, ood_images=None, synthetic=12, image_size=[8, 8], missing_fraction=0.1),
}
DEFAULT_SIZES = {"train": 100, "val": 50, "test": 50, "test_ood": 0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"\n{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- config

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        node = cfg
        *path, leaf = key.split(".")
        for p in path:
            node = node.setdefault(p, {})
        node[leaf] = _parse_value(value)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    return cfg


def _out_dir(args, *parts):
    base = args.out or os.environ.get(OUTPUT_ENV) or "drl2o-out"
    path = os.path.join(base, *parts)
    os.makedirs(path, exist_ok=True)
    return path


def _solver(cfg) -> SolverSettings:
    return SolverSettings(**cfg.get("solver", {}))


def _train_config(cfg, args) -> TrainConfig:
    d = dict(cfg.get("train", {}))
    d.setdefault("seed", cfg.get("seed", 0))
    for flag, key in (("epsilon", "epsilon"), ("lr", "lr_max"), ("iterations", "total_iterations"),
                      ("batch_size", "batch_size"), ("weight_decay", "weight_decay")):
        val = getattr(args, flag, None)
        if val is not None:
            d[key] = val
    sol = cfg.get("solver", {})
    if "tol_feas" in sol:
        d.setdefault("tol", sol["tol_feas"])
    if "max_iter" in sol:
        d.setdefault("max_iter", sol["max_iter"])
    return TrainConfig.from_dict(d)


def _etas(cfg, args):
    if getattr(args, "etas", None):
        return tuple(float(x) for x in args.etas.split(","))
    return tuple(float(x) for x in cfg.get("etas", DEFAULT_ETAS))


def _manifest(command, cfg, dataset=None, solver=None, etas=DEFAULT_ETAS, extra=None):
    seeds = dict(run=cfg.get("seed", 0))
    if dataset is not None:
        seeds["dataset"] = dataset.seed
    return RunManifest(command=command, config=dict(cfg, **(extra or {})), seeds=seeds,
                       dataset={} if dataset is None else dict(family=dataset.family,
                                                              sizes=dataset.sizes(),
                                                              provenance=dataset.provenance),
                       solver=(solver or SolverSettings()).as_dict(), etas=tuple(etas))


# ---------------------------------------------------------------- commands

def cmd_generate(args):
    cfg = load_config(args)
    dcfg = dict(cfg.get("dataset", {}))
    family = args.family or dcfg.pop("family", None)
    dcfg.pop("family", None)
    if family not in FAMILIES:
        raise UsageError(f"--family must be one of {', '.join(FAMILIES)}")
    params = dict(DATASET_DEFAULTS[family])
    unknown = set(dcfg) - set(params) - {"sizes"}
    if unknown:
        raise UsageError(f"unknown dataset keys for {family}: {sorted(unknown)}")
    params.update(dcfg)
    sizes = dict(DEFAULT_SIZES, **params.pop("sizes", dcfg.get("sizes", {}) or {}))
    seed = int(cfg.get("seed", 0))
    if family == "quadratic":
        ds = I.sample_quadratic_dataset(params["d"], params["mu"], params["L"], params["R"], sizes,
                                        seed, L_ood=params["L_ood"])
    elif family == "lasso":
        ds = I.sample_lasso_dataset(params["m"], params["n"], params["lambda_reg"], params["sigma_x"],
                                    params["sigma_err"], params["p_mask"], sizes, seed,
                                    sigma_x_ood=params["sigma_x_ood"],
                                    presolve_count=params["presolve_count"])
    else:
        if params["images"]:
            imgs = [(os.path.basename(p), I.load_image_matrix(p)) for p in params["images"]]
        else:
            imgs = I.synthetic_images(params["synthetic"], tuple(params["image_size"]), seed)
        ood = [(os.path.basename(p), I.load_image_matrix(p)) for p in params["ood_images"] or []]
        ds = I.sample_tv_dataset(imgs, sizes, seed, ood_images=ood,
                                 missing_fraction=params["missing_fraction"])
    out = _out_dir(args, args.name or f"{family}-data")
    I.save_dataset(ds, out)
    _manifest("generate", cfg, ds, extra=dict(dataset=dict(family=family, sizes=sizes, **params))
              ).save(os.path.join(out, "run_manifest.json"))
    print(f"wrote {sum(ds.sizes().values())} instances to {out}")
    return 0


def _load(args):
    if not os.path.isdir(args.dataset):
        raise FileNotFoundError(f"dataset directory {args.dataset!r} not found")
    ds = I.load_dataset(args.dataset)
    return ds, family_from_dataset(ds)


def cmd_train(args):
    cfg = load_config(args)
    ds, fam = _load(args)
    tcfg = _train_config(cfg, args)
    res = train(args.method, ds, fam, args.K, tcfg)
    out = _out_dir(args, f"{args.method}_K{args.K}")
    res.save(os.path.join(out, "schedule.json"))
    res.write_curve(os.path.join(out, "curve.csv"))
    _manifest("train", cfg, ds, tcfg.settings, extra=dict(method=args.method, K=args.K,
                                                          train=tcfg.to_dict())
              ).save(os.path.join(out, "run_manifest.json"))
    print(f"{args.method} K={args.K} theta={np.array2string(res.schedule.theta, precision=6)} "
          f"val={res.val_score:.6g}")
    return 0


def cmd_sweep(args):
    cfg = load_config(args)
    ds, fam = _load(args)
    tcfg = _train_config(cfg, args)
    best, results = cross_validate(args.method, ds, fam, args.K, tcfg)
    out = _out_dir(args, f"{args.method}_K{args.K}_cv")
    with open(os.path.join(out, "cv.csv"), "w") as fh:
        fh.write("# drl2o cross-validation v1\n")
        fh.write("epsilon,lr_max,weight_decay,score\n")
        for cell, score in results:
            fh.write(f"{cell.get('epsilon', '')},{cell['lr_max']},{cell.get('weight_decay', '')},"
                     f"{'' if score is None else repr(float(score))}\n")
    best.save(os.path.join(out, "schedule.json"))
    best.write_curve(os.path.join(out, "curve.csv"))
    _manifest("sweep", cfg, ds, tcfg.settings, extra=dict(method=args.method, K=args.K,
                                                          train=tcfg.to_dict())
              ).save(os.path.join(out, "run_manifest.json"))
    print(f"best cell {best.hyperparameters} val={best.val_score:.6g}")
    return 0


def cmd_certify(args):
    cfg = load_config(args)
    ds, fam = _load(args)
    sched = load_schedule(args.schedule)
    settings = _solver(cfg)
    items = ds[args.split][: args.limit] if args.limit else ds[args.split]
    if not items and args.kind == "dro":
        raise ValueError(f"split {args.split!r} is empty")
    out = _out_dir(args, "certificates")
    if args.kind == "pep":
        cert = pep_value(fam, sched, settings, weighted=args.weighted)
        print(f"pep {cert.value!r} status {cert.status}")
    else:
        cert = dro_risk(sched, items, fam, DroConfig(args.epsilon, weighted=args.weighted), settings,
                        with_pep=not args.no_pep)
        if args.epsilon == 0:
            print(f"empirical mean loss {cert.risk!r} (N={cert.N})")
        else:
            print(f"risk {cert.risk!r} status {cert.status} empirical {cert.empirical!r} "
                  f"pep {cert.pep_value!r}")
    name = f"{args.kind}_eps{args.epsilon:g}.json" if args.kind == "dro" else "pep.json"
    with open(os.path.join(out, name), "w") as fh:
        fh.write(cert.to_json() + "\n")
    return 0 if cert.status == "optimal" else 1


def cmd_evaluate(args):
    cfg = load_config(args)
    ds, fam = _load(args)
    etas = _etas(cfg, args)
    settings = _solver(cfg)
    report = None
    for item in args.schedule:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.splitext(os.path.basename(item))[0], item
        sched = load_schedule(path)
        cert = None
        if args.certify:
            cert = pep_value(fam, sched, settings).value
        r = evaluate_schedule(sched, ds, fam, etas, method=name, splits=args.splits.split(","),
                              certificate=cert, workers=args.workers)
        report = r if report is None else report.extend(r)
    out = _out_dir(args, "evaluation")
    with open(os.path.join(out, "evaluation.csv"), "w") as fh:
        fh.write(report.rows_csv())
    with open(os.path.join(out, "summary.csv"), "w") as fh:
        fh.write(report.summary_csv())
    _manifest("evaluate", cfg, ds, settings, etas, extra=dict(schedules=args.schedule)
              ).save(os.path.join(out, "run_manifest.json"))
    sys.stdout.write(report.summary_csv())
    return 0


def cmd_check(args):
    results = run_checks(args.family, quick=not args.full, seed=args.seed or 0)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_empirical(args):
    ds, _ = _load(args)
    sched = load_schedule(args.schedule)
    print(repr(empirical_risk(sched, ds[args.split], weighted=args.weighted)))
    return 0


# ---------------------------------------------------------------- parser

def build_parser():
    p = _Parser(prog="drl2o", description="Distributionally robust learned step-size schedules.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config entry (value parsed as JSON when possible)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./drl2o-out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")

    def training(sp):
        sp.add_argument("--dataset", required=True, help="directory written by 'generate'")
        sp.add_argument("--method", choices=METHODS, required=True)
        sp.add_argument("--K", type=int, required=True, help="number of algorithm steps")
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--iterations", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--weight-decay", dest="weight_decay", type=float)

    sp = sub.add_parser("generate", help="sample and save a dataset")
    common(sp)
    sp.add_argument("--family", choices=FAMILIES)
    sp.add_argument("--name", help="subdirectory name under the output directory")
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("train", help="train one schedule")
    common(sp)
    training(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sweep", help="cross-validate a method over its hyperparameter grid")
    common(sp)
    training(sp)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("certify", help="DRO or PEP certificate for a schedule")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--kind", choices=("dro", "pep"), default="dro")
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.add_argument("--split", default="train")
    sp.add_argument("--limit", type=int)
    sp.add_argument("--weighted", action="store_true")
    sp.add_argument("--no-pep", action="store_true", help="skip the worst-case bound")
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("evaluate", help="test-split report as CSV")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--schedule", action="append", required=True, metavar="[NAME=]PATH")
    sp.add_argument("--etas", help="comma-separated tolerances (default 0.1,0.01,0.001)")
    sp.add_argument("--splits", default="test,test_ood")
    sp.add_argument("--certify", action="store_true", help="add PEP coverage per schedule")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("check", help="run the invariant suite on a tiny dataset")
    common(sp)
    sp.add_argument("--family", choices=FAMILIES, required=True)
    group = sp.add_mutually_exclusive_group()
    group.add_argument("--quick", action="store_true", help="small batch (default)")
    group.add_argument("--full", action="store_true")
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("empirical", help="mean loss of a schedule on one split")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--weighted", action="store_true")
    sp.set_defaults(func=cmd_empirical)
    return p


_DOMAIN_ERRORS = (ValueError, RuntimeError, ArithmeticError, OSError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"drl2o: error: {exc}", file=sys.stderr)
        return 2
    except _DOMAIN_ERRORS as exc:
        print(f"drl2o: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
