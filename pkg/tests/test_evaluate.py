import csv
import io
import json

import numpy as np
import pytest

from drl2o import instances as I
from drl2o.cli import main
from drl2o.evaluate import (EvalReport, RunManifest, TimingSummary, coverage, evaluate_schedule,
                            fraction_solved, quantiles)
from drl2o.families import GdFamily, family_from_dataset
from drl2o.pep import pep_value
from drl2o.unroll import StepSchedule


def test_fraction_solved_examples():
    assert fraction_solved([0.05, 0.5], [1.0, 1.0], 0.1) == 0.5
    assert fraction_solved([0.0, 0.0, 0.0], [3.0, -1.0, 0.0], 1e-3) == 1.0
    # f* = 0: the threshold is eta itself
    assert fraction_solved([0.1], [0.0], 0.1) == 1.0
    assert fraction_solved([np.nextafter(0.1, 1)], [0.0], 0.1) == 0.0
    assert fraction_solved([np.inf, np.nan, 0.0], 0.0, 0.5) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        fraction_solved([], [], 0.1)
    with pytest.raises(ValueError):
        fraction_solved([1.0], [0.0], 0.0)


def test_fraction_solved_monotone_in_eta(rng):
    losses = rng.exponential(size=50)
    fs = rng.normal(size=50)
    fr = [fraction_solved(losses, fs, eta) for eta in np.logspace(-4, 1, 30)]
    assert all(b >= a for a, b in zip(fr, fr[1:]))


def test_quantile_examples():
    assert quantiles(np.arange(1, 11), [0.5])[0] == 5.5
    v = np.array([3.0, -1.0, 7.5, 2.0])
    np.testing.assert_array_equal(quantiles(v, [0.0, 1.0]), [-1.0, 7.5])
    np.testing.assert_array_equal(quantiles(np.full(7, 2.25), [0.0, 0.1, 0.5, 0.9, 1.0]), 2.25)
    q = quantiles(np.random.default_rng(0).normal(size=40), np.linspace(0, 1, 11))
    assert np.all(np.diff(q) >= 0)
    with pytest.raises(ValueError):
        quantiles([])


def test_timing_discards_warmup():
    t = TimingSummary.from_times([100.0] * 5 + [1.0, 2.0, 3.0])
    assert t.iterations == 3 and t.mean == 2.0
    assert t.two_sigma == pytest.approx(2 * np.std([1.0, 2.0, 3.0]))


def test_exact_step_solves_everything():
    ds = I.sample_quadratic_dataset(3, 2.0, 2.0, 1.0, {"test": 5}, seed=0)
    rep = evaluate_schedule(StepSchedule("gd", [0.5]), ds, family_from_dataset(ds), etas=(1e-12, 1e-3))
    s = rep.summary("test", "schedule", 1)
    assert s.solved == {1e-12: 1.0, 1e-3: 1.0} and s.diverged == 0


def test_diverging_schedule_is_flagged():
    ds = I.sample_quadratic_dataset(2, 2.0, 2.0, 1.0, {"test": 4}, seed=1)
    # scalar recursion |1 - 5*2|^K = 9^K overflows well before K = 400
    assert 400 * np.log10(9) > 308
    rep = evaluate_schedule(StepSchedule("gd", [5.0] * 400), ds, etas=(0.1, 10.0))
    s = rep.summary("test", "schedule", 400)
    assert s.diverged == 4 and s.solved[10.0] == 0.0


def test_pep_certificate_covers_in_class_data(quad_ds, tight):
    fam = family_from_dataset(quad_ds)
    sched = fam.initial_schedule(3)
    cert = pep_value(fam, sched, tight).value
    rep = evaluate_schedule(sched, quad_ds, fam, splits=("test",), certificate=cert)
    assert rep.summary("test", "schedule", 3).coverage == 1.0
    assert coverage([0.5, 2.0], 1.0) == 0.5


def test_reports_byte_deterministic(quad_ds):
    fam = family_from_dataset(quad_ds)
    sched = fam.initial_schedule(2)
    a = evaluate_schedule(sched, quad_ds, fam, workers=3)
    b = evaluate_schedule(sched, quad_ds, fam, workers=1)
    assert a.rows_csv() == b.rows_csv() and a.summary_csv() == b.summary_csv()


def test_csv_schema(quad_ds):
    rep = evaluate_schedule(StepSchedule("gd", [0.1]), quad_ds, etas=(0.1, 0.01))
    lines = rep.rows_csv().splitlines()
    assert lines[0] == "# drl2o evaluation v1"
    header = next(csv.reader([lines[1]]))
    assert header == ["instance_id", "split", "method", "K", "loss", "diverged", "solved@0.1", "solved@0.01"]
    assert len(lines) == 2 + len(quad_ds.test) + len(quad_ds.test_ood)
    with pytest.raises(ValueError):
        rep.extend(EvalReport((0.5,)))


def test_manifest_round_trip(tmp_path):
    m = RunManifest("train", {"train": {"lr_max": 0.01}}, {"seed": 3}, {"family": "quadratic"}, {"max_iter": 5})
    m.save(tmp_path / "m.json")
    back = RunManifest.load(tmp_path / "m.json")
    assert back == m
    assert json.loads(m.to_json())["etas"] == [0.1, 0.01, 0.001]


# ---------------------------------------------------------------- command line

@pytest.fixture
def cli_dataset(tmp_path):
    rc = main(["generate", "--family", "quadratic", "--out", str(tmp_path), "--name", "q",
               "--set", "dataset.d=3", "--set", 'dataset.sizes={"train": 4, "val": 2, "test": 3, "test_ood": 0}'])
    assert rc == 0
    return tmp_path / "q"


def _schedule_file(path, theta):
    path.write_text(json.dumps({"schedule": StepSchedule("gd", theta).to_dict()}))
    return path


def test_cli_check_quick(capsys):
    assert main(["check", "--family", "quadratic", "--quick"]) == 0
    out = capsys.readouterr().out
    assert "PASS pep-oracle" in out and "FAIL" not in out


def test_cli_certify_epsilon_zero(cli_dataset, tmp_path, capsys):
    sched = _schedule_file(tmp_path / "s.json", [0.1, 0.1])
    rc = main(["certify", "--dataset", str(cli_dataset), "--schedule", str(sched), "--epsilon", "0",
               "--out", str(tmp_path / "o")])
    assert rc == 0
    out = capsys.readouterr().out
    ds = I.load_dataset(cli_dataset)
    expected = np.mean([0.5 * x.x0 @ np.linalg.matrix_power(np.eye(3) - 0.1 * x.Q, 4) @ x.Q @ x.x0
                        for x in ds.train])
    value = float(out.split("empirical mean loss ")[1].split()[0])
    assert value == pytest.approx(expected, rel=1e-12)


def test_cli_evaluate_columns(cli_dataset, tmp_path):
    sched = _schedule_file(tmp_path / "s.json", [0.12])
    out = tmp_path / "o"
    rc = main(["evaluate", "--dataset", str(cli_dataset), "--schedule", f"mine={sched}", "--etas", "0.5,0.05",
               "--out", str(out), "--certify"])
    assert rc == 0
    text = (out / "evaluation" / "evaluation.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))
    assert list(rows[0]) == ["instance_id", "split", "method", "K", "loss", "diverged", "solved@0.5", "solved@0.05"]
    assert {r["method"] for r in rows} == {"mine"} and len(rows) == 3
    manifest = json.loads((out / "evaluation" / "run_manifest.json").read_text())
    assert manifest["etas"] == [0.5, 0.05]
    assert "coverage" in (out / "evaluation" / "summary.csv").read_text()


def test_cli_usage_errors(capsys):
    assert main(["frobnicate"]) == 2
    assert main(["check", "--family", "quadratic", "--bogus"]) == 2
    assert main([]) == 2
    assert "usage" in capsys.readouterr().err


def test_cli_domain_error(tmp_path):
    assert main(["certify", "--dataset", str(tmp_path / "missing"), "--schedule", "x.json"]) == 1


def test_cli_train_writes_outputs(cli_dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("DRL2O_OUTPUT_DIR", str(tmp_path / "env"))
    rc = main(["train", "--dataset", str(cli_dataset), "--method", "l2o", "--K", "2", "--iterations", "10",
               "--batch-size", "2"])
    assert rc == 0
    d = tmp_path / "env" / "l2o_K2"
    assert (d / "curve.csv").read_text().startswith("# drl2o training curve v1\niteration,lr,objective")
    doc = json.loads((d / "schedule.json").read_text())
    assert len(doc["schedule"]["values"]) == 2
