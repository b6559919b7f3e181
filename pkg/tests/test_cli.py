import csv
import json
import math

import numpy as np
import pytest

from neurosid.cli import ExperimentConfig, deviation_rows, main, parse_duration, progress_rows
from neurosid.data import load_csv
from neurosid.genome import Genome
from neurosid.search import FINISHED, Ledger

TINY = ["--steps", "300", "--max-epochs", "2", "--workers", "0", "--simulated-clock",
        "--n-x", "3"]


def _search(run_dir, *extra):
    return main(["search", "--algorithm", "random", "--space", "xl", "--pool", "4",
                 "--interval", "2s", "--max-individuals", "12", "--run-dir", str(run_dir),
                 *TINY, *extra])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    assert _search(d) == 0
    assert main(["report", "--run-dir", str(d)]) == 0
    return d


def _read(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_parse_duration():
    assert parse_duration("300") == 300.0
    assert parse_duration("2s") == 2.0
    assert parse_duration("500ms") == 0.5
    assert parse_duration("5m") == 300.0
    with pytest.raises(Exception):
        parse_duration("soon")


def test_simulate_is_deterministic(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for out in (a, b):
        assert main(["simulate", "--system", "two_tank", "--steps", "3000", "--seed", "7",
                     "--out", str(out)]) == 0
    assert a.read_bytes() == b.read_bytes()
    traj = load_csv(a)
    assert len(traj) == 3000 and (traj.n_u, traj.n_y) == (2, 2)
    assert json.loads(a.with_suffix(".json").read_text())


def test_simulate_unknown_system_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--system", "pendulum", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == 1
    assert not (tmp_path / "x.csv").exists()


def test_search_without_budget_is_usage_error(tmp_path):
    assert main(["search", "--run-dir", str(tmp_path / "r"), *TINY]) == 1


def test_random_xl_search_ledger(run_dir):
    led = Ledger.load(run_dir / "ledger.jsonl")
    assert len(led) == 12 and sorted(led.individuals) == list(range(12))
    assert all(i.genome.space == "xl" for i in led.individuals.values())
    assert all(i.lineage["op"] == "random" for i in led.individuals.values())
    assert led.max_active() <= 4
    assert {"config.json", "data.csv", "ledger.jsonl"} <= {p.name for p in run_dir.iterdir()}
    ExperimentConfig(**json.loads((run_dir / "config.json").read_text()))


def test_existing_ledger_needs_resume(run_dir):
    before = (run_dir / "ledger.jsonl").read_bytes()
    assert _search(run_dir) == 1
    assert (run_dir / "ledger.jsonl").read_bytes() == before


def test_resume_of_missing_run_is_usage_error(tmp_path):
    assert main(["search", "--resume", "--run-dir", str(tmp_path / "none")]) == 1


def test_aga_search_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert main(["search", "--pool", "3", "--interval", "2", "--max-individuals", "8",
                     "--run-dir", str(tmp_path / name), *TINY]) == 0
    assert (tmp_path / "a/ledger.jsonl").read_bytes() == (tmp_path / "b/ledger.jsonl").read_bytes()


def test_resume_continues_without_duplicate_ids(tmp_path):
    d = tmp_path / "cut"
    assert _search(d) == 0
    full = (d / "ledger.jsonl").read_text()
    lines = full.splitlines(keepends=True)
    # keep roughly half the run plus a torn line
    (d / "ledger.jsonl").write_text("".join(lines[:len(lines) // 2]) + '{"event":"disp')
    assert main(["search", "--resume", "--run-dir", str(d)]) == 0
    resumed = (d / "ledger.jsonl").read_text()
    assert resumed == full
    ids = [json.loads(x)["id"] for x in resumed.splitlines()
           if json.loads(x)["event"] == "dispatch"]
    assert len(ids) == len(set(ids)) == 12


def test_report_deviations_are_centred(run_dir):
    rows = _read(run_dir / "deviations.csv")
    led = Ledger.load(run_dir / "ledger.jsonl")
    finished = [i for i in led.individuals.values() if i.status == FINISHED]
    assert len(rows) == len(finished) > 0
    assert abs(np.mean([float(r["deviation"]) for r in rows])) <= 1e-12
    for r in rows:
        assert float(r["log10_test_mse"]) == pytest.approx(math.log10(float(r["test_open_mse"])))


def test_report_progress_is_non_increasing(run_dir):
    vals = [float(r["best_val_mse"]) for r in _read(run_dir / "progress.csv")]
    assert vals and all(b <= a for a, b in zip(vals, vals[1:]))
    times = [float(r["time"]) for r in _read(run_dir / "progress.csv")]
    assert times == sorted(times)


def test_report_best_trace_matches_ledger(run_dir):
    rows = _read(run_dir / "best_trace.csv")
    best = Ledger.load(run_dir / "ledger.jsonl").best()
    ycols = [c for c in rows[0] if c.startswith("y_")]
    err = [sum((float(r[c]) - float(r["yhat_" + c[2:]])) ** 2 for c in ycols) for r in rows]
    assert np.mean(err) == pytest.approx(best.test_open_mse, rel=1e-9)


def _ledger_with_test_mses(mses):
    led = Ledger()
    g = Genome("standard", (0,) * 15)
    t = 0.0
    for i, m in enumerate(mses):
        led.record({"event": "dispatch", "id": i, "t": t, "tick": 0, "genome": g.to_json(),
                    "seed": i, "lineage": {"op": "random"}})
    for i, m in enumerate(mses):
        t += 1.0
        led.record({"event": "finish", "id": i, "t": t, "tick": 1, "status": FINISHED,
                    "best_val_mse": m, "test_open_mse": m, "epochs_run": 1,
                    "train_status": "converged-early"})
    return led


def test_deviations_of_two_decades():
    rows = deviation_rows(_ledger_with_test_mses([1e-2, 1e-4]))
    assert [r["deviation"] for r in rows] == pytest.approx([1.0, -1.0], abs=1e-12)


def test_progress_rows_track_running_minimum():
    prog = progress_rows(_ledger_with_test_mses([0.3, 0.5, 0.1, 0.2]))
    assert [v for _, v in prog] == [0.3, 0.3, 0.1, 0.1]
