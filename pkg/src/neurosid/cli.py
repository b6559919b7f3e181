"""Command-line entry points: ``simulate``, ``search`` and ``report``.

Run directory layout::

    <run_dir>/config.json        experiment configuration
    <run_dir>/data.csv           raw trajectory the search was run on
    <run_dir>/ledger.jsonl       search events
    <run_dir>/<id>/              genome.json, spec.json, metrics.csv, best_weights.json
    <run_dir>/progress.csv       written by ``report``
    <run_dir>/deviations.csv
    <run_dir>/best_trace.csv

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SYSTEMS, DataError, load_csv, prepare, save_csv, simulate, write_json
from .diffcore import load_checkpoint
from .genome import HORIZONS, decode
from .search import Ledger, SearchConfig, TrainingEvaluator, run_search
from .ssm import SSMInstance, SSMSpec, open_loop_predict
from .trainer import TrainConfig

__all__ = ["main", "ExperimentConfig", "parse_duration", "load_splits", "write_report",
           "progress_rows", "deviation_rows", "best_trace_rows"]

log = logging.getLogger("neurosid")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
_UNITS = {"ms": 1e-3, "s": 1.0, "m": 60.0, "h": 3600.0, "": 1.0}


class UsageError(Exception):
    pass


def parse_duration(text: str) -> float:
    """``"300"``, ``"2s"``, ``"500ms"``, ``"5m"`` or ``"1h"`` to seconds."""
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*(ms|s|m|h|)\s*", str(text))
    if not m:
        raise argparse.ArgumentTypeError(f"invalid duration {text!r}")
    value = float(m.group(1)) * _UNITS[m.group(2)]
    if value <= 0:
        raise argparse.ArgumentTypeError("duration must be positive")
    return value


@dataclass
class ExperimentConfig:
    data: dict
    search: dict
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    n_x: int = 20
    fractions: tuple = (1 / 3, 1 / 3, 1 / 3)

    def __post_init__(self):
        self.search_config()
        TrainConfig(**self.train)
        if self.n_x < 1:
            raise ValueError("n_x must be positive")
        self.fractions = tuple(self.fractions)

    def search_config(self) -> SearchConfig:
        return SearchConfig(**self.search)

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train)

    def to_dict(self) -> dict:
        return asdict(self)


def load_splits(run_dir, config: ExperimentConfig | None = None):
    run_dir = Path(run_dir)
    config = config or ExperimentConfig(**json.loads((run_dir / "config.json").read_text()))
    traj = load_csv(run_dir / "data.csv")
    splits, _ = prepare(traj, config.fractions, horizon=1)
    min_len = min(len(splits.train), len(splits.val), len(splits.test))
    if min_len < 2 * max(HORIZONS):
        log.warning("splits of %d samples cannot fit the longest horizons; "
                    "those individuals will fail", min_len)
    return splits


# -- report -------------------------------------------------------------------


def progress_rows(ledger: Ledger) -> list[tuple[float, float]]:
    """(time, best validation MSE so far) after each finished individual."""
    return [(t, b) for t, b in ledger.best_so_far() if math.isfinite(b)]


def _group_keys(genome) -> tuple[str, str]:
    g = genome.values()
    if genome.space == "standard":
        return g["ssm_type"], g["linear_map"]
    return g["model_class"], g["f_x.map"]


def deviation_rows(ledger: Ledger) -> list[dict]:
    """log10 test MSE of each finished individual minus the mean over all of them."""
    done = [i for i in ledger.individuals.values() if i.status == "finished"
            and i.test_open_mse is not None and i.test_open_mse > 0
            and math.isfinite(i.test_open_mse)]
    logs = np.log10([i.test_open_mse for i in done])
    centred = logs - logs.mean() if len(done) else logs
    # a second pass removes the rounding left by the first subtraction
    if len(done):
        centred = centred - centred.mean()
    rows = []
    for ind, lg, dev in zip(done, logs, centred):
        ssm_type, lin_map = _group_keys(ind.genome)
        rows.append({"id": ind.id, "ssm_type": ssm_type, "linear_map": lin_map,
                     "test_open_mse": ind.test_open_mse, "log10_test_mse": float(lg),
                     "deviation": float(dev)})
    return rows


def best_trace_rows(run_dir, ledger: Ledger, splits) -> tuple[list[str], list[list], float]:
    """Open-loop trace of the best individual over the test split (normalized units)."""
    best = ledger.best()
    if best is None:
        raise DataError("no finished individual in the ledger")
    d = Path(run_dir) / f"{best.id:05d}"
    spec = SSMSpec.from_dict(json.loads((d / "spec.json").read_text()))
    inst = SSMInstance(spec, best.seed)
    load_checkpoint(inst.store, d / "best_weights.json")
    test = splits.test
    pred = open_loop_predict(inst, test.U, test.Y)
    target = test.Y[spec.past_window:]
    mse = float(np.mean(np.sum((pred - target) ** 2, axis=-1)))
    header = ["step"] + [f"y_{n}" for n in test.y_names] + [f"yhat_{n}" for n in test.y_names]
    rows = [[spec.past_window + k, *map(float, y), *map(float, p)]
            for k, (y, p) in enumerate(zip(target, pred))]
    return header, rows, mse


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def write_report(run_dir) -> dict:
    """Write progress.csv, deviations.csv and best_trace.csv; returns a summary."""
    run_dir = Path(run_dir)
    ledger = Ledger.load(run_dir / "ledger.jsonl")
    if not ledger.individuals:
        raise DataError(f"ledger in {run_dir} is empty")
    prog = progress_rows(ledger)
    _write_csv(run_dir / "progress.csv", ["time", "best_val_mse"], prog)
    devs = deviation_rows(ledger)
    cols = ["id", "ssm_type", "linear_map", "test_open_mse", "log10_test_mse", "deviation"]
    _write_csv(run_dir / "deviations.csv", cols, [[r[c] for c in cols] for r in devs])
    header, rows, mse = best_trace_rows(run_dir, ledger, load_splits(run_dir))
    _write_csv(run_dir / "best_trace.csv", header, rows)
    best = ledger.best()
    return {"individuals": len(ledger), "finished": len(devs), "best_id": best.id,
            "best_val_mse": best.best_val_mse, "best_test_mse": mse}


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args) -> int:
    traj, meta = simulate(args.system, args.steps, args.seed, args.dt)
    out = Path(args.out or f"{args.system}_seed{args.seed}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_csv(traj, out)
    write_json(meta, out.with_suffix(".json"))
    print(f"wrote {out} ({len(traj)} samples)")
    return EXIT_OK


def _experiment_from_args(args) -> tuple[ExperimentConfig, object]:
    if args.data:
        traj = load_csv(args.data, args.dt)
        data = {"csv": str(args.data)}
    else:
        traj, meta = simulate(args.system, args.steps, args.seed, args.dt)
        data = {"system": args.system, "steps": args.steps, "seed": args.seed, "dt": traj.dt}
    if args.max_individuals is None and args.max_wallclock is None:
        raise UsageError("give --max-individuals and/or --max-wallclock")
    workers = args.workers if args.workers is not None else max(0, (os.cpu_count() or 1) - 1)
    search = dict(pool_size=args.pool, spawn_interval=args.interval,
                  max_individuals=args.max_individuals, max_wallclock=args.max_wallclock,
                  algorithm=args.algorithm, space=args.space, seed=args.seed,
                  simulated_clock=args.simulated_clock, workers=workers)
    train = TrainConfig(max_epochs=args.max_epochs, patience=min(args.patience, args.max_epochs))
    try:
        cfg = ExperimentConfig(data, search, train.to_dict(), args.n_x)
    except (ValueError, KeyError) as exc:
        raise UsageError(str(exc)) from None
    return cfg, traj


def cmd_search(args) -> int:
    run_dir = Path(args.run_dir)
    ledger_path = run_dir / "ledger.jsonl"
    if args.resume:
        if not (run_dir / "config.json").exists():
            raise UsageError(f"{run_dir} holds no search to resume")
        cfg = ExperimentConfig(**json.loads((run_dir / "config.json").read_text()))
    else:
        if ledger_path.exists() and ledger_path.stat().st_size:
            raise UsageError(f"{run_dir} already holds a search; pass --resume to continue it")
        cfg, traj = _experiment_from_args(args)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_csv(traj, run_dir / "data.csv")
        write_json(cfg.to_dict(), run_dir / "config.json")
    splits = load_splits(run_dir, cfg)
    evaluator = TrainingEvaluator(splits, cfg.train_config(), cfg.n_x, str(run_dir))
    ledger = run_search(cfg.search_config(), evaluator, run_dir)
    best = ledger.best()
    msg = f"{len(ledger)} individuals"
    if best is not None:
        msg += f"; best id {best.id} val MSE {best.best_val_mse:.4g}"
    print(msg)
    return EXIT_OK


def cmd_report(args) -> int:
    summary = write_report(args.run_dir)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="neurosid", description="Neural state space model identification and search")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run_dir_default = os.environ.get("NEUROSID_RUN_DIR", "runs/latest")

    s = sub.add_parser("simulate", help="simulate a benchmark system to CSV")
    s.add_argument("--system", required=True, choices=sorted(SYSTEMS))
    s.add_argument("--steps", type=int, default=3000)
    s.add_argument("--dt", type=float)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="CSV path (a .json sidecar is written next to it)")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("search", help="run or resume an architecture search")
    src = r.add_mutually_exclusive_group()
    src.add_argument("--system", choices=sorted(SYSTEMS), default="two_tank")
    src.add_argument("--data", help="trajectory CSV with u_*/y_* columns")
    r.add_argument("--steps", type=int, default=3000)
    r.add_argument("--dt", type=float)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--algorithm", choices=("aga", "random"), default="aga")
    r.add_argument("--space", choices=("standard", "xl"), default="standard")
    r.add_argument("--pool", type=int, default=50)
    r.add_argument("--interval", type=parse_duration, default=300.0,
                   help="spawn tick interval, e.g. 300, 2s, 500ms (epochs with --simulated-clock)")
    r.add_argument("--max-individuals", type=int)
    r.add_argument("--max-wallclock", type=parse_duration)
    r.add_argument("--run-dir", default=run_dir_default)
    r.add_argument("--workers", type=int, help="worker processes; 0 trains inline")
    r.add_argument("--simulated-clock", action="store_true",
                   help="one time unit per training epoch; fully reproducible")
    r.add_argument("--max-epochs", type=int, default=1000)
    r.add_argument("--patience", type=int, default=100)
    r.add_argument("--n-x", type=int, default=20, help="latent state size")
    r.add_argument("--resume", action="store_true", help="continue the search in --run-dir")
    r.set_defaults(func=cmd_search)

    q = sub.add_parser("report", help="write progress, deviation and trace CSVs")
    q.add_argument("--run-dir", default=run_dir_default)
    q.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"neurosid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError, ValueError, KeyError, ArithmeticError) as exc:
        print(f"neurosid: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
