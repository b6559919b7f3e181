"""Asynchronous genetic search and random search over a bounded pool of training jobs.

The orchestrator owns the ledger.  Workers receive ``(genome, seed, id)`` jobs
and return a :class:`JobResult`; they never see the ledger.  At each spawn tick
the number of new individuals equals the number that terminated since the
previous tick, so at most ``pool_size`` jobs are ever active.

Ledger events are appended to ``ledger.jsonl`` one tick at a time; the
``tick`` record closes each group and is the unit of recovery when a run is
resumed.

With ``simulated_clock`` a job's duration is its number of training epochs
(one time unit per epoch), which makes a whole run reproducible
byte-for-byte from the seed.
"""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import Future, ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SplitSet, write_json
from .diffcore import save_checkpoint
from .genome import Genome, crossover, decode, get_space, mutate, random_genome
from .ssm import SSMInstance, open_loop_eval
from .trainer import TrainConfig, fitness, train

__all__ = [
    "SearchConfig", "Individual", "JobResult", "Ledger", "run_search", "next_operator",
    "select_parents", "birth_probability", "anneal", "crossover_score", "individual_seed",
    "RANDOM", "MUTATION", "CROSSOVER", "TrainingEvaluator",
]

log = logging.getLogger(__name__)

RANDOM, MUTATION, CROSSOVER = "random", "mutation", "crossover"
PENDING, TRAINING, FINISHED, FAILED = "pending", "training", "finished", "failed"


@dataclass
class SearchConfig:
    pool_size: int = 50
    spawn_interval: float = 300.0
    p_mut: float = 0.2
    p_birth0: float = 1.0
    anneal_k: float = 0.5
    max_individuals: int | None = None
    max_wallclock: float | None = None
    algorithm: str = "aga"
    space: str = "standard"
    seed: int = 0
    simulated_clock: bool = False
    fitness_transform: str = "reciprocal"
    workers: int = 0

    def __post_init__(self):
        if self.algorithm not in ("aga", "random"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        get_space(self.space)
        if not 0.0 <= self.p_mut <= 1.0:
            raise ValueError("p_mut must lie in [0, 1]")
        if not 0.0 < self.anneal_k < 1.0:
            raise ValueError("annealing rate must satisfy 0 < k < 1")
        if not 0.0 <= self.p_birth0 <= 1.0:
            raise ValueError("p_birth0 must lie in [0, 1]")
        if self.pool_size < 1 or self.spawn_interval <= 0:
            raise ValueError("pool_size and spawn_interval must be positive")
        if self.max_individuals is None and self.max_wallclock is None:
            raise ValueError("set max_individuals and/or max_wallclock")
        if self.fitness_transform not in ("reciprocal", "raw"):
            raise ValueError("fitness_transform must be 'reciprocal' or 'raw'")

    @property
    def p_cross(self) -> float:
        return 1.0 - self.p_mut

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class JobResult:
    best_val_mse: float
    test_open_mse: float | None = None
    epochs_run: int = 1
    train_status: str = "max-epochs"
    failed: bool = False


@dataclass
class Individual:
    id: int
    genome: Genome
    seed: int
    lineage: dict
    status: str = PENDING
    best_val_mse: float | None = None
    test_open_mse: float | None = None
    epochs_run: int | None = None
    dispatch_time: float = 0.0
    finish_time: float | None = None

    @property
    def fitness(self) -> float:
        if self.status != FINISHED or self.best_val_mse is None:
            return math.inf
        return self.best_val_mse


# -- operators ----------------------------------------------------------------


def anneal(p_birth: float, k: float) -> float:
    return k * p_birth


def birth_probability(iteration: int, p0: float = 1.0, k: float = 0.5) -> float:
    """``p0 * k**iteration``, built by repeated annealing."""
    p = p0
    for _ in range(iteration):
        p = anneal(p, k)
    return p


def next_operator(p_birth: float, rng: np.random.Generator, p_mut: float = 0.2) -> str:
    """Random birth with probability ``p_birth``, else mutation (``p_mut``) or crossover."""
    if rng.random() < p_birth:
        return RANDOM
    return MUTATION if rng.random() < p_mut else CROSSOVER


def select_parents(individuals, rng: np.random.Generator, n: int = 1) -> list:
    """Uniform draw from the better half of finished individuals.

    Ranking is by best validation MSE, ties broken by the earlier id.  Two
    distinct parents are returned for ``n == 2`` when the top half allows it.
    """
    done = sorted((i for i in individuals if i.status == FINISHED and math.isfinite(i.fitness)),
                  key=lambda i: (i.fitness, i.id))
    if not done:
        return []
    top = done[:max(1, math.ceil(len(done) / 2))]
    if n >= 2 and len(top) >= 2:
        a, b = rng.choice(len(top), size=2, replace=False)
        return [top[int(a)], top[int(b)]]
    return [top[int(rng.integers(len(top)))]]


def crossover_score(mse: float, transform: str = "reciprocal") -> float:
    """Turn a validation MSE into a higher-is-better crossover weight."""
    if transform == "raw":
        return float(mse)
    return 0.0 if not math.isfinite(mse) else 1.0 / (1e-12 + mse)


def individual_seed(base_seed: int, ind_id: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(ind_id)]).generate_state(1)[0])


def _tick_rng(base_seed: int, tick: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(tick), 1]))


# -- ledger -------------------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class Ledger:
    """Append-only event log plus the individuals it describes."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.events: list[dict] = []
        self.individuals: dict[int, Individual] = {}

    def __len__(self):
        return len(self.individuals)

    def _apply(self, ev: dict) -> None:
        kind = ev["event"]
        if kind == "dispatch":
            if ev["id"] in self.individuals:
                raise ValueError(f"duplicate individual id {ev['id']}")
            self.individuals[ev["id"]] = Individual(
                ev["id"], Genome.from_json(ev["genome"]), ev["seed"], ev["lineage"],
                TRAINING, dispatch_time=ev["t"])
        elif kind == "finish":
            ind = self.individuals[ev["id"]]
            ind.status = ev["status"]
            ind.best_val_mse = ev["best_val_mse"]
            ind.test_open_mse = ev.get("test_open_mse")
            ind.epochs_run = ev.get("epochs_run")
            ind.finish_time = ev["t"]
        self.events.append(ev)

    def record(self, ev: dict) -> None:
        """Apply one event in memory; :meth:`write` persists it."""
        if self.events and ev["t"] < self.events[-1]["t"]:
            raise ValueError("ledger timestamps must be monotone")
        self._apply(ev)

    def write(self, group: list[dict]) -> None:
        if self.path is not None:
            with self.path.open("a") as fh:
                fh.write("".join(_dumps(ev) + "\n" for ev in group))
                fh.flush()
                os.fsync(fh.fileno())

    def append(self, group: list[dict]) -> None:
        """Record one tick's events; written to disk as a single block."""
        for ev in group:
            self.record(ev)
        self.write(group)

    @classmethod
    def load(cls, path, repair: bool = False) -> "Ledger":
        """Read a ledger, keeping only complete tick groups.

        With ``repair`` the file is truncated to that prefix so appends can
        continue cleanly.
        """
        path = Path(path)
        raw = path.read_text().splitlines(keepends=True) if path.exists() else []
        events, keep_chars, pending, pending_chars = [], 0, [], 0
        for line in raw:
            try:
                ev = json.loads(line)
            except json.JSONDecodeError:
                break
            if not line.endswith("\n"):
                break
            pending.append(ev)
            pending_chars += len(line)
            if ev["event"] == "tick":
                events.extend(pending)
                keep_chars += pending_chars
                pending, pending_chars = [], 0
        if repair and path.exists():
            text = "".join(raw)[:keep_chars]
            path.write_text(text)
        ledger = cls(path)
        for ev in events:
            ledger._apply(ev)
        return ledger

    # views

    def finished(self) -> list[Individual]:
        return [i for i in self.individuals.values() if i.status in (FINISHED, FAILED)]

    def ticks(self) -> list[dict]:
        return [e for e in self.events if e["event"] == "tick"]

    def best_so_far(self) -> list[tuple[float, float]]:
        """(time, best validation MSE so far) after every finish event."""
        best, out = math.inf, []
        for ev in self.events:
            if ev["event"] == "finish":
                v = ev["best_val_mse"]
                if ev["status"] == FINISHED and v is not None and v < best:
                    best = v
                out.append((ev["t"], best))
        return out

    def best(self) -> Individual | None:
        done = [i for i in self.individuals.values() if i.status == FINISHED
                and math.isfinite(i.fitness)]
        return min(done, key=lambda i: (i.fitness, i.id)) if done else None

    def max_active(self) -> int:
        active = peak = 0
        for ev in self.events:
            if ev["event"] == "dispatch":
                active += 1
                peak = max(peak, active)
            elif ev["event"] == "finish":
                active -= 1
        return peak


# -- orchestration --------------------------------------------------------------


class _InlineExecutor:
    """Runs jobs synchronously at submission; same interface as a pool."""

    def submit(self, fn, *args):
        fut = Future()
        try:
            fut.set_result(fn(*args))
        except Exception as exc:  # a crashing job becomes a failed individual
            fut.set_exception(exc)
        return fut

    def shutdown(self, wait=True, cancel_futures=False):
        pass


def _result_of(fut: Future) -> JobResult:
    try:
        res = fut.result()
    except Exception as exc:
        log.warning("job crashed: %s", exc)
        return JobResult(math.inf, None, 1, "crashed", failed=True)
    if not math.isfinite(res.best_val_mse):
        res.failed = True
    return res


class _Search:
    def __init__(self, config: SearchConfig, evaluate: Callable, ledger: Ledger):
        self.cfg = config
        self.evaluate = evaluate
        self.ledger = ledger
        self.space = get_space(config.space)
        self.futures: dict[int, Future] = {}
        self.results: dict[int, JobResult] = {}
        if config.workers > 0:
            self.executor = ProcessPoolExecutor(max_workers=config.workers)
        else:
            self.executor = _InlineExecutor()
        self._t0 = time.monotonic()
        self._t_offset = 0.0

    # time

    def now(self, tick: int) -> float:
        if self.cfg.simulated_clock:
            return float(tick * self.cfg.spawn_interval)
        return round(self._t_offset + time.monotonic() - self._t0, 6)

    def _submit(self, ind: Individual) -> None:
        self.futures[ind.id] = self.executor.submit(self.evaluate, ind.genome, ind.seed, ind.id)

    def _budget_left(self, now: float) -> int:
        n = len(self.ledger.individuals)
        left = math.inf if self.cfg.max_individuals is None else self.cfg.max_individuals - n
        if self.cfg.max_wallclock is not None and now >= self.cfg.max_wallclock:
            left = 0
        return int(max(0, min(left, 1 << 30)))

    def _new_individual(self, ind_id: int, rng: np.random.Generator, p_birth: float | None):
        cfg = self.cfg
        op = RANDOM
        if cfg.algorithm == "aga" and p_birth is not None:
            op = next_operator(p_birth, rng, cfg.p_mut)
        parents = []
        if op != RANDOM:
            parents = select_parents(self.ledger.individuals.values(), rng,
                                     2 if op == CROSSOVER else 1)
            if not parents:
                op = RANDOM
        if op == RANDOM:
            genome, lineage = random_genome(self.space, rng), {"op": RANDOM}
        elif op == MUTATION or len(parents) == 1:
            genome = mutate(parents[0].genome, rng)
            lineage = {"op": MUTATION, "parents": [parents[0].id]}
        else:
            a, b = parents
            fa = crossover_score(a.fitness, cfg.fitness_transform)
            fb = crossover_score(b.fitness, cfg.fitness_transform)
            genome = crossover(a.genome, b.genome, fa, fb, rng)
            lineage = {"op": CROSSOVER, "parents": [a.id, b.id]}
        return {"event": "dispatch", "id": ind_id, "genome": genome.to_json(),
                "seed": individual_seed(cfg.seed, ind_id), "lineage": lineage}

    def _spawn(self, tick: int, n: int, now: float) -> list[dict]:
        rng = _tick_rng(self.cfg.seed, tick)
        p_birth = None if tick == 0 else birth_probability(
            tick - 1, self.cfg.p_birth0, self.cfg.anneal_k)
        next_id = max(self.ledger.individuals, default=-1) + 1
        group = []
        for j in range(n):
            ev = self._new_individual(next_id + j, rng, p_birth)
            ev.update(t=now, tick=tick)
            group.append(ev)
        return group

    def _active(self) -> list[Individual]:
        return [i for i in self.ledger.individuals.values() if i.status == TRAINING]

    def _collect(self, tick: int, now: float) -> list[dict]:
        """Finish events for jobs that terminated by this tick, in completion order."""
        done = []
        for ind in self._active():
            fut = self.futures[ind.id]
            if self.cfg.simulated_clock:
                res = self.results.get(ind.id) or _result_of(fut)
                self.results[ind.id] = res
                t_fin = ind.dispatch_time + max(1, int(res.epochs_run))
                if t_fin <= now:
                    done.append((t_fin, ind.id, res))
            elif fut.done():
                done.append((now, ind.id, _result_of(fut)))
        done.sort(key=lambda d: (d[0], d[1]))
        return [{"event": "finish", "t": float(t), "tick": tick, "id": i,
                 "status": FAILED if r.failed else FINISHED,
                 "best_val_mse": r.best_val_mse if math.isfinite(r.best_val_mse) else None,
                 "test_open_mse": r.test_open_mse, "epochs_run": int(r.epochs_run),
                 "train_status": r.train_status} for t, i, r in done]

    def run(self, max_ticks: int | None = None) -> Ledger:
        ledger, cfg = self.ledger, self.cfg
        ticks = ledger.ticks()
        try:
            if not ticks:
                n = min(cfg.pool_size, self._budget_left(0.0))
                group = self._spawn(0, n, self.now(0))
                group.append({"event": "tick", "t": self.now(0), "tick": 0, "p_birth": None,
                              "finished_since_last": 0, "spawned": n, "active": n})
                ledger.append(group)
                tick = 0
            else:
                tick = ticks[-1]["tick"]
                self._t_offset = ticks[-1]["t"]
            for ind in self._active():
                self._submit(ind)
            while self._active():
                if max_ticks is not None and tick >= max_ticks:
                    break
                tick += 1
                if not cfg.simulated_clock:
                    delay = self._t0 + tick * cfg.spawn_interval - self._t_offset - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                now = self.now(tick)
                finishes = self._collect(tick, now)
                # parent selection at this tick already sees these finishes
                for ev in finishes:
                    ledger.record(ev)
                active = len(self._active())
                n_new = min(len(finishes), cfg.pool_size - active, self._budget_left(now))
                spawn = self._spawn(tick, n_new, now)
                commit = {"event": "tick", "t": now, "tick": tick,
                          "p_birth": birth_probability(tick - 1, cfg.p_birth0, cfg.anneal_k),
                          "finished_since_last": len(finishes), "spawned": n_new,
                          "active": active + n_new}
                for ev in spawn + [commit]:
                    ledger.record(ev)
                ledger.write(finishes + spawn + [commit])
                for ev in finishes:
                    self.futures.pop(ev["id"], None)
                    self.results.pop(ev["id"], None)
                for ev in spawn:
                    self._submit(ledger.individuals[ev["id"]])
        finally:
            self.executor.shutdown(wait=True, cancel_futures=True)
        return ledger


def run_search(config: SearchConfig, evaluate: Callable, run_dir=None,
               max_ticks: int | None = None) -> Ledger:
    """Run (or resume) a search; ``evaluate(genome, seed, id) -> JobResult``.

    With a ``run_dir`` the ledger lives in ``run_dir/ledger.jsonl``; an existing
    ledger is resumed from its last complete tick, re-dispatching individuals
    that were still training.  ``max_ticks`` stops early (used to interrupt runs).
    """
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        ledger = Ledger.load(run_dir / "ledger.jsonl", repair=True)
    else:
        ledger = Ledger()
    return _Search(config, evaluate, ledger).run(max_ticks)


@dataclass
class TrainingEvaluator:
    """Job function that decodes a genome, trains it and scores it on the test split.

    With ``out_dir`` each individual gets ``<out_dir>/<id>/`` holding
    ``genome.json``, ``spec.json``, ``metrics.csv`` and ``best_weights.json``.
    """

    splits: SplitSet
    train_config: TrainConfig
    n_x: int = 20
    out_dir: str | None = None

    def __call__(self, genome: Genome, seed: int, ind_id: int) -> JobResult:
        dec = decode(genome, self.splits.n_u, self.splits.n_y, self.n_x)
        inst = SSMInstance(dec.spec, seed)
        metrics = None
        if self.out_dir is not None:
            d = Path(self.out_dir) / f"{ind_id:05d}"
            d.mkdir(parents=True, exist_ok=True)
            write_json(genome.to_json(), d / "genome.json")
            write_json(dec.spec.to_dict(), d / "spec.json")
            metrics = d / "metrics.csv"
        report = train(inst, self.splits, dec.weights, self.train_config, metrics)
        score = fitness(report)
        test = None
        if math.isfinite(score):
            test = open_loop_eval(inst, self.splits.test.U, self.splits.test.Y)
            if self.out_dir is not None:
                save_checkpoint(inst.store, Path(self.out_dir) / f"{ind_id:05d}" / "best_weights.json")
        return JobResult(score, test, max(1, report.epochs_run), report.status,
                         failed=not math.isfinite(score))
