"""Trajectory simulators, CSV ingestion, normalization, splitting and windowing."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Trajectory", "Normalizer", "SplitSet", "WindowedData", "TwoTankConfig", "CSTRConfig",
    "RandomStepPolicy", "excitation_policy", "simulate_two_tank", "simulate_cstr",
    "simulate", "load_csv", "save_csv", "prepare", "make_windows", "split_trajectory",
    "DataError", "SYSTEMS",
]


class DataError(ValueError):
    """Malformed or insufficient trajectory data."""


@dataclass
class Trajectory:
    U: np.ndarray
    Y: np.ndarray
    dt: float = 1.0
    u_names: list = field(default_factory=list)
    y_names: list = field(default_factory=list)

    def __post_init__(self):
        self.U = np.atleast_2d(np.asarray(self.U, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.U.shape[0] != self.Y.shape[0]:
            raise DataError(f"U has {self.U.shape[0]} rows, Y has {self.Y.shape[0]}")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.Y))):
            raise DataError("trajectory contains non-finite values")
        if not self.u_names:
            self.u_names = [str(i) for i in range(self.n_u)]
        if not self.y_names:
            self.y_names = [str(i) for i in range(self.n_y)]

    def __len__(self):
        return self.U.shape[0]

    @property
    def n_u(self) -> int:
        return self.U.shape[1]

    @property
    def n_y(self) -> int:
        return self.Y.shape[1]

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(self.U[start:stop].copy(), self.Y[start:stop].copy(), self.dt,
                          list(self.u_names), list(self.y_names))


# -- input excitation -------------------------------------------------------


@dataclass
class RandomStepPolicy:
    """Piecewise-constant inputs: uniform levels held for a uniform random number of samples."""

    ranges: list
    hold: tuple = (20, 200)

    def __post_init__(self):
        lo, hi = self.hold
        if lo < 1 or hi < lo:
            raise ValueError(f"hold range must satisfy 1 <= lo <= hi, got {self.hold}")

    def generate(self, T: int, rng=None) -> np.ndarray:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        lo = np.array([r[0] for r in self.ranges], dtype=np.float64)
        hi = np.array([r[1] for r in self.ranges], dtype=np.float64)
        out = np.empty((T, len(self.ranges)))
        t = 0
        while t < T:
            d = int(rng.integers(self.hold[0], self.hold[1] + 1))
            out[t:t + d] = rng.uniform(lo, hi)
            t += d
        return out


def excitation_policy(kind: str = "random-steps", ranges=((0.0, 1.0),), hold=(20, 200)):
    if kind != "random-steps":
        raise ValueError(f"unknown excitation policy {kind!r}")
    return RandomStepPolicy([tuple(r) for r in ranges], tuple(hold))


def _inputs(policy, T: int, n_u: int, rng) -> np.ndarray:
    if hasattr(policy, "generate"):
        U = policy.generate(T, rng)
    else:
        U = np.asarray(policy, dtype=np.float64)
        if U.ndim == 1 and U.shape[0] == n_u:
            U = np.tile(U, (T, 1))
    if U.shape != (T, n_u):
        raise DataError(f"input policy produced shape {U.shape}, expected {(T, n_u)}")
    return U


def _rk4(f, x, u, dt):
    k1 = f(x, u)
    k2 = f(x + 0.5 * dt * k1, u)
    k3 = f(x + 0.5 * dt * k2, u)
    k4 = f(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


# -- two tank ---------------------------------------------------------------


@dataclass
class TwoTankConfig:
    c1: float = 0.08
    c2: float = 0.04
    c3: float = 0.04
    dt: float = 1.0
    h0: tuple = (0.5, 0.5)
    pump_range: tuple = (0.0, 1.0)
    valve_range: tuple = (0.0, 1.0)
    hold: tuple = (5, 25)
    substeps: int = 1         # RK4 steps per sample

    def rhs(self, h, u):
        p = min(max(u[0], 0.0), 1.0)
        v = min(max(u[1], 0.0), 1.0)
        s1 = math.sqrt(max(h[0], 0.0))
        s2 = math.sqrt(max(h[1], 0.0))
        return np.array([self.c1 * (1 - v) * p - self.c2 * s1,
                         self.c1 * v * p + self.c2 * s1 - self.c3 * s2])

    def policy(self) -> RandomStepPolicy:
        return RandomStepPolicy([self.pump_range, self.valve_range], self.hold)


def simulate_two_tank(config: TwoTankConfig | None = None, policy=None, T: int = 3000,
                      dt: float | None = None, rng=None) -> Trajectory:
    """Water levels of two interacting tanks driven by pump speed and valve opening."""
    config = config or TwoTankConfig()
    dt = config.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    U = np.clip(_inputs(policy or config.policy(), T, 2, rng), 0.0, 1.0)
    Y = np.empty((T, 2))
    h = np.array(config.h0, dtype=np.float64)
    for t in range(T):
        Y[t] = h
        for _ in range(config.substeps):
            h = np.maximum(_rk4(config.rhs, h, U[t], dt / config.substeps), 0.0)
    return Trajectory(U, Y, dt, ["pump", "valve"], ["h1", "h2"])


# -- CSTR -------------------------------------------------------------------


@dataclass
class CSTRConfig:
    """Exothermic first-order reaction A -> B in a cooled tank (SI-ish units, minutes)."""

    V: float = 100.0          # L
    rho: float = 1000.0       # g/L
    Cp: float = 0.239         # J/(g K)
    dH: float = -5.0e4        # J/mol
    E_over_R: float = 8750.0  # K
    k0: float = 7.2e10        # 1/min
    UA: float = 5.0e4         # J/(min K)
    Tf: float = 350.0         # K
    dt: float = 0.05          # min
    x0: tuple = (0.877, 324.5)      # low-temperature steady state
    q_range: tuple = (90.0, 110.0)      # L/min
    caf_range: tuple = (0.9, 1.1)       # mol/L
    tc_range: tuple = (295.0, 302.0)    # K
    hold: tuple = (20, 100)
    substeps: int = 1         # RK4 steps per sample

    def rhs(self, x, u):
        ca, temp = x
        q, caf, tc = u
        r = self.k0 * math.exp(-self.E_over_R / temp) * ca
        dca = q / self.V * (caf - ca) - r
        dT = (q / self.V * (self.Tf - temp) + (-self.dH) / (self.rho * self.Cp) * r
              + self.UA / (self.V * self.rho * self.Cp) * (tc - temp))
        return np.array([dca, dT])

    def policy(self) -> RandomStepPolicy:
        return RandomStepPolicy([self.q_range, self.caf_range, self.tc_range], self.hold)


def simulate_cstr(config: CSTRConfig | None = None, policy=None, T: int = 3000,
                  dt: float | None = None, rng=None) -> Trajectory:
    """Concentration and temperature of a non-adiabatic CSTR with inputs (q, C_Af, T_c)."""
    config = config or CSTRConfig()
    dt = config.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    U = _inputs(policy or config.policy(), T, 3, rng)
    Y = np.empty((T, 2))
    x = np.array(config.x0, dtype=np.float64)
    for t in range(T):
        Y[t] = x
        for _ in range(config.substeps):
            x = _rk4(config.rhs, x, U[t], dt / config.substeps)
            x[0] = max(x[0], 0.0)
    return Trajectory(U, Y, dt, ["q", "caf", "tc"], ["ca", "temp"])


SYSTEMS = {
    "two_tank": (TwoTankConfig, simulate_two_tank),
    "cstr": (CSTRConfig, simulate_cstr),
}


def simulate(system: str, steps: int, seed=None, dt: float | None = None,
             config: dict | None = None) -> tuple[Trajectory, dict]:
    """Simulate a named system; returns the trajectory and the config used (as a dict)."""
    if system not in SYSTEMS:
        raise KeyError(f"unknown system {system!r}; choose from {sorted(SYSTEMS)}")
    cfg_cls, sim = SYSTEMS[system]
    cfg = cfg_cls(**(config or {}))
    if dt is not None:
        cfg.dt = dt
    traj = sim(cfg, None, steps, None, np.random.default_rng(seed))
    meta = {"system": system, "steps": steps, "seed": seed, "config": asdict(cfg)}
    return traj, meta


# -- CSV --------------------------------------------------------------------


def save_csv(traj: Trajectory, path) -> None:
    """Write ``# dt=...`` then a ``u_*``/``y_*`` header and one row per sample."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# dt={traj.dt!r}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"u_{n}" for n in traj.u_names] + [f"y_{n}" for n in traj.y_names])
        for u, y in zip(traj.U, traj.Y):
            w.writerow([repr(float(v)) for v in u] + [repr(float(v)) for v in y])


def load_csv(path, dt: float | None = None) -> Trajectory:
    """Read a trajectory whose columns are prefixed ``u_`` (inputs) and ``y_`` (outputs).

    A leading ``# dt=<seconds>`` line sets the sample time; ``dt`` overrides it.
    """
    path = Path(path)
    file_dt = None
    with path.open(newline="") as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            if key.strip() == "dt":
                file_dt = float(val)
        elif line.strip():
            body.append(line)
    if not body:
        raise DataError(f"{path}: missing header row")
    rows = list(csv.reader(body))
    header = [h.strip() for h in rows[0]]
    u_idx = [i for i, h in enumerate(header) if h.startswith("u_")]
    y_idx = [i for i, h in enumerate(header) if h.startswith("y_")]
    if not u_idx or not y_idx:
        raise DataError(f"{path}: need at least one u_ column and one y_ column")
    data = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        for c, cell in enumerate(row):
            try:
                data[r - 2, c] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} at row {r}, "
                                f"column {header[c]!r}") from None
    return Trajectory(data[:, u_idx], data[:, y_idx],
                      dt if dt is not None else (file_dt if file_dt is not None else 1.0),
                      [header[i][2:] for i in u_idx], [header[i][2:] for i in y_idx])


# -- normalization, splitting, windowing --------------------------------------


@dataclass
class Normalizer:
    """Per-channel min-max scaling; constant channels map to 0.5."""

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, X) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        return cls(X.min(axis=0), X.max(axis=0))

    @property
    def _span(self):
        return self.hi - self.lo

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        span = self._span
        flat = span == 0
        out = (X - self.lo) / np.where(flat, 1.0, span)
        return np.where(flat, 0.5, out)

    def inverse_transform(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=np.float64)
        span = self._span
        return np.where(span == 0, self.lo, Z * span + self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Normalizer":
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64))


@dataclass
class SplitSet:
    train: Trajectory
    val: Trajectory
    test: Trajectory
    u_norm: Normalizer
    y_norm: Normalizer

    @property
    def n_u(self) -> int:
        return self.train.n_u

    @property
    def n_y(self) -> int:
        return self.train.n_y


@dataclass
class WindowedData:
    """Consecutive, non-overlapping ``N``-step segments with their ``N_p``-step past windows.

    Segment ``s`` predicts ``Y[t_s : t_s + N]`` from ``Y[t_s - N_p : t_s]`` and
    ``U[t_s - 1 : t_s + N - 1]`` where ``t_s = N_p + s N``.
    """

    past: np.ndarray   # (S, N_p, n_y)
    U: np.ndarray      # (S, N, n_u)
    Y: np.ndarray      # (S, N, n_y)

    def __len__(self):
        return self.past.shape[0]

    @property
    def horizon(self) -> int:
        return self.U.shape[1]


def make_windows(traj: Trajectory, horizon: int, past_window: int | None = None) -> WindowedData:
    n_p = horizon if past_window is None else past_window
    n_seg = (len(traj) - n_p) // horizon
    if n_seg < 1:
        raise DataError(f"trajectory of length {len(traj)} holds no {horizon}-step segment "
                        f"after a {n_p}-step window")
    starts = n_p + horizon * np.arange(n_seg)
    past = np.stack([traj.Y[t - n_p:t] for t in starts])
    U = np.stack([traj.U[t - 1:t - 1 + horizon] for t in starts])
    Y = np.stack([traj.Y[t:t + horizon] for t in starts])
    return WindowedData(past, U, Y)


def split_trajectory(traj: Trajectory, fractions=(1 / 3, 1 / 3, 1 / 3)):
    if len(fractions) != 3 or min(fractions) <= 0:
        raise ValueError("need three positive split fractions")
    total = float(sum(fractions))
    T = len(traj)
    n_train = int(round(T * fractions[0] / total))
    n_val = int(round(T * fractions[1] / total))
    return (traj.slice(0, n_train), traj.slice(n_train, n_train + n_val),
            traj.slice(n_train + n_val, T))


def prepare(traj: Trajectory, fractions=(1 / 3, 1 / 3, 1 / 3),
            horizon: int = 8) -> tuple[SplitSet, WindowedData]:
    """Split contiguously, min-max normalize with train statistics, window the train split."""
    if len(traj) < 3 * 2 * horizon:
        raise DataError(f"trajectory of length {len(traj)} is too short for horizon {horizon}")
    parts = split_trajectory(traj, fractions)
    u_norm = Normalizer.fit(parts[0].U)
    y_norm = Normalizer.fit(parts[0].Y)
    normed = [Trajectory(u_norm.transform(p.U), y_norm.transform(p.Y), p.dt,
                         list(p.u_names), list(p.y_names)) for p in parts]
    for p in normed:
        if len(p) < 2 * horizon:
            raise DataError("a split is shorter than one window pair")
    splits = SplitSet(*normed, u_norm, y_norm)
    return splits, make_windows(splits.train, horizon)


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
