"""Full-batch AdamW training of one model with early stopping on open-loop validation MSE."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SplitSet, WindowedData, make_windows
from .diffcore import NumericError, Tensor, adamw_step, backward, clip_grad_norm
from .loss import (COMPONENT_NAMES, Bounds, LossComponents, LossWeights, arrival_loss,
                   bound_penalty, prediction_loss, smoothing_loss, total_loss)
from .ssm import SSMInstance, open_loop_eval, rollout

__all__ = ["TrainConfig", "TrainReport", "compute_loss", "train", "fitness",
           "METRICS_HEADER", "CONVERGED", "MAX_EPOCHS", "NUMERIC_FAILURE"]

CONVERGED = "converged-early"
MAX_EPOCHS = "max-epochs"
NUMERIC_FAILURE = "numeric-failure"

METRICS_HEADER = ("epoch", "train_total") + COMPONENT_NAMES + ("val_open_mse",)


@dataclass
class TrainConfig:
    lr: float = 2e-3
    max_epochs: int = 1000
    patience: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float = 100.0

    def __post_init__(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    best_val_mse: float
    best_epoch: int
    epochs_run: int
    status: str
    history: list = field(default_factory=list)
    clipped_steps: int = 0
    test_open_mse: float | None = None

    @property
    def val_series(self) -> list[float]:
        return [row["val_open_mse"] for row in self.history]

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("history")
        return d


def compute_loss(instance: SSMInstance, windows: WindowedData, weights: LossWeights,
                 bounds: Bounds | None = None) -> tuple[Tensor, LossComponents]:
    """Windowed multi-objective loss over every training segment at once.

    The arrival cost compares the estimate for segment ``s + 1`` with the last
    rolled state of segment ``s``, averaged over all segments (the final one
    has no successor and contributes zero).
    """
    bounds = bounds or Bounds()
    res = rollout(instance, windows.past, windows.U)
    S = len(windows)
    L_y = prediction_loss(res.predictions, windows.Y)
    if S > 1:
        L_est = arrival_loss(res.x_est[1:], res.states[:-1, -1, :]).scale((S - 1) / S)
    else:
        L_est = Tensor(0.0)
    L_dx = smoothing_loss(res.states)
    L_con_y = bound_penalty(res.predictions, bounds.y_lower, bounds.y_upper)
    if res.input_effects is not None:
        L_con_fu = bound_penalty(res.input_effects, bounds.fu_lower, bounds.fu_upper)
    else:
        L_con_fu = Tensor(0.0)
    L_reg = instance.regularization_loss()
    comps = LossComponents(L_y, L_est, L_dx, L_con_y, L_con_fu, L_reg)
    return total_loss(comps, weights), comps


def _finite(values: dict) -> bool:
    return all(math.isfinite(v) for v in values.values())


def train(instance: SSMInstance, splits: SplitSet, weights: LossWeights | None = None,
          config: TrainConfig | None = None, metrics_path=None,
          bounds: Bounds | None = None) -> TrainReport:
    """Train ``instance`` in place and restore its best-validation parameters.

    One optimizer step per epoch on the whole training split; the open-loop MSE
    on the validation split is measured after each step.  Training stops after
    ``patience`` epochs without a strictly lower validation MSE.
    """
    weights = weights or LossWeights()
    config = config or TrainConfig()
    windows = make_windows(splits.train, instance.spec.horizon, instance.spec.past_window)
    store = instance.store
    best_vals = store.values()
    best_val, best_epoch = math.inf, 0
    status = MAX_EPOCHS
    history = []
    clipped = 0
    epoch = 0
    writer = fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
    try:
        for epoch in range(1, config.max_epochs + 1):
            try:
                with np.errstate(all="ignore"):
                    total, comps = compute_loss(instance, windows, weights, bounds)
                    grads = backward(total, store)
                    grads, norm = clip_grad_norm(grads, config.clip_norm)
                    if not math.isfinite(norm):
                        raise NumericError("non-finite gradient norm")
                    clipped += norm > config.clip_norm
                    adamw_step(store, grads, config.lr, config.beta1, config.beta2,
                               config.eps, config.weight_decay)
            except (NumericError, ArithmeticError, FloatingPointError):
                status = NUMERIC_FAILURE
                epoch -= 1
                break
            row = {"epoch": epoch, "train_total": float(total.data), **comps.values()}
            if not _finite(row):
                status = NUMERIC_FAILURE
                epoch -= 1
                break
            val = open_loop_eval(instance, splits.val.U, splits.val.Y)
            row["val_open_mse"] = val
            history.append(row)
            if writer is not None:
                writer.writerow([repr(row[k]) if k != "epoch" else row[k] for k in METRICS_HEADER])
            if val < best_val:
                best_val, best_epoch = val, epoch
                best_vals = store.values()
            elif epoch - best_epoch >= config.patience:
                status = CONVERGED
                break
    finally:
        if fh is not None:
            fh.close()
    store.assign(best_vals)
    return TrainReport(best_val, best_epoch, epoch, status, history, int(clipped))


def fitness(report: TrainReport) -> float:
    """Lower is better; numeric failures rank last."""
    if report.status == NUMERIC_FAILURE or not math.isfinite(report.best_val_mse):
        return math.inf
    return float(report.best_val_mse)
