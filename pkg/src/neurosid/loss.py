"""Multi-objective training loss: prediction, arrival cost, smoothing, bound penalties, regularization."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .diffcore import NumericError, ShapeError, Tensor

__all__ = ["LossWeights", "Bounds", "LossComponents", "prediction_loss", "arrival_loss",
           "smoothing_loss", "bound_penalty", "total_loss", "COMPONENT_NAMES"]

COMPONENT_NAMES = ("L_y", "L_est", "L_dx", "L_con_y", "L_con_fu", "L_reg")


@dataclass(frozen=True)
class LossWeights:
    Q_y: float = 1.0
    Q_est: float = 0.0
    Q_dx: float = 0.0
    Q_con_y: float = 0.0
    Q_con_fu: float = 0.0
    Q_reg: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and non-negative, got {v}")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f.name) for f in fields(self))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Bounds:
    y_lower: float = -0.2
    y_upper: float = 1.2
    fu_lower: float = -0.02
    fu_upper: float = 0.02

    def __post_init__(self):
        if not (self.y_lower < self.y_upper and self.fu_lower < self.fu_upper):
            raise ValueError("each lower bound must be below its upper bound")


@dataclass
class LossComponents:
    L_y: Tensor
    L_est: Tensor
    L_dx: Tensor
    L_con_y: Tensor
    L_con_fu: Tensor
    L_reg: Tensor

    def as_tuple(self) -> tuple:
        return (self.L_y, self.L_est, self.L_dx, self.L_con_y, self.L_con_fu, self.L_reg)

    def values(self) -> dict[str, float]:
        return {n: float(_t(v).data) for n, v in zip(COMPONENT_NAMES, self.as_tuple())}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _seq(x) -> Tensor:
    """View a sequence as ``(..., N, dims)``; 1-D input is a scalar series."""
    x = _t(x)
    return x.reshape(x.shape + (1,)) if x.ndim == 1 else x


def prediction_loss(y_hat, y) -> Tensor:
    """Mean over steps (and batch) of the squared error norm."""
    y_hat, y = _seq(y_hat), _seq(y)
    if y_hat.shape != y.shape:
        raise ShapeError(f"prediction and target shapes differ: {y_hat.shape} vs {y.shape}")
    return (y_hat - y).square().sum(axis=-1).mean()


def arrival_loss(x_est_next, x_final) -> Tensor:
    """Squared distance between the next estimator output and the final rolled state.

    Batched inputs ``(S, n_x)`` are averaged over rows.
    """
    a, b = _t(x_est_next), _t(x_final)
    if a.shape != b.shape:
        raise ShapeError(f"state shapes differ: {a.shape} vs {b.shape}")
    d = (a - b).square().sum(axis=-1)
    return d.mean() if d.ndim else d


def smoothing_loss(states) -> Tensor:
    x = _seq(states)
    n = x.shape[-2]
    if n < 2:
        return Tensor(0.0)
    diff = x[..., 1:, :] - x[..., :-1, :]
    return diff.square().sum(axis=-1).mean()


def bound_penalty(values, lower: float, upper: float) -> Tensor:
    """Per-step sum over dims of hinge violations, averaged over steps (and batch)."""
    v = _seq(values)
    viol = (-v + lower).maximum(0.0) + (v - upper).maximum(0.0)
    return viol.sum(axis=-1).mean()


def total_loss(components, weights: LossWeights) -> Tensor:
    comps = components.as_tuple() if isinstance(components, LossComponents) else tuple(components)
    if len(comps) != 6:
        raise ValueError("expected six loss components")
    total = Tensor(0.0)
    for q, c in zip(weights.as_tuple(), comps):
        c = _t(c)
        if not np.all(np.isfinite(c.data)):
            raise NumericError("non-finite loss component")
        if q:
            total = total + c.scale(q)
    return total
