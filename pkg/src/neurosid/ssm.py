"""Neural time-invariant state space models and their open-loop rollout.

A model has an estimator ``f_o`` (past outputs -> initial state), transition
dynamics and an observer ``f_y``.  Dynamics are either a single black-box
network ``f_xu([x, u])`` or the block form ``f_x(x) <op> f_u(u)``.

Arrays are batched as ``(batch, time, channels)``; unbatched ``(time,
channels)`` inputs are accepted and the batch axis is dropped again on the way
out.  Input ``u[k]`` drives the transition from the state that explains
``y[k]`` to the one that explains ``y[k + 1]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import BlockConfig, BlockKind, interp_operator
from .diffcore import ParameterStore, ShapeError, Tensor, concat, no_grad, parameter, stack

__all__ = ["SSMSpec", "SSMInstance", "RolloutResult", "OPERATORS", "MODEL_CLASSES",
           "estimate_state", "step", "rollout", "open_loop_eval", "open_loop_predict"]

OPERATORS = ("add", "mul", "interp")
MODEL_CLASSES = ("blackbox", "block")


@dataclass(frozen=True)
class SSMSpec:
    """Structural description of a model.

    ``components`` maps ``f_o``, ``f_y`` and either ``f_x``/``f_u`` (block
    class) or ``f_xu`` (black-box class) to a :class:`BlockConfig` whose
    dimensions are already resolved.
    """

    model_class: str
    n_x: int
    n_u: int
    n_y: int
    horizon: int
    past_window: int
    components: dict = field(default_factory=dict)
    operator: str = "add"
    ssm_type: str | None = None

    def __post_init__(self):
        if self.model_class not in MODEL_CLASSES:
            raise ValueError(f"unknown model class {self.model_class!r}")
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator {self.operator!r}")
        if min(self.n_x, self.n_u, self.n_y, self.horizon, self.past_window) < 1:
            raise ValueError("dimensions, horizon and past window must be >= 1")
        need = {"f_o", "f_y"} | ({"f_x", "f_u"} if self.model_class == "block" else {"f_xu"})
        missing = need - set(self.components)
        if missing:
            raise ValueError(f"missing components {sorted(missing)}")
        self._check_dims()

    def _check_dims(self):
        c, nx, nu, ny = self.components, self.n_x, self.n_u, self.n_y
        fo = c["f_o"]
        fo_in = ny if fo.kind is BlockKind.RNN else self.past_window * ny
        expected = {"f_o": (fo_in, nx), "f_y": (nx, ny)}
        if self.model_class == "block":
            expected.update(f_x=(nx, nx), f_u=(nu, nx))
        else:
            expected.update(f_xu=(nx + nu, nx))
        for name, (i, o) in expected.items():
            if (c[name].in_dim, c[name].out_dim) != (i, o):
                raise ShapeError(f"{name} must map {i} -> {o}, got "
                                 f"{c[name].in_dim} -> {c[name].out_dim}")

    @classmethod
    def create(cls, model_class: str, n_x: int, n_u: int, n_y: int, horizon: int,
               components: dict, operator: str = "add", past_window: int | None = None,
               ssm_type: str | None = None) -> "SSMSpec":
        """Build a spec from dimension-free component configs (dims are filled in)."""
        past_window = horizon if past_window is None else past_window
        fo = components["f_o"]
        fo_in = n_y if BlockKind(fo.kind) is BlockKind.RNN else past_window * n_y
        dims = {"f_o": (fo_in, n_x), "f_y": (n_x, n_y), "f_x": (n_x, n_x),
                "f_u": (n_u, n_x), "f_xu": (n_x + n_u, n_x)}
        wanted = ("f_o", "f_y") + (("f_x", "f_u") if model_class == "block" else ("f_xu",))
        comps = {k: components[k].with_dims(*dims[k]) for k in wanted}
        return cls(model_class, n_x, n_u, n_y, horizon, past_window, comps, operator, ssm_type)

    def to_dict(self) -> dict:
        return {"model_class": self.model_class, "n_x": self.n_x, "n_u": self.n_u,
                "n_y": self.n_y, "horizon": self.horizon, "past_window": self.past_window,
                "operator": self.operator, "ssm_type": self.ssm_type,
                "components": {k: v.to_dict() for k, v in sorted(self.components.items())}}

    @classmethod
    def from_dict(cls, d: dict) -> "SSMSpec":
        d = dict(d)
        d["components"] = {k: BlockConfig.from_dict(v) for k, v in d["components"].items()}
        return cls(**d)

    def linear_components(self) -> dict[str, bool]:
        return {k: v.is_linear for k, v in self.components.items()}


@dataclass
class RolloutResult:
    predictions: Tensor  # (B, N, n_y)
    states: Tensor       # (B, N, n_x): x_1 .. x_N
    x_est: Tensor        # (B, n_x)
    input_effects: Tensor | None  # (B, N, n_x) f_u outputs, block class only

    def __len__(self):
        return self.predictions.shape[-2]


class SSMInstance:
    """A spec instantiated with parameters drawn from ``seed``."""

    def __init__(self, spec: SSMSpec, seed=None):
        from .blocks import Block

        self.spec = spec
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.blocks = {name: Block(cfg, rng) for name, cfg in sorted(spec.components.items())}
        self.alpha = parameter(0.0) if spec.operator == "interp" else None
        self.store = ParameterStore()
        for name, block in self.blocks.items():
            for pname, p in block.named_parameters(f"{name}."):
                self.store.add(pname, p)
        if self.alpha is not None:
            self.store.add("op.alpha", self.alpha)

    def regularization_loss(self) -> Tensor:
        total = Tensor(0.0)
        for b in self.blocks.values():
            total = total + b.regularization_loss()
        return total

    def bind(self) -> dict:
        return {k: b.bind() for k, b in self.blocks.items()}

    def combine(self, fx: Tensor, fu: Tensor) -> Tensor:
        op = self.spec.operator
        if op == "add":
            return fx + fu
        if op == "mul":
            return fx * fu
        return interp_operator(fx, fu, self.alpha)


def _batched(arr, width: int, what: str) -> tuple[Tensor, bool]:
    t = arr if isinstance(arr, Tensor) else Tensor(np.asarray(arr, dtype=np.float64))
    if t.ndim == 2:
        t, single = t.reshape((1,) + t.shape), True
    elif t.ndim == 3:
        single = False
    else:
        raise ShapeError(f"{what} must be (time, ch) or (batch, time, ch), got {t.shape}")
    if t.shape[-1] != width:
        raise ShapeError(f"{what} must have {width} channels, got {t.shape[-1]}")
    return t, single


def _estimate(instance: SSMInstance, bound: dict, past: Tensor) -> Tensor:
    spec = instance.spec
    if past.shape[1] != spec.past_window:
        raise ShapeError(f"estimator needs {spec.past_window} past samples, got {past.shape[1]}")
    fo = bound["f_o"]
    if fo.config.kind is BlockKind.RNN:
        return fo.sequence([past[:, t, :] for t in range(spec.past_window)])
    return fo(past.reshape(past.shape[0], spec.past_window * spec.n_y))


def estimate_state(instance: SSMInstance, past_outputs) -> Tensor:
    """Initial state from a ``(N_p, n_y)`` (or batched) window of measured outputs."""
    past, single = _batched(past_outputs, instance.spec.n_y, "past window")
    x = _estimate(instance, instance.bind(), past)
    return x[0] if single else x


def _transition(instance: SSMInstance, bound: dict, x: Tensor, u: Tensor,
                fu: Tensor | None = None) -> Tensor:
    if instance.spec.model_class == "block":
        return instance.combine(bound["f_x"](x), bound["f_u"](u) if fu is None else fu)
    return bound["f_xu"](concat([x, u], axis=-1))


def step(instance: SSMInstance, x, u) -> Tensor:
    """One transition ``x_{k+1}`` from state ``x_k`` and input ``u_k``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    u = u if isinstance(u, Tensor) else Tensor(u)
    return _transition(instance, instance.bind(), x, u)


def rollout(instance: SSMInstance, past_outputs, U) -> RolloutResult:
    """Estimate the state from ``past_outputs`` and simulate over the rows of ``U``.

    The first predicted state is ``step(x_est, U[0])``; predictions are
    ``f_y`` of every rolled state.
    """
    spec = instance.spec
    past, single = _batched(past_outputs, spec.n_y, "past window")
    U, single_u = _batched(U, spec.n_u, "inputs")
    if past.shape[0] != U.shape[0]:
        raise ShapeError("past window and inputs have different batch sizes")
    bound = instance.bind()
    x = _estimate(instance, bound, past)
    x_est = x
    n = U.shape[1]
    states = []
    fu_all = None
    if spec.model_class == "block":
        # inputs are known in advance, so f_u runs once over the whole horizon
        fu_all = bound["f_u"](U)
        fx = bound["f_x"]
        for k in range(n):
            x = instance.combine(fx(x), fu_all[:, k, :])
            states.append(x)
    else:
        fxu = bound["f_xu"]
        for k in range(n):
            x = fxu(concat([x, U[:, k, :]], axis=-1))
            states.append(x)
    S = stack(states, axis=1)
    Y = bound["f_y"](S)
    if single and single_u:
        return RolloutResult(Y[0], S[0], x_est[0], None if fu_all is None else fu_all[0])
    return RolloutResult(Y, S, x_est, fu_all)


def open_loop_predict(instance: SSMInstance, U, Y) -> np.ndarray:
    """Single uncorrected rollout over a split, anchored on its first ``N_p`` outputs.

    Returns predictions for ``Y[N_p:]``.
    """
    U = np.asarray(U, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n_p = instance.spec.past_window
    T = len(Y)
    if T <= n_p:
        raise ValueError(f"trajectory of length {T} too short for past window {n_p}")
    if len(U) != T:
        raise ShapeError("U and Y lengths differ")
    with no_grad(), np.errstate(all="ignore"):
        res = rollout(instance, Y[:n_p], U[n_p - 1:T - 1])
    return res.predictions.data


def open_loop_eval(instance: SSMInstance, U, Y) -> float:
    """Open-loop MSE: mean over time of the squared prediction-error norm."""
    Y = np.asarray(Y, dtype=np.float64)
    pred = open_loop_predict(instance, U, Y)
    err = pred - Y[instance.spec.past_window:]
    with np.errstate(all="ignore"):
        val = float(np.mean(np.sum(err * err, axis=-1)))
    return val if np.isfinite(val) else float("inf")
