"""Activations, the learnable add/multiply interpolation, and block components."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .diffcore import ShapeError, Tensor, is_grad_enabled, parameter
from .linmaps import LinearMapConfig, LinearMapKind, build_map

__all__ = [
    "ActivationKind", "BlockKind", "BlockConfig", "Block", "Activation", "activate",
    "softexp", "interp_operator", "build_block", "rnn_forward", "block_forward",
    "ACTIVATIONS", "BLOCK_KINDS",
]

_GELU_C = math.sqrt(2.0 / math.pi)
_SOFTEXP_LOG_FLOOR = 1e-6
_SOFTEXP_EXP_CAP = 20.0


class ActivationKind(str, Enum):
    RELU = "relu"
    GELU = "gelu"
    BLU = "blu"
    SOFTEXP = "softexp"


class BlockKind(str, Enum):
    LM = "lm"
    MLP = "mlp"
    RMLP = "rmlp"
    RNN = "rnn"


ACTIVATIONS = tuple(a.value for a in ActivationKind)
BLOCK_KINDS = tuple(b.value for b in BlockKind)


def _softexp_parts(x: np.ndarray, a: float, partials: bool = True):
    """Value and partials (d/dx, d/dalpha) of the soft exponential."""
    if a == 0.0:
        return (x.copy(), np.ones_like(x), 1.0 + 0.5 * x * x) if partials else (x, None, None)
    if not partials:
        if a < 0:
            return -np.log(np.maximum(1.0 - a * (x + a), _SOFTEXP_LOG_FLOOR)) / a, None, None
        return (np.exp(np.minimum(a * x, _SOFTEXP_EXP_CAP)) - 1.0) / a + a, None, None
    if a < 0:
        raw = 1.0 - a * (x + a)
        live = raw >= _SOFTEXP_LOG_FLOOR
        arg = np.where(live, raw, _SOFTEXP_LOG_FLOOR)
        y = -np.log(arg) / a
        dx = np.where(live, 1.0 / arg, 0.0)
        da = np.log(arg) / (a * a) + np.where(live, (x + 2.0 * a) / (a * arg), 0.0)
        return y, dx, da
    raw = a * x
    live = raw <= _SOFTEXP_EXP_CAP
    e = np.exp(np.minimum(raw, _SOFTEXP_EXP_CAP))
    y = (e - 1.0) / a + a
    dx = np.where(live, e, 0.0)
    da = np.where(live, x * e / a, 0.0) - (e - 1.0) / (a * a) + 1.0
    return y, dx, da


def _pointwise(x: Tensor, param: Tensor | None, y, dx, dp=None) -> Tensor:
    parents = (x,) if param is None else (x, param)

    def _bw(g):
        gx = g * dx
        if param is None:
            return (gx,)
        return gx, np.sum(g * dp).reshape(param.shape)

    return Tensor._make(y, parents, _bw)


def softexp(x: Tensor, alpha: Tensor) -> Tensor:
    """Soft exponential, piecewise in the sign of ``alpha``.

    At ``alpha == 0`` the value is exactly ``x``; the alpha-derivative there is
    ``1 + x**2 / 2``, which matches the limit from either side.  The log
    argument is floored and the exponent capped to keep values finite.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    partials = is_grad_enabled() and (x.requires_grad or alpha.requires_grad)
    y, dx, da = _softexp_parts(x.data, float(alpha.data), partials)
    return _pointwise(x, alpha, y, dx, da)


def _gelu(x: Tensor) -> Tensor:
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    if not (is_grad_enabled() and x.requires_grad):
        return Tensor(0.5 * v * (1.0 + t))
    dx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v * v)
    return _pointwise(x, None, 0.5 * v * (1.0 + t), dx)


def _blu(x: Tensor, beta: Tensor) -> Tensor:
    v, b = x.data, float(beta.data)
    live = -1.0 <= b <= 1.0
    b = min(1.0, max(-1.0, b))
    r = np.sqrt(v * v + 1.0)
    return _pointwise(x, beta, b * (r - 1.0) + v, b * v / r + 1.0,
                      (r - 1.0) if live else np.zeros_like(v))


def activate(kind, param: Tensor | None, x: Tensor) -> Tensor:
    """Apply activation ``kind`` elementwise; ``param`` is beta (BLU) or alpha (SoftExp)."""
    kind = ActivationKind(kind)
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if kind is ActivationKind.RELU:
        return x.relu()
    if kind is ActivationKind.GELU:
        return _gelu(x)
    if param is None:
        param = Tensor(0.0)
    if kind is ActivationKind.BLU:
        return _blu(x, param)
    return softexp(x, param)


def interp_operator(a: Tensor, b: Tensor, alpha: Tensor) -> Tensor:
    """``f_alpha(f_-alpha(a) + f_-alpha(b))`` with ``f`` the soft exponential.

    ``alpha = 0`` is addition; ``alpha = 1`` is multiplication on positive
    operands.  Out-of-domain operands are absorbed by the log-argument floor
    inside :func:`softexp`.
    """
    neg = -alpha
    return softexp(softexp(a, neg) + softexp(b, neg), alpha)


class Activation:
    """One activation instance; parametric kinds own a scalar initialised at 0."""

    def __init__(self, kind):
        self.kind = ActivationKind(kind)
        self.param = parameter(0.0) if self.kind in (ActivationKind.BLU, ActivationKind.SOFTEXP) \
            else None

    def __call__(self, x: Tensor) -> Tensor:
        return activate(self.kind, self.param, x)

    def named_parameters(self, prefix: str = ""):
        if self.param is not None:
            yield prefix + ("beta" if self.kind is ActivationKind.BLU else "alpha"), self.param


@dataclass(frozen=True)
class BlockConfig:
    kind: BlockKind
    in_dim: int
    out_dim: int
    hidden_nodes: int = 32
    layers: int = 1
    map_kind: LinearMapKind = LinearMapKind.UNSTRUCTURED
    activation: ActivationKind = ActivationKind.RELU
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    lasso_weight: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "kind", BlockKind(self.kind))
        object.__setattr__(self, "map_kind", LinearMapKind(self.map_kind))
        object.__setattr__(self, "activation", ActivationKind(self.activation))
        if self.layers < 1 or self.hidden_nodes < 1 or self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"invalid block dimensions: {self}")

    @property
    def is_linear(self) -> bool:
        return self.kind is BlockKind.LM

    def with_dims(self, in_dim: int, out_dim: int) -> "BlockConfig":
        return replace(self, in_dim=in_dim, out_dim=out_dim)

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "in_dim": self.in_dim, "out_dim": self.out_dim,
                "hidden_nodes": self.hidden_nodes, "layers": self.layers,
                "map_kind": self.map_kind.value, "activation": self.activation.value,
                "lambda_min": self.lambda_min, "lambda_max": self.lambda_max,
                "lasso_weight": self.lasso_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "BlockConfig":
        return cls(**d)


def _skip(x: Tensor, out_dim: int) -> Tensor:
    """Fixed identity / zero-pad / truncate projection onto ``out_dim``."""
    n = x.shape[-1]
    if n == out_dim:
        return x
    if n > out_dim:
        return x[..., :out_dim]
    from .diffcore import concat
    return concat([x, Tensor(np.zeros(x.shape[:-1] + (out_dim - n,)))], axis=-1)


class Block:
    """A block component built from linear maps, biases and activations.

    Layout by kind:

    * ``lm``: one bias-free map ``in -> out``.
    * ``mlp``: ``layers`` hidden layers ``act(W x + b)`` then a linear read-out.
    * ``rmlp``: as ``mlp`` with a skip connection around every hidden layer.
    * ``rnn``: ``layers`` stacked Elman cells of width ``hidden_nodes`` and a
      linear read-out of the last layer's final state.
    """

    def __init__(self, config: BlockConfig, rng=None):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.config = config
        self.maps = {}
        self.biases = {}
        self.activations = []
        c = config

        def lm(name, rows, cols):
            mc = LinearMapConfig(rows, cols, c.lambda_min, c.lambda_max, c.lasso_weight)
            self.maps[name] = build_map(c.map_kind, mc, rng)

        if c.kind is BlockKind.LM:
            lm("out", c.out_dim, c.in_dim)
            return
        h = c.hidden_nodes
        if c.kind in (BlockKind.MLP, BlockKind.RMLP):
            dims = [c.in_dim] + [h] * c.layers
            for i in range(c.layers):
                lm(f"hidden{i}", dims[i + 1], dims[i])
                self.biases[f"hidden{i}"] = parameter(np.zeros(dims[i + 1]))
                self.activations.append(Activation(c.activation))
        else:
            for i in range(c.layers):
                lm(f"ih{i}", h, c.in_dim if i == 0 else h)
                lm(f"hh{i}", h, h)
                self.biases[f"cell{i}"] = parameter(np.zeros(h))
                self.activations.append(Activation(c.activation))
        lm("out", c.out_dim, h)
        self.biases["out"] = parameter(np.zeros(c.out_dim))

    @property
    def kind(self) -> BlockKind:
        return self.config.kind

    def named_parameters(self, prefix: str = ""):
        for name, m in self.maps.items():
            yield from m.named_parameters(f"{prefix}{name}.")
        for name, b in self.biases.items():
            yield f"{prefix}{name}.bias", b
        for i, act in enumerate(self.activations):
            yield from act.named_parameters(f"{prefix}act{i}.")

    def regularization_loss(self) -> Tensor:
        total = Tensor(0.0)
        for m in self.maps.values():
            total = total + m.regularization_loss()
        return total

    def _check(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.shape[-1] != self.config.in_dim:
            raise ShapeError(f"block expects last dim {self.config.in_dim}, got {x.shape}")
        return x

    def bind(self) -> "BoundBlock":
        """Materialize every map once, for repeated application within one graph."""
        return BoundBlock(self)

    def __call__(self, x) -> Tensor:
        return self.bind()(x)


class BoundBlock:
    """A block whose weight matrices have been materialized for one forward pass."""

    def __init__(self, block: Block):
        self.block = block
        self.config = block.config
        self.W = {k: m.materialize().T for k, m in block.maps.items()}

    def _layer(self, name: str, x: Tensor) -> Tensor:
        y = x @ self.W[name]
        b = self.block.biases.get(name)
        return y + b if b is not None else y

    def hidden_branch(self, i: int, x: Tensor) -> Tensor:
        return self.block.activations[i](self._layer(f"hidden{i}", x))

    def cell(self, i: int, x: Tensor, h: Tensor | None) -> Tensor:
        pre = x @ self.W[f"ih{i}"]
        if h is not None:
            pre = pre + h @ self.W[f"hh{i}"]
        return self.block.activations[i](pre + self.block.biases[f"cell{i}"])

    def rnn_states(self, sequence) -> Tensor:
        """Final hidden state of the top layer after consuming ``sequence``."""
        if len(sequence) == 0:
            raise ValueError("rnn_forward needs a non-empty sequence")
        seq = list(sequence)
        for i in range(self.config.layers):
            h = None
            out = []
            for x in seq:
                h = self.cell(i, x, h)
                out.append(h)
            seq = out
        return seq[-1]

    def __call__(self, x) -> Tensor:
        x = self.block._check(x)
        kind = self.config.kind
        if kind is BlockKind.LM:
            return x @ self.W["out"]
        if kind is BlockKind.RNN:
            return self._layer("out", self.rnn_states([x]))
        h = self.config.hidden_nodes
        for i in range(self.config.layers):
            y = self.hidden_branch(i, x)
            x = y + _skip(x, h) if kind is BlockKind.RMLP else y
        return self._layer("out", x)

    def sequence(self, sequence) -> Tensor:
        """Consume a sequence (RNN kind) and read out the final state."""
        seq = [self.block._check(s) for s in sequence]
        return self._layer("out", self.rnn_states(seq))


def build_block(config: BlockConfig, rng=None) -> Block:
    return Block(config, rng)


def block_forward(block: Block, x) -> Tensor:
    return block(x)


def rnn_forward(block: Block, sequence) -> Tensor:
    """Final hidden state ``h_T`` of the stacked RNN (before the read-out map)."""
    if block.kind is not BlockKind.RNN:
        raise ValueError("rnn_forward requires an rnn block")
    if len(sequence) == 0:
        raise ValueError("rnn_forward needs a non-empty sequence")
    bound = block.bind()
    return bound.rnn_states([block._check(s) for s in sequence])
