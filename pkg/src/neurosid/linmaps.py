"""Structured linear-map parametrizations.

Each map owns its parameters and exposes

* ``apply(x)``: ``M @ x`` for a vector, ``x @ M.T`` for a batch (last axis is
  the input dimension),
* ``materialize()``: the dense ``rows x cols`` matrix as a :class:`Tensor`,
* ``regularization_loss()``: the map's contribution to the regularization term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .diffcore import ShapeError, Tensor, parameter, stack

__all__ = [
    "LinearMapKind", "LinearMapConfig", "LinearMap", "build_map", "bounded_sigma",
    "UnstructuredMap", "LassoMap", "ButterflyMap", "SoftSVDMap", "HouseholderSVDMap",
    "PerronFrobeniusMap", "MAP_KINDS",
]


class LinearMapKind(str, Enum):
    UNSTRUCTURED = "linear"
    LASSO = "lasso"
    BUTTERFLY = "butterfly"
    SOFTSVD = "softsvd"
    HOUSEHOLDERSVD = "householdersvd"
    PERRONFROBENIUS = "pf"


MAP_KINDS = tuple(k.value for k in LinearMapKind)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinearMapConfig:
    rows: int
    cols: int
    lambda_min: float = 0.0
    lambda_max: float = 1.0
    lasso_weight: float = 0.01

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"map dimensions must be >= 1, got {self.rows}x{self.cols}")
        if not 0.0 <= self.lambda_min <= self.lambda_max:
            raise ConfigError(
                f"need 0 <= lambda_min <= lambda_max, got {self.lambda_min}, {self.lambda_max}")
        if self.lasso_weight < 0:
            raise ConfigError("lasso_weight must be non-negative")


def bounded_sigma(p, lambda_min: float, lambda_max: float):
    """``lambda_max - (lambda_max - lambda_min) * sigmoid(p)``.

    Works on a :class:`Tensor` (differentiable) or anything array-like.
    """
    if isinstance(p, Tensor):
        return (lambda_max - p.sigmoid().scale(lambda_max - lambda_min))
    p = np.asarray(p, dtype=np.float64)
    return lambda_max - (lambda_max - lambda_min) / (1.0 + np.exp(-p))


def _random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class LinearMap:
    kind: LinearMapKind

    def __init__(self, config: LinearMapConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}

    @property
    def rows(self) -> int:
        return self.config.rows

    @property
    def cols(self) -> int:
        return self.config.cols

    def named_parameters(self, prefix: str = ""):
        for k, v in self.params.items():
            yield prefix + k, v

    def _check(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if x.ndim == 0 or x.shape[-1] != self.cols:
            raise ShapeError(f"{self.kind.value} map expects last dim {self.cols}, got {x.shape}")
        return x

    def materialize(self) -> Tensor:
        raise NotImplementedError

    def apply(self, x) -> Tensor:
        x = self._check(x)
        return x @ self.materialize().T

    def regularization_loss(self) -> Tensor:
        return Tensor(0.0)

    def __repr__(self):
        return f"{type(self).__name__}({self.rows}x{self.cols})"


class UnstructuredMap(LinearMap):
    kind = LinearMapKind.UNSTRUCTURED

    def __init__(self, config, rng):
        super().__init__(config)
        bound = 1.0 / math.sqrt(config.cols)
        self.params["W"] = parameter(rng.uniform(-bound, bound, (config.rows, config.cols)))

    def materialize(self):
        return self.params["W"]


class LassoMap(UnstructuredMap):
    kind = LinearMapKind.LASSO

    def regularization_loss(self):
        return self.params["W"].abs().sum().scale(self.config.lasso_weight)


def _pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


class ButterflyMap(LinearMap):
    """Product of log2(n) butterfly factors on a power-of-two padded space.

    Factor ``j`` pairs coordinate ``i`` with ``i XOR 2**j``:
    ``y = a * x + b * x[partner]``, so each factor carries ``2n`` parameters
    and costs O(n).  Inputs are zero-padded up to ``n`` and outputs truncated
    to ``rows``.
    """

    kind = LinearMapKind.BUTTERFLY

    def __init__(self, config, rng=None):
        super().__init__(config)
        self.n = _pow2(max(config.rows, config.cols))
        self.n_factors = max(1, int(math.log2(self.n)))
        idx = np.arange(self.n)
        self.partners = [idx ^ (1 << j) if self.n > 1 else idx for j in range(self.n_factors)]
        for j in range(self.n_factors):
            self.params[f"diag{j}"] = parameter(np.ones(self.n))
            self.params[f"off{j}"] = parameter(np.zeros(self.n))

    def _apply_padded(self, x: Tensor) -> Tensor:
        for j in range(self.n_factors):
            x = x * self.params[f"diag{j}"] + x[..., self.partners[j]] * self.params[f"off{j}"]
        return x

    def apply(self, x):
        x = self._check(x)
        if self.cols < self.n:
            from .diffcore import concat
            pad = Tensor(np.zeros(x.shape[:-1] + (self.n - self.cols,)))
            x = concat([x, pad], axis=-1)
        y = self._apply_padded(x)
        return y[..., :self.rows] if self.rows < self.n else y

    def materialize(self):
        # columns of M are the images of the basis vectors
        return self.apply(Tensor(np.eye(self.cols))).T


class _SVDMap(LinearMap):
    """Shared Sigma handling for the two ``U Sigma V`` factorizations."""

    def __init__(self, config, rng):
        super().__init__(config)
        self.rank = min(config.rows, config.cols)
        self.params["p"] = parameter(rng.standard_normal(self.rank))

    def sigma(self) -> Tensor:
        return bounded_sigma(self.params["p"], self.config.lambda_min, self.config.lambda_max)

    def _u(self) -> Tensor:
        raise NotImplementedError

    def _v(self) -> Tensor:
        raise NotImplementedError

    def materialize(self):
        r = self.rank
        u = self._u()[:, :r] if self.rows > r else self._u()
        v = self._v()[:r, :] if self.cols > r else self._v()
        return (u * self.sigma()) @ v


class SoftSVDMap(_SVDMap):
    """Free ``U`` and ``V`` kept near-orthogonal by a penalty."""

    kind = LinearMapKind.SOFTSVD

    def __init__(self, config, rng):
        super().__init__(config, rng)
        self.params["U"] = parameter(_random_orthogonal(config.rows, rng))
        self.params["V"] = parameter(_random_orthogonal(config.cols, rng))

    def _u(self):
        return self.params["U"]

    def _v(self):
        return self.params["V"]

    def regularization_loss(self):
        U, V = self.params["U"], self.params["V"]
        eu = U.T @ U - np.eye(self.rows)
        ev = V.T @ V - np.eye(self.cols)
        return eu.square().sum() + ev.square().sum()


class HouseholderSVDMap(_SVDMap):
    """``U`` and ``V`` as products of Householder reflections (exactly orthogonal)."""

    kind = LinearMapKind.HOUSEHOLDERSVD

    def __init__(self, config, rng):
        super().__init__(config, rng)
        for i in range(self.rank):
            self.params[f"u{i}"] = parameter(rng.standard_normal(config.rows))
            self.params[f"v{i}"] = parameter(rng.standard_normal(config.cols))

    def _product(self, prefix: str, n: int) -> Tensor:
        return householder_product([self.params[f"{prefix}{i}"] for i in range(self.rank)], n)

    def _u(self):
        return self._product("u", self.rows)

    def _v(self):
        return self._product("v", self.cols)

    def regularization_loss(self):
        return Tensor(0.0)


def _reflector(v: np.ndarray) -> np.ndarray:
    vv = float(v @ v)
    if vv == 0.0:
        return np.eye(len(v))
    return np.eye(len(v)) - (2.0 / vv) * np.outer(v, v)


def householder_product(vectors, n: int) -> Tensor:
    """``H(v_0) H(v_1) ... H(v_{r-1})`` with ``H(v) = I - 2 v v^T / (v^T v)``.

    A zero vector gives the identity reflection (and zero gradient).  The
    product is one graph node with an analytic backward pass.
    """
    vs = [v.data for v in vectors]
    hs = [_reflector(v) for v in vs]
    prefix = [np.eye(n)]
    for h in hs:
        prefix.append(prefix[-1] @ h)

    def _bw(g):
        grads = [None] * len(vs)
        suffix = np.eye(n)
        for i in reversed(range(len(vs))):
            v = vs[i]
            vv = float(v @ v)
            if vv == 0.0:
                grads[i] = np.zeros_like(v)
            else:
                m = prefix[i].T @ g @ suffix.T
                grads[i] = (-2.0 / vv) * ((m + m.T) @ v) + (4.0 * float(v @ m @ v) / vv ** 2) * v
            suffix = hs[i] @ suffix
        return tuple(grads)

    return Tensor._make(prefix[-1], tuple(vectors), _bw)


class PerronFrobeniusMap(LinearMap):
    """Row ``i`` is ``lambda_i * softmax(s_i)`` with ``lambda_i`` in (lambda_min, lambda_max).

    Entries are non-negative and each row sums to ``lambda_i``, so the dominant
    eigenvalue of a square map is at most ``lambda_max``.
    """

    kind = LinearMapKind.PERRONFROBENIUS

    def __init__(self, config, rng):
        super().__init__(config)
        self.params["S"] = parameter(rng.standard_normal((config.rows, config.cols)))
        self.params["m"] = parameter(rng.standard_normal(config.rows))

    def row_scales(self) -> Tensor:
        return bounded_sigma(self.params["m"], self.config.lambda_min, self.config.lambda_max)

    def materialize(self):
        lam = self.row_scales().reshape(self.rows, 1)
        return self.params["S"].softmax(axis=1) * lam


_BUILDERS = {
    LinearMapKind.UNSTRUCTURED: UnstructuredMap,
    LinearMapKind.LASSO: LassoMap,
    LinearMapKind.BUTTERFLY: ButterflyMap,
    LinearMapKind.SOFTSVD: SoftSVDMap,
    LinearMapKind.HOUSEHOLDERSVD: HouseholderSVDMap,
    LinearMapKind.PERRONFROBENIUS: PerronFrobeniusMap,
}


def build_map(kind, config: LinearMapConfig, rng=None) -> LinearMap:
    """Construct a map of ``kind``; ``rng`` is a Generator or an int seed."""
    kind = LinearMapKind(kind)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return _BUILDERS[kind](config, rng)


def stacked_basis_apply(m: LinearMap) -> Tensor:
    """Columns ``apply(m, e_j)`` stacked side by side (basis-probe view of ``m``)."""
    cols = [m.apply(Tensor(np.eye(m.cols)[j])) for j in range(m.cols)]
    return stack(cols, axis=1)
