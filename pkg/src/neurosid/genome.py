"""Design spaces, genomes and the random / mutation / crossover operators.

A genome is a fixed-length vector of indices, one per gene.  Every gene is an
ordered ring of values, so a mutation step past either end wraps around.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocks import ACTIVATIONS, BlockConfig
from .linmaps import MAP_KINDS
from .loss import LossWeights
from .ssm import SSMSpec

__all__ = [
    "Gene", "DesignSpace", "Genome", "STANDARD", "XL", "SPACES", "SSM_TYPES",
    "SSM_TYPE_LINEARITY", "get_space", "random_genome", "mutate", "step_gene", "crossover",
    "decode", "cardinality", "DecodedGenome",
]

LAYERS = (1, 2, 3, 4, 5)
NODES = (4, 8, 16, 32)
HORIZONS = (4, 8, 16, 32, 64)
Q_VALUES = (0.0, 0.1, 1.0, 10.0)
LAMBDA_MIN = (0.0, 0.1, 0.3, 0.5)
LAMBDA_MAX = (0.8, 0.9, 1.0, 1.1, 1.2)
NONLINEAR_KINDS = ("mlp", "rmlp", "rnn")
BLOCK_KINDS = ("lm", "mlp", "rmlp", "rnn")
SSM_TYPES = ("linear", "hammerstein", "hammerstein_wiener", "block_nonlinear", "blackbox")
Q_GENES = ("Q_con_fu", "Q_con_y", "Q_reg", "Q_dx", "Q_est")

# which of f_x, f_u, f_y are linear maps for each block-oriented SSM type
SSM_TYPE_LINEARITY = {
    "block_nonlinear": {"f_x": False, "f_u": False, "f_y": True},
    "hammerstein_wiener": {"f_x": True, "f_u": False, "f_y": False},
    "hammerstein": {"f_x": True, "f_u": False, "f_y": True},
    "linear": {"f_x": True, "f_u": True, "f_y": True},
}


@dataclass(frozen=True)
class Gene:
    name: str
    values: tuple

    def __post_init__(self):
        if not self.values:
            raise ValueError(f"gene {self.name!r} has no values")
        if len(set(self.values)) != len(self.values):
            raise ValueError(f"gene {self.name!r} has repeated values")

    def __len__(self):
        return len(self.values)

    def index(self, value) -> int:
        for i, v in enumerate(self.values):
            if v == value or (isinstance(v, float) and isinstance(value, (int, float))
                              and math.isclose(v, value)):
                return i
        raise ValueError(f"{value!r} is not a value of gene {self.name!r}: {self.values}")


@dataclass(frozen=True)
class DesignSpace:
    name: str
    genes: tuple

    def __len__(self):
        return len(self.genes)

    @property
    def names(self) -> tuple:
        return tuple(g.name for g in self.genes)

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"space {self.name!r} has no gene {name!r}") from None

    def gene(self, name: str) -> Gene:
        return self.genes[self.position(name)]

    def cardinality(self) -> int:
        return math.prod(len(g) for g in self.genes)


def _component_genes(prefix: str) -> list:
    return [Gene(f"{prefix}.kind", BLOCK_KINDS), Gene(f"{prefix}.map", MAP_KINDS),
            Gene(f"{prefix}.activation", ACTIVATIONS), Gene(f"{prefix}.layers", LAYERS),
            Gene(f"{prefix}.nodes", NODES), Gene(f"{prefix}.lambda_min", LAMBDA_MIN),
            Gene(f"{prefix}.lambda_max", LAMBDA_MAX)]


STANDARD = DesignSpace("standard", (
    Gene("ssm_type", SSM_TYPES),
    Gene("estimator", BLOCK_KINDS),
    Gene("linear_map", MAP_KINDS),
    Gene("nonlinear_map", NONLINEAR_KINDS),
    Gene("activation", ACTIVATIONS),
    Gene("layers", LAYERS),
    Gene("nodes", NODES),
    Gene("lambda_min", LAMBDA_MIN),
    Gene("lambda_max", LAMBDA_MAX),
    Gene("horizon", HORIZONS),
    *(Gene(q, Q_VALUES) for q in Q_GENES),
))

XL = DesignSpace("xl", (
    Gene("model_class", ("blackbox", "block")),
    *_component_genes("f_x"),
    *_component_genes("f_u"),
    *_component_genes("f_y"),
    *_component_genes("f_o"),
    Gene("operator", ("add", "mul", "interp")),
    Gene("horizon", HORIZONS),
    *(Gene(q, Q_VALUES) for q in Q_GENES),
))

SPACES = {"standard": STANDARD, "xl": XL}


def get_space(space) -> DesignSpace:
    if isinstance(space, DesignSpace):
        return space
    try:
        return SPACES[space]
    except KeyError:
        raise KeyError(f"unknown design space {space!r}; choose from {sorted(SPACES)}") from None


@dataclass(frozen=True)
class Genome:
    space: str
    indices: tuple

    def __post_init__(self):
        sp = get_space(self.space)
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if len(self.indices) != len(sp):
            raise ValueError(f"{self.space} genome needs {len(sp)} genes, got {len(self.indices)}")
        for g, i in zip(sp.genes, self.indices):
            if not 0 <= i < len(g):
                raise ValueError(f"index {i} out of range for gene {g.name!r}")

    @property
    def design_space(self) -> DesignSpace:
        return get_space(self.space)

    def __getitem__(self, name: str):
        sp = self.design_space
        pos = sp.position(name)
        return sp.genes[pos].values[self.indices[pos]]

    def values(self) -> dict:
        sp = self.design_space
        return {g.name: g.values[i] for g, i in zip(sp.genes, self.indices)}

    def to_json(self) -> dict:
        return {"space": self.space, "genes": self.values()}

    @classmethod
    def from_values(cls, space, values: dict, base: "Genome | None" = None) -> "Genome":
        """Genome with the given gene values; unspecified genes come from ``base`` (or index 0)."""
        sp = get_space(space)
        idx = list(base.indices) if base is not None else [0] * len(sp)
        for name, v in values.items():
            pos = sp.position(name)
            idx[pos] = sp.genes[pos].index(v)
        return cls(sp.name, tuple(idx))

    @classmethod
    def from_json(cls, d: dict) -> "Genome":
        return cls.from_values(d["space"], d["genes"])

    def hamming(self, other: "Genome") -> int:
        return sum(a != b for a, b in zip(self.indices, other.indices))


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def random_genome(space, rng=None) -> Genome:
    sp = get_space(space)
    rng = _rng(rng)
    return Genome(sp.name, tuple(int(rng.integers(len(g))) for g in sp.genes))


def step_gene(g: Genome, name: str, direction: int) -> Genome:
    """Move gene ``name`` one position up (+1) or down (-1) its ring."""
    sp = g.design_space
    pos = sp.position(name)
    idx = list(g.indices)
    idx[pos] = (idx[pos] + direction) % len(sp.genes[pos])
    return Genome(g.space, tuple(idx))


def mutate(g: Genome, rng=None) -> Genome:
    """Pick one gene uniformly and step it to the neighbouring value (wrapping)."""
    rng = _rng(rng)
    sp = g.design_space
    pos = int(rng.integers(len(sp)))
    direction = 1 if rng.random() < 0.5 else -1
    return step_gene(g, sp.genes[pos].name, direction)


def crossover(a: Genome, b: Genome, fit_a: float, fit_b: float, rng=None) -> Genome:
    """Per-gene copy from ``a`` with probability ``fit_a / (fit_a + fit_b)``, else from ``b``.

    Fitness values here are scores where higher is better.
    """
    if a.space != b.space:
        raise ValueError(f"cannot cross {a.space} with {b.space} genomes")
    if fit_a < 0 or fit_b < 0 or not (math.isfinite(fit_a) and math.isfinite(fit_b)):
        raise ValueError("crossover fitness scores must be finite and non-negative")
    total = fit_a + fit_b
    p = 0.5 if total == 0 else fit_a / total
    rng = _rng(rng)
    pick = rng.random(len(a.indices)) < p
    return Genome(a.space, tuple(x if t else y for t, x, y in zip(pick, a.indices, b.indices)))


def cardinality(space) -> int:
    return get_space(space).cardinality()


@dataclass(frozen=True)
class DecodedGenome:
    spec: SSMSpec
    weights: LossWeights
    train_overrides: dict

    def __iter__(self):
        return iter((self.spec, self.weights, self.train_overrides))


def _weights(g: Genome, has_fu: bool) -> LossWeights:
    return LossWeights(Q_y=1.0, Q_est=g["Q_est"], Q_dx=g["Q_dx"], Q_con_y=g["Q_con_y"],
                       Q_con_fu=g["Q_con_fu"] if has_fu else 0.0, Q_reg=g["Q_reg"])


def _decode_standard(g: Genome, n_u: int, n_y: int, n_x: int) -> DecodedGenome:
    ssm_type = g["ssm_type"]
    shared = dict(map_kind=g["linear_map"], lambda_min=g["lambda_min"],
                  lambda_max=g["lambda_max"], lasso_weight=1.0)
    linear = BlockConfig("lm", 1, 1, **shared)
    nonlinear = BlockConfig(g["nonlinear_map"], 1, 1, hidden_nodes=g["nodes"],
                            layers=g["layers"], activation=g["activation"], **shared)
    est_kind = "lm" if ssm_type == "linear" else g["estimator"]
    estimator = BlockConfig(est_kind, 1, 1, hidden_nodes=g["nodes"], layers=g["layers"],
                            activation=g["activation"], **shared)
    comps = {"f_o": estimator}
    if ssm_type == "blackbox":
        comps.update(f_xu=nonlinear, f_y=nonlinear)
        model_class = "blackbox"
    else:
        for name, is_lin in SSM_TYPE_LINEARITY[ssm_type].items():
            comps[name] = linear if is_lin else nonlinear
        model_class = "block"
    N = g["horizon"]
    spec = SSMSpec.create(model_class, n_x, n_u, n_y, N, comps, "add", ssm_type=ssm_type)
    return DecodedGenome(spec, _weights(g, model_class == "block"), {"horizon": N})


def _decode_xl(g: Genome, n_u: int, n_y: int, n_x: int) -> DecodedGenome:
    def comp(prefix):
        lo, hi = g[f"{prefix}.lambda_min"], g[f"{prefix}.lambda_max"]
        return BlockConfig(g[f"{prefix}.kind"], 1, 1, hidden_nodes=g[f"{prefix}.nodes"],
                           layers=g[f"{prefix}.layers"], map_kind=g[f"{prefix}.map"],
                           activation=g[f"{prefix}.activation"], lambda_min=lo,
                           lambda_max=hi, lasso_weight=1.0)

    model_class = g["model_class"]
    comps = {"f_o": comp("f_o"), "f_y": comp("f_y")}
    if model_class == "block":
        comps.update(f_x=comp("f_x"), f_u=comp("f_u"))
        operator = g["operator"]
    else:
        comps["f_xu"] = comp("f_x")
        operator = "add"
    N = g["horizon"]
    spec = SSMSpec.create(model_class, n_x, n_u, n_y, N, comps, operator)
    return DecodedGenome(spec, _weights(g, model_class == "block"), {"horizon": N})


def decode(g: Genome, n_u: int = 1, n_y: int = 1, n_x: int = 20) -> DecodedGenome:
    """Model spec, loss weights and training overrides encoded by ``g``.

    ``n_x`` is the latent state size; it is a run-level setting, not a gene.
    """
    if g.space == "standard":
        return _decode_standard(g, n_u, n_y, n_x)
    return _decode_xl(g, n_u, n_y, n_x)
