"""Neural state space model system identification with structure search.

Modules
-------
diffcore   reverse-mode autodiff, AdamW, checkpoints
linmaps    structured linear maps with singular value / eigenvalue bounds
blocks     linear, MLP, residual MLP and RNN blocks and activations
ssm        block-oriented and black-box state space models, rollouts
loss       multi-objective training loss
trainer    training loop with early stopping
genome     design spaces and genetic operators
search     asynchronous genetic search and random search
data       simulators, CSV IO, normalization and windowing
cli        command-line interface and reports
"""
from .data import Trajectory, load_csv, prepare, simulate
from .estimator import NeuralSSMRegressor, SSMSearch
from .genome import Genome, decode, random_genome
from .search import Ledger, SearchConfig, run_search
from .ssm import SSMInstance, SSMSpec, open_loop_eval, rollout
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Trajectory", "load_csv", "prepare", "simulate", "NeuralSSMRegressor", "SSMSearch",
           "Genome", "decode", "random_genome", "Ledger", "SearchConfig", "run_search",
           "SSMInstance", "SSMSpec", "open_loop_eval", "rollout", "TrainConfig", "train"]
