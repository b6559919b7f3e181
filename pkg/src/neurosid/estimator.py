"""scikit-learn style estimators around a single model and a whole search.

``X`` holds the inputs ``u`` and ``y`` the measured outputs of one trajectory,
one row per sample.  Both are min-max normalized internally with statistics
from the training part of the trajectory.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Trajectory, prepare
from .genome import Genome, decode, get_space
from .search import SearchConfig, TrainingEvaluator, run_search
from .ssm import SSMInstance, open_loop_eval, open_loop_predict
from .trainer import TrainConfig, fitness, train

__all__ = ["NeuralSSMRegressor", "SSMSearch"]

DEFAULT_GENOME = {"ssm_type": "block_nonlinear", "nonlinear_map": "mlp", "estimator": "mlp",
                  "linear_map": "linear", "activation": "gelu", "layers": 2, "nodes": 32,
                  "horizon": 8}


def _check_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X, y = check_X_y(X, y, multi_output=True, y_numeric=True, dtype=np.float64)
    return X.reshape(len(X), -1), y.reshape(len(y), -1)


def _as_genome(genome, space: str) -> Genome:
    if isinstance(genome, Genome):
        return genome
    return Genome.from_values(space, DEFAULT_GENOME if genome is None else genome)


class NeuralSSMRegressor(RegressorMixin, BaseEstimator):
    """Train one neural state space model described by a genome.

    Parameters
    ----------
    genome : Genome or dict, optional
        Gene values; genes left out take the first value of their ring.  The
        default is a block-nonlinear model with MLP input and output maps.
    space : {"standard", "xl"}
    n_x : int
        Latent state size.
    max_epochs, patience, lr : training settings.
    fractions : tuple of 3 floats
        Contiguous train / validation / test split of the trajectory.
    random_state : int
        Seeds the parameter initialization.
    """

    def __init__(self, genome=None, space="standard", n_x=20, max_epochs=1000, patience=100,
                 lr=2e-3, fractions=(1 / 3, 1 / 3, 1 / 3), random_state=0):
        self.genome = genome
        self.space = space
        self.n_x = n_x
        self.max_epochs = max_epochs
        self.patience = patience
        self.lr = lr
        self.fractions = fractions
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        get_space(self.space)
        g = _as_genome(self.genome, self.space)
        self.splits_, _ = prepare(Trajectory(X, y), self.fractions, horizon=g["horizon"])
        dec = decode(g, X.shape[1], y.shape[1], self.n_x)
        self.model_ = SSMInstance(dec.spec, self.random_state)
        cfg = TrainConfig(lr=self.lr, max_epochs=self.max_epochs,
                          patience=min(self.patience, self.max_epochs))
        self.report_ = train(self.model_, self.splits_, dec.weights, cfg)
        self.genome_ = g
        self.best_val_mse_ = fitness(self.report_)
        self.test_mse_ = open_loop_eval(self.model_, self.splits_.test.U, self.splits_.test.Y)
        self.n_features_in_ = X.shape[1]
        self.n_outputs_ = y.shape[1]
        return self

    @property
    def past_window_(self) -> int:
        check_is_fitted(self, "model_")
        return self.model_.spec.past_window

    def predict(self, X, y_init):
        """Open-loop prediction of the outputs after the first ``past_window_`` samples.

        Parameters
        ----------
        X : array of shape (T, n_u)
            Inputs over the whole horizon.
        y_init : array of shape (past_window_, n_y)
            Measured outputs that anchor the state estimate.

        Returns
        -------
        array of shape (T - past_window_, n_y), in the units of ``y``.
        """
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64, ensure_2d=False).reshape(len(X), -1)
        y_init = check_array(y_init, dtype=np.float64, ensure_2d=False).reshape(len(y_init), -1)
        n_p = self.past_window_
        if X.shape[1] != self.n_features_in_ or y_init.shape != (n_p, self.n_outputs_):
            raise ValueError(f"expected X with {self.n_features_in_} columns and y_init of "
                             f"shape {(n_p, self.n_outputs_)}")
        u = self.splits_.u_norm.transform(X)
        y0 = self.splits_.y_norm.transform(y_init)
        Y = np.vstack([y0, np.zeros((len(X) - n_p, self.n_outputs_))])
        pred = open_loop_predict(self.model_, u, Y)
        return self.splits_.y_norm.inverse_transform(pred)

    def score(self, X, y, sample_weight=None):
        """R^2 of the open-loop prediction, anchored on the first ``past_window_`` outputs."""
        X, y = _check_xy(X, y)
        n_p = self.past_window_
        return r2_score(y[n_p:], self.predict(X, y[:n_p]), sample_weight=sample_weight)


class SSMSearch(BaseEstimator):
    """Genetic (or random) search over model structures, then a refit of the best.

    Parameters mirror :class:`~neurosid.search.SearchConfig`; the refit uses the
    winning genome and its seed, so it reproduces the searched model exactly.
    """

    def __init__(self, space="standard", algorithm="aga", pool_size=50, spawn_interval=300.0,
                 max_individuals=None, max_wallclock=None, simulated_clock=False, workers=0,
                 n_x=20, max_epochs=1000, patience=100, fractions=(1 / 3, 1 / 3, 1 / 3),
                 run_dir=None, refit=True, random_state=0):
        self.space = space
        self.algorithm = algorithm
        self.pool_size = pool_size
        self.spawn_interval = spawn_interval
        self.max_individuals = max_individuals
        self.max_wallclock = max_wallclock
        self.simulated_clock = simulated_clock
        self.workers = workers
        self.n_x = n_x
        self.max_epochs = max_epochs
        self.patience = patience
        self.fractions = fractions
        self.run_dir = run_dir
        self.refit = refit
        self.random_state = random_state

    def fit(self, X, y):
        X, y = _check_xy(X, y)
        cfg = SearchConfig(pool_size=self.pool_size, spawn_interval=self.spawn_interval,
                           max_individuals=self.max_individuals,
                           max_wallclock=self.max_wallclock, algorithm=self.algorithm,
                           space=self.space, seed=self.random_state,
                           simulated_clock=self.simulated_clock, workers=self.workers)
        splits, _ = prepare(Trajectory(X, y), self.fractions, horizon=1)
        tc = TrainConfig(max_epochs=self.max_epochs, patience=min(self.patience, self.max_epochs))
        evaluator = TrainingEvaluator(splits, tc, self.n_x, self.run_dir)
        self.ledger_ = run_search(cfg, evaluator, self.run_dir)
        best = self.ledger_.best()
        if best is None:
            raise RuntimeError("no individual finished training")
        self.best_genome_ = best.genome
        self.best_val_mse_ = best.best_val_mse
        self.best_seed_ = best.seed
        if self.refit:
            self.best_estimator_ = NeuralSSMRegressor(
                best.genome, self.space, self.n_x, self.max_epochs, self.patience,
                fractions=self.fractions, random_state=best.seed).fit(X, y)
        return self

    def predict(self, X, y_init):
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.predict(X, y_init)

    def score(self, X, y):
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.score(X, y)
