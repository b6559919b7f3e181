import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from neurosid.data import simulate
from neurosid.estimator import DEFAULT_GENOME, NeuralSSMRegressor, SSMSearch
from neurosid.genome import Genome

SMALL = {"ssm_type": "hammerstein", "horizon": 4, "nodes": 4, "layers": 1}


@pytest.fixture(scope="module")
def data():
    traj, _ = simulate("two_tank", 600, seed=0)
    return traj.U, traj.Y


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return NeuralSSMRegressor(SMALL, n_x=4, max_epochs=30, lr=1e-2).fit(X, y)


def test_default_genome_is_valid():
    g = Genome.from_values("standard", DEFAULT_GENOME)
    assert g["ssm_type"] == "block_nonlinear" and g["horizon"] == 8


def test_clone_keeps_params():
    est = NeuralSSMRegressor(SMALL, n_x=5, max_epochs=3, random_state=4)
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    s = SSMSearch(pool_size=2, max_individuals=3)
    assert clone(s).get_params() == s.get_params()


def test_predict_before_fit_raises(data):
    X, y = data
    with pytest.raises(NotFittedError):
        NeuralSSMRegressor().predict(X, y[:8])


def test_fit_predict_shapes(fitted, data):
    X, y = data
    n_p = fitted.past_window_
    pred = fitted.predict(X[:100], y[:n_p])
    assert n_p == 4 and pred.shape == (100 - n_p, 2)
    assert np.all(np.isfinite(pred))
    assert len(fitted.report_.history) == fitted.report_.epochs_run


def test_predict_rejects_wrong_anchor(fitted, data):
    X, y = data
    with pytest.raises(ValueError):
        fitted.predict(X[:50], y[:3])


def test_score_is_r2(fitted, data):
    X, y = data
    test = slice(400, 600)
    s = fitted.score(X[test], y[test])
    pred = fitted.predict(X[test], y[test][:4])
    target = y[test][4:]
    r2 = 1 - ((target - pred) ** 2).sum(0) / ((target - target.mean(0)) ** 2).sum(0)
    assert s == pytest.approx(r2.mean(), abs=1e-12)
    assert np.isfinite(s)


def test_fit_is_deterministic(data):
    X, y = data
    a = NeuralSSMRegressor(SMALL, n_x=3, max_epochs=5).fit(X, y)
    b = NeuralSSMRegressor(SMALL, n_x=3, max_epochs=5).fit(X, y)
    assert a.report_.history == b.report_.history


def test_search_estimator(data):
    X, y = data
    s = SSMSearch(algorithm="random", pool_size=2, spawn_interval=2, max_individuals=4,
                  simulated_clock=True, n_x=3, max_epochs=3).fit(X, y)
    assert len(s.ledger_) == 4
    best = s.ledger_.best()
    assert s.best_genome_ == best.genome
    # the refit replays the winning genome and seed
    assert s.best_estimator_.best_val_mse_ == pytest.approx(s.best_val_mse_, abs=1e-12)
    n_p = s.best_estimator_.past_window_
    assert s.predict(X[:200], y[:n_p]).shape == (200 - n_p, 2)
