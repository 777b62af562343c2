import numpy as np
import pytest

from strobe.regression import IllPosedDataError, fit, r_squared


def _grid(n1, n2, box):
    a = np.linspace(box[0][0], box[0][1], n1)
    b = np.linspace(box[1][0], box[1][1], n2)
    A, B = np.meshgrid(a, b, indexing="ij")
    return np.stack([A.ravel(), B.ravel()], axis=-1)


def test_linear_targets_high_r2_and_accuracy():
    box = [(0.0, 1.0), (0.0, 2.0)]
    mu = _grid(5, 4, box)
    y = 2.0 * mu[:, 0] - 0.5 * mu[:, 1] + 1.0
    reg = fit(mu, y, box=np.array(box))
    assert reg.r2[0] > 0.99
    assert reg.active[0]
    rng = np.random.default_rng(0)
    held = np.stack([rng.random(30), 2 * rng.random(30)], axis=-1)
    pred = reg.predict(held)[:, 0]
    exact = 2.0 * held[:, 0] - 0.5 * held[:, 1] + 1.0
    assert np.abs(pred - exact).max() < 1e-3


def test_interpolation_at_training_points():
    rng = np.random.default_rng(1)
    mu = rng.random((15, 2))
    y = np.sin(3 * mu[:, 0]) + mu[:, 1] ** 2
    reg = fit(mu, y, box=np.array([[0, 1], [0, 1]]))
    pred = reg.predict(mu)[:, 0]
    assert np.abs(pred - y).max() < 1e-8


def test_midpoint_of_linear_data_is_mean():
    mu = np.linspace(0, 1, 9)[:, None]
    y = 3.0 * mu[:, 0] + 0.5
    reg = fit(mu, y, box=np.array([[0.0, 1.0]]))
    mid = 0.5 * (mu[2, 0] + mu[3, 0])
    pred = reg.predict(np.array([mid]))[0]
    assert abs(pred - 0.5 * (y[2] + y[3])) < 1e-6


def test_zero_variance_target_deactivated():
    mu = _grid(4, 3, [(0, 1), (0, 1)])
    y = np.column_stack([np.full(12, 7.0), mu[:, 0]])
    reg = fit(mu, y)
    assert reg.r2[0] == 0.0
    assert not reg.active[0]
    # deactivated targets predict the training mean
    assert abs(reg.predict(np.array([0.31, 0.77]))[0] - 7.0) < 1e-12


def test_gated_target_predicts_mean():
    rng = np.random.default_rng(2)
    mu = rng.random((20, 2))
    noise = rng.standard_normal(20)
    reg = fit(mu, noise, box=np.array([[0, 1], [0, 1]]))
    assert not reg.active[0]
    pred = reg.predict(np.array([0.5, 0.5]))[0]
    assert abs(pred - noise.mean()) < 1e-12


def test_duplicate_mu_conflicting_targets():
    mu = np.array([[0.0, 0.0], [0.5, 0.5], [0.5, 0.5], [1.0, 1.0],
                   [0.2, 0.8], [0.9, 0.1]])
    y = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
    with pytest.raises(IllPosedDataError):
        fit(mu, y)


def test_fold_requirements():
    mu = np.random.default_rng(3).random((3, 2))
    with pytest.raises(ValueError):
        fit(mu, np.ones(3), k_folds=5)


def test_r_squared_literal_formula():
    y = np.array([1.0, 2.0, 3.0])
    assert r_squared(y, y, y.mean()) == 1.0          # perfect predictor
    assert r_squared(y, np.full(3, y.mean()), y.mean()) == 0.0
    assert r_squared(np.ones(3), np.zeros(3), 1.0) == 0.0   # zero variance


def test_folds_logged_and_reusable():
    rng = np.random.default_rng(4)
    mu = rng.random((20, 2))
    y = mu[:, 0] + mu[:, 1]
    reg = fit(mu, y, k_folds=5, seed=11)
    idx = np.sort(np.concatenate(reg.folds))
    assert np.array_equal(idx, np.arange(20))
    reg2 = fit(mu, y, k_folds=5, seed=11)
    assert reg.folds == reg2.folds
