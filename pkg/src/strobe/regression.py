"""Multi-target RBF regression with cross-validated R-squared gating.

Thin-plate splines with a linear polynomial tail interpolate each target
over the normalized parameter box; targets whose out-of-sample
R-squared (k-fold pooled) falls below the gate predict the training
mean instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import RBFInterpolator

R2_MIN = 0.75


class IllPosedDataError(ValueError):
    """Duplicate parameter points carry conflicting target values."""


@dataclass
class RbfRegressor:
    """Interpolatory map P -> R^m with per-target activity gating."""

    box: np.ndarray               # (P, 2) parameter bounds for normalization
    mu_train: np.ndarray          # (n, P)
    y_train: np.ndarray           # (n, m)
    r2: np.ndarray                # (m,) pooled cross-validation estimates
    active: np.ndarray            # (m,) gate mask
    folds: list                   # logged index splits, re-evaluable
    _interp: object = field(default=None, repr=False)

    @property
    def n_targets(self) -> int:
        return self.y_train.shape[1]

    def _normalize(self, mu):
        mu = np.atleast_2d(np.asarray(mu, dtype=float))
        span = np.maximum(self.box[:, 1] - self.box[:, 0], 1e-300)
        return (mu - self.box[:, 0]) / span

    def _ensure_interp(self):
        if self._interp is None:
            self._interp = RBFInterpolator(
                self._normalize(self.mu_train), self.y_train,
                kernel="thin_plate_spline", degree=1)
        return self._interp

    def predict(self, mu) -> np.ndarray:
        """Per-target predictions; gated-off targets return the train mean."""
        mu_arr = np.atleast_2d(np.asarray(mu, dtype=float))
        out = self._ensure_interp()(self._normalize(mu_arr))
        mean = self.y_train.mean(axis=0)
        out[:, ~self.active] = mean[~self.active]
        if np.ndim(mu) == 1:
            return out[0]
        return out


def _check_duplicates(mu_n, y):
    order = np.lexsort(mu_n.T)
    for a, b in zip(order[:-1], order[1:]):
        if np.allclose(mu_n[a], mu_n[b], atol=1e-12):
            if not np.allclose(y[a], y[b], atol=1e-10):
                raise IllPosedDataError(
                    "duplicate parameter with conflicting targets")


def fit(mu_train, y_train, box=None, k_folds: int = 5,
        seed: int = 0) -> RbfRegressor:
    """Fit per-target interpolants and gate them by k-fold R-squared."""
    mu_train = np.atleast_2d(np.asarray(mu_train, dtype=float))
    y_train = np.asarray(y_train, dtype=float)
    if y_train.ndim == 1:
        y_train = y_train[:, None]
    n, P = mu_train.shape
    if not n >= k_folds >= 2:
        raise ValueError("need n_train >= k_folds >= 2")
    if box is None:
        box = np.stack([mu_train.min(axis=0), mu_train.max(axis=0)], axis=-1)
    box = np.asarray(box, dtype=float)
    span = np.maximum(box[:, 1] - box[:, 0], 1e-300)
    mu_n = (mu_train - box[:, 0]) / span
    _check_duplicates(mu_n, y_train)

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    folds = [np.sort(perm[i::k_folds]) for i in range(k_folds)]

    m = y_train.shape[1]
    preds = np.full((n, m), np.nan)
    for hold in folds:
        keep = np.setdiff1d(np.arange(n), hold)
        sub = RBFInterpolator(mu_n[keep], y_train[keep],
                              kernel="thin_plate_spline", degree=1)
        preds[hold] = sub(mu_n[hold])

    ybar = y_train.mean(axis=0)
    ss_res = ((y_train - preds) ** 2).sum(axis=0)
    ss_tot = ((y_train - ybar) ** 2).sum(axis=0)
    r2 = np.zeros(m)
    nz = ss_tot > 0
    r2[nz] = 1.0 - ss_res[nz] / ss_tot[nz]
    # zero-variance targets: R^2 defined as 0 and deactivated
    active = r2 >= R2_MIN
    return RbfRegressor(box=box, mu_train=mu_train, y_train=y_train,
                        r2=r2, active=active,
                        folds=[f.tolist() for f in folds])


def r_squared(y_true, y_pred, train_mean) -> float:
    """Out-of-sample R-squared against a fixed training mean."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    den = ((y_true - train_mean) ** 2).sum()
    if den <= 0:
        return 0.0
    return float(1.0 - ((y_true - y_pred) ** 2).sum() / den)
