"""Lawson-Hanson nonnegative least squares with step-size termination.

The active-set loop grows the support one column at a time, so an early
stop (step norm below a tolerance) doubles as the sparsity control of
the empirical quadrature construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class NnlsResult:
    x: np.ndarray
    residual_norm: float
    support: np.ndarray
    iterations: int
    converged: bool


def nnls_lawson_hanson(A: np.ndarray, b: np.ndarray, step_tol: float = 0.0,
                       max_iter: int | None = None) -> NnlsResult:
    """Minimize ||A x - b|| subject to x >= 0.

    Terminates on KKT optimality or when an outer step moves the iterate
    by less than step_tol in the Euclidean norm.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float).ravel()
    m, n = A.shape
    if max_iter is None:
        max_iter = 3 * n
    x = np.zeros(n)
    passive = np.zeros(n, dtype=bool)
    resid = b.copy()
    w = A.T @ resid
    it = 0
    converged = False
    tol_w = 10 * np.finfo(float).eps * np.linalg.norm(A, 1) * max(m, n)
    while it < max_iter:
        it += 1
        w = A.T @ (b - A @ x)
        w[passive] = -np.inf
        j = int(np.argmax(w))
        if w[j] <= tol_w:
            converged = True
            break
        passive[j] = True
        while True:
            idx = np.where(passive)[0]
            z, *_ = np.linalg.lstsq(A[:, idx], b, rcond=None)
            if np.all(z > 0):
                break
            # move toward z until the first passive variable hits zero
            neg = z <= 0
            alpha = np.min(x[idx][neg] / (x[idx][neg] - z[neg]))
            x[idx] = x[idx] + alpha * (z - x[idx])
            passive[idx[x[idx] <= 1e-14]] = False
            x[~passive] = 0.0
        x_new = np.zeros(n)
        x_new[idx] = z
        step = np.linalg.norm(x_new - x)
        x = x_new
        if step_tol > 0 and step <= step_tol:
            break
    return NnlsResult(
        x=x,
        residual_norm=float(np.linalg.norm(b - A @ x)),
        support=np.where(x > 0)[0],
        iterations=it,
        converged=converged,
    )
