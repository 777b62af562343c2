import numpy as np
from scipy.optimize import nnls as scipy_nnls

from strobe.nnls import nnls_lawson_hanson


def test_matches_scipy_reference():
    rng = np.random.default_rng(0)
    for _ in range(6):
        A = rng.standard_normal((25, 18))
        b = rng.standard_normal(25)
        mine = nnls_lawson_hanson(A, b)
        x_ref, rn_ref = scipy_nnls(A, b)
        assert abs(mine.residual_norm - rn_ref) < 1e-9
        assert np.abs(mine.x - x_ref).max() < 1e-8
        assert mine.converged


def test_consistent_system_zero_residual():
    # b assembled from unit weights: the constraint system is consistent
    rng = np.random.default_rng(1)
    A = rng.random((12, 50))
    b = A @ np.ones(50)
    res = nnls_lawson_hanson(A, b)
    assert res.residual_norm < 1e-10 * np.linalg.norm(b)


def test_step_tolerance_terminates_early():
    rng = np.random.default_rng(2)
    A = rng.random((15, 80))
    b = A @ np.ones(80)
    tight = nnls_lawson_hanson(A, b, step_tol=1e-14)
    loose = nnls_lawson_hanson(A, b, step_tol=1e-1)
    assert loose.iterations <= tight.iterations
    assert len(loose.support) <= len(tight.support)


def test_nonnegativity():
    rng = np.random.default_rng(3)
    A = rng.standard_normal((30, 20))
    b = rng.standard_normal(30)
    res = nnls_lawson_hanson(A, b)
    assert np.all(res.x >= 0)
    assert set(res.support) == set(np.where(res.x > 0)[0])
