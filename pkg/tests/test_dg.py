import numpy as np
import pytest

from strobe.dg import (DGField, DGSpace, assemble_norms, best_fit_error,
                       continuous_projection_matrix, pod, riesz, to_continuous)
from strobe.maps import Displacement, MapSpace
from strobe.mesh import build_structured_mesh
from strobe.refelem import gauss_legendre_2d


@pytest.fixture(scope="module")
def setup():
    mesh = build_structured_mesh(1.0, 0.8, 4, 3, 2)
    space = DGSpace(mesh)
    norms = assemble_norms(space, D=1)
    return mesh, space, norms


def test_mass_of_constant(setup):
    _, space, norms = setup
    c = np.full(space.n_dofs(1), 2.0)
    assert abs(c @ (norms.X @ c) - 4.0 * 0.8) < 1e-12


def test_h1_of_constant(setup):
    # gradient and jump terms vanish for constants
    _, space, norms = setup
    c = np.full(space.n_dofs(1), 2.0)
    assert abs(c @ (norms.Y @ c) - 4.0 * 0.8) < 1e-10


def test_h1_of_linear_field_quadrature_oracle():
    mesh = build_structured_mesh(1.0, 0.8, 1, 1, 2)
    space = DGSpace(mesh)
    norms = assemble_norms(space, D=1)
    u = DGField.from_function(space, lambda x: x[:, 0])
    val = u.coeffs @ (norms.Y @ u.coeffs)
    pts, w = gauss_legendre_2d(8, 8, 1.0, 0.8)
    oracle = float(w @ (pts[:, 0] ** 2 + 1.0))
    assert abs(val - oracle) < 1e-10 * oracle


def test_norms_symmetric_and_spd(setup):
    _, space, norms = setup
    assert abs(norms.X - norms.X.T).max() < 1e-12
    assert abs(norms.Y - norms.Y.T).max() < 1e-12
    lam = np.linalg.eigvalsh(norms.Y.toarray())
    assert lam.min() > 0


def test_norm_matrix_polynomial_oracle():
    # integrands of degree 2p are handled exactly by the assembly rule
    mesh = build_structured_mesh(1.0, 0.8, 2, 2, 2)
    space = DGSpace(mesh)
    norms = assemble_norms(space, D=1)
    u = DGField.from_function(space, lambda x: x[:, 0] ** 2 + x[:, 1])
    pts, w = gauss_legendre_2d(10, 10, 1.0, 0.8)
    oracle = float(w @ (pts[:, 0] ** 2 + pts[:, 1]) ** 2)
    val = u.coeffs @ (norms.X @ u.coeffs)
    assert abs(val - oracle) < 1e-10 * oracle
    grad2 = (2 * pts[:, 0]) ** 2 + 1.0
    oracle_h1 = oracle + float(w @ grad2)
    val_h1 = u.coeffs @ (norms.Y @ u.coeffs)
    assert abs(val_h1 - oracle_h1) < 1e-10 * oracle_h1


def test_riesz_zero_and_roundtrip(setup):
    _, space, norms = setup
    assert np.allclose(riesz(norms, np.zeros(space.n_dofs(1))), 0.0)
    rng = np.random.default_rng(0)
    w = rng.standard_normal(space.n_dofs(1))
    v = riesz(norms, norms.Y @ w)
    assert np.abs(v - w).max() < 1e-10


def test_riesz_matches_dense_solve(setup):
    _, space, norms = setup
    rng = np.random.default_rng(1)
    F = rng.standard_normal(space.n_dofs(1))
    v = riesz(norms, F)
    v_dense = np.linalg.solve(norms.Y.toarray(), F)
    assert np.abs(v - v_dense).max() < 1e-10
    # norm identity |||v|||^2 = F . v
    assert abs(v @ (norms.Y @ v) - F @ v) < 1e-10 * abs(F @ v)


def test_riesz_sup_property(setup):
    # sup F(w)/|||w||| is attained at the representer
    _, space, norms = setup
    rng = np.random.default_rng(2)
    F = rng.standard_normal(space.n_dofs(1))
    v = riesz(norms, F)
    sup = np.sqrt(v @ (norms.Y @ v))
    for _ in range(20):
        w = rng.standard_normal(space.n_dofs(1))
        ratio = (F @ w) / np.sqrt(w @ (norms.Y @ w))
        assert ratio <= sup + 1e-10


def test_pod_rank_one(setup):
    _, space, norms = setup
    rng = np.random.default_rng(3)
    u = rng.standard_normal(space.n_dofs(1))
    S = np.tile(u[:, None], (1, 7))
    res = pod(S, 1e-4, inner=norms.X)
    assert res.N == 1
    assert res.eigenvalues[1:].max() <= 1e-12 * res.eigenvalues[0]


def test_pod_two_orthonormal_snapshots(setup):
    _, space, norms = setup
    rng = np.random.default_rng(4)
    A = rng.standard_normal((space.n_dofs(1), 2))
    # X-orthonormalize the pair
    q0 = A[:, 0] / np.sqrt(A[:, 0] @ (norms.X @ A[:, 0]))
    r = A[:, 1] - q0 * (q0 @ (norms.X @ A[:, 1]))
    q1 = r / np.sqrt(r @ (norms.X @ r))
    res = pod(np.column_stack([q0, q1]), 1e-4, inner=norms.X)
    assert res.N == 2
    assert abs(res.eigenvalues[0] - res.eigenvalues[1]) < 1e-10


def test_pod_orthonormal_modes_and_energy(setup):
    _, space, norms = setup
    rng = np.random.default_rng(5)
    S = rng.standard_normal((space.n_dofs(1), 6))
    res = pod(S, 1e-12, inner=norms.X)
    G = res.modes.T @ (norms.X @ res.modes)
    assert np.abs(G - np.eye(res.modes.shape[1])).max() < 1e-10
    # eigenvalue sum equals the Gramian trace
    tr = np.trace(S.T @ (norms.X @ S))
    assert abs(res.eigenvalues.sum() - tr) < 1e-10 * tr
    assert np.all(np.diff(res.eigenvalues) <= 1e-12 * res.eigenvalues[0])


def test_pod_full_reconstruction(setup):
    _, space, norms = setup
    rng = np.random.default_rng(6)
    S = rng.standard_normal((space.n_dofs(1), 5))
    res = pod(S, 1e-14, inner=norms.X)
    Z = res.modes
    proj = Z @ (Z.T @ (norms.X @ S))
    err = np.einsum("ij,ij->", S - proj, norms.X @ (S - proj))
    total = np.einsum("ij,ij->", S, norms.X @ S)
    assert err <= 1e-10 * total


def test_pod_empty_raises(setup):
    _, space, _ = setup
    with pytest.raises(ValueError):
        pod(np.zeros((space.n_dofs(1), 0)), 1e-4)


def test_best_fit_trivial_cases(setup):
    _, space, norms = setup
    rng = np.random.default_rng(7)
    u = rng.standard_normal(space.n_dofs(1))
    z = u / np.sqrt(u @ (norms.X @ u))
    U = DGField(space, 1, u)
    # cancellation in the norm difference bounds accuracy by sqrt(eps)
    assert best_fit_error(U, z[:, None], norms) < 1e-6
    assert best_fit_error(U, np.zeros((space.n_dofs(1), 0)), norms) == 1.0
    with pytest.raises(ZeroDivisionError):
        best_fit_error(DGField.zeros(space, 1), z[:, None], norms)


def test_best_fit_registered_identity_map(setup):
    # with phi = 0 the registered error reduces to the plain one
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 3)
    U = DGField.from_function(space, lambda x: np.sin(2 * x[:, 0] + x[:, 1]))
    rng = np.random.default_rng(8)
    Z = rng.standard_normal((space.n_dofs(1), 3))
    # X-orthonormalize
    for j in range(3):
        for i in range(j):
            Z[:, j] -= Z[:, i] * (Z[:, i] @ (norms.X @ Z[:, j]))
        Z[:, j] /= np.sqrt(Z[:, j] @ (norms.X @ Z[:, j]))
    e_plain = best_fit_error(U, Z, norms)
    e_reg = best_fit_error(U, Z, norms, phi=Displacement.zero(ms))
    assert abs(e_plain - e_reg) < 1e-8


def test_to_continuous_mean_and_idempotence(setup):
    mesh, space, _ = setup
    rng = np.random.default_rng(9)
    U = DGField(space, 1, rng.standard_normal(space.n_dofs(1)))
    V = to_continuous(U)
    W = to_continuous(V)
    assert np.abs(V.coeffs - W.coeffs).max() < 1e-13
    # already-continuous fields are unchanged
    C = DGField.from_function(space, lambda x: x[:, 0] + 2 * x[:, 1])
    assert np.abs(to_continuous(C).coeffs - C.coeffs).max() < 1e-13


def test_to_continuous_two_element_mean():
    mesh = build_structured_mesh(1.0, 1.0, 1, 1, 1)
    space = DGSpace(mesh)
    # values 0 and 2 on the shared diagonal nodes
    nodal = np.zeros((2, 3, 1))
    nodal[1, :, 0] = 2.0
    U = DGField.from_nodal(space, nodal)
    V = to_continuous(U).nodal()[..., 0]
    groups = mesh.node_groups().reshape(2, 3)
    shared = np.intersect1d(groups[0], groups[1])
    for g in shared:
        for k in range(2):
            sel = groups[k] == g
            if sel.any():
                assert np.allclose(V[k][sel], 1.0)


def test_continuous_projection_matrix_matches_op(setup):
    _, space, _ = setup
    rng = np.random.default_rng(10)
    U = DGField(space, 1, rng.standard_normal(space.n_dofs(1)))
    P = continuous_projection_matrix(space, 1)
    assert np.abs(P @ U.coeffs - to_continuous(U).coeffs).max() < 1e-13
