import numpy as np
import pytest

from strobe.dg import DGField, DGSpace, assemble_norms, pod
from strobe.maps import Displacement, MapSpace, default_bijectivity_params
from strobe.mesh import build_structured_mesh
from strobe.registration import (GreedyOutput, RegistrationParams,
                                 TemplateSpace, filter_sensor,
                                 greedy_registration, map_field, proximity,
                                 register_one, repod)


@pytest.fixture(scope="module")
def setup():
    mesh = build_structured_mesh(1.0, 0.8, 8, 6, 2)
    space = DGSpace(mesh)
    norms = assemble_norms(space, D=1)
    return mesh, space, norms


def _bump_field(space, center, width=0.08):
    def fn(x):
        return np.exp(-((x[:, 0] - center) / width) ** 2)
    return DGField.from_function(space, fn)


def test_filter_constant_unchanged(setup):
    _, space, _ = setup
    U = DGField(space, 1, np.full(space.n_dofs(1), 3.3))
    V = filter_sensor(U, 5)
    assert np.abs(V.coeffs - 3.3).max() < 1e-13


def test_filter_window_one_is_identity_on_continuous(setup):
    _, space, _ = setup
    U = DGField.from_function(space, lambda x: np.sin(3 * x[:, 0]) + x[:, 1])
    V = filter_sensor(U, 1)
    assert np.abs(V.coeffs - U.coeffs).max() < 1e-12


def test_filter_step_becomes_ramp_matching_convolution(setup):
    mesh, space, _ = setup
    U = DGField.from_function(space, lambda x: (x[:, 0] > 0.5).astype(float))
    window = 5
    V = filter_sensor(U, window)
    # direct convolution oracle on one lattice row
    ncol = mesh.p * mesh.nx + 1
    groups = mesh.node_groups()
    vals = U.coeffs.reshape(-1)
    sums = np.zeros(ncol * (mesh.p * mesh.nt + 1))
    cnt = np.zeros_like(sums)
    np.add.at(sums, groups, vals)
    np.add.at(cnt, groups, 1)
    row = (sums / cnt).reshape(-1, ncol)[2]
    half = window // 2
    oracle = np.array([
        row[max(0, i - min(half, i, ncol - 1 - i)):
            i + min(half, i, ncol - 1 - i) + 1].mean()
        for i in range(ncol)
    ])
    out_row = np.zeros(ncol)
    filtered = V.coeffs
    sums2 = np.zeros_like(sums)
    np.add.at(sums2, groups, filtered)
    out_row = (sums2 / cnt).reshape(-1, ncol)[2]
    assert np.abs(out_row - oracle).max() < 1e-12


def test_filter_validation(setup):
    _, space, _ = setup
    U = DGField.zeros(space, 1)
    with pytest.raises(ValueError):
        filter_sensor(U, 4)
    with pytest.raises(ValueError):
        filter_sensor(U, 999)


def test_proximity_zero_when_template_matches(setup):
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 3)
    U = _bump_field(space, 0.5)
    phi = Displacement.zero(ms)
    assert proximity(U, phi, U) < 1e-20
    zero_psi = DGField.zeros(space, 1)
    val = proximity(zero_psi, phi, U)
    norm2 = U.coeffs @ (norms.X @ U.coeffs)
    assert abs(val - norm2) < 1e-8 * norm2


def test_register_recovers_manufactured_shift(setup):
    """A shifted bump against its unshifted template: the single-mode
    grid-search oracle and the optimizer agree on the coefficient."""
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 1)       # one x-mode, one t-mode
    shift = 0.06
    template = _bump_field(space, 0.45)
    snapshot = _bump_field(space, 0.45 + shift)
    T = TemplateSpace(space, norms)
    T.append(template.coeffs)
    params = RegistrationParams(xi=1e-6, N_max=1,
                                bij=default_bijectivity_params(1.0, 0.8))
    res = register_one(snapshot, T, ms, params)
    assert res.f_star < 5e-4

    # brute-force oracle over the first x-displacement coefficient
    grid = np.linspace(0.0, 0.6, 121)
    vals = []
    for c in grid:
        a = np.zeros(ms.M_hf)
        a[0] = c
        psi_best = None
        f = _proximity_of(space, norms, snapshot, T, ms, a)
        vals.append(f)
    c_star = grid[int(np.argmin(vals))]
    assert abs(res.phi_star.a[0] - c_star) <= 0.05 * max(abs(c_star), 1e-2)


def _proximity_of(space, norms, snapshot, T, ms, a):
    pts = space.x_vol.reshape(-1, 2)
    tab = ms.tabulate(pts)
    mapped = pts + ms.displacement_values(tab, a)
    vals, _ = snapshot.evaluate(mapped)
    w = space.w_vol.ravel()
    s = vals[:, 0]
    psiq = T.quad_values()
    c = psiq.T @ (w * s)
    r = s - psiq @ c
    return float(w @ (r * r))


def test_register_trivial_when_snapshot_in_template(setup):
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 2)
    U = _bump_field(space, 0.5)
    T = TemplateSpace(space, norms)
    T.append(U.coeffs)
    params = RegistrationParams(xi=1e-4,
                                bij=default_bijectivity_params(1.0, 0.8))
    res = register_one(U, T, ms, params)
    assert res.f_star < 1e-10
    assert np.abs(res.phi_star.a).max() < 1e-3


def test_psi_star_is_projection(setup):
    # perturbing psi* within the template space cannot decrease the
    # proximity at the optimal map
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 2)
    snapshot = _bump_field(space, 0.52)
    T = TemplateSpace(space, norms)
    T.append(_bump_field(space, 0.45).coeffs)
    T.append(DGField.from_function(space, lambda x: np.cos(x[:, 1])).coeffs)
    params = RegistrationParams(xi=1e-5,
                                bij=default_bijectivity_params(1.0, 0.8))
    res = register_one(snapshot, T, ms, params)
    pts = space.x_vol.reshape(-1, 2)
    w = space.w_vol.ravel()
    mapped = res.phi_star.map_points(pts)
    s_vals, _ = snapshot.evaluate(mapped)
    psiq = T.quad_values()
    base = s_vals[:, 0] - psiq @ res.psi_star
    f0 = float(w @ (base * base))
    rng = np.random.default_rng(0)
    for _ in range(6):
        dc = 1e-3 * rng.standard_normal(T.N)
        pert = s_vals[:, 0] - psiq @ (res.psi_star + dc)
        assert float(w @ (pert * pert)) >= f0 - 1e-10


def test_greedy_terminates_on_trivial_family(setup):
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 2)
    U = _bump_field(space, 0.5)
    T0 = TemplateSpace(space, norms)
    T0.append(U.coeffs)
    params = RegistrationParams(xi=1e-4, tol=1e-6, N_max=3,
                                bij=default_bijectivity_params(1.0, 0.8))
    out = greedy_registration([U], T0, ms, params)
    assert out.templates.N == 1                 # no enrichment needed
    assert np.abs(out.displacements_full).max() < 1e-3


def test_greedy_monotone_under_enrichment(setup):
    """Template enrichment cannot worsen the worst-snapshot proximity
    when the displacement space is held fixed and the optimizer is
    warm-started at the previous solution."""
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 2)
    snaps = [_bump_field(space, c) for c in (0.40, 0.50, 0.62)]
    T = TemplateSpace(space, norms)
    T.append(snaps[1].coeffs)
    params = RegistrationParams(xi=1e-5, N_max=2,
                                bij=default_bijectivity_params(1.0, 0.8))
    f_before, results = [], []
    for s in snaps:
        r = register_one(s, T, ms, params)
        results.append(r)
        f_before.append(r.f_star)
    worst = int(np.argmax(f_before))
    mapped_worst = map_field(snaps[worst], results[worst].phi_star)
    T2 = T.copy()
    T2.append(mapped_worst.coeffs)
    for k, s in enumerate(snaps):
        r2 = register_one(s, T2, ms, params, a0=results[k].phi_star.a)
        assert r2.f_star <= f_before[k] + 1e-9


def test_repod_with_identity_maps_equals_pod(setup):
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 2)
    rng = np.random.default_rng(1)
    fields = [DGField(space, 1, rng.standard_normal(space.n_dofs(1)))
              for _ in range(4)]
    greedy = GreedyOutput(
        templates=TemplateSpace(space, norms),
        map_basis=np.zeros((ms.M_hf, 1)),
        coefficients=np.zeros((4, 1)),
        eigenvalues=np.zeros(4),
        displacements_full=np.zeros((4, ms.M_hf)),
        logs=[],
    )
    rp = repod(fields, greedy, norms, 1e-6, ms)
    S = np.column_stack([f.coeffs for f in fields])
    ref = pod(S, 1e-6, inner=norms.X)
    assert rp.trial_basis.shape == ref.modes.shape
    # spaces agree: cross-projection is an isometry
    G = rp.trial_basis.T @ (norms.X @ ref.modes)
    assert np.abs(np.abs(np.linalg.svd(G, compute_uv=False)) - 1).max() < 1e-9


def test_registered_translate_family_is_rank_one(setup):
    """After registering a pure translate family, one mode captures
    nearly all energy."""
    _, space, norms = setup
    ms = MapSpace(1.0, 0.8, 2)
    centers = np.linspace(0.42, 0.58, 5)
    snaps = [_bump_field(space, c, width=0.12) for c in centers]
    T0 = TemplateSpace(space, norms)
    T0.append(snaps[2].coeffs)
    params = RegistrationParams(xi=1e-6, tol=1e-8, N_max=1,
                                bij=default_bijectivity_params(1.0, 0.8))
    out = greedy_registration(snaps, T0, ms, params)
    rp = repod(snaps, out, norms, 1e-4, ms)
    lam = rp.eigenvalues
    captured = lam[0] / lam.sum()
    assert captured >= 1.0 - 1e-3
    # unregistered family needs several modes for the same energy
    lam_u = pod(np.column_stack([s.coeffs for s in snaps]), 1e-4,
                inner=norms.X).eigenvalues
    assert lam_u[0] / lam_u.sum() < captured
