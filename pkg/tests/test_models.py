import numpy as np
import pytest

from strobe.mesh import BOTTOM, LEFT, RIGHT, TOP
from strobe.models import (Burgers, LinearAdvection, ShallowWater,
                           DryStateError, DegenerateMapError, ViscosityParams,
                           artificial_viscosity, make_model, mapped_fluxes,
                           physical_flux, rusanov_flux, rusanov_flux_jac)
from strobe.refelem import gauss_legendre_2d, reference_element, triangle_quadrature


def test_burgers_flux_value():
    model = Burgers()
    assert np.allclose(physical_flux(model, np.array([2.0])), [2.0])


def test_shallow_water_flux_value():
    model = ShallowWater()
    f = physical_flux(model, np.array([2.0, 0.0]))
    assert np.allclose(f, [0.0, 19.62])


def test_shallow_water_inflow_base_discharge():
    model = ShallowWater()
    assert model.q0 == 4.4
    # at t = 0 the inflow law reduces to q0 (the perturbation is t-scaled)
    assert abs(model.inflow_discharge(0.0, [5.0, 0.15]) - 4.4) < 1e-12


def test_dry_state_errors():
    model = ShallowWater()
    with pytest.raises(DryStateError):
        model.flux(np.array([-0.1, 1.0]))
    with pytest.raises(DryStateError):
        model.check_admissible(np.array([[0.0, 1.0]]))


def test_bathymetry_values():
    model = ShallowWater()
    assert abs(model.bathymetry(10.0) - 0.8) < 1e-12
    assert abs(model.bathymetry(0.0) + 0.2) < 1e-10
    assert abs(model.bathymetry(25.0) + 0.2) < 1e-10


def test_source_is_bathymetry_slope():
    model = ShallowWater()
    x = np.array([9.0, 10.0, 12.0])
    U = np.tile([2.0, 1.0], (3, 1))
    S = model.source(U, x)
    assert np.allclose(S[:, 0], 0.0)
    assert np.allclose(S[:, 1], -9.81 * 2.0 * model.bathymetry_slope(x))


@pytest.mark.parametrize("model", [Burgers(), ShallowWater(), LinearAdvection()])
def test_flux_jacobian_matches_fd(model):
    rng = np.random.default_rng(0)
    U = np.abs(rng.standard_normal((20, model.D))) + 0.5
    A = model.flux_jac(U)
    h = 1e-6
    for d in range(model.D):
        Up, Um = U.copy(), U.copy()
        Up[:, d] += h
        Um[:, d] -= h
        fd = (model.flux(Up) - model.flux(Um)) / (2 * h)
        assert np.abs(A[..., d] - fd).max() < 1e-6 * max(1.0, np.abs(fd).max())


@pytest.mark.parametrize("model", [Burgers(), ShallowWater(), LinearAdvection()])
def test_spacetime_flux_columns(model):
    rng = np.random.default_rng(1)
    U = np.abs(rng.standard_normal((8, model.D))) + 0.5
    F = model.spacetime_flux(U)
    assert np.allclose(F[..., 0], model.flux(U))
    assert np.allclose(F[..., 1], U)


def test_rusanov_consistency():
    model = Burgers()
    U = np.array([[1.3]])
    n = np.array([[0.6, 0.8]])
    H = rusanov_flux(model, U, U, n)
    assert np.allclose(H, model.normal_flux(U, n), atol=1e-6)


def test_rusanov_spec_example_spatial():
    # U+=2, U-=0, n=(1,0): 0.5*(2+0) - (2/2)*2 = -1
    model = Burgers()
    H = rusanov_flux(model, np.array([[2.0]]), np.array([[0.0]]),
                     np.array([[1.0, 0.0]]))
    assert abs(H[0, 0] - (-1.0)) < 1e-5


def test_rusanov_spec_example_temporal_upwind():
    # temporal face n=(0,1): tau = 1 and the flux picks the U- trace
    model = Burgers()
    Up, Um = np.array([[1.7]]), np.array([[0.4]])
    H = rusanov_flux(model, Up, Um, np.array([[0.0, 1.0]]))
    assert abs(H[0, 0] - 0.4) < 1e-5


@pytest.mark.parametrize("model", [Burgers(), ShallowWater()])
def test_rusanov_conservation(model):
    rng = np.random.default_rng(2)
    Up = np.abs(rng.standard_normal((30, model.D))) + 0.6
    Um = np.abs(rng.standard_normal((30, model.D))) + 0.6
    theta = rng.random(30) * 2 * np.pi
    n = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    H1 = rusanov_flux(model, Up, Um, n)
    H2 = rusanov_flux(model, Um, Up, -n)
    assert np.abs(H1 + H2).max() < 1e-12


@pytest.mark.parametrize("model", [Burgers(), ShallowWater()])
def test_rusanov_jacobian_fd(model):
    rng = np.random.default_rng(3)
    Up = np.abs(rng.standard_normal((12, model.D))) + 0.8
    Um = np.abs(rng.standard_normal((12, model.D))) + 0.8
    theta = rng.random(12) * 2 * np.pi
    n = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    dHp, dHm = rusanov_flux_jac(model, Up, Um, n)
    h = 1e-7
    for d in range(model.D):
        Up_p, Up_m = Up.copy(), Up.copy()
        Up_p[:, d] += h
        Up_m[:, d] -= h
        fd = (rusanov_flux(model, Up_p, Um, n)
              - rusanov_flux(model, Up_m, Um, n)) / (2 * h)
        assert np.abs(dHp[..., d] - fd).max() < 1e-5


def test_mapped_fluxes_identity():
    model = Burgers()
    U = np.array([[1.2]])
    G = np.eye(2)[None]
    F, S = mapped_fluxes(model, U, G, np.ones(1))
    assert np.allclose(F, model.spacetime_flux(U))
    assert np.allclose(S, 0.0)


def test_mapped_fluxes_dilation():
    # G = diag(a, b), g = ab: columns scale by (b, a)
    model = Burgers()
    U = np.array([[1.5]])
    a, b = 2.0, 0.5
    G = np.diag([a, b])[None]
    F, _ = mapped_fluxes(model, U, G, np.array([a * b]))
    F0 = model.spacetime_flux(U)
    assert np.allclose(F[..., 0], b * F0[..., 0])
    assert np.allclose(F[..., 1], a * F0[..., 1])


def test_mapped_fluxes_degenerate():
    model = Burgers()
    with pytest.raises(DegenerateMapError):
        mapped_fluxes(model, np.array([[1.0]]), np.eye(2)[None],
                      np.array([-0.5]))


def test_mapped_divergence_identity():
    """Change-of-variable oracle: the mapped divergence integrates to the
    physical one over corresponding regions, for a smooth field and a
    smooth nonlinear map (checked through the divergence theorem)."""
    from strobe.maps import Displacement, MapSpace
    model = Burgers()
    ms = MapSpace(1.0, 0.8, 3)
    rng = np.random.default_rng(4)
    a = 0.03 * rng.standard_normal(ms.M_hf)
    phi = Displacement(ms, a)

    def U_of(x):
        return 0.8 + 0.3 * np.sin(2 * x[:, 0]) * np.cos(x[:, 1])

    # reference-side: int_ref div~(F_Phi) dX via the divergence theorem on
    # the boundary of the reference domain equals the physical boundary flux
    from strobe.refelem import edge_quadrature
    q, w = edge_quadrature(30)

    def boundary_integral(mapped: bool):
        total = 0.0
        segs = [
            (np.stack([q, np.zeros_like(q)], axis=-1), np.array([0, -1.0]), 1.0),
            (np.stack([q, np.full_like(q, 0.8)], axis=-1), np.array([0, 1.0]), 1.0),
            (np.stack([np.zeros_like(q), 0.8 * q], axis=-1), np.array([-1.0, 0]), 0.8),
            (np.stack([np.ones_like(q), 0.8 * q], axis=-1), np.array([1.0, 0]), 0.8),
        ]
        for pts, n, length in segs:
            if mapped:
                tab = ms.tabulate(pts)
                G, g = ms.jacobians(tab, a)
                xm = pts + ms.displacement_values(tab, a)
                U = U_of(xm)[:, None]
                F = model.spacetime_flux(U)
                Ginv = np.linalg.inv(G)
                Fphi = g[:, None, None] * np.einsum("pdb,pab->pda", F, Ginv)
                total += float(np.sum(w * length * np.einsum(
                    "pda,a->pd", Fphi, n)[:, 0]))
            else:
                U = U_of(pts)[:, None]
                F = model.spacetime_flux(U)
                total += float(np.sum(w * length * np.einsum(
                    "pda,a->pd", F, n)[:, 0]))
        return total

    # Phi maps the boundary onto itself, so both boundary integrals agree
    assert abs(boundary_integral(True) - boundary_integral(False)) < 1e-8


def test_viscosity_ramp_values():
    vp = ViscosityParams()
    assert vp.ramp(vp.s0 - 2 * vp.kappa) == 0.0
    assert abs(vp.ramp(vp.s0) - vp.eps0 / 2) < 1e-15
    assert vp.ramp(vp.s0 + vp.kappa) == vp.eps0
    # C1 continuity of the ramp at the edges
    h = 1e-7
    for s_edge in (vp.s0 - vp.kappa, vp.s0 + vp.kappa):
        d1 = (vp.ramp(s_edge + h) - vp.ramp(s_edge - h)) / (2 * h)
        assert abs(d1 - vp.ramp_deriv(s_edge)) < 1e-5 * vp.eps0


def test_viscosity_on_low_degree_sensor():
    # sensor of degree <= p-1 projects exactly: minimum viscosity
    ref = reference_element(2)
    pts, w = triangle_quadrature(4)
    mass = ref.basis_values(pts).T @ (w[:, None] * ref.basis_values(pts))
    model = Burgers()
    nodes = ref.nodes
    U = (1.0 + nodes[:, 0] + 0.5 * nodes[:, 1])[None, :, None]
    eps = artificial_viscosity(model, U, ref, mass)
    assert abs(eps[0] - model.viscosity.eps_base) < 1e-14
    # zero sensor treated the same way
    eps0 = artificial_viscosity(model, np.zeros_like(U), ref, mass)
    assert abs(eps0[0] - model.viscosity.eps_base) < 1e-14


def test_viscosity_saturation():
    # rough nodal data drives the ramp to its plateau
    ref = reference_element(2)
    pts, w = triangle_quadrature(4)
    mass = ref.basis_values(pts).T @ (w[:, None] * ref.basis_values(pts))
    model = Burgers()
    rng = np.random.default_rng(5)
    U = rng.standard_normal((1, ref.n_lp, 1))
    eps = artificial_viscosity(model, U, ref, mass)
    assert eps[0] <= model.viscosity.eps_base + model.viscosity.eps0 + 1e-15


def test_sensor_component_selection():
    burgers, sw = Burgers(), ShallowWater()
    U1 = np.array([[1.5]])
    assert np.allclose(burgers.registration_sensor(U1), 1.5)
    U2 = np.array([[2.5, 4.0]])
    assert np.allclose(sw.registration_sensor(U2), 2.5)
    assert np.allclose(sw.shock_sensor(U2), 2.5)


def test_dirichlet_masks():
    b = Burgers()
    assert b.dirichlet_mask(BOTTOM)[0] and b.dirichlet_mask(LEFT)[0]
    assert not b.dirichlet_mask(TOP)[0] and not b.dirichlet_mask(RIGHT)[0]
    s = ShallowWater()
    assert list(s.dirichlet_mask(BOTTOM)) == [True, True]
    assert list(s.dirichlet_mask(LEFT)) == [False, True]
    assert list(s.dirichlet_mask(RIGHT)) == [True, False]
    assert list(s.dirichlet_mask(TOP)) == [False, False]


def test_make_model():
    assert make_model("burgers").name == "burgers"
    assert make_model("shallow-water").name == "shallow-water"
    with pytest.raises(ValueError):
        make_model("euler")
