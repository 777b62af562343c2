import numpy as np
import pytest

from strobe.maps import Displacement, MapSpace
from strobe.mesh import BOTTOM, INTERIOR, RIGHT, build_structured_mesh, deform_mesh
from strobe.refelem import triangle_quadrature


def test_single_split_quad_counts():
    m = build_structured_mesh(1.0, 0.8, 1, 1, 1)
    assert m.n_elements == 2
    assert m.n_facets == 5


def test_total_area_matches_quadrature_oracle():
    m = build_structured_mesh(1.0, 0.8, 36, 18, 2)
    assert m.n_elements == 2 * 36 * 18
    # oracle: per-element area from the reference quadrature rule
    _, w = triangle_quadrature(4)
    areas = w.sum() * m.det_jac
    assert abs(areas.sum() - 0.8) < 1e-12 * 0.8
    assert np.allclose(areas, m.element_areas())


@pytest.mark.parametrize("bad", [(0, 0.8, 4, 3, 2), (1, -1, 4, 3, 2),
                                 (1, 0.8, 0, 3, 2), (1, 0.8, 4, 3, 5)])
def test_invalid_arguments(bad):
    with pytest.raises(ValueError):
        build_structured_mesh(*bad)


def test_boundary_normals():
    m = build_structured_mesh(1.0, 0.8, 3, 2, 1)
    for f in range(m.n_facets):
        n, length = m.facet_normal_and_length(f)
        assert abs(np.linalg.norm(n) - 1.0) < 1e-14
        bt = m.facet_btype[f]
        if bt == BOTTOM:
            assert np.allclose(n, [0, -1])
        elif bt == RIGHT:
            assert np.allclose(n, [1, 0])


def test_interior_diagonal_normal_and_length():
    m = build_structured_mesh(1.0, 1.0, 1, 1, 1)
    interior = np.where(m.facet_btype == INTERIOR)[0]
    assert interior.size == 1
    n, length = m.facet_normal_and_length(interior[0])
    assert abs(length - np.sqrt(2.0)) < 1e-14
    assert np.allclose(np.abs(n), [1 / np.sqrt(2)] * 2)
    assert abs(n[0] + n[1]) < 1e-14   # perpendicular to the diagonal


def test_facet_normal_out_of_range():
    m = build_structured_mesh(1.0, 0.8, 2, 2, 1)
    with pytest.raises(IndexError):
        m.facet_normal_and_length(m.n_facets)


def test_divergence_free_closure():
    # discrete Gauss: sum of (c . N) |f| over each element boundary is zero
    m = build_structured_mesh(1.0, 0.8, 5, 4, 2)
    totals = np.zeros((m.n_elements, 2))
    for f in range(m.n_facets):
        kp, km = m.facet_elems[f]
        contrib = m.normals[f] * m.facet_lengths[f]
        totals[kp] += contrib
        if km >= 0:
            totals[km] -= contrib
    assert np.abs(totals).max() < 1e-12


def test_interior_facets_reference_two_elements():
    m = build_structured_mesh(1.0, 0.8, 4, 3, 2)
    interior = m.facet_btype == INTERIOR
    assert np.all(m.facet_elems[interior].min(axis=1) >= 0)
    assert np.all(m.facet_elems[~interior, 1] == -1)


def test_deform_zero_is_identity():
    m = build_structured_mesh(1.0, 0.8, 4, 3, 2)
    ms = MapSpace(1.0, 0.8, 3)
    dm = deform_mesh(m, Displacement.zero(ms))
    assert np.allclose(dm.nodes, m.nodes)


def test_deform_keeps_boundary_and_corners():
    m = build_structured_mesh(1.0, 0.8, 4, 3, 2)
    ms = MapSpace(1.0, 0.8, 3)
    a = np.zeros(ms.M_hf)
    a[0], a[ms.M_hf // 2 + 1] = 0.05, -0.04
    dm = deform_mesh(m, Displacement(ms, a))
    on_left = np.abs(m.nodes[:, 0]) < 1e-14
    assert np.abs(dm.nodes[on_left, 0]).max() < 1e-13
    corners = [(0, 0), (1, 0), (0, 0.8), (1, 0.8)]
    for cx, ct in corners:
        sel = (np.abs(m.nodes[:, 0] - cx) < 1e-14) \
            & (np.abs(m.nodes[:, 1] - ct) < 1e-14)
        assert np.allclose(dm.nodes[sel], m.nodes[sel], atol=1e-13)
    # interior nodes move
    inner = (~on_left) & (m.nodes[:, 0] < 1 - 1e-9) \
        & (m.nodes[:, 1] > 1e-9) & (m.nodes[:, 1] < 0.8 - 1e-9)
    assert np.abs(dm.nodes[inner] - m.nodes[inner]).max() > 1e-5


def test_deform_preserves_connectivity_hash():
    m = build_structured_mesh(1.0, 0.8, 3, 3, 2)
    ms = MapSpace(1.0, 0.8, 3)
    a = 0.02 * np.ones(ms.M_hf)
    dm = deform_mesh(m, Displacement(ms, a))
    assert dm.base.connectivity_hash() == m.connectivity_hash()


def test_locate_ties_resolve_to_lower_element():
    m = build_structured_mesh(1.0, 0.8, 4, 3, 2)
    # points exactly on the split diagonal of cell (0, 0)
    pts = np.array([[0.125, 0.1], [0.0625, 0.05]])
    elems = m.locate(pts)
    assert np.all(elems == 0)


def test_orientation_positive():
    m = build_structured_mesh(2.0, 1.0, 3, 5, 3)
    assert np.all(m.det_jac > 0)
