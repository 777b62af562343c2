"""Reference triangle: nodal Lagrange basis and quadrature rules.

The reference element is the unit triangle {(r,s): r,s >= 0, r+s <= 1}.
Nodal bases of total degree p live on the uniform lattice (i/p, j/p).
Volume quadrature uses a collapsed Gauss-Legendre x Gauss-Jacobi tensor
rule, exact for total degree 2*npts-1; edge quadrature is plain
Gauss-Legendre on (0,1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


def lattice_nodes(p: int) -> np.ndarray:
    """Uniform degree-p lattice on the reference triangle, shape (n_lp, 2)."""
    if p < 1:
        raise ValueError("polynomial order must be >= 1")
    pts = [(i / p, j / p) for j in range(p + 1) for i in range(p + 1 - j)]
    return np.asarray(pts, dtype=float)


def n_local(p: int) -> int:
    """Nodes per total-degree-p triangle, (p+1)(p+2)/2."""
    return (p + 1) * (p + 2) // 2


def _monomial_exponents(p: int) -> list[tuple[int, int]]:
    return [(a, b) for b in range(p + 1) for a in range(p + 1 - b)]


def _monomial_matrix(points: np.ndarray, exps) -> np.ndarray:
    r = points[..., 0]
    s = points[..., 1]
    cols = [r**a * s**b for a, b in exps]
    return np.stack(cols, axis=-1)


def _monomial_grad(points: np.ndarray, exps) -> np.ndarray:
    r = points[..., 0]
    s = points[..., 1]
    dr, ds = [], []
    for a, b in exps:
        dr.append(a * r ** max(a - 1, 0) * s**b if a > 0 else np.zeros_like(r))
        ds.append(b * r**a * s ** max(b - 1, 0) if b > 0 else np.zeros_like(s))
    return np.stack([np.stack(dr, axis=-1), np.stack(ds, axis=-1)], axis=-1)


@dataclass(frozen=True)
class ReferenceElement:
    """Nodal basis data for the degree-p reference triangle."""

    p: int
    nodes: np.ndarray          # (n_lp, 2)
    vinv: np.ndarray           # inverse Vandermonde, (n_lp, n_lp)

    @property
    def n_lp(self) -> int:
        return self.nodes.shape[0]

    def basis_values(self, points: np.ndarray) -> np.ndarray:
        """Values of the nodal basis at reference points, (..., n_lp)."""
        exps = _monomial_exponents(self.p)
        return _monomial_matrix(np.asarray(points, dtype=float), exps) @ self.vinv

    def basis_grads(self, points: np.ndarray) -> np.ndarray:
        """Reference gradients of the nodal basis, (..., n_lp, 2)."""
        exps = _monomial_exponents(self.p)
        g = _monomial_grad(np.asarray(points, dtype=float), exps)
        return np.einsum("...md,mi->...id", g, self.vinv)

    def degree_projector(self, q: int) -> np.ndarray:
        """L2 projector onto total degree q <= p, as an (n_lp, n_lp) nodal map.

        Affine-invariant: the reference mass matrix cancels the Jacobian.
        """
        pts, w = triangle_quadrature(self.p + 2)
        B = self.basis_values(pts)
        exps_q = _monomial_exponents(q)
        lo = _monomial_matrix(pts, exps_q)
        M_lo = lo.T @ (w[:, None] * lo)
        R = lo.T @ (w[:, None] * B)
        lo_nodes = _monomial_matrix(self.nodes, exps_q)
        return lo_nodes @ np.linalg.solve(M_lo, R)


def reference_element(p: int) -> ReferenceElement:
    nodes = lattice_nodes(p)
    V = _monomial_matrix(nodes, _monomial_exponents(p))
    return ReferenceElement(p=p, nodes=nodes, vinv=np.linalg.inv(V))


def triangle_quadrature(n1d: int) -> tuple[np.ndarray, np.ndarray]:
    """Collapsed tensor rule on the reference triangle.

    Returns (points, weights) with sum(weights) = 1/2; exact for total
    degree <= 2*n1d - 1.
    """
    xu, wu = roots_legendre(n1d)
    u = 0.5 * (xu + 1.0)
    wu = 0.5 * wu
    xv, wv = roots_jacobi(n1d, 1.0, 0.0)
    v = 0.5 * (xv + 1.0)
    wv = 0.25 * wv
    U, V = np.meshgrid(u, v, indexing="ij")
    WU, WV = np.meshgrid(wu, wv, indexing="ij")
    pts = np.stack([(U * (1.0 - V)).ravel(), V.ravel()], axis=-1)
    return pts, (WU * WV).ravel()


def edge_quadrature(n1d: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre rule on (0,1): (points, weights), exact deg 2*n1d-1."""
    x, w = roots_legendre(n1d)
    return 0.5 * (x + 1.0), 0.5 * w


def gauss_legendre_2d(nx: int, ny: int, Lx: float, Ly: float):
    """Tensor Gauss rule on the rectangle (0,Lx) x (0,Ly)."""
    ux, wx = edge_quadrature(nx)
    uy, wy = edge_quadrature(ny)
    X, Y = np.meshgrid(ux * Lx, uy * Ly, indexing="ij")
    W = np.outer(wx * Lx, wy * Ly)
    return np.stack([X.ravel(), Y.ravel()], axis=-1), W.ravel()
