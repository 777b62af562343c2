"""DG function-space machinery: tabulations, norms, Riesz maps, POD.

Fields use the linear dof indexing j = i + k*n_lp + d*n_lp*N_e
(node i fastest, then element k, then state component d).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import INTERIOR, SpaceTimeMesh
from .refelem import edge_quadrature, triangle_quadrature

BR2_ETA = 3.0


class DGSpace:
    """Scalar DG space of order p on a space-time mesh, with quadrature
    and facet-trace tabulations shared by all assembly routines."""

    def __init__(self, mesh: SpaceTimeMesh):
        self.mesh = mesh
        self.ref = mesh.ref
        p = mesh.p
        n1d = p + 2    # volume rule exact to degree 2p+3, safe for nonlinear fluxes
        self.vol_pts, self.vol_w = triangle_quadrature(n1d)
        self.n_q = self.vol_w.size
        self.basis_v = self.ref.basis_values(self.vol_pts)            # (nq, n_lp)
        self.basis_g = self.ref.basis_grads(self.vol_pts)             # (nq, n_lp, 2)

        inv = mesh.inv_jac
        # physical gradients: grad_phi[k,q,i,:] = basis_g[q,i,a] * inv[k,a,:]
        self.grad_phys = np.einsum("qia,kab->kqib", self.basis_g, inv)
        v0 = mesh.vertices[mesh.elements[:, 0]]
        self.x_vol = v0[:, None, :] + np.einsum(
            "kab,qb->kqa", mesh.jac, self.vol_pts
        )                                                             # (N_e, nq, 2)
        self.w_vol = np.outer(mesh.det_jac, self.vol_w)               # (N_e, nq)

        self.edge_s, self.edge_w = edge_quadrature(n1d)
        self.n_qf = self.edge_s.size
        self._tabulate_facets()
        self._build_liftings()

    def _tabulate_facets(self):
        mesh = self.mesh
        n_f, n_qf, n_lp = mesh.n_facets, self.n_qf, self.ref.n_lp
        va = mesh.vertices[mesh.facet_verts[:, 0]]
        vb = mesh.vertices[mesh.facet_verts[:, 1]]
        self.x_facet = va[:, None, :] + self.edge_s[None, :, None] * (vb - va)[:, None, :]
        self.w_facet = np.outer(mesh.facet_lengths, self.edge_w)      # (N_f, n_qf)

        self.trace_v = np.zeros((n_f, 2, n_qf, n_lp))
        self.trace_g = np.zeros((n_f, 2, n_qf, n_lp, 2))
        for side in range(2):
            elems = mesh.facet_elems[:, side]
            ok = elems >= 0
            ref_pts = mesh.ref_coords(
                self.x_facet[ok].reshape(-1, 2),
                np.repeat(elems[ok], n_qf),
            ).reshape(-1, n_qf, 2)
            self.trace_v[ok, side] = self.ref.basis_values(ref_pts)
            g = self.ref.basis_grads(ref_pts)
            self.trace_g[ok, side] = np.einsum(
                "fqia,fab->fqib", g, mesh.inv_jac[elems[ok]]
            )

    def _build_liftings(self):
        """Per-facet-side BR2 trace operators K_s = T_s M_s^{-1} T_s^T."""
        mesh = self.mesh
        n_f, n_qf = mesh.n_facets, self.n_qf
        mass_ref = self.reference_mass
        self.lift_K = np.zeros((n_f, 2, n_qf, n_qf))
        minv_ref = np.linalg.inv(mass_ref)
        for side in range(2):
            elems = mesh.facet_elems[:, side]
            ok = elems >= 0
            T = self.trace_v[ok, side]                                # (m, n_qf, n_lp)
            scale = 1.0 / mesh.det_jac[elems[ok]]
            self.lift_K[ok, side] = scale[:, None, None] * np.einsum(
                "fqi,ij,frj->fqr", T, minv_ref, T
            )

    @cached_property
    def reference_mass(self) -> np.ndarray:
        B = self.basis_v
        return B.T @ (self.vol_w[:, None] * B)

    @property
    def n_scalar(self) -> int:
        return self.mesh.n_elements * self.ref.n_lp

    def n_dofs(self, D: int) -> int:
        return D * self.n_scalar

    def scalar_mass(self) -> sp.csr_matrix:
        blocks = self.mesh.det_jac[:, None, None] * self.reference_mass[None]
        return sp.block_diag([sp.csr_matrix(b) for b in blocks], format="csr")

    def evaluate(self, coeffs: np.ndarray, D: int, points: np.ndarray,
                 need_grad: bool = False, clamp_tol: float = 1e-10):
        """Evaluate a DG field (and optionally its broken gradient) at points.

        Points outside the closed rectangle are clamped to the boundary;
        the number of beyond-tolerance clamps is returned as a diagnostic.
        """
        mesh = self.mesh
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.zeros(2)
        hi = np.array([mesh.L, mesh.T])
        clipped = np.clip(pts, lo, hi)
        n_clamped = int(np.sum(np.any(np.abs(clipped - pts) > clamp_tol, axis=1)))
        elems = mesh.locate(clipped)
        ref_pts = mesh.ref_coords(clipped, elems)
        B = self.ref.basis_values(ref_pts)                 # (n_pts, n_lp)
        w = coeffs.reshape(D, mesh.n_elements, self.ref.n_lp)
        nodal = w[:, elems, :]                             # (D, n_pts, n_lp)
        vals = np.einsum("dpi,pi->pd", nodal, B)
        if not need_grad:
            return vals, n_clamped
        g_ref = self.ref.basis_grads(ref_pts)              # (n_pts, n_lp, 2)
        g_phys = np.einsum("pia,pab->pib", g_ref, mesh.inv_jac[elems])
        grads = np.einsum("dpi,pib->pdb", nodal, g_phys)
        return vals, grads, n_clamped


@dataclass
class DGField:
    """Coefficient vector of a D-component piecewise polynomial field."""

    space: DGSpace
    D: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.n_dofs(self.D),):
            raise ValueError(
                f"expected {self.space.n_dofs(self.D)} coefficients, "
                f"got {self.coeffs.shape}"
            )

    @classmethod
    def zeros(cls, space: DGSpace, D: int) -> "DGField":
        return cls(space, D, np.zeros(space.n_dofs(D)))

    @classmethod
    def from_nodal(cls, space: DGSpace, nodal: np.ndarray) -> "DGField":
        """Build from nodal values shaped (N_e, n_lp, D)."""
        D = nodal.shape[-1]
        return cls(space, D, np.ascontiguousarray(nodal.transpose(2, 0, 1)).ravel())

    @classmethod
    def from_function(cls, space: DGSpace, fn, D: int = 1) -> "DGField":
        vals = np.asarray(fn(space.mesh.nodes))
        if vals.ndim == 1:
            vals = vals[:, None]
        nodal = vals.reshape(space.mesh.n_elements, space.ref.n_lp, D)
        return cls.from_nodal(space, nodal)

    def nodal(self) -> np.ndarray:
        """Nodal values shaped (N_e, n_lp, D)."""
        w = self.coeffs.reshape(self.D, self.space.mesh.n_elements, self.space.ref.n_lp)
        return np.ascontiguousarray(w.transpose(1, 2, 0))

    def component(self, d: int) -> np.ndarray:
        n = self.space.n_scalar
        return self.coeffs[d * n:(d + 1) * n]

    def evaluate(self, points: np.ndarray, need_grad: bool = False):
        return self.space.evaluate(self.coeffs, self.D, points, need_grad)

    def linear_index(self, i: int, k: int, d: int) -> int:
        n_lp = self.space.ref.n_lp
        return i + k * n_lp + d * n_lp * self.space.mesh.n_elements


@dataclass
class NormPair:
    """Discrete L2 and H1 (BR2-stabilized) norm matrices."""

    X: sp.csr_matrix
    Y: sp.csr_matrix
    _y_solve: object = field(default=None, repr=False)

    def y_solve(self, rhs: np.ndarray) -> np.ndarray:
        if self._y_solve is None:
            self._y_solve = spla.factorized(self.Y.tocsc())
        if rhs.ndim == 1:
            return self._y_solve(rhs)
        return np.column_stack([self._y_solve(rhs[:, j]) for j in range(rhs.shape[1])])

    def x_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(v @ (self.X @ v), 0.0)))

    def y_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(v @ (self.Y @ v), 0.0)))


def assemble_norms(space: DGSpace, D: int = 1) -> NormPair:
    """Mass matrix and BR2-stabilized H1 matrix (interior facet terms only)."""
    mesh = space.mesh
    n_lp = space.ref.n_lp
    mass = space.scalar_mass()

    stiff_blocks = np.einsum(
        "kqia,kqja,kq->kij", space.grad_phys, space.grad_phys, space.w_vol
    )
    stiff = sp.block_diag([sp.csr_matrix(b) for b in stiff_blocks], format="csr")

    rows, cols, vals = [], [], []
    interior = np.where(mesh.facet_btype == INTERIOR)[0]
    sigma = (1.0, -1.0)
    for f in interior:
        kp, km = mesh.facet_elems[f]
        n = mesh.normals[f]
        wq = space.w_facet[f]
        W = np.diag(wq)
        Ksum = space.lift_K[f, 0] + space.lift_K[f, 1]
        elems = (kp, km)
        for t in range(2):      # test side
            for s in range(2):  # trial side
                gn_s = space.trace_g[f, s] @ n                     # (n_qf, n_lp)
                v_t = space.trace_v[f, t]
                a1 = 0.5 * sigma[t] * v_t.T @ (wq[:, None] * gn_s)
                gn_t = space.trace_g[f, t] @ n
                v_s = space.trace_v[f, s]
                a3 = 0.5 * sigma[s] * gn_t.T @ (wq[:, None] * v_s)
                b = -(BR2_ETA / 4.0) * sigma[t] * sigma[s] * (
                    v_t.T @ W @ Ksum @ W @ v_s
                )
                block = -(a1 + a3 + b)     # minus sign of the H1 definition
                r = elems[t] * n_lp + np.arange(n_lp)
                c = elems[s] * n_lp + np.arange(n_lp)
                rows.append(np.repeat(r, n_lp))
                cols.append(np.tile(c, n_lp))
                vals.append(block.ravel())
    n_sc = space.n_scalar
    facet_mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_sc, n_sc),
    )
    Y = mass + stiff + facet_mat
    Y = 0.5 * (Y + Y.T)
    X = mass
    if D > 1:
        X = sp.kron(sp.eye(D), X, format="csr")
        Y = sp.kron(sp.eye(D), Y, format="csr")
    return NormPair(X=X.tocsr(), Y=Y.tocsr())


def riesz(norms: NormPair, functional: np.ndarray) -> np.ndarray:
    """Riesz representer in the discrete H1 space: solve Y v = F."""
    return norms.y_solve(np.asarray(functional, dtype=float))


@dataclass
class PODResult:
    modes: np.ndarray          # (n_dofs, N), orthonormal in the POD product
    eigenvalues: np.ndarray    # all n_train values, nonincreasing, >= 0
    coefficients: np.ndarray   # (n_train, N) projections of the snapshots
    N: int


def pod_cardinality(eigenvalues: np.ndarray, tol_pod: float) -> int:
    total = eigenvalues.sum()
    if total <= 0:
        return 0
    csum = np.cumsum(eigenvalues)
    return int(np.searchsorted(csum, (1.0 - tol_pod) * total) + 1)


def pod(snapshots: np.ndarray, tol_pod: float, inner=None,
        max_modes: int | None = None) -> PODResult:
    """Method-of-snapshots POD.

    snapshots: (n_dofs, n_train) matrix; inner: SPD matrix or None for
    the Euclidean product. Modes satisfy (zeta_n, zeta_m) = delta_nm and
    N is the smallest count capturing a (1 - tol_pod) energy fraction.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError("need at least one snapshot")
    if not 0.0 < tol_pod < 1.0:
        raise ValueError("tol_pod must lie in (0,1)")
    XS = S if inner is None else inner @ S
    C = S.T @ XS
    C = 0.5 * (C + C.T)
    lam, V = np.linalg.eigh(C)
    order = np.argsort(lam)[::-1]
    lam = np.maximum(lam[order], 0.0)
    V = V[:, order]
    N = pod_cardinality(lam, tol_pod)
    if max_modes is not None:
        N = min(N, max_modes)
    rank_ok = lam > max(lam[0], 1e-300) * 1e-14
    N = min(N, int(rank_ok.sum()))
    modes = S @ (V[:, :N] / np.sqrt(lam[:N]))
    coeffs = (XS.T @ modes) if inner is not None else (S.T @ modes)
    return PODResult(modes=modes, eigenvalues=lam, coefficients=coeffs, N=N)


def best_fit_error(U: DGField, Z: np.ndarray, norms: NormPair,
                   phi=None) -> float:
    """Relative best-fit error of a snapshot against a reduced basis.

    Without a map: || U - Pi_Z U || / || U || with Z orthonormal in X.
    With a map phi: the registered variant, computed in the reference
    domain with the g-weighted quadrature form (no inverse map needed).
    """
    u = U.coeffs
    norm_u2 = float(u @ (norms.X @ u))
    if norm_u2 <= 0:
        raise ZeroDivisionError("cannot normalize a zero snapshot")
    if phi is None:
        if Z.size == 0:
            return 1.0
        proj = Z.T @ (norms.X @ u)
        err2 = max(norm_u2 - float(proj @ proj), 0.0)
        return float(np.sqrt(err2 / norm_u2))
    space = U.space
    pts = space.x_vol.reshape(-1, 2)
    tab = phi.space.tabulate(pts)
    mapped = pts + phi.space.displacement_values(tab, phi.a)
    _, g = phi.space.jacobians(tab, phi.a)
    vals, _ = U.evaluate(mapped)                       # (n_pts, D)
    w = space.w_vol.ravel() * g
    if Z.size == 0:
        err2 = float(np.einsum("p,pd->", w, vals**2))
        return float(np.sqrt(max(err2, 0.0) / norm_u2))
    n_pts = pts.shape[0]
    Zv = Z.reshape(U.D, space.mesh.n_elements, space.ref.n_lp, -1)
    Zq = np.einsum("qi,dkim->dkqm", space.basis_v, Zv).reshape(U.D, n_pts, -1)
    # g-weighted normal equations over the quadrature points
    A = np.einsum("dpm,p,dpn->mn", Zq, w, Zq)
    b = np.einsum("dpm,p,pd->m", Zq, w, vals)
    c = np.linalg.solve(A, b)
    resid = vals - np.einsum("dpm,m->pd", Zq, c)
    err2 = float(np.einsum("p,pd->", w, resid**2))
    return float(np.sqrt(max(err2, 0.0) / norm_u2))


def to_continuous(U: DGField) -> DGField:
    """Facet-averaged continuous approximation (mean over co-located nodes)."""
    space = U.space
    groups = space.mesh.node_groups()
    n_groups = groups.max() + 1
    nodal = U.nodal().reshape(-1, U.D)                 # (n_nodes, D)
    sums = np.zeros((n_groups, U.D))
    counts = np.zeros(n_groups)
    np.add.at(sums, groups, nodal)
    np.add.at(counts, groups, 1.0)
    avg = sums / counts[:, None]
    out = avg[groups].reshape(space.mesh.n_elements, space.ref.n_lp, U.D)
    return DGField.from_nodal(space, out)


def continuous_projection_matrix(space: DGSpace, D: int) -> sp.csr_matrix:
    """Sparse operator applying facet averaging to coefficient vectors."""
    groups = space.mesh.node_groups()
    n_groups = groups.max() + 1
    counts = np.bincount(groups, minlength=n_groups).astype(float)
    n_sc = space.n_scalar
    rows = np.arange(n_sc)
    P_gather = sp.csr_matrix(
        (np.ones(n_sc), (rows, groups)), shape=(n_sc, n_groups)
    )
    P_scatter = sp.csr_matrix(
        (1.0 / counts[groups], (groups, rows)), shape=(n_groups, n_sc)
    )
    # nodal index within the scalar block is (k * n_lp + i): same layout
    A = (P_gather @ P_scatter).tocsr()
    if D > 1:
        A = sp.kron(sp.eye(D), A, format="csr")
    return A
