"""Projection-based reduced-order models in the mapped configuration.

Offline: Galerkin / exact minimum-residual / approximate minimum
residual (empirical test space) reference solvers, the Riesz-representer
test-space construction, and the NNLS empirical quadrature. Online: a
halo-restricted assembler whose cost scales with the number of sampled
elements, driven by Gauss-Newton warm-started from the coefficient
regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .assembly import MapCache, ResidualWorkspace
from .dg import BR2_ETA, DGSpace, NormPair, pod, pod_cardinality
from .maps import BijectivityParams, Displacement, MapSpace
from .mesh import INTERIOR
from .models import (ConservationLaw, artificial_viscosity, rusanov_flux,
                     rusanov_flux_jac)
from .nnls import NnlsResult, nnls_lawson_hanson

GN_GRAD_TOL = 1e-9
GN_MAX_ITER = 30


# ----------------------------------------------------------------------
# reference (full-quadrature) reduced solvers
# ----------------------------------------------------------------------

@dataclass
class ReducedSolveResult:
    alpha: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float


def reduced_residual(ws: ResidualWorkspace, Z: np.ndarray, alpha: np.ndarray,
                     test: np.ndarray | None = None,
                     weights: np.ndarray | None = None) -> np.ndarray:
    """Residual of the reduced state, optionally tested and EQ-weighted."""
    W = Z @ alpha
    if weights is None:
        R = ws.residual(W)
    else:
        C = ws.element_residual_matrix(W)
        R = C @ weights
    return R if test is None else test.T @ R


def galerkin_solve(ws: ResidualWorkspace, Z: np.ndarray,
                   alpha0: np.ndarray | None = None) -> ReducedSolveResult:
    """Newton on the Galerkin system Z^T R(Z alpha) = 0."""
    N = Z.shape[1]
    alpha = np.zeros(N) if alpha0 is None else np.asarray(alpha0, dtype=float).copy()
    nr = np.inf
    for it in range(GN_MAX_ITER):
        W = Z @ alpha
        try:
            eps = ws.element_viscosity(W)
            R, J = ws.residual_and_jacobian(W, eps)
        except (ValueError, FloatingPointError):
            return ReducedSolveResult(alpha, False, it, np.inf)
        g = Z.T @ R
        nr = np.linalg.norm(g)
        if not np.isfinite(nr):
            return ReducedSolveResult(alpha, False, it, nr)
        if nr <= GN_GRAD_TOL:
            return ReducedSolveResult(alpha, True, it, nr)
        Jr = Z.T @ (J @ Z)
        try:
            step = np.linalg.solve(Jr, -g)
        except np.linalg.LinAlgError:
            return ReducedSolveResult(alpha, False, it, nr)
        lam = 1.0
        ok = False
        for _ in range(25):
            try:
                g_try = Z.T @ ws.residual(Z @ (alpha + lam * step))
            except (ValueError, FloatingPointError):
                g_try = np.full(N, np.inf)
            if np.linalg.norm(g_try) <= (1 - 1e-4 * lam) * nr:
                ok = True
                break
            lam *= 0.5
        if not ok:
            return ReducedSolveResult(alpha, False, it, nr)
        alpha = alpha + lam * step
    return ReducedSolveResult(alpha, nr <= GN_GRAD_TOL, GN_MAX_ITER, nr)


def minres_solve(ws: ResidualWorkspace, Z: np.ndarray, norms: NormPair,
                 alpha0: np.ndarray | None = None) -> ReducedSolveResult:
    """Gauss-Newton minimizer of ||R(Z alpha)||_{Y_hf^{-1}}."""
    N = Z.shape[1]
    alpha = np.zeros(N) if alpha0 is None else np.asarray(alpha0, dtype=float).copy()

    def parts(a):
        W = Z @ a
        eps = ws.element_viscosity(W)
        R, J = ws.residual_and_jacobian(W, eps)
        Yi_R = norms.y_solve(R)
        f = 0.5 * float(R @ Yi_R)
        JZ = J @ Z
        grad = JZ.T @ Yi_R
        return f, grad, JZ, Yi_R

    nr = np.inf
    for it in range(GN_MAX_ITER):
        try:
            f, grad, JZ, Yi_R = parts(alpha)
        except (ValueError, FloatingPointError):
            return ReducedSolveResult(alpha, False, it, np.inf)
        nr = np.linalg.norm(grad)
        if nr <= GN_GRAD_TOL:
            return ReducedSolveResult(alpha, True, it, nr)
        Yi_JZ = norms.y_solve(JZ.toarray() if sp.issparse(JZ) else JZ)
        H = (JZ.T @ Yi_JZ)
        H = np.asarray(H)
        try:
            step = np.linalg.solve(H + 1e-14 * np.eye(N), -grad)
        except np.linalg.LinAlgError:
            return ReducedSolveResult(alpha, False, it, nr)
        lam, ok = 1.0, False
        for _ in range(25):
            try:
                a_try = alpha + lam * step
                R_try = ws.residual(Z @ a_try)
                f_try = 0.5 * float(R_try @ norms.y_solve(R_try))
            except (ValueError, FloatingPointError):
                f_try = np.inf
            if f_try <= f + 1e-4 * lam * float(grad @ step):
                ok = True
                break
            lam *= 0.5
        if not ok:
            return ReducedSolveResult(alpha, False, it, nr)
        alpha = a_try
    return ReducedSolveResult(alpha, nr <= GN_GRAD_TOL, GN_MAX_ITER, nr)


def amr_solve(ws: ResidualWorkspace, Z: np.ndarray, Y: np.ndarray,
              alpha0: np.ndarray | None = None,
              weights: np.ndarray | None = None) -> ReducedSolveResult:
    """Gauss-Newton on || Y^T R(Z alpha) ||_2 with full-mesh assembly.

    This is the reference (hf-quadrature) approximate-minimum-residual
    path; the hyper-reduced counterpart lives in ReducedAssembler.
    """
    N = Z.shape[1]
    alpha = np.zeros(N) if alpha0 is None else np.asarray(alpha0, dtype=float).copy()

    def resid(a):
        if weights is None:
            return Y.T @ ws.residual(Z @ a)
        C = ws.element_residual_matrix(Z @ a)
        return Y.T @ (C @ weights)

    nr = np.inf
    for it in range(GN_MAX_ITER):
        W = Z @ alpha
        try:
            eps = ws.element_viscosity(W)
            R_full, J = ws.residual_and_jacobian(W, eps)
        except (ValueError, FloatingPointError):
            return ReducedSolveResult(alpha, False, it, np.inf)
        if weights is None:
            r = Y.T @ R_full
        else:
            r = resid(alpha)
        Jr = Y.T @ (J @ Z)
        grad = Jr.T @ r
        nr = np.linalg.norm(grad)
        if nr <= GN_GRAD_TOL:
            return ReducedSolveResult(alpha, True, it, nr)
        step, *_ = np.linalg.lstsq(Jr, -r, rcond=None)
        f = 0.5 * float(r @ r)
        lam, ok = 1.0, False
        for _ in range(25):
            try:
                r_try = resid(alpha + lam * step)
                f_try = 0.5 * float(r_try @ r_try)
            except (ValueError, FloatingPointError):
                f_try = np.inf
            if f_try <= f + 1e-4 * lam * float(grad @ step):
                ok = True
                break
            lam *= 0.5
        if not ok:
            return ReducedSolveResult(alpha, False, it, nr)
        alpha = alpha + lam * step
    return ReducedSolveResult(alpha, nr <= GN_GRAD_TOL, GN_MAX_ITER, nr)


# ----------------------------------------------------------------------
# empirical test space (Riesz representers of Jacobian rows)
# ----------------------------------------------------------------------

def build_test_space(space: DGSpace, model: ConservationLaw, norms: NormPair,
                     mapped_snapshots: np.ndarray, map_fields: list,
                     mu_list, Z: np.ndarray, tol_pod: float = 1e-4,
                     J_dim: int | None = None, continuous: bool = False,
                     map_cache: MapCache | None = None):
    """POD (in the H1 product) of Riesz representers of Jacobian rows.

    mapped_snapshots: (N_dof, n_train) states in the reference frame;
    map_fields: per-snapshot Displacement (or None); J_dim overrides the
    POD cardinality rule (the J = c*N presets).
    """
    n_train = mapped_snapshots.shape[1]
    N = Z.shape[1]
    reps = np.empty((Z.shape[0], n_train * N))
    for k in range(n_train):
        ws = ResidualWorkspace(space, model, mu=mu_list[k], phi=map_fields[k],
                               map_cache=map_cache)
        Wk = mapped_snapshots[:, k]
        eps = ws.element_viscosity(Wk)
        _, J = ws.residual_and_jacobian(Wk, eps)
        F = J @ Z                                    # columns: DR[U](zeta_n, .)
        reps[:, k * N:(k + 1) * N] = norms.y_solve(F)
    if continuous:
        from .dg import continuous_projection_matrix
        P = continuous_projection_matrix(space, model.D)
        reps = np.asarray(P @ reps)
    res = pod(reps, tol_pod, inner=norms.Y, max_modes=J_dim)
    Jn = res.N if J_dim is None else min(J_dim, res.modes.shape[1])
    return res.modes[:, :Jn], res.eigenvalues


# ----------------------------------------------------------------------
# empirical quadrature (EQP)
# ----------------------------------------------------------------------

@dataclass
class EqpProblem:
    G: np.ndarray                # (1 + N*n_train, N_e) scaled constraints
    b: np.ndarray
    row_blocks: list             # slices per block for diagnostics


@dataclass
class EqpResult:
    rho: np.ndarray
    support: np.ndarray
    nnls: NnlsResult
    problem: EqpProblem


def build_eqp_problem(space: DGSpace, model: ConservationLaw, norms: NormPair,
                      Z: np.ndarray, Y: np.ndarray, coeffs: np.ndarray,
                      map_fields: list, mu_list,
                      map_cache: MapCache | None = None) -> EqpProblem:
    """Assemble the constant-function and manifold-accuracy constraints.

    coeffs: (n_train, N) training projection coefficients; rows are
    normalized blockwise by their right-hand sides so one NNLS tolerance
    is meaningful across training points.
    """
    N_e = space.mesh.n_elements
    n_train = coeffs.shape[0]
    N = Z.shape[1]
    areas = space.mesh.element_areas()
    omega = space.mesh.L * space.mesh.T
    rows = [areas / omega]
    rhs = [np.array([1.0])]
    blocks = [slice(0, 1)]
    r0 = 1
    for k in range(n_train):
        ws = ResidualWorkspace(space, model, mu=mu_list[k], phi=map_fields[k],
                               map_cache=map_cache)
        W = Z @ coeffs[k]
        eps = ws.element_viscosity(W)
        C = ws.element_residual_matrix(W, eps)
        E = np.asarray((Y.T @ C).todense() if sp.issparse(Y.T @ C) else Y.T @ C)
        _, J = ws.residual_and_jacobian(W, eps)
        Jnj = np.asarray((Y.T @ (J @ Z)))
        Gk = Jnj.T @ E                              # (N, N_e)
        bk = Gk @ np.ones(N_e)
        scale = max(np.linalg.norm(bk), 1e-12)
        rows.append(Gk / scale)
        rhs.append(bk / scale)
        blocks.append(slice(r0, r0 + N))
        r0 += N
    return EqpProblem(G=np.vstack(rows), b=np.concatenate(rhs),
                      row_blocks=blocks)


def build_eqp(space, model, norms, Z, Y, coeffs, map_fields, mu_list,
              step_tol: float = 2.5e-11,
              map_cache: MapCache | None = None) -> EqpResult:
    prob = build_eqp_problem(space, model, norms, Z, Y, coeffs, map_fields,
                             mu_list, map_cache=map_cache)
    res = nnls_lawson_hanson(prob.G, prob.b, step_tol=step_tol)
    return EqpResult(rho=res.x, support=res.support, nnls=res, problem=prob)


# ----------------------------------------------------------------------
# hyper-reduced online assembler
# ----------------------------------------------------------------------

class ReducedAssembler:
    """Tested residual/Jacobian restricted to the sampled elements.

    Precomputes trial/test basis tensors on the sample and its facet
    halo; per-parameter work is dense arithmetic proportional to the
    sample size.
    """

    def __init__(self, space: DGSpace, model: ConservationLaw, Z: np.ndarray,
                 Y: np.ndarray, rho: np.ndarray, map_space: MapSpace | None):
        mesh = space.mesh
        self.space, self.model = space, model
        self.Z, self.Y = Z, Y
        self.N = Z.shape[1]
        self.J = Y.shape[1]
        D, n_lp, N_e = model.D, space.ref.n_lp, mesh.n_elements
        rho = np.asarray(rho, dtype=float)
        self.K = np.where(rho > 0)[0]
        self.rho_K = rho[self.K]

        facet_touch = np.isin(mesh.facet_elems[:, 0], self.K) \
            | np.isin(mesh.facet_elems[:, 1], self.K)
        self.F = np.where(facet_touch)[0]
        halo = np.unique(np.concatenate(
            [self.K, mesh.facet_elems[self.F].ravel()]))
        self.E_eps = halo[halo >= 0]
        self.eps_index = {int(k): i for i, k in enumerate(self.E_eps)}

        Zf = Z.reshape(D, N_e, n_lp, self.N)
        Yf = Y.reshape(D, N_e, n_lp, self.J)
        # volume tensors on K
        self.w_vol = space.w_vol[self.K]
        self.grad_K = space.grad_phys[self.K]
        Zn = Zf[:, self.K]                          # (D, K, n_lp, N)
        Yn = Yf[:, self.K]
        self.Zq = np.einsum("qi,dkin->kqdn", space.basis_v, Zn)
        self.Zg = np.einsum("kqia,dkin->kqdan", self.grad_K, Zn)
        self.Yq = np.einsum("qi,dkij->kqdj", space.basis_v, Yn)
        self.Yg = np.einsum("kqia,dkij->kqdaj", self.grad_K, Yn)
        # sensor tensors on the viscosity halo
        comp = getattr(model, "sensor_component", 0)
        self.Z_sens = Zf[comp, self.E_eps]          # (E, n_lp, N)
        # facet tensors
        fe = mesh.facet_elems[self.F]
        self.f_kp, self.f_km = fe[:, 0], fe[:, 1]
        self.f_btype = mesh.facet_btype[self.F]
        self.wf = space.w_facet[self.F]
        self.Nref = mesh.normals[self.F]
        self.liftK = space.lift_K[self.F]
        self.x_facet = space.x_facet[self.F]
        nF, n_qf = self.F.size, space.n_qf

        def side_tensors(Bf, dim):
            tr = np.zeros((nF, 2, n_qf, D, dim))
            gr = np.zeros((nF, 2, n_qf, D, 2, dim))
            for s in range(2):
                el = fe[:, s]
                ok = el >= 0
                nod = Bf[:, el[ok]]                 # (D, m, n_lp, dim)
                tr[ok, s] = np.einsum("fqi,dfin->fqdn",
                                      space.trace_v[self.F[ok], s], nod)
                gr[ok, s] = np.einsum("fqia,dfin->fqdan",
                                      space.trace_g[self.F[ok], s], nod)
            return tr, gr

        self.Ztr, self.Zgr = side_tensors(Zf, self.N)
        self.Ytr, self.Ygr = side_tensors(Yf, self.J)
        # per-facet hyper-reduction weights (rho vanishes off the sample)
        def rho_of(el):
            return np.where(el >= 0, rho[np.maximum(el, 0)], 0.0)
        self.wc_p = rho_of(self.f_kp)
        self.wc_m = rho_of(self.f_km)
        interior = self.f_btype == INTERIOR
        self.wd = np.where(interior, 0.5 * (self.wc_p + self.wc_m), self.wc_p)
        # map tabulation restricted to the sample
        if map_space is not None:
            nq = space.n_q
            volrows = (self.K[:, None] * nq + np.arange(nq)[None, :]).ravel()
            facrows = (self.F[:, None] * n_qf + np.arange(n_qf)[None, :]).ravel()
            full = MapCache(space, map_space)
            self.map_space = map_space
            self.tab_vol = _slice_tab(full.tab_vol, volrows)
            self.tab_facet = _slice_tab(full.tab_facet, facrows)
        else:
            self.map_space = None
        self.x_vol = space.x_vol[self.K]
        # boundary masks per facet group
        self.b_groups = {}
        for side in np.unique(self.f_btype[self.f_btype != INTERIOR]):
            self.b_groups[int(side)] = np.where(self.f_btype == side)[0]
        self.interior_idx = np.where(self.f_btype == INTERIOR)[0]

    # -------------------------------------------------------------
    def geometry(self, a_full):
        nK, nq = self.w_vol.shape
        nF, n_qf = self.wf.shape
        if self.map_space is None or a_full is None:
            eye = np.broadcast_to(np.eye(2), (nK, nq, 2, 2)).copy()
            return {
                "g": np.ones((nK, nq)), "ginv": eye, "x": self.x_vol,
                "scale": np.ones((nF, n_qf)),
                "n": np.broadcast_to(self.Nref[:, None, :], (nF, n_qf, 2)).copy(),
                "xf": self.x_facet,
            }
        ms = self.map_space
        G, g = ms.jacobians(self.tab_vol, a_full)
        if np.any(g <= 0):
            from .models import DegenerateMapError
            raise DegenerateMapError("map determinant nonpositive (online)")
        ginv = _inv2(G, g)
        disp = ms.displacement_values(self.tab_vol, a_full)
        Gf, gf = ms.jacobians(self.tab_facet, a_full)
        if np.any(gf <= 0):
            from .models import DegenerateMapError
            raise DegenerateMapError("map determinant nonpositive (online)")
        ginv_f = _inv2(Gf, gf)
        N_rep = np.repeat(self.Nref, n_qf, axis=0)
        GiTN = np.einsum("pba,pb->pa", ginv_f, N_rep)
        nrm = np.linalg.norm(GiTN, axis=-1)
        dispf = ms.displacement_values(self.tab_facet, a_full)
        return {
            "g": g.reshape(nK, nq),
            "ginv": ginv.reshape(nK, nq, 2, 2),
            "x": self.x_vol + disp.reshape(nK, nq, 2),
            "scale": (gf * nrm).reshape(nF, n_qf),
            "n": (GiTN / nrm[:, None]).reshape(nF, n_qf, 2),
            "xf": self.x_facet + dispf.reshape(nF, n_qf, 2),
        }

    def element_viscosity(self, alpha):
        s_nod = self.Z_sens @ alpha                  # (E, n_lp)
        ref = self.space.ref
        vp = self.model.viscosity
        proj = ref.degree_projector(ref.p - 1)
        resid = s_nod - s_nod @ proj.T
        M = self.space.reference_mass
        num = np.einsum("ki,ij,kj->k", resid, M, resid)
        den = np.einsum("ki,ij,kj->k", s_nod, M, s_nod)
        ratio = np.sqrt(np.maximum(num, 0.0) / np.maximum(den, 1e-300))
        eps = np.full(s_nod.shape[0], vp.eps_base)
        pos = ratio > 0
        eps[pos] += vp.ramp(np.log10(ratio[pos]))
        return eps

    def residual_and_jacobian(self, alpha, a_full, mu, need_jac=True):
        """Tested EQ residual (J,) and Jacobian (J, N)."""
        model, space = self.model, self.space
        D = model.D
        geom = self.geometry(a_full)
        eps_halo = self.element_viscosity(alpha)
        eps_of = lambda els: eps_halo[
            np.searchsorted(self.E_eps, np.maximum(els, 0))]

        r = np.zeros(self.J)
        Jmat = np.zeros((self.J, self.N)) if need_jac else None

        # volume
        U = np.einsum("kqdn,n->kqd", self.Zq, alpha)
        model.check_admissible(U)
        F = model.spacetime_flux(U)
        Fphi = geom["g"][..., None, None] * np.einsum(
            "kqdb,kqab->kqda", F, geom["ginv"])
        S = model.source(U, geom["x"][..., 0])
        Sphi = geom["g"][..., None] * S
        wvol = self.rho_K[:, None] * self.w_vol
        r -= np.einsum("kq,kqdaj,kqda->j", wvol, self.Yg, Fphi)
        r -= np.einsum("kq,kqdj,kqd->j", wvol, self.Yq, Sphi)
        eK = eps_of(self.K)
        gradW = np.einsum("kqdan,n->kqda", self.Zg, alpha)
        r += np.einsum("k,kq,kqdaj,kqda->j", eK, wvol, self.Yg, gradW)
        if need_jac:
            dF = model.spacetime_flux_jac(U)
            dFphi = geom["g"][..., None, None, None] * np.einsum(
                "kqdbe,kqab->kqdae", dF, geom["ginv"])
            dS = model.source_jac(U, geom["x"][..., 0])
            Jmat -= np.einsum("kq,kqdaj,kqdae,kqen->jn",
                              wvol, self.Yg, dFphi, self.Zq)
            Jmat -= np.einsum("kq,kqdj,kq,kqde,kqen->jn",
                              wvol, self.Yq, geom["g"], dS, self.Zq)
            Jmat += np.einsum("k,kq,kqdaj,kqdan->jn", eK, wvol, self.Yg, self.Zg)

        # facets
        for group, idx in [("interior", self.interior_idx),
                           *self.b_groups.items()]:
            if idx.size == 0:
                continue
            interior = group == "interior"
            wf = self.wf[idx]
            nf = geom["n"][idx]
            scale = geom["scale"][idx]
            Up = np.einsum("fqdn,n->fqd", self.Ztr[idx, 0], alpha)
            Yp = self.Ytr[idx, 0]
            if interior:
                Um = np.einsum("fqdn,n->fqd", self.Ztr[idx, 1], alpha)
                Ym = self.Ytr[idx, 1]
                dext = None
                mask = None
            else:
                mask = model.dirichlet_mask(group)
                Um = Up.copy()
                if mask.any():
                    bvals = model.dirichlet_data(group, geom["xf"][idx], mu)
                    Um[..., mask] = bvals[..., mask]
                dext = np.where(mask, 0.0, 1.0)

            H = rusanov_flux(model, Um, Up, nf)
            Hs = scale[..., None] * H
            wcp = self.wc_p[idx][:, None] * wf
            r += np.einsum("fq,fqdj,fqd->j", wcp, Yp, Hs)
            if interior:
                wcm = self.wc_m[idx][:, None] * wf
                r -= np.einsum("fq,fqdj,fqd->j", wcm, Ym, Hs)
            if need_jac:
                dHo, dHs_own = rusanov_flux_jac(model, Um, Up, nf)
                dHs_own = scale[..., None, None] * dHs_own
                dHo = scale[..., None, None] * dHo
                if not interior:
                    dHs_own = dHs_own + dHo * dext[None, None, None, :]
                Zp = self.Ztr[idx, 0]
                Jmat += np.einsum("fq,fqdj,fqde,fqen->jn", wcp, Yp, dHs_own, Zp)
                if interior:
                    Zm = self.Ztr[idx, 1]
                    Jmat += np.einsum("fq,fqdj,fqde,fqen->jn", wcp, Yp, dHo, Zm)
                    Jmat -= np.einsum("fq,fqdj,fqde,fqen->jn", wcm, Ym, dHs_own, Zp)
                    Jmat -= np.einsum("fq,fqdj,fqde,fqen->jn", wcm, Ym, dHo, Zm)

            # diffusion bracket
            Nref = self.Nref[idx]
            ep = eps_of(self.f_kp[idx])
            wdf = self.wd[idx][:, None] * wf
            if interior:
                em = eps_of(self.f_km[idx])
                jw = Up - Um
                gwp = np.einsum("fqdan,n->fqda", self.Zgr[idx, 0], alpha)
                gwm = np.einsum("fqdan,n->fqda", self.Zgr[idx, 1], alpha)
                avg = 0.5 * (ep[:, None, None] * np.einsum("fqda,fa->fqd", gwp, Nref)
                             + em[:, None, None] * np.einsum("fqda,fa->fqd", gwm, Nref))
                Keff = (ep[:, None, None] * self.liftK[idx, 0]
                        + em[:, None, None] * self.liftK[idx, 1])
                lift = -0.25 * np.einsum("fqr,fr,frd->fqd", Keff, wf, jw)
                flux12 = avg + BR2_ETA * lift
                jY = Yp - Ym
                r -= np.einsum("fq,fqdj,fqd->j", wdf, jY, flux12)
                gv = 0.5 * (ep[:, None, None, None]
                            * np.einsum("fqdaj,fa->fqdj", self.Ygr[idx, 0], Nref)
                            + em[:, None, None, None]
                            * np.einsum("fqdaj,fa->fqdj", self.Ygr[idx, 1], Nref))
                r -= np.einsum("fq,fqdj,fqd->j", wdf, gv, jw)
                if need_jac:
                    jZ = self.Ztr[idx, 0] - self.Ztr[idx, 1]
                    gZ = 0.5 * (ep[:, None, None, None]
                                * np.einsum("fqdan,fa->fqdn", self.Zgr[idx, 0], Nref)
                                + em[:, None, None, None]
                                * np.einsum("fqdan,fa->fqdn", self.Zgr[idx, 1], Nref))
                    liftZ = -0.25 * np.einsum(
                        "fqr,frdn->fqdn", Keff, wf[..., None, None] * jZ)
                    fluxZ = gZ + BR2_ETA * liftZ
                    Jmat -= np.einsum("fq,fqdj,fqdn->jn", wdf, jY, fluxZ)
                    Jmat -= np.einsum("fq,fqdj,fqdn->jn", wdf, gv, jZ)
            else:
                if mask is None or not mask.any():
                    continue
                mvec = mask.astype(float)
                jw = (Up - Um) * mvec    # ghost equals data on masked comps
                gwp = np.einsum("fqdan,n->fqda", self.Zgr[idx, 0], alpha)
                one_sided = ep[:, None, None] * np.einsum(
                    "fqda,fa->fqd", gwp, Nref) * mvec
                Keff = ep[:, None, None] * self.liftK[idx, 0]
                lift = -np.einsum("fqr,fr,frd->fqd", Keff, wf, jw)
                flux12 = one_sided + BR2_ETA * lift
                r -= np.einsum("fq,fqdj,fqd->j", wdf, Yp, flux12)
                gv = ep[:, None, None, None] * np.einsum(
                    "fqdaj,fa->fqdj", self.Ygr[idx, 0], Nref)
                r -= np.einsum("fq,fqdj,fqd->j", wdf, gv, jw)
                if need_jac:
                    Zp = self.Ztr[idx, 0]
                    gZ = ep[:, None, None, None] * np.einsum(
                        "fqdan,fa->fqdn", self.Zgr[idx, 0], Nref) * mvec
                    liftZ = -np.einsum("fqr,frdn->fqdn", Keff,
                                       wf[..., None, None] * (Zp * mvec[:, None]))
                    fluxZ = gZ + BR2_ETA * liftZ
                    Jmat -= np.einsum("fq,fqdj,fqdn->jn", wdf, Yp, fluxZ)
                    Jmat -= np.einsum("fq,fqdj,fqdn->jn", wdf, gv, Zp * mvec[:, None])
        return (r, Jmat) if need_jac else (r, None)


def _slice_tab(tab, rows):
    from .maps import MapTabulation
    return MapTabulation(points=tab.points[rows], V1=tab.V1[rows],
                         D1x=tab.D1x[rows], D1t=tab.D1t[rows],
                         V2=tab.V2[rows], D2x=tab.D2x[rows],
                         D2t=tab.D2t[rows])


def _inv2(G, g):
    out = np.empty_like(G)
    out[..., 0, 0] = G[..., 1, 1] / g
    out[..., 0, 1] = -G[..., 0, 1] / g
    out[..., 1, 0] = -G[..., 1, 0] / g
    out[..., 1, 1] = G[..., 0, 0] / g
    return out


def gauss_newton_eq(assembler: ReducedAssembler, a_full, mu, alpha0,
                    grad_tol: float = GN_GRAD_TOL,
                    max_iter: int = GN_MAX_ITER) -> ReducedSolveResult:
    """Damped Gauss-Newton on the hyper-reduced tested residual."""
    alpha = np.asarray(alpha0, dtype=float).copy()
    nr = np.inf
    for it in range(max_iter):
        try:
            r, Jm = assembler.residual_and_jacobian(alpha, a_full, mu)
        except (ValueError, FloatingPointError):
            return ReducedSolveResult(alpha, False, it, np.inf)
        grad = Jm.T @ r
        nr = np.linalg.norm(grad)
        if nr <= grad_tol:
            return ReducedSolveResult(alpha, True, it,
                                      float(np.linalg.norm(r)))
        step, *_ = np.linalg.lstsq(Jm, -r, rcond=None)
        f = 0.5 * float(r @ r)
        lam, ok = 1.0, False
        for _ in range(25):
            try:
                r_try, _ = assembler.residual_and_jacobian(
                    alpha + lam * step, a_full, mu, need_jac=False)
                f_try = 0.5 * float(r_try @ r_try)
            except (ValueError, FloatingPointError):
                f_try = np.inf
            if f_try <= f + 1e-4 * lam * float(grad @ step):
                ok = True
                break
            lam *= 0.5
        if not ok:
            return ReducedSolveResult(alpha, False, it,
                                      float(np.sqrt(2 * f)))
        alpha = alpha + lam * step
    r_fin, _ = assembler.residual_and_jacobian(alpha, a_full, mu, need_jac=False)
    return ReducedSolveResult(alpha, nr <= grad_tol, max_iter,
                              float(np.linalg.norm(r_fin)))


# ----------------------------------------------------------------------
# the trained reduced model and its online evaluation
# ----------------------------------------------------------------------

@dataclass
class ReducedModel:
    """Trained ROM: trial/test bases, EQ weights, coefficient regressors."""

    model_name: str
    Z: np.ndarray
    Y: np.ndarray
    rho: np.ndarray
    map_basis: np.ndarray          # (M_hf, M)
    map_regressor: object
    coeff_regressor: object
    map_Mbar: int
    continuous: bool = False
    bij: BijectivityParams = field(default_factory=BijectivityParams)
    train_mu: np.ndarray | None = None
    train_map_coeffs: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.Z.shape[1]

    @property
    def n_sampled(self) -> int:
        return int(np.sum(self.rho > 0))


@dataclass
class OnlineResult:
    alpha: np.ndarray
    a_map: np.ndarray
    U_hat: np.ndarray
    deformed_nodes: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool
    map_fallback: bool
    wall_time: float = 0.0


class OnlineSolver:
    """Caches the restricted assembler for repeated online queries."""

    def __init__(self, space: DGSpace, model: ConservationLaw,
                 reduced: ReducedModel):
        self.space, self.model, self.reduced = space, model, reduced
        self.map_space = MapSpace(space.mesh.L, space.mesh.T, reduced.map_Mbar)
        self.assembler = ReducedAssembler(
            space, model, reduced.Z, reduced.Y, reduced.rho, self.map_space)

    def predict_map(self, mu):
        red = self.reduced
        a_red = red.map_regressor.predict(mu)
        a_full = red.map_basis @ a_red
        fallback = False
        if self.map_space.bijectivity_functional(a_full, red.bij) > red.bij.delta:
            # nearest-training-mu fallback keeps the map admissible
            fallback = True
            k = int(np.argmin(np.linalg.norm(red.train_mu - np.asarray(mu),
                                             axis=1)))
            a_red = red.train_map_coeffs[k]
            a_full = red.map_basis @ a_red
        return a_red, a_full, fallback

    def solve(self, mu) -> OnlineResult:
        import time
        t0 = time.perf_counter()
        red = self.reduced
        a_red, a_full, fallback = self.predict_map(mu)
        alpha0 = red.coeff_regressor.predict(mu)
        res = gauss_newton_eq(self.assembler, a_full, mu, alpha0)
        U_hat = red.Z @ res.alpha
        disp = Displacement(self.map_space, a_full)
        nodes = self.space.mesh.nodes
        deformed = nodes + disp.evaluate(nodes)
        return OnlineResult(
            alpha=res.alpha, a_map=a_red, U_hat=U_hat,
            deformed_nodes=deformed, residual_norm=res.residual_norm,
            iterations=res.iterations, converged=res.converged,
            map_fallback=fallback,
            wall_time=time.perf_counter() - t0,
        )


# ----------------------------------------------------------------------
# linear-theory verification (dense, synthetic instances)
# ----------------------------------------------------------------------

def verify_amr_bounds(A: np.ndarray, X: np.ndarray, Yn: np.ndarray,
                      Z: np.ndarray, Ytest: np.ndarray, Fvec: np.ndarray) -> dict:
    """Stability/quasi-optimality report for the linear AMR statement.

    A: (m, m) bilinear form matrix A[i, j] = A(phi_j, phi_i) (rows test);
    X, Yn: SPD trial/test norms; Z: X-orthonormal trial basis; Ytest:
    Yn-orthonormal test basis; Fvec: load functional vector.
    """
    import scipy.linalg as la
    Lx = la.cholesky(X, lower=True)
    Ly = la.cholesky(Yn, lower=True)
    # singular values of Ly^{-1} A Lx^{-T}: continuity and inf-sup constants
    Mhat = la.solve_triangular(Ly, A, lower=True)
    Mhat = la.solve_triangular(Lx, Mhat.T, lower=True).T
    svals = la.svdvals(Mhat)
    gamma, beta = float(svals[0]), float(svals[-1])
    if beta <= 0:
        raise ValueError("form is not inf-sup stable")
    # reduced inf-sup over the given bases
    B = Ytest.T @ A @ Z
    beta_NJ = float(la.svdvals(B)[-1])
    # optimal test space: Yn^{-1} A Z, orthonormalized in Yn
    S = la.solve(Yn, A @ Z)
    G = S.T @ Yn @ S
    Gl = la.cholesky(G, lower=True)
    S_on = la.solve_triangular(Gl, S.T, lower=True).T
    delta_test = float(la.svdvals(Ytest.T @ Yn @ S_on)[-1])
    # AMR solve and the exact solution
    rhsJ = Ytest.T @ Fvec
    alpha, *_ = np.linalg.lstsq(B, rhsJ, rcond=None)
    u_hat = Z @ alpha
    u_star = la.solve(A, Fvec)
    err = float(np.sqrt((u_hat - u_star) @ X @ (u_hat - u_star)))
    # best-fit error in the X norm
    c = Z.T @ X @ u_star
    best = u_star - Z @ c
    inf_err = float(np.sqrt(best @ X @ best))
    Fn = float(np.sqrt(Fvec @ la.solve(Yn, Fvec)))
    u_hat_norm = float(np.sqrt(u_hat @ X @ u_hat))
    return {
        "beta": beta, "gamma": gamma, "beta_NJ": beta_NJ,
        "delta_test": delta_test,
        "stability_lhs": u_hat_norm, "stability_rhs": Fn / beta_NJ,
        "error_lhs": err,
        "error_rhs": gamma / (delta_test * beta) * inf_err if delta_test > 0
        else np.inf,
        "infsup_product_ok": beta_NJ >= delta_test * beta - 1e-10,
    }


def verify_brr_residual_bound(R_parts, J_parts, rho: np.ndarray,
                              alpha0: np.ndarray) -> dict:
    """Evaluate the split residual bound at the EQ optimum.

    R_parts(alpha): (N_e, J) per-element tested residual contributions;
    J_parts(alpha): (N_e, J, N) per-element Jacobian contributions. The
    hf quantities use unit weights; the EQ ones use rho.
    """
    from scipy.optimize import least_squares

    ones = np.ones_like(rho)

    def R_of(alpha, w):
        return np.einsum("k,kj->j", w, R_parts(alpha))

    def J_of(alpha, w):
        return np.einsum("k,kjn->jn", w, J_parts(alpha))

    sol = least_squares(lambda a: R_of(a, rho), np.asarray(alpha0, float),
                        jac=lambda a: J_of(a, rho), xtol=1e-15, ftol=1e-15,
                        gtol=1e-15)
    alpha = sol.x
    R_hf = R_of(alpha, ones)
    J_hf = J_of(alpha, ones)
    R_eq = R_of(alpha, rho)
    J_eq = J_of(alpha, rho)
    N_vec = J_hf.T @ R_hf
    term1 = np.linalg.norm(J_hf - J_eq, 2) * np.linalg.norm(R_eq)
    term2 = np.linalg.norm(J_hf.T @ (R_hf - R_eq))
    return {
        "alpha": alpha,
        "N_norm": float(np.linalg.norm(N_vec)),
        "term_I": float(term1),
        "term_II": float(term2),
        "bound": float(term1 + term2),
        "holds": bool(np.linalg.norm(N_vec) <= term1 + term2 + 1e-12),
    }
