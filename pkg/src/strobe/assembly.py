"""Mapped space-time DG residual and Jacobian assembly.

The residual splits into per-element forms r_k = r_k^c + r_k^d so that
element weights (hyper-reduction) and per-element column matrices (EQ
constraint rows) reuse one code path. Facet terms follow the BR2
element-local convention: convective one-sided traces belong to their
own element; diffusion brackets split evenly between the two sides.
Artificial viscosity is piecewise constant and frozen in the public
Jacobian; the solver can request the exact viscosity coupling
separately (the residual is linear in the per-element viscosities).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .dg import BR2_ETA, DGSpace
from .maps import MapSpace
from .mesh import INTERIOR
from .models import (ConservationLaw, artificial_viscosity,
                     artificial_viscosity_gradient, rusanov_flux,
                     rusanov_flux_jac)


@dataclass
class MappedGeometry:
    """Map data at volume and facet quadrature points."""

    g_vol: np.ndarray        # (N_e, nq)
    ginv_vol: np.ndarray     # (N_e, nq, 2, 2) inverse Jacobian G^{-1}
    x_vol: np.ndarray        # mapped volume points (N_e, nq, 2)
    scale_f: np.ndarray      # ||g G^{-T} N|| at facet points (N_f, n_qf)
    n_f: np.ndarray          # mapped unit normals (N_f, n_qf, 2)
    x_f: np.ndarray          # mapped facet points (N_f, n_qf, 2)
    identity: bool


class MapCache:
    """Tabulated map basis at a space's quadrature points; reusable per mu."""

    def __init__(self, space: DGSpace, map_space: MapSpace):
        self.space = space
        self.map_space = map_space
        self.tab_vol = map_space.tabulate(space.x_vol.reshape(-1, 2))
        self.tab_facet = map_space.tabulate(space.x_facet.reshape(-1, 2))

    def geometry(self, a: np.ndarray) -> MappedGeometry:
        space = self.space
        ms = self.map_space
        N_e, nq = space.w_vol.shape
        N_f, n_qf = space.w_facet.shape

        G, g = ms.jacobians(self.tab_vol, a)
        if np.any(g <= 0):
            from .models import DegenerateMapError
            raise DegenerateMapError("map determinant nonpositive at volume points")
        ginv = np.empty_like(G)
        ginv[:, 0, 0] = G[:, 1, 1] / g
        ginv[:, 0, 1] = -G[:, 0, 1] / g
        ginv[:, 1, 0] = -G[:, 1, 0] / g
        ginv[:, 1, 1] = G[:, 0, 0] / g
        disp = ms.displacement_values(self.tab_vol, a)
        x_vol = (space.x_vol.reshape(-1, 2) + disp).reshape(N_e, nq, 2)

        Gf, gf = ms.jacobians(self.tab_facet, a)
        if np.any(gf <= 0):
            from .models import DegenerateMapError
            raise DegenerateMapError("map determinant nonpositive at facet points")
        ginv_f = np.empty_like(Gf)
        ginv_f[:, 0, 0] = Gf[:, 1, 1] / gf
        ginv_f[:, 0, 1] = -Gf[:, 0, 1] / gf
        ginv_f[:, 1, 0] = -Gf[:, 1, 0] / gf
        ginv_f[:, 1, 1] = Gf[:, 0, 0] / gf
        N_rep = np.repeat(space.mesh.normals, n_qf, axis=0)
        GiTN = np.einsum("pba,pb->pa", ginv_f, N_rep)
        nrm = np.linalg.norm(GiTN, axis=-1)
        scale = gf * nrm
        n_phys = GiTN / nrm[:, None]
        disp_f = ms.displacement_values(self.tab_facet, a)
        x_f = space.x_facet.reshape(-1, 2) + disp_f
        return MappedGeometry(
            g_vol=g.reshape(N_e, nq),
            ginv_vol=ginv.reshape(N_e, nq, 2, 2),
            x_vol=x_vol,
            scale_f=scale.reshape(N_f, n_qf),
            n_f=n_phys.reshape(N_f, n_qf, 2),
            x_f=x_f.reshape(N_f, n_qf, 2),
            identity=False,
        )


def identity_geometry(space: DGSpace) -> MappedGeometry:
    N_e, nq = space.w_vol.shape
    N_f, n_qf = space.w_facet.shape
    ginv = np.broadcast_to(np.eye(2), (N_e, nq, 2, 2)).copy()
    return MappedGeometry(
        g_vol=np.ones((N_e, nq)),
        ginv_vol=ginv,
        x_vol=space.x_vol,
        scale_f=np.ones((N_f, n_qf)),
        n_f=np.broadcast_to(space.mesh.normals[:, None, :], (N_f, n_qf, 2)).copy(),
        x_f=space.x_facet,
        identity=True,
    )


class ResidualWorkspace:
    """Assembly context for one (model, mu, map) combination."""

    def __init__(self, space: DGSpace, model: ConservationLaw, mu=None,
                 phi=None, map_cache=None):
        self.space = space
        self.model = model
        self.mu = None if mu is None else np.asarray(mu, dtype=float)
        self.phi = phi
        if phi is None:
            self.geom = identity_geometry(space)
        else:
            cache = map_cache or MapCache(space, phi.space)
            self.geom = cache.geometry(phi.a)
        self._facet_groups = self._group_facets()
        self._bdata = self._dirichlet_data()

    def _group_facets(self):
        bt = self.space.mesh.facet_btype
        groups = {"interior": np.where(bt == INTERIOR)[0]}
        for side in np.unique(bt[bt != INTERIOR]):
            groups[int(side)] = np.where(bt == side)[0]
        return groups

    def _dirichlet_data(self):
        data = {}
        for side, idx in self._facet_groups.items():
            if side == "interior":
                continue
            mask = self.model.dirichlet_mask(side)
            pts = self.geom.x_f[idx]
            if mask.any():
                vals = self.model.dirichlet_data(side, pts, self.mu)
            else:
                vals = np.zeros(pts.shape[:-1] + (self.model.D,))
            data[side] = (mask, vals)
        return data

    # ------------------------------------------------------------------
    def element_viscosity(self, W: np.ndarray) -> np.ndarray:
        space, model = self.space, self.model
        nodal = W.reshape(model.D, space.mesh.n_elements, space.ref.n_lp)
        nodal = nodal.transpose(1, 2, 0)
        return artificial_viscosity(model, nodal, space.ref, space.reference_mass)

    def viscosity_gradient(self) -> "callable":
        """Builds the sparse d(eps)/dW matrix at a given state."""
        space, model = self.space, self.model
        n_lp, N_e = space.ref.n_lp, space.mesh.n_elements
        comp = getattr(model, "sensor_component", 0)

        def build(W):
            nodal = W.reshape(model.D, N_e, n_lp).transpose(1, 2, 0)
            grad = artificial_viscosity_gradient(
                model, nodal, space.ref, space.reference_mass)   # (N_e, n_lp)
            rows = np.repeat(np.arange(N_e), n_lp)
            cols = (comp * N_e * n_lp
                    + np.repeat(np.arange(N_e), n_lp) * n_lp
                    + np.tile(np.arange(n_lp), N_e))
            return sp.csr_matrix(
                (grad.ravel(), (rows, cols)),
                shape=(N_e, model.D * N_e * n_lp),
            )

        return build

    def residual(self, W, frozen_eps=None) -> np.ndarray:
        out = self._assemble(np.asarray(W, dtype=float), frozen_eps,
                             want_jac=False, want_cols=False, want_eps_cols=False)
        return out["residual"]

    def residual_and_jacobian(self, W, frozen_eps=None, with_eps_coupling=False):
        out = self._assemble(np.asarray(W, dtype=float), frozen_eps,
                             want_jac=True, want_cols=False,
                             want_eps_cols=with_eps_coupling)
        if with_eps_coupling:
            deps = self.viscosity_gradient()(np.asarray(W, dtype=float))
            J = out["jacobian"] + out["eps_columns"] @ deps
            return out["residual"], J.tocsr()
        return out["residual"], out["jacobian"]

    def element_residual_matrix(self, W, frozen_eps=None) -> sp.csr_matrix:
        """Sparse (N_dof, N_e) matrix C with residual = C @ ones."""
        out = self._assemble(np.asarray(W, dtype=float), frozen_eps,
                             want_jac=False, want_cols=True, want_eps_cols=False)
        return out["columns"]

    # ------------------------------------------------------------------
    def _assemble(self, W, frozen_eps, want_jac, want_cols, want_eps_cols):
        space, model, geom = self.space, self.model, self.geom
        mesh = space.mesh
        D = model.D
        n_lp, N_e = space.ref.n_lp, mesh.n_elements
        n_sc = space.n_scalar
        n_dof = D * n_sc
        eps = self.element_viscosity(W) if frozen_eps is None else frozen_eps

        wv = W.reshape(D, N_e, n_lp)
        R = np.zeros((D, N_e, n_lp))
        jac = _Coo(n_dof, n_dof)
        cols = _Coo(n_dof, N_e)
        ecols = _Coo(n_dof, N_e)

        def dof_rows(elems):
            d_idx = np.arange(D)[:, None, None]
            i_idx = np.arange(n_lp)[None, None, :]
            return d_idx * n_sc + elems[None, :, None] * n_lp + i_idx

        def add_cols(acc, contrib, test_elems, owner_elems, frac=1.0):
            rows = dof_rows(test_elems)
            owners = np.broadcast_to(owner_elems[None, :, None], rows.shape)
            acc.add(rows.ravel(), owners.ravel(), frac * contrib.ravel())

        def add_jac_blocks(blocks, test_elems, trial_elems):
            i_idx = np.arange(n_lp)
            d_idx = np.arange(D)
            rows = (d_idx[None, :, None, None, None] * n_sc
                    + test_elems[:, None, None, None, None] * n_lp
                    + i_idx[None, None, :, None, None])
            colsx = (d_idx[None, None, None, :, None] * n_sc
                     + trial_elems[:, None, None, None, None] * n_lp
                     + i_idx[None, None, None, None, :])
            rows = np.broadcast_to(rows, blocks.shape)
            colsx = np.broadcast_to(colsx, blocks.shape)
            jac.add(rows.ravel(), colsx.ravel(), blocks.ravel())

        # ---------------- volume terms ----------------
        Uq = np.einsum("qi,dki->kqd", space.basis_v, wv)
        model.check_admissible(Uq)
        F = model.spacetime_flux(Uq)
        Fphi = geom.g_vol[..., None, None] * np.einsum(
            "kqdb,kqab->kqda", F, geom.ginv_vol)
        S = model.source(Uq, geom.x_vol[..., 0])
        Sphi = geom.g_vol[..., None] * S
        conv_vol = -np.einsum("kq,kqia,kqda->dki", space.w_vol, space.grad_phys, Fphi) \
            - np.einsum("kq,qi,kqd->dki", space.w_vol, space.basis_v, Sphi)
        gradW = np.einsum("kqia,dki->kqda", space.grad_phys, wv)
        diff_vol_unit = np.einsum(
            "kq,kqia,kqda->dki", space.w_vol, space.grad_phys, gradW)
        R += conv_vol + eps[None, :, None] * diff_vol_unit
        if want_cols:
            arange_e = np.arange(N_e)
            add_cols(cols, conv_vol + eps[None, :, None] * diff_vol_unit,
                     arange_e, arange_e)
        if want_eps_cols:
            add_cols(ecols, diff_vol_unit, np.arange(N_e), np.arange(N_e))
        if want_jac:
            dF = model.spacetime_flux_jac(Uq)
            dFphi = geom.g_vol[..., None, None, None] * np.einsum(
                "kqdbe,kqab->kqdae", dF, geom.ginv_vol)
            dS = model.source_jac(Uq, geom.x_vol[..., 0])
            blocks = -np.einsum("kq,kqia,kqdae,qj->kdiej",
                                space.w_vol, space.grad_phys, dFphi, space.basis_v)
            blocks -= np.einsum("kq,qi,kq,kqde,qj->kdiej",
                                space.w_vol, space.basis_v, geom.g_vol, dS,
                                space.basis_v)
            stiff = np.einsum("k,kq,kqia,kqja->kij",
                              eps, space.w_vol, space.grad_phys, space.grad_phys)
            blocks += np.einsum("kij,de->kdiej", stiff, np.eye(D))
            add_jac_blocks(blocks, np.arange(N_e), np.arange(N_e))

        # ---------------- facet terms ----------------
        for side, idx in self._facet_groups.items():
            if idx.size == 0:
                continue
            interior = side == "interior"
            kp = mesh.facet_elems[idx, 0]
            km = mesh.facet_elems[idx, 1]
            wf = space.w_facet[idx]
            Tp = space.trace_v[idx, 0]
            Gp = space.trace_g[idx, 0]
            Up = np.einsum("fqi,fid->fqd", Tp, wv[:, kp, :].transpose(1, 2, 0))
            nf = geom.n_f[idx]
            scale = geom.scale_f[idx]
            if interior:
                Tm = space.trace_v[idx, 1]
                Gm = space.trace_g[idx, 1]
                Um = np.einsum("fqi,fid->fqd", Tm, wv[:, km, :].transpose(1, 2, 0))
                dext = None
                mask = None
            else:
                mask, bvals = self._bdata[side]
                Um = Up.copy()
                if mask.any():
                    Um[..., mask] = bvals[..., mask]
                dext = np.where(mask, 0.0, 1.0)

            # convective flux; own trace is the upwind argument Um
            H = rusanov_flux(model, Um, Up, nf)
            Hs = scale[..., None] * H
            contrib_p = np.einsum("fq,fqi,fqd->dfi", wf, Tp, Hs)
            np.add.at(R, (slice(None), kp), contrib_p)
            if want_cols:
                add_cols(cols, contrib_p, kp, kp)
            if interior:
                contrib_m = -np.einsum("fq,fqi,fqd->dfi", wf, Tm, Hs)
                np.add.at(R, (slice(None), km), contrib_m)
                if want_cols:
                    add_cols(cols, contrib_m, km, km)
            if want_jac:
                dH_other, dH_own = rusanov_flux_jac(model, Um, Up, nf)
                dH_own = scale[..., None, None] * dH_own
                dH_other = scale[..., None, None] * dH_other
                if not interior:
                    dH_own = dH_own + dH_other * dext[None, None, None, :]
                bl = np.einsum("fq,fqi,fqde,fqj->fdiej", wf, Tp, dH_own, Tp)
                add_jac_blocks(bl, kp, kp)
                if interior:
                    bl = np.einsum("fq,fqi,fqde,fqj->fdiej", wf, Tp, dH_other, Tm)
                    add_jac_blocks(bl, kp, km)
                    bl = -np.einsum("fq,fqi,fqde,fqj->fdiej", wf, Tm, dH_own, Tp)
                    add_jac_blocks(bl, km, kp)
                    bl = -np.einsum("fq,fqi,fqde,fqj->fdiej", wf, Tm, dH_other, Tm)
                    add_jac_blocks(bl, km, km)

            # diffusion bracket (map-independent; reference normals)
            Nref = mesh.normals[idx]
            eps_p = eps[kp]
            if interior:
                eps_m = eps[km]
                jw = Up - Um
                gwp = np.einsum("fqia,fid->fqda", Gp, wv[:, kp, :].transpose(1, 2, 0))
                gwm = np.einsum("fqia,fid->fqda", Gm, wv[:, km, :].transpose(1, 2, 0))
                # unit-viscosity flux pieces per owning element
                Wjw = wf[..., None] * jw
                flux_p = 0.5 * np.einsum("fqda,fa->fqd", gwp, Nref) \
                    - 0.25 * BR2_ETA * np.einsum("fqr,frd->fqd",
                                                 space.lift_K[idx, 0], Wjw)
                flux_m = 0.5 * np.einsum("fqda,fa->fqd", gwm, Nref) \
                    - 0.25 * BR2_ETA * np.einsum("fqr,frd->fqd",
                                                 space.lift_K[idx, 1], Wjw)
                gvp_u = 0.5 * np.einsum("fqia,fa->fqi", Gp, Nref)
                gvm_u = 0.5 * np.einsum("fqia,fa->fqi", Gm, Nref)
                # per-(test side, eps owner) unit contributions
                cp_up = -np.einsum("fq,fqi,fqd->dfi", wf, Tp, flux_p) \
                    - np.einsum("fq,fqi,fqd->dfi", wf, gvp_u, jw)
                cp_um = -np.einsum("fq,fqi,fqd->dfi", wf, Tp, flux_m)
                cm_up = +np.einsum("fq,fqi,fqd->dfi", wf, Tm, flux_p)
                cm_um = +np.einsum("fq,fqi,fqd->dfi", wf, Tm, flux_m) \
                    - np.einsum("fq,fqi,fqd->dfi", wf, gvm_u, jw)
                c_p = eps_p[None, :, None] * cp_up + eps_m[None, :, None] * cp_um
                c_m = eps_p[None, :, None] * cm_up + eps_m[None, :, None] * cm_um
                np.add.at(R, (slice(None), kp), c_p)
                np.add.at(R, (slice(None), km), c_m)
                if want_cols:
                    add_cols(cols, c_p, kp, kp, 0.5)
                    add_cols(cols, c_p, kp, km, 0.5)
                    add_cols(cols, c_m, km, kp, 0.5)
                    add_cols(cols, c_m, km, km, 0.5)
                if want_eps_cols:
                    add_cols(ecols, cp_up, kp, kp)
                    add_cols(ecols, cp_um, kp, km)
                    add_cols(ecols, cm_up, km, kp)
                    add_cols(ecols, cm_um, km, km)
                if want_jac:
                    sides = ((kp, Tp, Gp, eps_p, 0, +1.0),
                             (km, Tm, Gm, eps_m, 1, -1.0))
                    Keff = (eps_p[:, None, None] * space.lift_K[idx, 0]
                            + eps_m[:, None, None] * space.lift_K[idx, 1])
                    eye_D = np.eye(D)
                    for (ke_t, Tt, Gt, et, st_idx, sg_t) in sides:
                        for (ke_s, Ts, Gs, es, ss_idx, sg_s) in sides:
                            gns = 0.5 * es[:, None, None] * np.einsum(
                                "fqia,fa->fqi", Gs, Nref)
                            blk = -sg_t * np.einsum("fq,fqi,fqj->fij", wf, Tt, gns)
                            blk += -BR2_ETA * sg_t * sg_s * np.einsum(
                                "fqi,fq,fqr,fr,frj->fij",
                                Tt, wf, -0.25 * Keff, wf, Ts)
                            gnt = 0.5 * et[:, None, None] * np.einsum(
                                "fqia,fa->fqi", Gt, Nref)
                            blk += -sg_s * np.einsum("fq,fqi,fqj->fij", wf, gnt, Ts)
                            add_jac_blocks(
                                np.einsum("fij,de->fdiej", blk, eye_D), ke_t, ke_s)
            else:
                if mask is None or not mask.any():
                    continue
                m = mask.astype(float)
                jw = (Up - self._bdata[side][1]) * m
                gwp = np.einsum("fqia,fid->fqda", Gp, wv[:, kp, :].transpose(1, 2, 0))
                Wjw = wf[..., None] * jw
                flux_u = np.einsum("fqda,fa->fqd", gwp, Nref) * m \
                    - BR2_ETA * np.einsum("fqr,frd->fqd", space.lift_K[idx, 0], Wjw)
                gv_u = np.einsum("fqia,fa->fqi", Gp, Nref)
                cp_u = -np.einsum("fq,fqi,fqd->dfi", wf, Tp, flux_u) \
                    - np.einsum("fq,fqi,fqd->dfi", wf, gv_u, jw)
                c_p = eps_p[None, :, None] * cp_u
                np.add.at(R, (slice(None), kp), c_p)
                if want_cols:
                    add_cols(cols, c_p, kp, kp)
                if want_eps_cols:
                    add_cols(ecols, cp_u, kp, kp)
                if want_jac:
                    gns = eps_p[:, None, None] * np.einsum("fqia,fa->fqi", Gp, Nref)
                    Keff = eps_p[:, None, None] * space.lift_K[idx, 0]
                    blk = -np.einsum("fq,fqi,fqj->fij", wf, Tp, gns)
                    blk += -BR2_ETA * np.einsum(
                        "fqi,fq,fqr,fr,frj->fij", Tp, wf, -Keff, wf, Tp)
                    blk += -np.einsum("fq,fqi,fqj->fij", wf, gns, Tp)
                    add_jac_blocks(
                        np.einsum("fij,de->fdiej", blk, np.diag(m)), kp, kp)

        out = {"residual": R.ravel()}
        if want_jac:
            out["jacobian"] = jac.tocsr()
        if want_cols:
            out["columns"] = cols.tocsr()
        if want_eps_cols:
            out["eps_columns"] = ecols.tocsr()
        return out


class _Coo:
    def __init__(self, nrows, ncols):
        self.nrows, self.ncols = nrows, ncols
        self.rows, self.cols, self.vals = [], [], []

    def add(self, r, c, v):
        self.rows.append(np.asarray(r))
        self.cols.append(np.asarray(c))
        self.vals.append(np.asarray(v))

    def tocsr(self):
        if not self.rows:
            return sp.csr_matrix((self.nrows, self.ncols))
        return sp.csr_matrix(
            (np.concatenate(self.vals),
             (np.concatenate(self.rows), np.concatenate(self.cols))),
            shape=(self.nrows, self.ncols),
        )


def assemble_residual(ws: ResidualWorkspace, W, frozen_eps=None) -> np.ndarray:
    """Residual functional vector, entry j = R_Phi(W, phi_j)."""
    return ws.residual(W, frozen_eps)


def assemble_jacobian(ws: ResidualWorkspace, W, frozen_eps=None) -> sp.csr_matrix:
    """Frozen-viscosity Jacobian (matches FD of the frozen-eps residual)."""
    eps = ws.element_viscosity(np.asarray(W, dtype=float)) if frozen_eps is None \
        else frozen_eps
    _, J = ws.residual_and_jacobian(W, eps)
    return J
