"""High-fidelity space-time solves and snapshot generation.

Cold starts march a 1D RKDG discretization of the same model through
time (CFL 0.3) and interpolate onto the space-time mesh; the space-time
system is then solved by Newton with an Armijo backtracking line search
and Picard-frozen artificial viscosity.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import ResidualWorkspace
from .dg import DGSpace
from .mesh import BOTTOM, LEFT, RIGHT, SpaceTimeMesh
from .models import ConservationLaw, ShallowWater
from .refelem import edge_quadrature


class NonconvergenceError(RuntimeError):
    """Nonlinear solve failed; carries the last iterate."""

    def __init__(self, message, last_iterate=None, residual_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual_norm = residual_norm


# ----------------------------------------------------------------------
# 1D nodal DG marching solver (initial guesses and the steady base flow)
# ----------------------------------------------------------------------

class Grid1D:
    """Nodal DG grid on (0,L): nx cells, degree p, duplicated nodes."""

    def __init__(self, L: float, nx: int, p: int):
        self.L, self.nx, self.p = float(L), int(nx), int(p)
        self.h = L / nx
        self.n1 = p + 1
        s = np.linspace(0.0, 1.0, self.n1)
        V = np.vander(s, self.n1, increasing=True)
        self.vinv = np.linalg.inv(V)
        q, w = edge_quadrature(p + 2)
        self.qp, self.qw = q, w
        self.Bq = self._basis(q)                # (nq, n1)
        self.Bq_d = self._basis_deriv(q)        # reference derivative
        self.mass = self.Bq.T @ (w[:, None] * self.Bq) * self.h
        self.minv = np.linalg.inv(self.mass)
        self.x_nodes = (np.arange(nx)[:, None] + s[None, :]) * self.h
        self.x_quad = (np.arange(nx)[:, None] + q[None, :]) * self.h
        self.B_left = self._basis(np.array([0.0]))[0]
        self.B_right = self._basis(np.array([1.0]))[0]
        self.Bd_left = self._basis_deriv(np.array([0.0]))[0] / self.h
        self.Bd_right = self._basis_deriv(np.array([1.0]))[0] / self.h
        # nodal projector onto degree p-1 (for the resolution sensor)
        P = np.vander(q, p, increasing=True)
        M_lo = P.T @ (w[:, None] * P)
        R = P.T @ (w[:, None] * self.Bq)
        self.proj_lo = np.vander(s, p, increasing=True) @ np.linalg.solve(M_lo, R)

    def _basis(self, pts):
        return np.vander(pts, self.n1, increasing=True) @ self.vinv

    def _basis_deriv(self, pts):
        n = self.n1
        V = np.zeros((len(pts), n))
        for j in range(1, n):
            V[:, j] = j * pts ** (j - 1)
        return V @ self.vinv

    def evaluate(self, U: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Evaluate nodal field U (nx, n1, D) at points x."""
        x = np.asarray(x, dtype=float)
        cells = np.clip((x / self.h).astype(int), 0, self.nx - 1)
        s = x / self.h - cells
        B = self._basis(s)                       # (npts, n1)
        return np.einsum("pi,pid->pd", B, U[cells])


def _rk_rhs(grid: Grid1D, model: ConservationLaw, U: np.ndarray, t: float, mu):
    """Semi-discrete RHS of dU/dt = -dx f(U) + S + dx(eps dx U)."""
    nx, n1 = grid.nx, grid.n1
    D = model.D
    Uq = np.einsum("qi,cid->cqd", grid.Bq, U)
    model.check_admissible(Uq)
    f = model.flux(Uq)
    S = model.source(Uq, grid.x_quad)
    # element viscosity from the 1D resolution sensor
    s_nod = model.shock_sensor(U)                # (nx, n1)
    resid = s_nod - s_nod @ grid.proj_lo.T
    sq = np.einsum("qi,ci->cq", grid.Bq, resid)
    s_full = np.einsum("qi,ci->cq", grid.Bq, s_nod)
    num = np.einsum("q,cq->c", grid.qw, sq**2)
    den = np.einsum("q,cq->c", grid.qw, s_full**2)
    ratio = np.sqrt(np.maximum(num, 0.0) / np.maximum(den, 1e-300))
    vp = model.viscosity
    eps = np.full(nx, vp.eps_base)
    pos = ratio > 0
    eps[pos] += vp.ramp(np.log10(ratio[pos]))

    gradU = np.einsum("qi,cid->cqd", grid.Bq_d, U) / grid.h
    rhs = np.einsum("q,qi,cqd->cid", grid.qw, grid.Bq_d, f)            # +f phi'
    rhs -= np.einsum("c,q,qi,cqd->cid", eps, grid.qw * grid.h, grid.Bq_d / grid.h,
                     gradU)
    rhs += np.einsum("q,qi,cqd->cid", grid.qw * grid.h, grid.Bq, S)

    # traces and interface fluxes (Rusanov in x only); nx+1 interfaces
    UL = np.einsum("i,cid->cd", grid.B_left, U)
    UR = np.einsum("i,cid->cd", grid.B_right, U)
    gL = np.einsum("i,cid->cd", grid.Bd_left, U)
    gR = np.einsum("i,cid->cd", grid.Bd_right, U)
    ghostL = model.exterior_state(
        LEFT, UL[:1], np.stack([np.zeros(1), np.full(1, t)], axis=-1), mu)[0]
    ghostR = model.exterior_state(
        RIGHT, UR[-1:], np.stack([np.full(1, grid.L), np.full(1, t)], axis=-1), mu)[0]
    left_states = np.vstack([ghostL[None, :], UR])         # (nx+1, D)
    right_states = np.vstack([UL, ghostR[None, :]])
    n_x = np.array([1.0, 0.0])
    lam = np.maximum(
        model.wavespeed(left_states, n_x), model.wavespeed(right_states, n_x)
    )
    Hfl = 0.5 * (model.flux(left_states) + model.flux(right_states)) \
        - 0.5 * lam[:, None] * (right_states - left_states)
    # viscous interface flux: central gradient average + jump penalty
    gl = np.vstack([gL[:1], gR])
    gr = np.vstack([gL, gR[-1:]])
    eps_l = np.concatenate([eps[:1], eps])
    eps_r = np.concatenate([eps, eps[-1:]])
    eps_if = 0.5 * (eps_l + eps_r)
    Hv = -0.5 * eps_if[:, None] * (gl + gr) \
        - (4.0 * eps_if / grid.h)[:, None] * (right_states - left_states)
    Htot = Hfl + Hv
    rhs -= np.einsum("i,cd->cid", grid.B_right, Htot[1:])
    rhs += np.einsum("i,cd->cid", grid.B_left, Htot[:-1])
    out = np.einsum("ij,cjd->cid", grid.minv, rhs)
    return out, eps.max(), float(lam.max())


def rkdg_march(grid: Grid1D, model: ConservationLaw, U0: np.ndarray, t_final: float,
               mu, cfl: float = 0.3, store_every: int = 1):
    """Heun (RK2) time marching; returns sampled times and states."""
    U = U0.copy()
    t = 0.0
    times = [0.0]
    states = [U.copy()]
    p = grid.p
    step = 0
    while t < t_final - 1e-14:
        k1, eps_max, lam = _rk_rhs(grid, model, U, t, mu)
        dt_c = cfl * grid.h / (max(lam, 1e-12) * (2 * p + 1))
        dt_v = cfl * grid.h**2 / (max(eps_max, 1e-14) * (2 * p + 1) ** 2)
        dt = min(dt_c, dt_v, t_final - t)
        U1 = U + dt * k1
        k2, _, _ = _rk_rhs(grid, model, U1, t + dt, mu)
        U = U + 0.5 * dt * (k1 + k2)
        t += dt
        step += 1
        if step % store_every == 0 or t >= t_final - 1e-14:
            times.append(t)
            states.append(U.copy())
        if step > 400000:
            raise NonconvergenceError("RKDG marching exceeded step budget")
    return np.asarray(times), states


def rkdg_initial_guess(space: DGSpace, model: ConservationLaw, mu,
                       cfl: float = 0.3) -> np.ndarray:
    """March the 1D problem and sample it at the space-time nodes."""
    mesh = space.mesh
    grid = Grid1D(mesh.L, mesh.nx, mesh.p)
    if isinstance(model, ShallowWater):
        U0 = model.base_flow(grid.x_nodes.ravel()).reshape(grid.nx, grid.n1, 2)
    else:
        vals = model.dirichlet_data(
            BOTTOM, np.stack([grid.x_nodes.ravel(),
                              np.zeros(grid.nx * grid.n1)], axis=-1), mu)
        U0 = vals.reshape(grid.nx, grid.n1, model.D)
    times, states = rkdg_march(grid, model, U0, mesh.T, mu, cfl=cfl)
    nodes = mesh.nodes
    xs, ts = nodes[:, 0], nodes[:, 1]
    hi = np.clip(np.searchsorted(times, ts), 1, len(times) - 1)
    lo = hi - 1
    w_hi = (ts - times[lo]) / np.maximum(times[hi] - times[lo], 1e-300)
    out = np.empty((nodes.shape[0], model.D))
    for idx in np.unique(np.stack([lo, hi], axis=1), axis=0):
        sel = (lo == idx[0]) & (hi == idx[1])
        v_lo = grid.evaluate(states[idx[0]], xs[sel])
        v_hi = grid.evaluate(states[idx[1]], xs[sel])
        out[sel] = (1 - w_hi[sel, None]) * v_lo + w_hi[sel, None] * v_hi
    nodal = out.reshape(mesh.n_elements, space.ref.n_lp, model.D)
    return np.ascontiguousarray(nodal.transpose(2, 0, 1)).ravel()


@dataclass
class BaseFlowSampler:
    """Steady shallow-water state as an evaluable picklable object."""

    grid_data: tuple
    U: np.ndarray

    def __call__(self, x):
        L, nx, p = self.grid_data
        grid = Grid1D(L, nx, p)
        x = np.asarray(x, dtype=float)
        return grid.evaluate(self.U, np.clip(x.ravel(), 0, L)).reshape(x.shape + (2,))


_BASE_FLOW_CACHE: dict = {}


def compute_base_flow(model: ShallowWater, nx: int, p: int,
                      tol: float = 1e-8, t_max: float = 400.0) -> BaseFlowSampler:
    """Pseudo-time march to the steady base state (cached per resolution)."""
    key = (nx, p)
    if key in _BASE_FLOW_CACHE:
        return _BASE_FLOW_CACHE[key]
    grid = Grid1D(model.L, nx, p)
    x = grid.x_nodes.ravel()
    h0 = np.maximum(model.h_inf - model.bathymetry(x), 0.3)
    U = np.stack([h0, np.full_like(h0, model.q0)], axis=-1).reshape(grid.nx, grid.n1, 2)

    class _Steady(ShallowWater):
        def inflow_discharge(self, t, mu):
            return np.full_like(np.asarray(t, dtype=float), self.q0)

    steady = _Steady()
    t = 0.0
    check_every = 200
    step = 0
    while t < t_max:
        k1, eps_max, lam = _rk_rhs(grid, steady, U, t, (0.0, 0.1))
        dt_c = 0.3 * grid.h / (max(lam, 1e-12) * (2 * p + 1))
        dt_v = 0.3 * grid.h**2 / (max(eps_max, 1e-14) * (2 * p + 1) ** 2)
        dt = min(dt_c, dt_v)
        U1 = U + dt * k1
        k2, _, _ = _rk_rhs(grid, steady, U1, t + dt, (0.0, 0.1))
        U = U + 0.5 * dt * (k1 + k2)
        t += dt
        step += 1
        if step % check_every == 0:
            rate = np.linalg.norm(k2.ravel()) / np.sqrt(k2.size)
            if rate < tol:
                break
    sampler = BaseFlowSampler(grid_data=(model.L, nx, p), U=U)
    _BASE_FLOW_CACHE[key] = sampler
    return sampler


def prepare_model(model: ConservationLaw, mesh: SpaceTimeMesh) -> ConservationLaw:
    """Install mesh-dependent model state: scaled viscosity, SW base flow."""
    h_char = float(np.sqrt(2.0 * mesh.L * mesh.T / mesh.n_elements))
    model.viscosity = model.mesh_scaled_viscosity(h_char)
    if isinstance(model, ShallowWater) and model._base_flow is None:
        model.set_base_flow(compute_base_flow(model, mesh.nx, mesh.p))
    return model


# ----------------------------------------------------------------------
# space-time Newton
# ----------------------------------------------------------------------

def solve_hf(ws: ResidualWorkspace, init="coldstart", max_iter: int = 50,
             rtol: float = 1e-8, armijo_c: float = 1e-4,
             verbose: bool = False) -> np.ndarray:
    """Newton with backtracking on the space-time residual.

    init is either the string "coldstart" (RKDG march) or a dof vector.
    Converges when ||R||_2 <= max(rtol * sqrt(N_hf), 1e-10).
    """
    space, model = ws.space, ws.model
    n = space.n_dofs(model.D)
    if isinstance(init, str) and init == "coldstart":
        W = rkdg_initial_guess(space, model, ws.mu)
    else:
        W = np.asarray(init, dtype=float).copy()
    tol = max(rtol * np.sqrt(n), 1e-10)

    def merit(V):
        try:
            return np.linalg.norm(ws.residual(V))
        except (ValueError, FloatingPointError):
            return np.inf

    # pseudo-transient continuation: mass-scaled damping with SER growth
    # regularizes near-singular intermediate Jacobians; vanishes at the end
    mass = ws.space.scalar_mass()
    if model.D > 1:
        import scipy.sparse as _sp
        mass = _sp.kron(_sp.eye(model.D), mass, format="csr")
    nr = merit(W)
    nr0 = nr
    dtau = 0.1
    stall = 0
    for it in range(max_iter):
        if verbose:
            print(f"  newton {it:2d}  ||R|| = {nr:.3e}  dtau = {dtau:.1e}")
        if not np.isfinite(nr):
            raise NonconvergenceError("residual is not finite", W, nr)
        if nr <= tol:
            return W
        R, J = ws.residual_and_jacobian(W, with_eps_coupling=True)
        accepted = False
        for _ in range(12):
            A = J if dtau > 1e11 else (J + (1.0 / dtau) * mass).tocsc()
            try:
                dW = spla.splu(A.tocsc()).solve(-R)
            except RuntimeError:
                dtau *= 0.25
                continue
            alpha, nr_try = 1.0, np.inf
            for _ in range(8):
                nr_try = merit(W + alpha * dW)
                if nr_try <= (1.0 - armijo_c * alpha) * nr:
                    break
                alpha *= 0.5
            if nr_try <= (1.0 - armijo_c * alpha) * nr:
                W = W + alpha * dW
                # switched-evolution relaxation, capped growth
                dtau = min(dtau * min(max(nr / max(nr_try, 1e-300), 1.0), 1e3), 1e12)
                nr = nr_try
                accepted = True
                break
            dtau *= 0.25
        if not accepted:
            stall += 1
            dtau = 0.01    # restart the continuation with strong damping
            if stall >= 3:
                break
        else:
            stall = 0
    if nr <= tol:
        return W
    # damped least-squares fallback (lsqr avoids squaring the conditioning)
    damp = 1e-8
    for it in range(15):
        R, J = ws.residual_and_jacobian(W, with_eps_coupling=True)
        nr = np.linalg.norm(R)
        if nr <= tol:
            return W
        moved = False
        for _ in range(12):
            d = spla.lsqr(J, -R, damp=damp, atol=1e-12, btol=1e-12,
                          iter_lim=800)[0]
            nr_try = merit(W + d)
            if nr_try < nr * (1.0 - 1e-7):
                W = W + d
                damp = max(damp * 0.3, 1e-12)
                moved = True
                break
            damp *= 5.0
        if not moved:
            break
    nr = merit(W)
    if nr <= tol:
        return W
    raise NonconvergenceError(
        f"Newton stagnation, ||R|| = {nr:.3e}", W, nr)


# ----------------------------------------------------------------------
# snapshot generation
# ----------------------------------------------------------------------

@dataclass
class SnapshotSet:
    """Converged parameter/solution pairs plus provenance metadata."""

    mu: np.ndarray               # (n, P)
    solutions: np.ndarray        # (N_hf, n)
    failures: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


def _solve_one(args):
    space, model, mu = args
    ws = ResidualWorkspace(space, model, mu=mu)
    return solve_hf(ws)


def generate_snapshots(space: DGSpace, model: ConservationLaw,
                       mu_list, verbose: bool = False) -> SnapshotSet:
    """Solve the hf problem for every mu; failed solves are recorded
    and excluded from the snapshot matrix."""
    mu_arr = np.atleast_2d(np.asarray(mu_list, dtype=float))
    prepare_model(model, space.mesh)
    sols, kept, failures = [], [], []
    n_workers = int(os.environ.get("STROBE_THREADS", "1"))
    if n_workers > 1 and len(mu_arr) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            results = list(ex.map(
                _solve_one_safe, [(space, model, mu) for mu in mu_arr]))
        for i, res in enumerate(results):
            if isinstance(res, str):
                failures.append({"mu": mu_arr[i].tolist(), "error": res})
            else:
                kept.append(i)
                sols.append(res)
    else:
        for i, mu in enumerate(mu_arr):
            ws = ResidualWorkspace(space, model, mu=mu)
            try:
                W = solve_hf(ws)
            except NonconvergenceError as exc:
                W = _retry_warmstart(space, model, mu, mu_arr, kept, sols, exc)
                if W is None:
                    failures.append({"mu": mu.tolist(), "error": str(exc)})
                    continue
            kept.append(i)
            sols.append(W)
            if verbose:
                print(f"snapshot {i + 1}/{len(mu_arr)}  mu = {mu}")
    if not sols:
        raise NonconvergenceError("no snapshot converged")
    return SnapshotSet(
        mu=mu_arr[kept],
        solutions=np.column_stack(sols),
        failures=failures,
        provenance={
            "model": model.name,
            "mesh_hash": space.mesh.mesh_hash(),
            "p": space.mesh.p,
            "nx": space.mesh.nx,
            "nt": space.mesh.nt,
            "newton_rtol": 1e-8,
        },
    )


def _retry_warmstart(space, model, mu, mu_arr, kept, sols, exc):
    """Continuation fallback: warm start from the nearest converged solve."""
    if not kept:
        return None
    dists = np.linalg.norm(mu_arr[kept] - mu, axis=1)
    order = np.argsort(dists)
    ws = ResidualWorkspace(space, model, mu=mu)
    for j in order[:2]:
        try:
            return solve_hf(ws, init=sols[j])
        except NonconvergenceError:
            continue
    return None


def _solve_one_safe(args):
    try:
        return _solve_one(args)
    except NonconvergenceError as exc:
        return str(exc)
