"""Space-only registration baseline on time slices of one solution.

Reuses the greedy template idea in one dimension: snapshots are spatial
slices U(., t_s) of a single space-time solution, and displacements are
x-only Legendre bubbles vanishing at x in {0, L}. Demonstrates why
purely spatial registration cannot untangle interacting shocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg
from numpy.polynomial.polynomial import Polynomial
from scipy.optimize import minimize

from .dg import DGField
from .refelem import edge_quadrature


class MapSpace1D:
    """x-displacements ell_i(x/L) * x(L-x)/L^2, vanishing at the ends."""

    def __init__(self, L: float, Mbar: int):
        self.L, self.Mbar = float(L), int(Mbar)
        bubble = Polynomial([0.0, 1.0 / L, -1.0 / L**2])
        self.polys = []
        for i in range(Mbar):
            coef = np.zeros(i + 1)
            coef[i] = 1.0
            leg = npleg.Legendre(coef, domain=[0.0, L]).convert(kind=Polynomial)
            self.polys.append(np.sqrt(2 * i + 1) * leg * bubble)
        self.dpolys = [p.deriv() for p in self.polys]
        self.d2polys = [p.deriv(2) for p in self.polys]

    def values(self, x: np.ndarray) -> np.ndarray:
        return np.stack([p(x) for p in self.polys], axis=-1)

    def derivs(self, x: np.ndarray) -> np.ndarray:
        return np.stack([p(x) for p in self.dpolys], axis=-1)

    def h2_matrix(self, n1d: int = 40) -> np.ndarray:
        q, w = edge_quadrature(n1d)
        x = q * self.L
        w = w * self.L
        D2 = np.stack([p(x) for p in self.d2polys], axis=-1)
        return D2.T @ (w[:, None] * D2)


@dataclass
class Slice1D:
    """A spatial profile evaluable anywhere on (0, L)."""

    field: DGField
    t_slice: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        pts = np.stack([np.asarray(x, dtype=float),
                        np.full(np.shape(x), self.t_slice)], axis=-1)
        vals, _ = self.field.evaluate(pts)
        return vals[:, 0]


def register_slice(profile, templates_q, ms: MapSpace1D, xq, wq,
                   xi: float, bij_eps: float, c_exp: float, delta: float,
                   a0=None, maxiter: int = 150):
    """1D analogue of the registration statement for one slice."""
    V = ms.values(xq)
    Dv = ms.derivs(xq)
    h2 = ms.h2_matrix()
    clamp = 700.0

    def objective(a):
        disp = V @ a
        xm = np.clip(xq + disp, 0.0, ms.L)
        s = profile(xm)
        ds = _fd_profile(profile, xm, ms.L)
        c = templates_q.T @ (wq * s) if templates_q.shape[1] else np.zeros(0)
        r = s - (templates_q @ c if templates_q.shape[1] else 0.0)
        f = float(wq @ (r * r))
        g = 1.0 + Dv @ a
        lo = np.exp(np.minimum((bij_eps - g) / c_exp, clamp))
        hi = np.exp(np.minimum((g - 1.0 / bij_eps) / c_exp, clamp))
        pen = float(wq @ (lo + hi))
        grad = 2.0 * ((wq * r * ds) @ V)
        grad += 2.0 * xi * (h2 @ a)
        lo_d = np.where((bij_eps - g) / c_exp < clamp, lo, 0.0)
        hi_d = np.where((g - 1.0 / bij_eps) / c_exp < clamp, hi, 0.0)
        grad += ((wq * (hi_d - lo_d) / c_exp) @ Dv)
        return f + xi * float(a @ h2 @ a) + pen, grad

    x0 = np.zeros(ms.Mbar) if a0 is None else np.asarray(a0, dtype=float)
    res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                   options={"maxiter": maxiter})
    disp = V @ res.x
    xm = np.clip(xq + disp, 0.0, ms.L)
    s = profile(xm)
    c = templates_q.T @ (wq * s) if templates_q.shape[1] else np.zeros(0)
    r = s - (templates_q @ c if templates_q.shape[1] else 0.0)
    return res.x, float(wq @ (r * r))


def _fd_profile(profile, x, L, h=1e-7):
    xp = np.clip(x + h, 0.0, L)
    xm = np.clip(x - h, 0.0, L)
    return (profile(xp) - profile(xm)) / np.maximum(xp - xm, 1e-300)


def space_only_registration_study(bundle, n_slices: int = 40,
                                  Mbar: int = 10, N_max: int = 5,
                                  xi: float = 1e-2) -> dict:
    """Appendix-style baseline: slice one solution in time and register
    the slices with x-only displacements; compare POD decays."""
    space = bundle.space
    model = bundle.model
    mesh = space.mesh
    centroid = model.param_box.mean(axis=1)
    k0 = int(np.argmin(np.linalg.norm(bundle.train_mu - centroid, axis=1)))
    U = DGField(space, model.D, bundle.train_solutions[:, k0])
    sensor_nodal = model.registration_sensor(U.nodal())
    sens = DGField.from_nodal(space, sensor_nodal[..., None])

    t_slices = np.linspace(0.0, mesh.T, n_slices + 2)[1:-1]
    profiles = [Slice1D(sens, t) for t in t_slices]
    ms = MapSpace1D(mesh.L, Mbar)
    # composite Gauss grid along x
    n_cells = 4 * mesh.nx
    q, w = edge_quadrature(4)
    hx = mesh.L / n_cells
    xq = (np.arange(n_cells)[:, None] * hx + q[None, :] * hx).ravel()
    wq = np.tile(w * hx, n_cells)

    snaps_raw = np.stack([p(xq) for p in profiles], axis=-1)
    eps, c_exp, delta = 0.1, 0.0025, mesh.L

    templates = np.zeros((xq.size, 0))

    def append_template(vals):
        v = vals.copy()
        for _ in range(2):
            if templates.shape[1]:
                v -= templates @ (templates.T @ (wq * v))
        nrm = np.sqrt(max(wq @ (v * v), 0.0))
        if nrm < 1e-12:
            return templates
        return np.column_stack([templates, v / nrm])

    k_mid = len(profiles) // 2
    templates = append_template(snaps_raw[:, k_mid])
    coeffs = np.zeros((len(profiles), Mbar))
    norms2 = np.maximum(wq @ snaps_raw**2, 1e-300)
    for it in range(N_max):
        fvals = np.zeros(len(profiles))
        for k, p in enumerate(profiles):
            coeffs[k], fvals[k] = register_slice(
                p, templates, ms, xq, wq, xi, eps, c_exp, delta,
                a0=coeffs[k])
        worst = int(np.argmax(fvals / norms2))
        if templates.shape[1] >= N_max:
            break
        xm = np.clip(xq + ms.values(xq) @ coeffs[worst], 0.0, ms.L)
        templates = append_template(profiles[worst](xm))

    mapped = np.stack([
        p(np.clip(xq + ms.values(xq) @ coeffs[k], 0.0, ms.L))
        for k, p in enumerate(profiles)], axis=-1)

    def eig_decay(S):
        C = S.T @ (wq[:, None] * S)
        lam = np.linalg.eigvalsh(0.5 * (C + C.T))[::-1]
        lam = np.maximum(lam, 0.0)
        return lam / lam[0]

    return {
        "eig_unregistered": eig_decay(snaps_raw)[:20],
        "eig_registered": eig_decay(mapped)[:20],
        "t_slices": t_slices,
    }
