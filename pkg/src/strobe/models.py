"""Conservation-law models: fluxes, sources, boundary data, sensors.

Space-time form: div([f(U), U]) = S(U) on (0,L) x (0,T). Each model
declares per-side Dirichlet component masks; boundary conditions enter
weakly through ghost states in the numerical flux and through the
Dirichlet jump terms of the diffusion form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import BOTTOM, LEFT, RIGHT, TOP

GRAVITY = 9.81
# smoothing scale for |lambda| and max() in the Rusanov dissipation; keeps
# the discrete residual C1 so Newton does not stall on wave-speed kinks
TAU_SMOOTH = 1e-6


class DryStateError(ValueError):
    """Raised when a shallow-water state has nonpositive height."""


class DegenerateMapError(ValueError):
    """Raised when a mapping Jacobian determinant is nonpositive."""


@dataclass(frozen=True)
class ViscosityParams:
    """Sub-cell shock-capturing constants (ramp in log10 of the sensor)."""

    s0: float = -2.5
    kappa: float = 1.5
    eps0: float = 1e-2          # ramp amplitude
    eps_base: float = 5e-4      # floor added everywhere

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        if self.eps0 < 0 or self.eps_base < 0:
            raise ValueError("viscosity amplitudes must be nonnegative")

    def ramp(self, log_sensor: np.ndarray) -> np.ndarray:
        s = np.asarray(log_sensor, dtype=float)
        out = np.where(s >= self.s0 + self.kappa, self.eps0, 0.0)
        mid = (s >= self.s0 - self.kappa) & (s < self.s0 + self.kappa)
        out = np.where(
            mid,
            0.5 * self.eps0 * (1.0 + np.sin(np.pi * (s - self.s0) / (2 * self.kappa))),
            out,
        )
        return out

    def ramp_deriv(self, log_sensor: np.ndarray) -> np.ndarray:
        s = np.asarray(log_sensor, dtype=float)
        mid = (s >= self.s0 - self.kappa) & (s < self.s0 + self.kappa)
        slope = (0.5 * self.eps0 * np.pi / (2 * self.kappa)
                 * np.cos(np.pi * (s - self.s0) / (2 * self.kappa)))
        return np.where(mid, slope, 0.0)


class ConservationLaw:
    """Base interface; state arrays have a trailing dimension of size D."""

    name: str = "base"
    D: int = 1
    L: float = 1.0
    T: float = 1.0
    param_box: np.ndarray = np.zeros((0, 2))
    viscosity = ViscosityParams()
    sensor_component = 0    # both sensors select a state component
    # reference mesh size the baseline viscosity amplitudes correspond to
    h_ref: float = 0.025

    def mesh_scaled_viscosity(self, h_char: float) -> ViscosityParams:
        """Amplitudes scaled with the mesh so shocks stay ~1.5 cells wide.

        The baseline constants are representative values for a mesh of
        size h_ref; coarser meshes need proportionally more sub-cell
        dissipation for the discrete system to remain solvable. Scales
        from the class baseline, so repeated calls are idempotent.
        """
        base = type(self).viscosity
        s = max(1.0, 2.0 * h_char / self.h_ref)
        return ViscosityParams(s0=base.s0, kappa=base.kappa,
                               eps0=s * base.eps0, eps_base=s * base.eps_base)

    def flux(self, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def flux_jac(self, U: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def source(self, U: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(U)

    def source_jac(self, U: np.ndarray, x: np.ndarray) -> np.ndarray:
        return np.zeros(U.shape + (self.D,))

    def shock_sensor(self, U: np.ndarray) -> np.ndarray:
        """Scalar sensor driving artificial viscosity."""
        return U[..., 0]

    def registration_sensor(self, U: np.ndarray) -> np.ndarray:
        """Scalar sensor driving registration (same component selection)."""
        return self.shock_sensor(U)

    def check_admissible(self, U: np.ndarray) -> None:
        pass

    def dirichlet_mask(self, side: int) -> np.ndarray:
        """Boolean (D,) mask of weakly imposed components on a boundary side."""
        raise NotImplementedError

    def dirichlet_data(self, side: int, points: np.ndarray, mu) -> np.ndarray:
        """Boundary data at physical points of one side, (..., D)."""
        raise NotImplementedError

    # space-time flux F(U) = [f(U), U] and its state derivative
    def spacetime_flux(self, U: np.ndarray) -> np.ndarray:
        return np.stack([self.flux(U), U], axis=-1)

    def spacetime_flux_jac(self, U: np.ndarray) -> np.ndarray:
        out = np.empty(U.shape[:-1] + (self.D, 2, self.D))
        out[..., 0, :] = self.flux_jac(U)
        eye = np.eye(self.D)
        out[..., 1, :] = np.broadcast_to(eye, U.shape[:-1] + (self.D, self.D))
        return out

    def normal_flux(self, U: np.ndarray, n: np.ndarray) -> np.ndarray:
        """F(U) . n for space-time unit normals n (..., 2)."""
        return self.flux(U) * n[..., :1] + U * n[..., 1:2]

    def char_speeds(self, U: np.ndarray, n: np.ndarray) -> np.ndarray:
        """Signed eigenvalues of d(F.n)/dU, shape (..., n_eig)."""
        raise NotImplementedError

    def char_speeds_grad(self, U: np.ndarray, n: np.ndarray) -> np.ndarray:
        """State gradients of the signed eigenvalues, (..., n_eig, D)."""
        raise NotImplementedError

    def wavespeed(self, U: np.ndarray, n: np.ndarray) -> np.ndarray:
        """Exact spectral radius of d(F.n)/dU (CFL estimates)."""
        return np.abs(self.char_speeds(U, n)).max(axis=-1)

    def exterior_state(self, side: int, U_in: np.ndarray, points: np.ndarray, mu):
        """Ghost state: Dirichlet data where masked, interior trace elsewhere."""
        mask = self.dirichlet_mask(side)
        if not mask.any():
            return U_in
        data = self.dirichlet_data(side, points, mu)
        out = U_in.copy()
        out[..., mask] = data[..., mask]
        return out


class Burgers(ConservationLaw):
    """Inviscid Burgers with a two-step sigmoid initial profile."""

    name = "burgers"
    D = 1
    L = 1.0
    T = 0.8
    param_box = np.array([[1.0, 1.3], [0.25, 0.35]])
    nu_steep = 260.0

    def initial_data(self, x: np.ndarray, mu) -> np.ndarray:
        mu1, mu2 = float(mu[0]), float(mu[1])
        H = lambda s: 1.0 / (1.0 + np.exp(-self.nu_steep * s))
        return mu1 * (2.0 - H(x - mu2) - H(x - 0.5)) + 0.3 * np.sin(np.pi * x)

    def flux(self, U):
        return 0.5 * U * U

    def flux_jac(self, U):
        return U[..., None]

    def dirichlet_mask(self, side):
        return np.array([side in (BOTTOM, LEFT)])

    def dirichlet_data(self, side, points, mu):
        pts = np.asarray(points)
        if side == BOTTOM:
            return self.initial_data(pts[..., 0], mu)[..., None]
        if side == LEFT:
            val = self.initial_data(np.zeros(pts.shape[:-1]), mu)
            return val[..., None]
        return np.zeros(pts.shape[:-1] + (1,))

    def char_speeds(self, U, n):
        return (U[..., 0] * n[..., 0] + n[..., 1])[..., None]

    def char_speeds_grad(self, U, n):
        return n[..., 0][..., None, None] * np.ones(U.shape[:-1] + (1, 1))


class ShallowWater(ConservationLaw):
    """Saint-Venant flow over a bump; state U = [h, q]."""

    name = "shallow-water"
    D = 2
    L = 25.0
    T = 3.0
    param_box = np.array([[2.0, 8.0], [0.1, 0.2]])
    h_inf = 2.0
    q0 = 4.4
    h_ref = 0.25

    def __init__(self):
        self._base_flow = None   # callable x -> (n, 2), set by the hf solver

    def bathymetry(self, x: np.ndarray) -> np.ndarray:
        return -0.2 + np.exp(-0.125 * (np.asarray(x, dtype=float) - 10.0) ** 4)

    def bathymetry_slope(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -0.5 * (x - 10.0) ** 3 * np.exp(-0.125 * (x - 10.0) ** 4)

    def inflow_discharge(self, t: np.ndarray, mu) -> np.ndarray:
        mu1, mu2 = float(mu[0]), float(mu[1])
        t = np.asarray(t, dtype=float)
        return self.q0 * (1.0 + mu1 * t * np.exp(-0.5 * (t - 0.05) ** 2 / mu2**2))

    def set_base_flow(self, interp) -> None:
        """Install the steady base state sampler, x -> (..., 2)."""
        self._base_flow = interp

    def base_flow(self, x: np.ndarray) -> np.ndarray:
        if self._base_flow is None:
            raise RuntimeError("base flow not initialized; run the steady solve first")
        return self._base_flow(x)

    def check_admissible(self, U):
        if np.any(U[..., 0] <= 0):
            raise DryStateError("nonpositive water height")

    def flux(self, U):
        h = U[..., 0]
        q = U[..., 1]
        if np.any(h <= 0):
            raise DryStateError("nonpositive water height in flux")
        return np.stack([q, q * q / h + 0.5 * GRAVITY * h * h], axis=-1)

    def flux_jac(self, U):
        h = U[..., 0]
        q = U[..., 1]
        u = q / h
        out = np.zeros(U.shape[:-1] + (2, 2))
        out[..., 0, 1] = 1.0
        out[..., 1, 0] = -u * u + GRAVITY * h
        out[..., 1, 1] = 2.0 * u
        return out

    def source(self, U, x):
        h = U[..., 0]
        s = np.zeros_like(U)
        s[..., 1] = -GRAVITY * h * self.bathymetry_slope(x)
        return s

    def source_jac(self, U, x):
        out = np.zeros(U.shape + (2,))
        out[..., 1, 0] = -GRAVITY * self.bathymetry_slope(x)
        return out

    def shock_sensor(self, U):
        return U[..., 0]

    def dirichlet_mask(self, side):
        if side == BOTTOM:
            return np.array([True, True])
        if side == LEFT:
            return np.array([False, True])   # discharge at inflow
        if side == RIGHT:
            return np.array([True, False])   # height at outflow
        return np.array([False, False])

    def dirichlet_data(self, side, points, mu):
        pts = np.asarray(points)
        out = np.zeros(pts.shape[:-1] + (2,))
        if side == BOTTOM:
            out[:] = self.base_flow(pts[..., 0])
        elif side == LEFT:
            out[..., 1] = self.inflow_discharge(pts[..., 1], mu)
        elif side == RIGHT:
            out[..., 0] = self.h_inf
        return out

    def char_speeds(self, U, n):
        h = U[..., 0]
        u = U[..., 1] / h
        c = np.sqrt(GRAVITY * h)
        nx, nt = n[..., 0], n[..., 1]
        return np.stack([(u + c) * nx + nt, (u - c) * nx + nt], axis=-1)

    def char_speeds_grad(self, U, n):
        h = U[..., 0]
        u = U[..., 1] / h
        c = np.sqrt(GRAVITY * h)
        nx = n[..., 0]
        out = np.empty(U.shape[:-1] + (2, 2))
        out[..., 0, 0] = (-u / h + c / (2.0 * h)) * nx
        out[..., 0, 1] = nx / h
        out[..., 1, 0] = (-u / h - c / (2.0 * h)) * nx
        out[..., 1, 1] = nx / h
        return out


class LinearAdvection(ConservationLaw):
    """Constant-speed transport, f(U) = a U; used for verification."""

    name = "linear-advection"
    D = 1
    L = 1.0
    T = 0.8
    param_box = np.array([[0.5, 1.5]])

    def __init__(self, speed: float = 1.0, profile=None):
        self.speed = float(speed)
        self.profile = profile or (lambda s: 0.5 + 0.25 * np.sin(2 * np.pi * s))

    def exact(self, x: np.ndarray, t: np.ndarray) -> np.ndarray:
        return self.profile(np.asarray(x) - self.speed * np.asarray(t))

    def flux(self, U):
        return self.speed * U

    def flux_jac(self, U):
        return np.full(U.shape[:-1] + (1, 1), self.speed)

    def dirichlet_mask(self, side):
        if side == BOTTOM:
            return np.array([True])
        if side == LEFT and self.speed > 0:
            return np.array([True])
        if side == RIGHT and self.speed < 0:
            return np.array([True])
        return np.array([False])

    def dirichlet_data(self, side, points, mu):
        pts = np.asarray(points)
        return self.exact(pts[..., 0], pts[..., 1])[..., None]

    def char_speeds(self, U, n):
        lam = self.speed * n[..., 0] + n[..., 1]
        return np.broadcast_to(lam[..., None], U.shape[:-1] + (1,)).copy()

    def char_speeds_grad(self, U, n):
        return np.zeros(U.shape[:-1] + (1, 1))


def make_model(name: str) -> ConservationLaw:
    if name == "burgers":
        return Burgers()
    if name == "shallow-water":
        return ShallowWater()
    if name == "linear-advection":
        return LinearAdvection()
    raise ValueError(f"unknown model '{name}'")


def physical_flux(model: ConservationLaw, U: np.ndarray) -> np.ndarray:
    return model.flux(np.asarray(U, dtype=float))


def _smooth_abs(x, d=TAU_SMOOTH):
    s = np.sqrt(x * x + d * d)
    return s, x / s


def _smooth_max(a, b, d=TAU_SMOOTH):
    s = np.sqrt((a - b) ** 2 + d * d)
    val = 0.5 * (a + b + s)
    wa = 0.5 * (1.0 + (a - b) / s)
    return val, wa, 1.0 - wa


def _state_envelope(model, U, n, need_grad):
    """Smoothed spectral radius of one trace with its state gradient."""
    lam = model.char_speeds(U, n)
    a, da = _smooth_abs(lam)
    n_eig = lam.shape[-1]
    tau = a[..., 0]
    weights = [np.ones(tau.shape)] + [np.zeros(tau.shape)
                                      for _ in range(n_eig - 1)]
    for j in range(1, n_eig):
        tau, wa, wb = _smooth_max(tau, a[..., j])
        for i in range(j):
            weights[i] = weights[i] * wa
        weights[j] = wb
    if not need_grad:
        return tau, None
    g = model.char_speeds_grad(U, n)
    grad = sum((weights[i] * da[..., i])[..., None] * g[..., i, :]
               for i in range(n_eig))
    return tau, grad


def _rusanov_tau(model: ConservationLaw, Up, Um, n, need_grad: bool):
    """Smoothed maximum wave-speed envelope over both traces.

    |lambda| and max() are C-infinity smoothed at scale TAU_SMOOTH; the
    per-state-then-pairwise structure keeps the result symmetric under
    (Up, Um, n) -> (Um, Up, -n), so conservation holds exactly.
    """
    tp, gp = _state_envelope(model, Up, n, need_grad)
    tm, gm = _state_envelope(model, Um, n, need_grad)
    tau, wp, wm = _smooth_max(tp, tm)
    if not need_grad:
        return tau, None, None
    return tau, wp[..., None] * gp, wm[..., None] * gm


def rusanov_flux(model: ConservationLaw, Up, Um, n):
    """Local Lax-Friedrichs flux for the space-time system.

    Convention: when the characteristic speed along n is positive, the
    upwind trace is Um; element-local assembly therefore passes its own
    trace as Um together with its outward normal.
    """
    Up = np.asarray(Up, dtype=float)
    Um = np.asarray(Um, dtype=float)
    n = np.asarray(n, dtype=float)
    tau, _, _ = _rusanov_tau(model, Up, Um, n, need_grad=False)
    avg = 0.5 * (model.normal_flux(Up, n) + model.normal_flux(Um, n))
    return avg - 0.5 * tau[..., None] * (Up - Um)


def rusanov_flux_jac(model: ConservationLaw, Up, Um, n):
    """Derivatives of the Rusanov flux wrt both traces."""
    Up = np.asarray(Up, dtype=float)
    Um = np.asarray(Um, dtype=float)
    n = np.asarray(n, dtype=float)
    tau, dtau_p, dtau_m = _rusanov_tau(model, Up, Um, n, need_grad=True)

    def flux_normal_jac(U):
        A = model.spacetime_flux_jac(U)          # (..., D, 2, D)
        return A[..., 0, :] * n[..., 0, None, None] + A[..., 1, :] * n[..., 1, None, None]

    jump = Up - Um
    eye = np.eye(model.D)
    dHp = 0.5 * flux_normal_jac(Up) - 0.5 * tau[..., None, None] * eye \
        - 0.5 * np.einsum("...i,...j->...ij", jump, dtau_p)
    dHm = 0.5 * flux_normal_jac(Um) + 0.5 * tau[..., None, None] * eye \
        - 0.5 * np.einsum("...i,...j->...ij", jump, dtau_m)
    return dHp, dHm


def mapped_fluxes(model: ConservationLaw, U, G, g):
    """Mapped volume fluxes: F_Phi = g F G^{-T}, S_Phi = g S.

    The source is evaluated at the mapped physical location, so callers
    that need x-dependent sources should use `mapped_fluxes_at`.
    """
    return mapped_fluxes_at(model, U, G, g, x_phys=None)


def mapped_fluxes_at(model: ConservationLaw, U, G, g, x_phys):
    U = np.asarray(U, dtype=float)
    G = np.asarray(G, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(g <= 0):
        raise DegenerateMapError("mapping determinant must be positive")
    Ginv = np.empty_like(G)
    Ginv[..., 0, 0] = G[..., 1, 1] / g
    Ginv[..., 0, 1] = -G[..., 0, 1] / g
    Ginv[..., 1, 0] = -G[..., 1, 0] / g
    Ginv[..., 1, 1] = G[..., 0, 0] / g
    F = model.spacetime_flux(U)
    # F_Phi[d, a] = g * F[d, b] * (G^{-T})[b, a] = g * F[d, b] * Ginv[a, b]
    F_phi = g[..., None, None] * np.einsum("...db,...ab->...da", F, Ginv)
    if x_phys is None:
        S = model.source(U, np.zeros(U.shape[:-1]))
    else:
        S = model.source(U, x_phys)
    return F_phi, g[..., None] * S


def artificial_viscosity(model: ConservationLaw, U_nodal: np.ndarray,
                         ref, mass_ref: np.ndarray) -> np.ndarray:
    """Piecewise-constant viscosity per element from the resolution sensor.

    U_nodal: (N_e, n_lp, D) nodal states; mass_ref: reference mass matrix.
    """
    params = model.viscosity
    s = model.shock_sensor(U_nodal)                      # (N_e, n_lp)
    proj = ref.degree_projector(ref.p - 1)
    resid = s - s @ proj.T
    num = np.einsum("ki,ij,kj->k", resid, mass_ref, resid)
    den = np.einsum("ki,ij,kj->k", s, mass_ref, s)
    ratio = np.zeros_like(den)
    ok = den > 0
    ratio[ok] = np.sqrt(np.maximum(num[ok], 0.0) / den[ok])
    eps = np.full(s.shape[0], params.eps_base)
    pos = ratio > 0
    eps[pos] += params.ramp(np.log10(ratio[pos]))
    return eps


def artificial_viscosity_gradient(model: ConservationLaw, U_nodal: np.ndarray,
                                  ref, mass_ref: np.ndarray) -> np.ndarray:
    """d(eps_k)/d(sensor nodal values): (N_e, n_lp); zero off the ramp.

    The sin ramp is C1, so the sensitivity vanishes continuously at the
    ramp edges and for elements with a degenerate sensor.
    """
    params = model.viscosity
    s = model.shock_sensor(U_nodal)
    proj = ref.degree_projector(ref.p - 1)
    I_minus_P = np.eye(proj.shape[0]) - proj
    Q = I_minus_P.T @ mass_ref @ I_minus_P
    num = np.einsum("ki,ij,kj->k", s, Q, s)
    den = np.einsum("ki,ij,kj->k", s, mass_ref, s)
    grad = np.zeros_like(s)
    ok = (den > 0) & (num > 0)
    if not ok.any():
        return grad
    ratio = np.sqrt(num[ok] / den[ok])
    dramp = params.ramp_deriv(np.log10(ratio))
    # d(log10 S)/ds = (Qs/num - Ms/den) / ln 10
    Qs = s[ok] @ Q.T
    Ms = s[ok] @ mass_ref.T
    dlog = (Qs / num[ok, None] - Ms / den[ok, None]) / np.log(10.0)
    grad[ok] = dramp[:, None] * dlog
    return grad
