"""Optimization-based space-time registration and RePOD compression.

A mapped sensor field s(U) o Phi is matched against a low-dimensional
template space; the greedy loop registers every snapshot, compresses the
optimal displacements by coefficient-space POD, and enriches the
template space with the worst-fit mapped sensor until the proximity
tolerance or the iteration budget is reached.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .dg import DGField, DGSpace, NormPair, pod
from .maps import BijectivityParams, Displacement, MapSpace


@dataclass
class RegistrationParams:
    """Hyper-parameters of the registration optimization and greedy loop."""

    xi: float = 1e-4              # H2 regularization weight
    tol_pod: float = 1e-4         # POD energy tolerance for the map basis
    tol: float = 1e-4             # relative proximity termination threshold
    N_max: int = 3                # greedy iteration budget
    filter_window: int = 5        # moving-average width for the sensor
    bij: BijectivityParams = field(default_factory=BijectivityParams)
    maxiter_full: int = 400       # optimizer budget in the full map space
    maxiter_reduced: int = 150


@dataclass
class RegistrationResult:
    phi_star: Displacement
    psi_star: np.ndarray          # template-space coefficients of psi*
    f_star: float                 # proximity value (absolute)
    converged: bool
    iterations: int
    n_clamped: int


class TemplateSpace:
    """Scalar template fields, orthonormal in the discrete L2 product."""

    def __init__(self, space: DGSpace, norms: NormPair, basis=None):
        self.space = space
        self.norms = norms
        self.basis = np.zeros((space.n_scalar, 0)) if basis is None else basis
        self._quad_cache = None

    @property
    def N(self) -> int:
        return self.basis.shape[1]

    def copy(self) -> "TemplateSpace":
        return TemplateSpace(self.space, self.norms, self.basis.copy())

    def append(self, coeffs: np.ndarray, tol: float = 1e-10) -> bool:
        """Gram-Schmidt append; returns False if linearly dependent."""
        v = np.asarray(coeffs, dtype=float).copy()
        X = self.norms.X
        for _ in range(2):
            if self.N:
                v -= self.basis @ (self.basis.T @ (X @ v))
        nrm = np.sqrt(max(v @ (X @ v), 0.0))
        if nrm < tol * max(1.0, np.sqrt(abs(coeffs @ (X @ coeffs)))):
            return False
        self.basis = np.column_stack([self.basis, v / nrm])
        self._quad_cache = None
        return True

    def quad_values(self) -> np.ndarray:
        """Template values at the volume quadrature points, (n_pts, N)."""
        if self._quad_cache is None or self._quad_cache.shape[1] != self.N:
            sp_ = self.space
            Z = self.basis.reshape(sp_.mesh.n_elements, sp_.ref.n_lp, -1)
            self._quad_cache = np.einsum("qi,kin->kqn", sp_.basis_v, Z).reshape(
                -1, self.N)
        return self._quad_cache

    def gram(self) -> np.ndarray:
        return self.basis.T @ (self.norms.X @ self.basis)


def filter_sensor(field_in: DGField, window: int) -> DGField:
    """Spatial moving average on the structured node lattice.

    Shrinking symmetric windows at the edges preserve constants exactly;
    co-located duplicated nodes are averaged first, so the output is
    continuous across facets.
    """
    if field_in.D != 1:
        raise ValueError("sensor filter expects a scalar field")
    if window % 2 != 1:
        raise ValueError("window must be odd")
    mesh = field_in.space.mesh
    ncol = mesh.p * mesh.nx + 1
    nrow = mesh.p * mesh.nt + 1
    if window > ncol:
        raise ValueError("window larger than the lattice")
    groups = mesh.node_groups()
    vals = field_in.coeffs.reshape(mesh.n_elements, field_in.space.ref.n_lp)
    flat = vals.ravel()
    sums = np.zeros(ncol * nrow)
    counts = np.zeros(ncol * nrow)
    np.add.at(sums, groups, flat)
    np.add.at(counts, groups, 1.0)
    lattice = (sums / np.maximum(counts, 1.0)).reshape(nrow, ncol)
    if window > 1:
        half = window // 2
        csum = np.cumsum(np.pad(lattice, ((0, 0), (1, 0))), axis=1)
        out = np.empty_like(lattice)
        for i in range(ncol):
            h = min(half, i, ncol - 1 - i)
            out[:, i] = (csum[:, i + h + 1] - csum[:, i - h]) / (2 * h + 1)
        lattice = out
    smoothed = lattice.ravel()[groups]
    return DGField(field_in.space, 1, smoothed)


def sensor_field(model, U: DGField, window: int = 5) -> DGField:
    """Filtered registration sensor of a snapshot as a scalar field."""
    nodal = U.nodal()
    s = model.registration_sensor(nodal)
    raw = DGField.from_nodal(U.space, s[..., None])
    return filter_sensor(raw, window)


def proximity(psi: DGField, phi: Displacement, snapshot_sensor: DGField) -> float:
    """Squared L2 mismatch between the mapped sensor and a template field."""
    space = snapshot_sensor.space
    pts = space.x_vol.reshape(-1, 2)
    mapped = phi.map_points(pts)
    s_vals, _ = snapshot_sensor.evaluate(mapped)
    psi_vals, _ = psi.evaluate(pts)
    w = space.w_vol.ravel()
    diff = s_vals[:, 0] - psi_vals[:, 0]
    return float(np.dot(w, diff * diff))


class _Objective:
    """Proximity + H2 penalty + bijectivity surrogate, with gradient."""

    def __init__(self, sensor: DGField, templates: TemplateSpace,
                 map_space: MapSpace, basis, params: RegistrationParams,
                 h2: np.ndarray):
        self.sensor = sensor
        self.templates = templates
        self.ms = map_space
        self.basis = basis            # (M_hf, M) or None for the full space
        self.params = params
        space = sensor.space
        self.pts = space.x_vol.reshape(-1, 2)
        self.w = space.w_vol.ravel()
        self.tab = map_space.tabulate(self.pts)
        self.psi_q = templates.quad_values()
        self.h2 = h2
        self.n_clamped = 0

    def lift(self, a):
        return a if self.basis is None else self.basis @ a

    def proximity_parts(self, a_full):
        disp = self.ms.displacement_values(self.tab, a_full)
        mapped = self.pts + disp
        vals, grads, ncl = self.sensor.space.evaluate(
            self.sensor.coeffs, 1, mapped, need_grad=True)
        self.n_clamped = max(self.n_clamped, ncl)
        s = vals[:, 0]
        c = self.psi_q.T @ (self.w * s) if self.templates.N else np.zeros(0)
        r = s - (self.psi_q @ c if self.templates.N else 0.0)
        f = float(np.dot(self.w, r * r))
        return f, r, grads[:, 0, :], c

    def __call__(self, a):
        a_full = self.lift(a)
        f, r, grad_s, _ = self.proximity_parts(a_full)
        reg = self.params.xi * float(a_full @ (self.h2 @ a_full))
        pen = self.ms.bijectivity_functional(a_full, self.params.bij)
        # proximity gradient via the envelope property of the optimal c
        wr = 2.0 * self.w * r
        grad = np.concatenate([(wr * grad_s[:, 0]) @ self.tab.V1,
                               (wr * grad_s[:, 1]) @ self.tab.V2])
        grad += 2.0 * self.params.xi * (self.h2 @ a_full)
        grad += self.ms.bijectivity_gradient(a_full, self.params.bij)
        if self.basis is not None:
            grad = self.basis.T @ grad
        return f + reg + pen, grad


def register_one(U_sensor: DGField, templates: TemplateSpace,
                 map_space: MapSpace, params: RegistrationParams,
                 basis=None, a0=None, h2=None,
                 maxiter=None) -> RegistrationResult:
    """Register one snapshot sensor against the template space.

    basis: optional (M_hf, M) reduced displacement basis; a0 warm start
    in the reduced coordinates. Returns the best admissible iterate.
    """
    if h2 is None:
        h2 = map_space.h2_penalty_matrix()
    obj = _Objective(U_sensor, templates, map_space, basis, params, h2)
    dim = map_space.M_hf if basis is None else basis.shape[1]
    if dim == 0:
        phi = Displacement.zero(map_space)
        f, _, _, c = obj.proximity_parts(phi.a)
        return RegistrationResult(phi_star=phi, psi_star=c, f_star=f,
                                  converged=True, iterations=0, n_clamped=0)
    x0 = np.zeros(dim) if a0 is None else np.asarray(a0, dtype=float)
    if maxiter is None:
        maxiter = params.maxiter_full if basis is None else params.maxiter_reduced

    best = {"x": x0.copy(), "f": np.inf}

    def track(x):
        a_full = obj.lift(x)
        pen = map_space.bijectivity_functional(a_full, params.bij)
        if pen <= params.bij.delta:
            f, *_ = obj.proximity_parts(a_full)
            f_tot = f + params.xi * float(a_full @ (h2 @ a_full))
            if f_tot < best["f"]:
                best["x"] = x.copy()
                best["f"] = f_tot

    track(x0)
    res = minimize(obj, x0, jac=True, method="L-BFGS-B", callback=track,
                   options={"maxiter": maxiter, "ftol": 1e-14, "gtol": 1e-9,
                            "maxcor": 30})
    track(res.x)
    a_opt = best["x"]
    a_full = obj.lift(a_opt)
    phi = Displacement(map_space, a_full)
    f, r, _, c = obj.proximity_parts(a_full)
    admissible = map_space.bijectivity_functional(a_full, params.bij) \
        <= params.bij.delta
    return RegistrationResult(
        phi_star=phi, psi_star=c, f_star=f,
        converged=bool(res.success and admissible),
        iterations=int(res.nit), n_clamped=obj.n_clamped,
    )


@dataclass
class GreedyLog:
    iteration: int
    N: int
    M: int
    max_rel_proximity: float
    worst_snapshot: int


@dataclass
class GreedyOutput:
    templates: TemplateSpace
    map_basis: np.ndarray         # (M_hf, M) coefficient-space POD modes
    coefficients: np.ndarray      # (n_train, M)
    eigenvalues: np.ndarray
    displacements_full: np.ndarray  # (n_train, M_hf) optimal displacements
    logs: list


def greedy_registration(sensors: list, templates0: TemplateSpace,
                        map_space: MapSpace, params: RegistrationParams,
                        mu_train=None, verbose: bool = False) -> GreedyOutput:
    """Greedy template construction over a training set of sensor fields.

    When mu_train is given, the first (full-space) pass warm-starts each
    registration from the nearest already-registered parameter, which
    keeps the selected local minima varying smoothly over the parameter
    domain (essential for the downstream coefficient regression).
    """
    if not sensors:
        raise ValueError("need at least one snapshot sensor")
    n_train = len(sensors)
    templates = templates0.copy()
    h2 = map_space.h2_penalty_matrix()
    norms = templates.norms
    s_norm2 = np.array([max(s.coeffs @ (norms.X @ s.coeffs), 1e-300)
                        for s in sensors])
    basis = None                   # start in the full displacement space
    a_warm = [None] * n_train
    a_star = np.zeros((n_train, map_space.M_hf))
    logs = []
    f_rel = np.full(n_train, np.inf)
    pod_res = None
    mu_arr = None if mu_train is None else np.asarray(mu_train, dtype=float)
    for it in range(max(params.N_max - templates.N, 0) + 1):
        for k, s in enumerate(sensors):
            a0 = a_warm[k]
            if it == 0 and a0 is None and mu_arr is not None and k > 0:
                j = int(np.argmin(np.linalg.norm(mu_arr[:k] - mu_arr[k],
                                                 axis=1)))
                a0 = a_star[j]
            res = register_one(s, templates, map_space, params,
                               basis=basis, a0=a0, h2=h2)
            a_star[k] = res.phi_star.a
            f_rel[k] = res.f_star / s_norm2[k]
        # coefficient-space POD of the optimal displacements (star product)
        pod_res = pod(a_star.T, params.tol_pod)
        basis = pod_res.modes
        coeffs = pod_res.coefficients
        a_warm = [coeffs[k] for k in range(n_train)]
        worst = int(np.argmax(f_rel))
        logs.append(GreedyLog(iteration=it, N=templates.N, M=basis.shape[1],
                              max_rel_proximity=float(f_rel[worst]),
                              worst_snapshot=worst))
        if verbose:
            print(f"  greedy it {it}: N={templates.N} M={basis.shape[1]} "
                  f"max f*={f_rel[worst]:.3e} (snapshot {worst})")
        if f_rel[worst] < params.tol or templates.N >= params.N_max:
            break
        # enrich with the worst-fit mapped sensor
        phi_w = Displacement(map_space, a_star[worst])
        templates.append(map_field(sensors[worst], phi_w).coeffs)
    return GreedyOutput(
        templates=templates,
        map_basis=basis,
        coefficients=np.array([a_warm[k] for k in range(n_train)]),
        eigenvalues=pod_res.eigenvalues,
        displacements_full=a_star,
        logs=logs,
    )


def map_field(U: DGField, phi: Displacement) -> DGField:
    """Materialize U o Phi on the reference mesh by nodal composition.

    Nodes whose image stays inside their own element keep the own-side
    trace (so the identity map reproduces the field exactly); only nodes
    mapped farther away fall back to point location.
    """
    space = U.space
    mesh = space.mesh
    nodes = mesh.nodes
    mapped = np.clip(phi.map_points(nodes), [0.0, 0.0], [mesh.L, mesh.T])
    n_lp = space.ref.n_lp
    own = np.repeat(np.arange(mesh.n_elements), n_lp)
    ref_own = mesh.ref_coords(mapped, own)
    tol = 1e-12
    inside = (ref_own[:, 0] >= -tol) & (ref_own[:, 1] >= -tol) \
        & (ref_own.sum(axis=1) <= 1.0 + tol)
    elems = np.where(inside, own, mesh.locate(mapped))
    ref_pts = mesh.ref_coords(mapped, elems)
    B = space.ref.basis_values(ref_pts)
    w = U.coeffs.reshape(U.D, mesh.n_elements, n_lp)
    vals = np.einsum("dpi,pi->pd", w[:, elems, :], B)
    nodal = vals.reshape(mesh.n_elements, n_lp, U.D)
    return DGField.from_nodal(space, nodal)


@dataclass
class RepodOutput:
    trial_basis: np.ndarray       # (N_dof, N) X-orthonormal reduced basis
    solution_coeffs: np.ndarray   # (n_train, N)
    eigenvalues: np.ndarray
    map_basis: np.ndarray
    map_coeffs: np.ndarray
    mapped_snapshots: np.ndarray  # (N_dof, n_train)


def repod(snapshots: list, greedy: GreedyOutput, norms: NormPair,
          tol_pod: float, map_space: MapSpace,
          continuous: bool = False) -> RepodOutput:
    """POD of the mapped snapshots in the discrete L2 inner product."""
    mapped = []
    for k, U in enumerate(snapshots):
        a_full = greedy.map_basis @ greedy.coefficients[k]
        phi = Displacement(map_space, a_full)
        Um = map_field(U, phi)
        if continuous:
            from .dg import to_continuous
            Um = to_continuous(Um)
        mapped.append(Um.coeffs)
    S = np.column_stack(mapped)
    res = pod(S, tol_pod, inner=norms.X)
    return RepodOutput(
        trial_basis=res.modes,
        solution_coeffs=res.coefficients[:, :res.N],
        eigenvalues=res.eigenvalues,
        map_basis=greedy.map_basis,
        map_coeffs=greedy.coefficients,
        mapped_snapshots=S,
    )
