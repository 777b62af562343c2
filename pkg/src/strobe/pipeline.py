"""Offline training pipeline and study drivers.

run_offline produces an OfflineBundle (snapshots, registration, RePOD
basis, regressors, test-space representers) that the study drivers and
the trained-ROM builders slice per (N, J, EQP tolerance) variant.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assembly import MapCache, ResidualWorkspace
from .config import ExperimentConfig
from .container import Container, mesh_arrays, mesh_meta, save_snapshots
from .dg import (DGField, DGSpace, assemble_norms, best_fit_error,
                 continuous_projection_matrix, pod)
from .maps import BijectivityParams, Displacement, MapSpace
from .mesh import build_structured_mesh
from .models import make_model
from .regression import fit as rbf_fit
from .registration import (RegistrationParams, TemplateSpace,
                           greedy_registration, repod, sensor_field)
from .rom import ReducedModel, build_eqp, build_test_space
from .solver import generate_snapshots, prepare_model


@dataclass
class OfflineBundle:
    config: ExperimentConfig
    space: DGSpace
    model: object
    norms: object
    map_space: MapSpace
    map_cache: MapCache
    bij: BijectivityParams
    train_mu: np.ndarray
    test_mu: np.ndarray
    train_solutions: np.ndarray
    test_solutions: np.ndarray
    greedy: object
    repod_out: object
    repod_cont: object
    reps: np.ndarray              # (N_dof, n_train * N_roof)
    reps_cont: np.ndarray
    map_regressor: object
    coeff_regressor: object
    coeff_regressor_cont: object
    N_roof: int
    timings: dict = field(default_factory=dict)

    def train_maps(self) -> list:
        out = []
        for k in range(self.train_mu.shape[0]):
            a_full = self.greedy.map_basis @ self.greedy.coefficients[k]
            out.append(Displacement(self.map_space, a_full))
        return out

    def predicted_map(self, mu):
        """Regressed displacement with the admissibility fallback."""
        a_red = self.map_regressor.predict(mu)
        a_full = self.greedy.map_basis @ a_red
        fallback = False
        if self.map_space.bijectivity_functional(a_full, self.bij) \
                > self.bij.delta:
            k = int(np.argmin(np.linalg.norm(self.train_mu - np.asarray(mu),
                                             axis=1)))
            a_red = self.greedy.coefficients[k]
            a_full = self.greedy.map_basis @ a_red
            fallback = True
        return Displacement(self.map_space, a_full), a_red, fallback

    def trial_basis(self, N: int, continuous: bool = False) -> np.ndarray:
        src = self.repod_cont if continuous else self.repod_out
        return src.trial_basis[:, :N]

    def test_space(self, N: int, J: int, continuous: bool = False):
        reps = self.reps_cont if continuous else self.reps
        n_train = self.train_mu.shape[0]
        cols = reps.reshape(reps.shape[0], n_train, self.N_roof)[:, :, :N]
        cols = cols.reshape(reps.shape[0], n_train * N)
        res = pod(cols, 1e-12, inner=self.norms.Y, max_modes=J)
        return res.modes[:, :min(J, res.modes.shape[1])]


def initial_templates(model, space, norms, sensors, train_mu,
                      window: int) -> TemplateSpace:
    """Model-specific template seeding: centroid snapshot (Burgers) or
    centroid height plus base-flow height (shallow water)."""
    T0 = TemplateSpace(space, norms_scalar(norms, space, model))
    centroid = model.param_box.mean(axis=1)
    k0 = int(np.argmin(np.linalg.norm(train_mu - centroid, axis=1)))
    T0.append(sensors[k0].coeffs)
    if model.name == "shallow-water":
        from .registration import filter_sensor
        bf = model.base_flow(space.mesh.nodes[:, 0])[:, 0]
        h_bf = DGField(space, 1, np.ascontiguousarray(
            bf.reshape(space.mesh.n_elements, space.ref.n_lp)).ravel())
        T0.append(filter_sensor(h_bf, window).coeffs)
    return T0


_SCALAR_NORMS_CACHE = {}


def norms_scalar(norms, space, model):
    if model.D == 1:
        return norms
    key = id(space)
    if key not in _SCALAR_NORMS_CACHE:
        _SCALAR_NORMS_CACHE[key] = assemble_norms(space, D=1)
    return _SCALAR_NORMS_CACHE[key]


def run_offline(config: ExperimentConfig, verbose: bool = True,
                out_dir=None) -> OfflineBundle:
    """Snapshots -> registration -> RePOD -> regressors -> representers."""
    timings = {}
    t_all = time.perf_counter()
    model = make_model(config.model)
    mesh = build_structured_mesh(model.L, model.T, config.nx, config.nt,
                                 config.p)
    space = DGSpace(mesh)
    prepare_model(model, mesh)
    norms = assemble_norms(space, D=model.D)
    map_space = MapSpace(model.L, model.T, config.Mbar)
    map_cache = MapCache(space, map_space)
    bij = BijectivityParams(eps=config.bij_eps, c_exp=config.bij_c_exp,
                            delta=model.L * model.T)

    train_mu = config.training_parameters(model)
    if train_mu.shape[0] == 0:
        raise ValueError("empty training parameter set")
    test_mu = config.test_parameters(model)

    t0 = time.perf_counter()
    train = generate_snapshots(space, model, train_mu, verbose=verbose)
    test = generate_snapshots(space, model, test_mu, verbose=verbose)
    timings["snapshots"] = time.perf_counter() - t0
    if verbose:
        print(f"[offline] snapshots done in {timings['snapshots']:.1f}s "
              f"({len(train.failures)} + {len(test.failures)} failures)")

    fields = [DGField(space, model.D, train.solutions[:, k])
              for k in range(train.mu.shape[0])]
    sensors = [sensor_field(model, f, config.filter_window) for f in fields]
    T0 = initial_templates(model, space, norms, sensors, train.mu,
                           config.filter_window)
    params = RegistrationParams(
        xi=config.xi, tol_pod=config.tol_pod, tol=config.reg_tol,
        N_max=config.N_max, filter_window=config.filter_window, bij=bij)
    t0 = time.perf_counter()
    greedy = greedy_registration(sensors, T0, map_space, params,
                                 mu_train=train.mu, verbose=verbose)
    timings["registration"] = time.perf_counter() - t0
    if verbose:
        print(f"[offline] registration done in {timings['registration']:.1f}s "
              f"(M = {greedy.map_basis.shape[1]})")

    t0 = time.perf_counter()
    rp = repod(fields, greedy, norms, config.tol_pod, map_space)
    rp_cont = repod(fields, greedy, norms, config.tol_pod, map_space,
                    continuous=True)
    timings["repod"] = time.perf_counter() - t0

    N_roof = int(max(max(config.N_list), rp.trial_basis.shape[1]))
    N_roof = min(N_roof, rp.trial_basis.shape[1])
    N_req = max(config.N_list)
    if rp.trial_basis.shape[1] < N_req:
        # keep enough modes for the requested study sizes
        res = pod(rp.mapped_snapshots, 1e-14, inner=norms.X)
        take = min(N_req, res.modes.shape[1])
        rp.trial_basis = res.modes[:, :take]
        rp.solution_coeffs = res.coefficients[:, :take]
        rp.eigenvalues = res.eigenvalues
        res_c = pod(rp_cont.mapped_snapshots, 1e-14, inner=norms.X)
        rp_cont.trial_basis = res_c.modes[:, :min(N_req, res_c.modes.shape[1])]
        rp_cont.solution_coeffs = res_c.coefficients[:, :rp_cont.trial_basis.shape[1]]
        rp_cont.eigenvalues = res_c.eigenvalues
        N_roof = rp.trial_basis.shape[1]

    # coefficient regressors (same R^2 gate for maps and solution guesses)
    t0 = time.perf_counter()
    box = config.box(model)
    map_reg = rbf_fit(train.mu, greedy.coefficients, box=box,
                      seed=config.seed)
    alpha_train = rp.mapped_snapshots.T @ (norms.X @ rp.trial_basis)
    coeff_reg = rbf_fit(train.mu, alpha_train, box=box, seed=config.seed)
    alpha_train_c = rp_cont.mapped_snapshots.T @ (norms.X @ rp_cont.trial_basis)
    coeff_reg_c = rbf_fit(train.mu, alpha_train_c, box=box, seed=config.seed)
    timings["regression"] = time.perf_counter() - t0

    # Riesz representers of Jacobian rows at the mapped training states
    t0 = time.perf_counter()
    maps = []
    for k in range(train.mu.shape[0]):
        a_full = greedy.map_basis @ greedy.coefficients[k]
        maps.append(Displacement(map_space, a_full))
    reps = _representers(space, model, norms, rp.mapped_snapshots,
                         rp.trial_basis[:, :N_roof], maps, train.mu, map_cache)
    P = continuous_projection_matrix(space, model.D)
    reps_cont_src = _representers(space, model, norms,
                                  rp_cont.mapped_snapshots,
                                  rp_cont.trial_basis[:, :N_roof],
                                  maps, train.mu, map_cache)
    reps_cont = np.asarray(P @ reps_cont_src)
    timings["representers"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_all
    if verbose:
        print(f"[offline] total {timings['total']:.1f}s")

    bundle = OfflineBundle(
        config=config, space=space, model=model, norms=norms,
        map_space=map_space, map_cache=map_cache, bij=bij,
        train_mu=train.mu, test_mu=test.mu,
        train_solutions=train.solutions, test_solutions=test.solutions,
        greedy=greedy, repod_out=rp, repod_cont=rp_cont,
        reps=reps, reps_cont=reps_cont,
        map_regressor=map_reg, coeff_regressor=coeff_reg,
        coeff_regressor_cont=coeff_reg_c,
        N_roof=N_roof, timings=timings,
    )
    if out_dir is not None:
        save_offline_summary(bundle, out_dir, train, test)
    return bundle


def _representers(space, model, norms, mapped_snaps, Z, maps, mu_list,
                  map_cache):
    n_train = mapped_snaps.shape[1]
    N = Z.shape[1]
    out = np.empty((Z.shape[0], n_train * N))
    for k in range(n_train):
        ws = ResidualWorkspace(space, model, mu=mu_list[k], phi=maps[k],
                               map_cache=map_cache)
        Wk = mapped_snaps[:, k]
        eps = ws.element_viscosity(Wk)
        _, J = ws.residual_and_jacobian(Wk, eps)
        out[:, k * N:(k + 1) * N] = norms.y_solve(np.asarray((J @ Z)))
    return out


def save_offline_summary(bundle: OfflineBundle, out_dir, train, test):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_snapshots(out / "snapshots", train, bundle.space.mesh)
    save_snapshots(out / "test-snapshots", test, bundle.space.mesh)
    comp = Container(out / "compression")
    comp.save(
        {
            "trial_basis": bundle.repod_out.trial_basis,
            "trial_basis_continuous": bundle.repod_cont.trial_basis,
            "eigenvalues": bundle.repod_out.eigenvalues,
            "map_basis": bundle.greedy.map_basis,
            "map_coefficients": bundle.greedy.coefficients,
            "solution_coefficients": bundle.repod_out.solution_coeffs,
            "template_basis": bundle.greedy.templates.basis,
            "displacement_eigenvalues": bundle.greedy.eigenvalues,
        },
        {
            **mesh_meta(bundle.space.mesh),
            "model": bundle.model.name,
            "greedy_log": [vars(lg) for lg in bundle.greedy.logs],
        },
    )
    summary = {
        "model": bundle.model.name,
        "N": int(bundle.repod_out.trial_basis.shape[1]),
        "M": int(bundle.greedy.map_basis.shape[1]),
        "n_train": int(bundle.train_mu.shape[0]),
        "n_test": int(bundle.test_mu.shape[0]),
        "eigenvalue_decay": (bundle.repod_out.eigenvalues[:12]
                             / bundle.repod_out.eigenvalues[0]).tolist(),
        "map_r2": bundle.map_regressor.r2.tolist(),
        "timings": bundle.timings,
    }
    with open(out / "offline-summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")


def make_rom(bundle: OfflineBundle, N: int, j_factor: int = 2,
             eqp_tol: float | None = None, continuous: bool = False,
             eqp: bool = True) -> ReducedModel:
    """Assemble a trained ReducedModel variant from the offline bundle."""
    Z = bundle.trial_basis(N, continuous)
    J = j_factor * N
    Y = bundle.test_space(N, J, continuous)
    maps = bundle.train_maps()
    coeffs = (bundle.repod_cont if continuous else bundle.repod_out)
    alpha_train = coeffs.mapped_snapshots.T @ (bundle.norms.X @ Z)
    if eqp:
        tol = bundle.config.eqp_tol_tight if eqp_tol is None else eqp_tol
        eq = build_eqp(bundle.space, bundle.model, bundle.norms, Z, Y,
                       alpha_train, maps, bundle.train_mu, step_tol=tol,
                       map_cache=bundle.map_cache)
        rho = eq.rho
    else:
        rho = np.ones(bundle.space.mesh.n_elements)
    coeff_reg = rbf_fit(bundle.train_mu, alpha_train,
                        box=bundle.config.box(bundle.model),
                        seed=bundle.config.seed)
    return ReducedModel(
        model_name=bundle.model.name,
        Z=Z, Y=Y, rho=rho,
        map_basis=bundle.greedy.map_basis,
        map_regressor=bundle.map_regressor,
        coeff_regressor=coeff_reg,
        map_Mbar=bundle.config.Mbar,
        continuous=continuous,
        bij=bundle.bij,
        train_mu=bundle.train_mu,
        train_map_coeffs=bundle.greedy.coefficients,
        meta={"N": N, "J": int(Y.shape[1]),
              "eqp_tol": eqp_tol, "n_sampled": int(np.sum(rho > 0))},
    )


# ----------------------------------------------------------------------
# error metrics shared by studies and the acceptance suite
# ----------------------------------------------------------------------

def mapped_test_fields(bundle: OfflineBundle, continuous: bool = False):
    """Test snapshots composed with their predicted maps, plus the maps."""
    from .registration import map_field
    out, phis = [], []
    for j in range(bundle.test_mu.shape[0]):
        U = DGField(bundle.space, bundle.model.D, bundle.test_solutions[:, j])
        phi, _, _ = bundle.predicted_map(bundle.test_mu[j])
        Um = map_field(U, phi)
        if continuous:
            from .dg import to_continuous
            Um = to_continuous(Um)
        out.append(Um)
        phis.append(phi)
    return out, phis


def best_fit_errors(bundle: OfflineBundle, N_values, registered: bool = True):
    """Out-of-sample relative best-fit errors, max and mean over the set."""
    X = bundle.norms.X
    res = {}
    if registered:
        Z_all = bundle.repod_out.trial_basis
        mapped, _ = mapped_test_fields(bundle)
    else:
        unreg = pod(bundle.train_solutions, 1e-14, inner=X)
        Z_all = unreg.modes
    errors = np.zeros((len(N_values), bundle.test_mu.shape[0]))
    for j in range(bundle.test_mu.shape[0]):
        U = DGField(bundle.space, bundle.model.D, bundle.test_solutions[:, j])
        norm_u2 = float(U.coeffs @ (X @ U.coeffs))
        if registered:
            Um = mapped[j]
            # error measured through the mapped state in the reference frame
            num_ref = float(Um.coeffs @ (X @ Um.coeffs))
        for i, N in enumerate(N_values):
            Z = Z_all[:, :min(N, Z_all.shape[1])]
            if registered:
                proj = Z.T @ (X @ Um.coeffs)
                err2 = max(num_ref - float(proj @ proj), 0.0)
                errors[i, j] = np.sqrt(err2 / norm_u2)
            else:
                proj = Z.T @ (X @ U.coeffs)
                err2 = max(norm_u2 - float(proj @ proj), 0.0)
                errors[i, j] = np.sqrt(err2 / norm_u2)
    return errors


def rom_errors(bundle: OfflineBundle, N: int, methods, j_factors=(1, 2, 3),
               continuous: bool = False, eqp_tol: float | None = None):
    """Average relative L2 error in the reference frame per ROM flavor.

    methods subset of {"projection", "galerkin", "minres", "amr", "eqp"}.
    Returns dict method -> (E_avg, extra) where amr maps j_factor -> E.
    """
    from .rom import OnlineSolver, amr_solve, galerkin_solve, minres_solve

    X = bundle.norms.X
    Z = bundle.trial_basis(N, continuous)
    mapped, phis = mapped_test_fields(bundle, continuous)
    coeff_src = bundle.repod_cont if continuous else bundle.repod_out
    alpha_train = coeff_src.mapped_snapshots.T @ (bundle.norms.X @ Z)
    guess_reg = rbf_fit(bundle.train_mu, alpha_train,
                        box=bundle.config.box(bundle.model),
                        seed=bundle.config.seed)
    out = {m: {} for m in methods}
    n_test = bundle.test_mu.shape[0]
    errs = {m: [] for m in methods}
    amr_errs = {jf: [] for jf in j_factors}
    nonconv = {m: 0 for m in methods}
    solvers = {}
    if "eqp" in methods:
        rom_eq = make_rom(bundle, N, 2, eqp_tol, continuous, eqp=True)
        solvers["eqp"] = OnlineSolver(bundle.space, bundle.model, rom_eq)
    if "amr" in methods:
        Ys = {jf: bundle.test_space(N, jf * N, continuous) for jf in j_factors}
    for j in range(n_test):
        mu = bundle.test_mu[j]
        Um = mapped[j]
        norm_ref = np.sqrt(float(Um.coeffs @ (X @ Um.coeffs)))
        alpha0 = guess_reg.predict(mu)
        ws = ResidualWorkspace(bundle.space, bundle.model, mu=mu, phi=phis[j],
                               map_cache=bundle.map_cache)

        def rel_err(alpha):
            diff = Um.coeffs - Z @ alpha
            return float(np.sqrt(max(diff @ (X @ diff), 0.0)) / norm_ref)

        for m in methods:
            if m == "projection":
                errs[m].append(rel_err(Z.T @ (X @ Um.coeffs)))
            elif m == "galerkin":
                res = galerkin_solve(ws, Z, alpha0)
                if res.converged:
                    errs[m].append(rel_err(res.alpha))
                else:
                    nonconv[m] += 1
            elif m == "minres":
                res = minres_solve(ws, Z, bundle.norms, alpha0)
                errs[m].append(rel_err(res.alpha))
                nonconv[m] += 0 if res.converged else 1
            elif m == "amr":
                for jf in j_factors:
                    res = amr_solve(ws, Z, Ys[jf], alpha0)
                    amr_errs[jf].append(rel_err(res.alpha))
            elif m == "eqp":
                r = solvers["eqp"].solve(mu)
                errs[m].append(rel_err(r.alpha))
                nonconv[m] += 0 if r.converged else 1
    for m in methods:
        if m == "amr":
            out[m] = {jf: float(np.mean(v)) if v else np.nan
                      for jf, v in amr_errs.items()}
        else:
            out[m] = {
                "E_avg": float(np.mean(errs[m])) if errs[m] else np.nan,
                "nonconverged": nonconv[m],
            }
    return out
