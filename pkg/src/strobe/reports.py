"""Study drivers: delimited outputs plus rendered figures.

Every CSV starts with a comment header naming the figure it mirrors and
the units; each study also renders a matplotlib figure next to the CSV.
Timing CSVs are machine-relative and excluded from byte-determinism.
"""

from __future__ import annotations

import csv
import time
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .dg import DGField, pod
from .pipeline import (OfflineBundle, best_fit_errors, make_rom,
                       mapped_test_fields, rom_errors)

STUDIES = ("eig-decay", "bf-error", "rom-error", "eqp", "speedup",
           "space-only-baseline")


def _write_csv(path, header_comment, columns, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow(row)


def run_study(bundle: OfflineBundle, study: str, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if study == "eig-decay":
        return study_eig_decay(bundle, out)
    if study == "bf-error":
        return study_bf_error(bundle, out)
    if study == "rom-error":
        return study_rom_error(bundle, out)
    if study == "eqp":
        return study_eqp(bundle, out)
    if study == "speedup":
        return study_speedup(bundle, out)
    if study == "space-only-baseline":
        return study_space_only(bundle, out)
    raise ValueError(f"unknown study '{study}' (choose from {STUDIES})")


def study_eig_decay(bundle, out: Path) -> list[Path]:
    reg = bundle.repod_out.eigenvalues
    unreg = pod(bundle.train_solutions, 1e-14, inner=bundle.norms.X).eigenvalues
    n = min(len(reg), len(unreg), bundle.train_mu.shape[0])
    reg_n = reg[:n] / reg[0]
    unreg_n = unreg[:n] / unreg[0]
    rows = [(i + 1, unreg_n[i], reg_n[i]) for i in range(n)]
    csv_path = out / "eig-decay.csv"
    _write_csv(csv_path,
               "normalized POD eigenvalue decay, registered vs unregistered "
               "space-time snapshots (dimensionless)",
               ["mode", "unregistered", "registered"], rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    idx = np.arange(1, n + 1)
    ax.semilogy(idx, unreg_n, "o-", label="unregistered")
    ax.semilogy(idx, np.maximum(reg_n, 1e-17), "s-", label="registered")
    ax.set_xlabel("mode index n")
    ax.set_ylabel(r"$\lambda_n / \lambda_1$")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig_path = out / "eig-decay.png"
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return [csv_path, fig_path]


def study_bf_error(bundle, out: Path) -> list[Path]:
    N_values = list(range(1, max(bundle.config.N_list) + 1))
    reg = best_fit_errors(bundle, N_values, registered=True)
    unreg = best_fit_errors(bundle, N_values, registered=False)
    rows = [(N, unreg[i].max(), reg[i].max(), unreg[i].mean(), reg[i].mean())
            for i, N in enumerate(N_values)]
    csv_path = out / "bf-error.csv"
    _write_csv(csv_path,
               "out-of-sample relative best-fit error vs basis size "
               "(dimensionless relative L2)",
               ["N", "E_bf_max_unregistered", "E_bf_max_registered",
                "E_bf_mean_unregistered", "E_bf_mean_registered"], rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    Ns = [r[0] for r in rows]
    ax.semilogy(Ns, [r[1] for r in rows], "o-", label="unregistered")
    ax.semilogy(Ns, [r[2] for r in rows], "s-", label="registered")
    ax.set_xlabel("N")
    ax.set_ylabel(r"$E^{bf,\infty}$")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig_path = out / "bf-error.png"
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return [csv_path, fig_path]


def study_rom_error(bundle, out: Path) -> list[Path]:
    files = []
    for continuous in (False, True):
        rows = []
        for N in bundle.config.N_list:
            res = rom_errors(bundle, N,
                             ["projection", "galerkin", "minres", "amr"],
                             j_factors=(1, 2, 3), continuous=continuous)
            rows.append((
                N,
                res["projection"]["E_avg"],
                res["galerkin"]["E_avg"], res["galerkin"]["nonconverged"],
                res["minres"]["E_avg"],
                res["amr"][1], res["amr"][2], res["amr"][3],
            ))
        tag = "continuous" if continuous else "discontinuous"
        csv_path = out / f"rom-error-{tag}.csv"
        _write_csv(csv_path,
                   f"average out-of-sample relative L2 error of ROM variants "
                   f"({tag} spaces, hf quadrature)",
                   ["N", "projection", "galerkin", "galerkin_nonconverged",
                    "minres", "amr_J_N", "amr_J_2N", "amr_J_3N"], rows)
        files.append(csv_path)
        fig, ax = plt.subplots(figsize=(5, 4))
        Ns = [r[0] for r in rows]
        for j, lbl in [(1, "projection"), (2, "Galerkin"), (4, "min-res"),
                       (5, "AMR J=N"), (6, "AMR J=2N"), (7, "AMR J=3N")]:
            vals = [r[j] for r in rows]
            ax.semilogy(Ns, vals, "o-", label=lbl)
        ax.set_xlabel("N")
        ax.set_ylabel(r"$E_{avg}^{hf}$")
        ax.legend(fontsize=8)
        ax.grid(True, which="both", alpha=0.3)
        fig.tight_layout()
        fig_path = out / f"rom-error-{tag}.png"
        fig.savefig(fig_path, dpi=150)
        plt.close(fig)
        files.append(fig_path)
    return files


def study_eqp(bundle, out: Path) -> list[Path]:
    tols = {"loose": bundle.config.eqp_tol_loose,
            "tight": bundle.config.eqp_tol_tight}
    rows = []
    support_maps = {}
    for N in bundle.config.N_list:
        for tag, tol in tols.items():
            rom = make_rom(bundle, N, bundle.config.j_factor, tol,
                           continuous=False, eqp=True)
            res = rom_errors(bundle, N, ["eqp", "amr"], j_factors=(2,),
                             eqp_tol=tol)
            rows.append((N, tag, tol, rom.n_sampled,
                         rom.n_sampled / bundle.space.mesh.n_elements,
                         res["eqp"]["E_avg"], res["amr"][2]))
            support_maps[(N, tag)] = rom.rho
    csv_path = out / "eqp.csv"
    _write_csv(csv_path,
               "sampled-element counts and hyper-reduced errors vs N at two "
               "NNLS step tolerances",
               ["N", "preset", "tol", "Q", "Q_fraction", "E_avg_eqp",
                "E_avg_hf_quad"], rows)
    files = [csv_path]
    # sampled-elements plot for the largest N at the tight preset
    N_show = max(bundle.config.N_list)
    rho = support_maps[(N_show, "tight")]
    mesh = bundle.space.mesh
    fig, ax = plt.subplots(figsize=(6, 4))
    tri = matplotlib.tri.Triangulation(
        mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.elements)
    ax.tripcolor(tri, facecolors=(rho > 0).astype(float), cmap="Greys",
                 edgecolors="lightgray", linewidth=0.2, vmin=0, vmax=1.3)
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    ax.set_title(f"sampled elements, N={N_show}, tight preset")
    fig.tight_layout()
    fig_path = out / "eqp-sampled-elements.png"
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    files.append(fig_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for tag, marker in (("loose", "o"), ("tight", "s")):
        sel = [(r[0], r[3]) for r in rows if r[1] == tag]
        ax.plot([s[0] for s in sel], [s[1] for s in sel], marker + "-",
                label=f"{tag} preset")
    ax.set_xlabel("N")
    ax.set_ylabel("sampled elements Q")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig_path2 = out / "eqp-counts.png"
    fig.savefig(fig_path2, dpi=150)
    plt.close(fig)
    files.append(fig_path2)
    return files


def study_speedup(bundle, out: Path, n_rep: int = 5) -> list[Path]:
    from .rom import OnlineSolver
    from .solver import Grid1D, rkdg_march
    rows = []
    mus = bundle.test_mu[: min(3, bundle.test_mu.shape[0])]
    # RKDG reference timing (one representative parameter)
    mesh = bundle.space.mesh
    grid = Grid1D(mesh.L, mesh.nx, mesh.p)
    t0 = time.perf_counter()
    from .mesh import BOTTOM
    if bundle.model.name == "shallow-water":
        U0 = bundle.model.base_flow(grid.x_nodes.ravel()).reshape(
            grid.nx, grid.n1, 2)
    else:
        vals = bundle.model.dirichlet_data(
            BOTTOM, np.stack([grid.x_nodes.ravel(),
                              np.zeros(grid.nx * grid.n1)], axis=-1), mus[0])
        U0 = vals.reshape(grid.nx, grid.n1, bundle.model.D)
    rkdg_march(grid, bundle.model, U0, mesh.T, mus[0])
    t_rkdg = time.perf_counter() - t0
    for N in bundle.config.N_list:
        rom_eq = make_rom(bundle, N, bundle.config.j_factor,
                          bundle.config.eqp_tol_tight, eqp=True)
        rom_full = make_rom(bundle, N, bundle.config.j_factor, eqp=False)
        s_eq = OnlineSolver(bundle.space, bundle.model, rom_eq)
        s_full = OnlineSolver(bundle.space, bundle.model, rom_full)
        t_eq, t_full = [], []
        for mu in mus:
            s_eq.solve(mu)       # warm caches
            s_full.solve(mu)
            for _ in range(n_rep):
                t0 = time.perf_counter()
                s_eq.solve(mu)
                t_eq.append(time.perf_counter() - t0)
                t0 = time.perf_counter()
                s_full.solve(mu)
                t_full.append(time.perf_counter() - t0)
        te, tf = float(np.median(t_eq)), float(np.median(t_full))
        rows.append((N, te, tf, tf / te, t_rkdg, t_rkdg / te))
    csv_path = out / "speedup.csv"
    _write_csv(csv_path,
               "median online wall time in seconds (machine-relative; "
               "RKDG column is this machine's explicit reference)",
               ["N", "t_online_eqp_s", "t_online_hf_quad_s",
                "speedup_vs_hf_quad", "t_rkdg_s", "speedup_vs_rkdg"], rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    Ns = [r[0] for r in rows]
    ax.semilogy(Ns, [r[1] for r in rows], "o-", label="hyper-reduced")
    ax.semilogy(Ns, [r[2] for r in rows], "s-", label="hf quadrature")
    ax.semilogy(Ns, [r[4] for r in rows], "^-", label="RKDG reference")
    ax.set_xlabel("N")
    ax.set_ylabel("wall time [s]")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig_path = out / "speedup.png"
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return [csv_path, fig_path]


def study_space_only(bundle, out: Path) -> list[Path]:
    from .baseline1d import space_only_registration_study
    res = space_only_registration_study(bundle)
    n = len(res["eig_unregistered"])
    rows = [(i + 1, res["eig_unregistered"][i], res["eig_registered"][i])
            for i in range(n)]
    csv_path = out / "space-only-baseline.csv"
    _write_csv(csv_path,
               "per-time-slice 1D registration: normalized POD eigenvalue "
               "decay of spatial snapshots (dimensionless)",
               ["mode", "unregistered", "registered"], rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    idx = np.arange(1, n + 1)
    ax.semilogy(idx, res["eig_unregistered"], "o-", label="unregistered")
    ax.semilogy(idx, np.maximum(res["eig_registered"], 1e-17), "s-",
                label="space-only registered")
    ax.set_xlabel("mode index n")
    ax.set_ylabel(r"$\lambda_n/\lambda_1$")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig_path = out / "space-only-baseline.png"
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return [csv_path, fig_path]


def regression_report(bundle, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for m, (r2, act) in enumerate(zip(bundle.map_regressor.r2,
                                      bundle.map_regressor.active)):
        rows.append(("map", m + 1, r2, int(act)))
    for m, (r2, act) in enumerate(zip(bundle.coeff_regressor.r2,
                                      bundle.coeff_regressor.active)):
        rows.append(("solution", m + 1, r2, int(act)))
    csv_path = out / "regression-r2.csv"
    _write_csv(csv_path,
               "cross-validated out-of-sample R^2 per regression target "
               "(gate at 0.75)",
               ["target_kind", "target_index", "r2", "active"], rows)
    fig, ax = plt.subplots(figsize=(5, 4))
    mr = bundle.map_regressor.r2
    cr = bundle.coeff_regressor.r2
    ax.bar(np.arange(len(mr)), mr, width=0.4, label="map coefficients")
    ax.bar(np.arange(len(cr)) + 0.4, cr, width=0.4,
           label="solution coefficients")
    ax.axhline(0.75, color="k", linestyle="--", linewidth=1)
    ax.set_xlabel("target index")
    ax.set_ylabel(r"$R^2$")
    ax.legend()
    fig.tight_layout()
    fig_path = out / "regression-r2.png"
    fig.savefig(fig_path, dpi=150)
    plt.close(fig)
    return [csv_path, fig_path]
