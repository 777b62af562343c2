"""Command-line interface.

Verbs: hf-solve, snapshots, compress, train-rom, online, study, report.
Exit codes: 0 ok, 2 configuration error, 3 nonconvergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_IO = 0, 2, 3, 4


def _parse_mu(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",")])
    except ValueError as exc:
        raise SystemExit(EXIT_CONFIG) from exc


def _add_mesh_args(p):
    p.add_argument("--nx", type=int, default=24)
    p.add_argument("--nt", type=int, default=15)
    p.add_argument("--p", dest="order", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="strobe",
        description="space-time registration-based model reduction for "
                    "1D conservation laws")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("hf-solve", help="solve one space-time problem")
    p.add_argument("--model", required=True)
    p.add_argument("--mu", required=True)
    _add_mesh_args(p)
    p.add_argument("--out", default="hf-out")

    p = sub.add_parser("snapshots", help="sweep a parameter grid")
    p.add_argument("--model", required=True)
    p.add_argument("--train-grid", default=None,
                   help="tensor grid, e.g. 6x5")
    p.add_argument("--random", type=int, default=None,
                   help="number of seeded uniform samples")
    p.add_argument("--seed", type=int, default=2024)
    _add_mesh_args(p)
    p.add_argument("--out", default="snapshots")

    p = sub.add_parser("compress", help="registration + RePOD")
    p.add_argument("--snapshots", required=True)
    p.add_argument("--nmax", type=int, default=3)
    p.add_argument("--xi", type=float, default=1e-4)
    p.add_argument("--tolpod", type=float, default=1e-4)
    p.add_argument("--mbar", type=int, default=8)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--out", default="compression")

    p = sub.add_parser("train-rom", help="full offline pipeline")
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--n-modes", type=int, default=None)
    p.add_argument("--j-factor", type=int, default=2)
    p.add_argument("--continuous", action="store_true")
    p.add_argument("--eqp-tol", type=float, default=None)
    p.add_argument("--out", default="rom")

    p = sub.add_parser("online", help="query a trained ROM")
    p.add_argument("--rom", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--mu", required=True)
    p.add_argument("--emit-solution", default=None)

    p = sub.add_parser("study", help="reproduce a paper study at desk scale")
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--study", required=True)
    p.add_argument("--out", default="study-out")

    p = sub.add_parser("report", help="emit diagnostic reports")
    p.add_argument("--regression", action="store_true")
    p.add_argument("--preset", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default="report-out")
    return ap


def _load_config(args):
    from .config import load_config
    src = args.preset or args.config
    if src is None:
        print("error: provide --preset or --config", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)
    try:
        return load_config(src)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def cmd_hf_solve(args) -> int:
    from .assembly import ResidualWorkspace
    from .container import save_snapshots
    from .dg import DGSpace
    from .mesh import build_structured_mesh
    from .models import make_model
    from .solver import (NonconvergenceError, SnapshotSet, prepare_model,
                         solve_hf)
    try:
        model = make_model(args.model)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    mu = _parse_mu(args.mu)
    mesh = build_structured_mesh(model.L, model.T, args.nx, args.nt,
                                 args.order)
    space = DGSpace(mesh)
    prepare_model(model, mesh)
    ws = ResidualWorkspace(space, model, mu=mu)
    try:
        W = solve_hf(ws)
    except NonconvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    snaps = SnapshotSet(mu=mu[None, :], solutions=W[:, None],
                        provenance={"model": model.name})
    save_snapshots(args.out, snaps, mesh)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_snapshots(args) -> int:
    from .container import save_snapshots
    from .dg import DGSpace
    from .mesh import build_structured_mesh
    from .models import make_model
    from .solver import NonconvergenceError, generate_snapshots
    try:
        model = make_model(args.model)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    box = model.param_box
    if args.train_grid:
        try:
            counts = [int(v) for v in args.train_grid.split("x")]
        except ValueError:
            print("config error: --train-grid must look like 6x5",
                  file=sys.stderr)
            return EXIT_CONFIG
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(box, counts)]
        grids = np.meshgrid(*axes, indexing="ij")
        mus = np.stack([g.ravel() for g in grids], axis=-1)
    elif args.random:
        rng = np.random.default_rng(args.seed)
        mus = box[:, 0] + rng.random((args.random, box.shape[0])) \
            * (box[:, 1] - box[:, 0])
    else:
        print("config error: provide --train-grid or --random",
              file=sys.stderr)
        return EXIT_CONFIG
    mesh = build_structured_mesh(model.L, model.T, args.nx, args.nt,
                                 args.order)
    space = DGSpace(mesh)
    try:
        snaps = generate_snapshots(space, model, mus, verbose=True)
    except NonconvergenceError as exc:
        print(f"nonconvergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    save_snapshots(args.out, snaps, mesh)
    print(f"wrote {args.out} ({snaps.solutions.shape[1]} snapshots, "
          f"{len(snaps.failures)} failures)")
    return EXIT_OK


def cmd_compress(args) -> int:
    from .container import Container, load_snapshots, mesh_meta
    from .dg import DGField, DGSpace, assemble_norms
    from .maps import BijectivityParams, MapSpace
    from .models import make_model
    from .registration import (RegistrationParams, TemplateSpace,
                               greedy_registration, repod, sensor_field)
    from .solver import prepare_model
    try:
        snaps, mesh, meta = load_snapshots(args.snapshots)
    except (OSError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    model = make_model(meta["provenance_info"]["model"])
    prepare_model(model, mesh)
    space = DGSpace(mesh)
    norms = assemble_norms(space, D=model.D)
    from .pipeline import initial_templates, norms_scalar
    fields = [DGField(space, model.D, snaps.solutions[:, k])
              for k in range(snaps.mu.shape[0])]
    sensors = [sensor_field(model, f, args.window) for f in fields]
    T0 = initial_templates(model, space, norms, sensors, snaps.mu,
                           args.window)
    params = RegistrationParams(
        xi=args.xi, tol_pod=args.tolpod, N_max=args.nmax,
        filter_window=args.window,
        bij=BijectivityParams(delta=mesh.L * mesh.T))
    ms = MapSpace(mesh.L, mesh.T, args.mbar)
    greedy = greedy_registration(sensors, T0, ms, params, verbose=True)
    rp = repod(fields, greedy, norms, args.tolpod, ms)
    Container(args.out).save(
        {
            "trial_basis": rp.trial_basis,
            "map_basis": greedy.map_basis,
            "map_coefficients": greedy.coefficients,
            "solution_coefficients": rp.solution_coeffs,
            "eigenvalues": rp.eigenvalues,
            "template_basis": greedy.templates.basis,
        },
        {**mesh_meta(mesh), "model": model.name,
         "greedy_log": [vars(lg) for lg in greedy.logs]},
    )
    with open(Path(args.out) / "greedy-log.json", "w") as fh:
        json.dump([vars(lg) for lg in greedy.logs], fh, indent=1)
        fh.write("\n")
    print(f"wrote {args.out} (N={rp.trial_basis.shape[1]}, "
          f"M={greedy.map_basis.shape[1]})")
    return EXIT_OK


def cmd_train_rom(args) -> int:
    from .container import save_reduced_model
    from .pipeline import make_rom, run_offline
    config = _load_config(args)
    bundle = run_offline(config, verbose=True, out_dir=args.out)
    N = args.n_modes or max(config.N_list)
    rom = make_rom(bundle, N, args.j_factor, args.eqp_tol, args.continuous)
    save_reduced_model(Path(args.out) / "rom", rom, bundle.space.mesh)
    print(f"wrote {args.out}/rom (N={rom.N}, J={rom.Y.shape[1]}, "
          f"|I_eq|={rom.n_sampled})")
    return EXIT_OK


def cmd_online(args) -> int:
    from .container import load_reduced_model, write_array
    from .dg import DGSpace
    from .models import make_model
    from .rom import OnlineSolver
    from .solver import prepare_model
    try:
        reduced, mesh, _ = load_reduced_model(args.rom)
    except (OSError, KeyError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    model = make_model(args.model)
    if model.name != reduced.model_name:
        print("config error: model does not match the trained ROM",
              file=sys.stderr)
        return EXIT_CONFIG
    prepare_model(model, mesh)
    space = DGSpace(mesh)
    solver = OnlineSolver(space, model, reduced)
    mu = _parse_mu(args.mu)
    res = solver.solve(mu)
    report = {
        "alpha": res.alpha.tolist(),
        "a": res.a_map.tolist(),
        "residual_norm": res.residual_norm,
        "iterations": res.iterations,
        "wall_time": res.wall_time,
        "converged": res.converged,
        "map_fallback": res.map_fallback,
    }
    print(json.dumps(report, indent=1))
    if args.emit_solution:
        write_array(args.emit_solution, res.U_hat)
    return EXIT_OK if res.converged else EXIT_NONCONV


def cmd_study(args) -> int:
    from .pipeline import run_offline
    from .reports import STUDIES, run_study
    if args.study not in STUDIES:
        print(f"config error: unknown study '{args.study}' "
              f"(choose from {STUDIES})", file=sys.stderr)
        return EXIT_CONFIG
    config = _load_config(args)
    bundle = run_offline(config, verbose=True, out_dir=args.out)
    files = run_study(bundle, args.study, args.out)
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import run_offline
    from .reports import regression_report
    config = _load_config(args)
    bundle = run_offline(config, verbose=True)
    files = []
    if args.regression:
        files += regression_report(bundle, Path(args.out))
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "hf-solve": cmd_hf_solve,
        "snapshots": cmd_snapshots,
        "compress": cmd_compress,
        "train-rom": cmd_train_rom,
        "online": cmd_online,
        "study": cmd_study,
        "report": cmd_report,
    }
    try:
        return handlers[args.verb](args)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
