"""Directory container: JSON manifest plus raw little-endian arrays.

Each array file carries a 16-byte header (magic "STRB", dtype code,
rank, reserved) followed by the dimensions as u64 and the row-major
payload. Reload is bit-exact; the manifest maps array names to files.
"""

from __future__ import annotations

import datetime
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"STRB"
SCHEMA_VERSION = 1
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("<f8"): 1, np.dtype("<i8"): 2}


class ContainerFormatError(IOError):
    pass


def write_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind == "f":
        arr = np.ascontiguousarray(arr, dtype="<f8")
    elif arr.dtype.kind in "iub":
        arr = np.ascontiguousarray(arr, dtype="<i8")
    else:
        raise ContainerFormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", code, arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes())


def read_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerFormatError(f"bad magic in {path}")
        code, rank, _ = struct.unpack("<III", fh.read(12))
        if code not in _DTYPES:
            raise ContainerFormatError(f"unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
        data = fh.read()
    arr = np.frombuffer(data, dtype=_DTYPES[code])
    expected = int(np.prod(dims)) if dims else arr.size
    if arr.size != expected:
        raise ContainerFormatError(f"payload size mismatch in {path}")
    return arr.reshape(dims).copy()


class Container:
    """A directory of named arrays with a JSON manifest."""

    def __init__(self, directory):
        self.dir = Path(directory)

    def save(self, arrays: dict, meta: dict | None = None) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "arrays": {},
            "meta": meta or {},
            "provenance": {
                "created": datetime.datetime.now(datetime.timezone.utc)
                .isoformat(),
            },
        }
        for name in sorted(arrays):
            fname = f"{name}.bin"
            write_array(self.dir / fname, arrays[name])
            manifest["arrays"][name] = fname
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    def load(self) -> tuple[dict, dict]:
        with open(self.dir / "manifest.json") as fh:
            manifest = json.load(fh)
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise ContainerFormatError("unsupported schema version")
        arrays = {}
        for name, fname in manifest["arrays"].items():
            arrays[name] = read_array(self.dir / fname)
        return arrays, manifest.get("meta", {})

    def exists(self) -> bool:
        return (self.dir / "manifest.json").is_file()


def mesh_arrays(mesh) -> dict:
    return {
        "mesh_vertices": mesh.vertices,
        "mesh_elements": mesh.elements,
        "mesh_nodes": mesh.nodes,
        "mesh_facet_elems": mesh.facet_elems,
        "mesh_facet_btype": mesh.facet_btype,
    }


def mesh_meta(mesh) -> dict:
    return {
        "L": mesh.L, "T": mesh.T, "nx": mesh.nx, "nt": mesh.nt, "p": mesh.p,
        "mesh_hash": mesh.mesh_hash(),
    }


def save_snapshots(directory, snapshots, mesh, extra_meta=None) -> None:
    arrays = {
        "mu": snapshots.mu,
        "solutions": snapshots.solutions,
        **mesh_arrays(mesh),
    }
    meta = {
        **mesh_meta(mesh),
        "provenance_info": snapshots.provenance,
        "failures": snapshots.failures,
        **(extra_meta or {}),
    }
    Container(directory).save(arrays, meta)


def load_snapshots(directory):
    from .mesh import build_structured_mesh
    from .solver import SnapshotSet

    arrays, meta = Container(directory).load()
    mesh = build_structured_mesh(meta["L"], meta["T"], meta["nx"], meta["nt"],
                                 meta["p"])
    if mesh.mesh_hash() != meta["mesh_hash"]:
        raise ContainerFormatError("mesh hash mismatch on reload")
    snaps = SnapshotSet(mu=arrays["mu"], solutions=arrays["solutions"],
                        failures=meta.get("failures", []),
                        provenance=meta.get("provenance_info", {}))
    return snaps, mesh, meta


def save_reduced_model(directory, reduced, mesh) -> None:
    arrays = {
        "Z": reduced.Z,
        "Y": reduced.Y,
        "rho": reduced.rho,
        "map_basis": reduced.map_basis,
        "train_mu": reduced.train_mu,
        "train_map_coeffs": reduced.train_map_coeffs,
        "map_reg_mu": reduced.map_regressor.mu_train,
        "map_reg_y": reduced.map_regressor.y_train,
        "map_reg_r2": reduced.map_regressor.r2,
        "map_reg_active": reduced.map_regressor.active.astype(np.int64),
        "map_reg_box": reduced.map_regressor.box,
        "coef_reg_mu": reduced.coeff_regressor.mu_train,
        "coef_reg_y": reduced.coeff_regressor.y_train,
        "coef_reg_r2": reduced.coeff_regressor.r2,
        "coef_reg_active": reduced.coeff_regressor.active.astype(np.int64),
        "coef_reg_box": reduced.coeff_regressor.box,
        **mesh_arrays(mesh),
    }
    meta = {
        **mesh_meta(mesh),
        "model": reduced.model_name,
        "map_Mbar": reduced.map_Mbar,
        "continuous": reduced.continuous,
        "bij": {"eps": reduced.bij.eps, "c_exp": reduced.bij.c_exp,
                "delta": reduced.bij.delta},
        "map_reg_folds": reduced.map_regressor.folds,
        "coef_reg_folds": reduced.coeff_regressor.folds,
        "rom_meta": reduced.meta,
    }
    Container(directory).save(arrays, meta)


def load_reduced_model(directory):
    from .maps import BijectivityParams
    from .mesh import build_structured_mesh
    from .regression import RbfRegressor
    from .rom import ReducedModel

    arrays, meta = Container(directory).load()
    mesh = build_structured_mesh(meta["L"], meta["T"], meta["nx"], meta["nt"],
                                 meta["p"])
    if mesh.mesh_hash() != meta["mesh_hash"]:
        raise ContainerFormatError("mesh hash mismatch on reload")

    def regressor(prefix, folds):
        return RbfRegressor(
            box=arrays[f"{prefix}_box"],
            mu_train=arrays[f"{prefix}_mu"],
            y_train=arrays[f"{prefix}_y"],
            r2=arrays[f"{prefix}_r2"],
            active=arrays[f"{prefix}_active"].astype(bool),
            folds=folds,
        )

    bij = BijectivityParams(**meta["bij"])
    reduced = ReducedModel(
        model_name=meta["model"],
        Z=arrays["Z"], Y=arrays["Y"], rho=arrays["rho"],
        map_basis=arrays["map_basis"],
        map_regressor=regressor("map_reg", meta.get("map_reg_folds", [])),
        coeff_regressor=regressor("coef_reg", meta.get("coef_reg_folds", [])),
        map_Mbar=int(meta["map_Mbar"]),
        continuous=bool(meta["continuous"]),
        bij=bij,
        train_mu=arrays["train_mu"],
        train_map_coeffs=arrays["train_map_coeffs"],
        meta=meta.get("rom_meta", {}),
    )
    return reduced, mesh, meta
