import json

import numpy as np
import pytest

from strobe.container import (Container, ContainerFormatError, read_array,
                              write_array)
from strobe.mesh import build_structured_mesh


def test_f64_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((13, 7))
    path = tmp_path / "a.bin"
    write_array(path, arr)
    back = read_array(path)
    assert back.dtype == np.dtype("<f8")
    assert arr.tobytes() == back.tobytes()


def test_i64_roundtrip(tmp_path):
    arr = np.arange(-5, 30, dtype=np.int64).reshape(5, 7)
    path = tmp_path / "b.bin"
    write_array(path, arr)
    back = read_array(path)
    assert np.array_equal(arr, back)
    assert back.dtype == np.dtype("<i8")


def test_empty_array_roundtrip(tmp_path):
    arr = np.zeros((0, 4))
    path = tmp_path / "c.bin"
    write_array(path, arr)
    back = read_array(path)
    assert back.shape == (0, 4)


def test_corrupt_magic(tmp_path):
    path = tmp_path / "d.bin"
    write_array(path, np.ones(3))
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError):
        read_array(path)


def test_container_roundtrip_and_manifest(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {
        "alpha": rng.standard_normal(9),
        "table": np.arange(12, dtype=np.int64).reshape(3, 4),
    }
    c = Container(tmp_path / "box")
    c.save(arrays, meta={"note": "x"})
    back, meta = c.load()
    assert meta["note"] == "x"
    for name in arrays:
        assert arrays[name].tobytes() == back[name].tobytes()
    manifest = json.loads((tmp_path / "box" / "manifest.json").read_text())
    files = set(manifest["arrays"].values())
    assert len(files) == len(manifest["arrays"])       # bijective
    for f in files:
        assert (tmp_path / "box" / f).is_file()


def test_snapshot_container_mesh_hash_guard(tmp_path):
    from strobe.container import load_snapshots, save_snapshots
    from strobe.solver import SnapshotSet
    mesh = build_structured_mesh(1.0, 0.8, 2, 2, 2)
    snaps = SnapshotSet(mu=np.array([[1.0, 0.3]]),
                        solutions=np.ones((mesh.n_elements * 6, 1)),
                        provenance={"model": "burgers"})
    save_snapshots(tmp_path / "s", snaps, mesh)
    back, mesh2, meta = load_snapshots(tmp_path / "s")
    assert back.solutions.tobytes() == snaps.solutions.tobytes()
    assert mesh2.mesh_hash() == mesh.mesh_hash()
    # corrupt the stored hash: reload must fail
    man = json.loads((tmp_path / "s" / "manifest.json").read_text())
    man["meta"]["mesh_hash"] = "0" * 64
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(ContainerFormatError):
        load_snapshots(tmp_path / "s")
