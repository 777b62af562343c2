"""Experiment configuration: JSON schema, presets, seeded sampling."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np


@dataclass
class ExperimentConfig:
    model: str = "burgers"
    nx: int = 24
    nt: int = 15
    p: int = 2
    n_train: int = 30
    train_sampling: str = "grid"      # "grid" or "uniform"
    train_grid: tuple = (6, 5)
    n_test: int = 10
    seed: int = 2024
    # registration
    N_max: int = 3
    xi: float = 1e-4
    Mbar: int = 8
    tol_pod: float = 1e-4
    reg_tol: float = 1e-4
    filter_window: int = 5
    bij_eps: float = 0.1
    bij_c_exp: float = 0.0025
    # ROM
    N_list: tuple = (2, 4, 6)
    j_factor: int = 2
    continuous: bool = False
    eqp_tol_loose: float = 1e-8
    eqp_tol_tight: float = 2.5e-11
    output_dir: str = "strobe-out"
    param_box: tuple | None = None    # defaults to the model's box

    def __post_init__(self):
        for name in ("xi", "tol_pod", "reg_tol", "eqp_tol_loose",
                     "eqp_tol_tight", "bij_eps", "bij_c_exp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.train_sampling not in ("grid", "uniform"):
            raise ValueError("train_sampling must be 'grid' or 'uniform'")

    def box(self, model) -> np.ndarray:
        if self.param_box is not None:
            return np.asarray(self.param_box, dtype=float)
        return model.param_box

    def training_parameters(self, model) -> np.ndarray:
        box = self.box(model)
        if self.train_sampling == "grid":
            axes = [np.linspace(lo, hi, n)
                    for (lo, hi), n in zip(box, self.train_grid)]
            grids = np.meshgrid(*axes, indexing="ij")
            pts = np.stack([g.ravel() for g in grids], axis=-1)
            return pts[: self.n_train] if self.n_train else pts
        rng = np.random.default_rng(self.seed)
        return box[:, 0] + rng.random((self.n_train, box.shape[0])) \
            * (box[:, 1] - box[:, 0])

    def test_parameters(self, model) -> np.ndarray:
        box = self.box(model)
        rng = np.random.default_rng(self.seed + 1)
        return box[:, 0] + rng.random((self.n_test, box.shape[0])) \
            * (box[:, 1] - box[:, 0])

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)


PRESETS = {
    "burgers-desk": ExperimentConfig(
        model="burgers", nx=24, nt=15, n_train=30, train_grid=(6, 5),
        n_test=10, N_max=3, xi=1e-4, Mbar=8, tol_pod=1e-4,
        N_list=(2, 4, 6)),
    "burgers-paper": ExperimentConfig(
        model="burgers", nx=40, nt=32, n_train=200, train_sampling="uniform",
        n_test=20, N_max=3, xi=1e-4, Mbar=8, tol_pod=1e-4,
        N_list=(1, 2, 3, 4, 5, 6, 8, 10)),
    "sw-desk": ExperimentConfig(
        model="shallow-water", nx=40, nt=9, n_train=30, train_grid=(6, 5),
        n_test=10, N_max=5, xi=1e-4, Mbar=8, tol_pod=1e-4,
        N_list=(2, 4, 6)),
    "sw-paper": ExperimentConfig(
        model="shallow-water", nx=70, nt=17, n_train=100,
        train_sampling="uniform", n_test=20, N_max=5, xi=1e-4, Mbar=8,
        tol_pod=1e-4, N_list=(1, 2, 3, 4, 5, 6, 8, 10)),
}


def load_config(source) -> ExperimentConfig:
    """Load a config from a preset name, JSON path, or dict."""
    if isinstance(source, ExperimentConfig):
        return source
    if isinstance(source, dict):
        data = source
    elif source in PRESETS:
        return PRESETS[source]
    else:
        path = Path(source)
        if not path.is_file():
            raise FileNotFoundError(
                f"'{source}' is neither a preset ({sorted(PRESETS)}) nor a file")
        with open(path) as fh:
            data = json.load(fh)
    validate_config_dict(data)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    clean = {}
    for k, v in data.items():
        if k not in known:
            raise ValueError(f"unknown config field '{k}'")
        f = ExperimentConfig.__dataclass_fields__[k]
        if isinstance(v, list):
            v = tuple(v)
        clean[k] = v
    return ExperimentConfig(**clean)


def config_schema() -> dict:
    with resources.files("strobe").joinpath("config_schema.json").open() as fh:
        return json.load(fh)


def validate_config_dict(data: dict) -> None:
    import jsonschema
    jsonschema.validate(data, config_schema())
