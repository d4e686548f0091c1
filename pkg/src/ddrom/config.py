"""Run configuration: one YAML tree describing plant, experiment, synthesis, validation and demo.

Matrices are given inline as nested lists, as a scalar ``a`` meaning ``a * I``
(ROM matrices only), or as a path to a CSV file (relative to the config file).
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .conic import SolverOptions
from .data import ExperimentConfig
from .errors import ConfigError
from .refinement import DemoGeometry
from .synthesis import HyperParams
from .system import CASESTUDY_A, CASESTUDY_B, CASESTUDY_EPS, SAMPLER_MODES, Box, PlantModel

Matrix = Union[float, List[List[float]], str]
Pairs = List[Tuple[float, float]]

PRESET_DIR = Path(__file__).parent / "configs"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _load_matrix(spec, base: Path, shape=None) -> np.ndarray:
    if isinstance(spec, str):
        path = (base / spec) if not Path(spec).is_absolute() else Path(spec)
        if not path.exists():
            raise ConfigError(f"matrix file {path} does not exist")
        return np.loadtxt(path, delimiter=",", ndmin=2)
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        if shape is None:
            raise ConfigError("a scalar matrix needs a known shape")
        return float(arr) * np.eye(*shape)
    return np.atleast_2d(arr)


class PlantSpec(_Strict):
    preset: Optional[Literal["casestudy"]] = None
    A: Optional[Matrix] = None
    B: Optional[Matrix] = None
    eps: Optional[float] = Field(default=None, ge=0)
    input_box: Optional[Pairs] = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.preset is None and (self.A is None or self.B is None):
            raise ValueError("plant needs either preset: casestudy or both A and B")
        return self


class ExperimentSpec(_Strict):
    T: int = Field(300, ge=1)
    excitation_box: Pairs
    seed: int = 1
    disturbance_mode: str = "uniform-ball"
    disturbance_seed: Optional[int] = None
    x0: Optional[List[float]] = None

    @field_validator("disturbance_mode")
    @classmethod
    def _mode(cls, v):
        if v not in SAMPLER_MODES:
            raise ValueError(f"disturbance_mode must be one of {SAMPLER_MODES}")
        return v


class SynthesisSpec(_Strict):
    kappa: float = 0.7
    mu: List[float] = [0.5, 0.25, 0.25, 0.1, 1.0, 1.0]
    eta: float = 0.01
    delta: float = 1e-6
    psd_slack: float = 1e-7
    eq_tol: float = 1e-7
    weights: List[float] = [1.0, 1.0, 1.0, 1.0]
    mu_weight: float = Field(1e-3, ge=0)
    anchor_rows: Optional[List[int]] = None
    anchor_value: Optional[Matrix] = None
    backend: Literal["cvxopt", "cvxpy"] = "cvxopt"
    solver_tol: float = Field(1e-8, gt=0)
    max_iters: int = Field(200, ge=1)
    rank_tol: float = Field(1e-8, gt=0)


class RomSpec(_Strict):
    nh: int = Field(2, ge=1)
    mh: int = Field(2, ge=1)
    A_hat: Matrix = 0.99
    B_hat: Matrix = 1e-4
    state_box: Pairs
    input_box: Pairs


class ValidationSpec(_Strict):
    seeds: List[int] = [0, 1, 2, 3, 4]
    K: int = Field(200, ge=1)
    sampler: str = "boundary-sphere"
    eps_scale: float = Field(1.0, ge=0)
    sf_samples: int = Field(10_000, ge=1)
    x0_offset: float = Field(0.05, ge=0)
    slack_tol: float = Field(1e-7, ge=0)

    @field_validator("sampler")
    @classmethod
    def _mode(cls, v):
        if v not in SAMPLER_MODES:
            raise ValueError(f"sampler must be one of {SAMPLER_MODES}")
        return v


class DemoSpec(_Strict):
    dims: List[int] = [0, 1]
    start: Pairs
    target: Pairs
    obstacles: List[Pairs] = []
    waypoints: List[List[float]] = []
    gain: float = Field(0.2, gt=0, le=1)
    switch_radius: float = Field(0.1, gt=0)
    K: int = Field(200, ge=1)
    seeds: List[int] = [0, 1, 2, 3, 4]


class RunConfig(_Strict):
    plant: PlantSpec
    experiment: ExperimentSpec
    synthesis: SynthesisSpec = SynthesisSpec()
    rom: RomSpec
    validation: ValidationSpec = ValidationSpec()
    demo: Optional[DemoSpec] = None
    out: str = "runs/default"
    base_dir: str = Field(".", exclude=True)

    @model_validator(mode="after")
    def _cross_checks(self):
        plant = self.build_plant()
        n, m = plant.state_dim, plant.input_dim
        if self.experiment.T < n + m:
            raise ValueError(f"experiment.T = {self.experiment.T} is below m + n = {n + m}")
        if len(self.experiment.excitation_box) != m:
            raise ValueError(f"experiment.excitation_box needs {m} intervals")
        if self.rom.nh > n:
            raise ValueError("rom.nh cannot exceed the plant state dimension")
        if len(self.rom.state_box) != self.rom.nh or len(self.rom.input_box) != self.rom.mh:
            raise ValueError("rom boxes must match nh and mh")
        self.hyperparams()  # raises on invalid kappa, mu, eta, ...
        if self.demo is not None:
            if any(d >= n for d in self.demo.dims):
                raise ValueError("demo.dims must index plant outputs")
            k = len(self.demo.dims)
            boxes = [self.demo.start, self.demo.target, *self.demo.obstacles]
            if any(len(b) != k for b in boxes) or any(len(p) != k for p in self.demo.waypoints):
                raise ValueError("demo boxes and waypoints must match demo.dims")
        return self

    # --- builders -------------------------------------------------------------

    @property
    def base(self) -> Path:
        return Path(self.base_dir)

    def build_plant(self) -> PlantModel:
        p = self.plant
        A, B, eps = CASESTUDY_A.copy(), CASESTUDY_B.copy(), CASESTUDY_EPS
        if p.preset is None:
            eps = 0.0
        if p.A is not None:
            A = _load_matrix(p.A, self.base)
        if p.B is not None:
            B = _load_matrix(p.B, self.base)
        if p.eps is not None:
            eps = p.eps
        box = Box.from_pairs(p.input_box) if p.input_box else None
        return PlantModel(A, B, eps, box)

    def experiment_config(self) -> ExperimentConfig:
        e = self.experiment
        return ExperimentConfig(
            T=e.T, input_box=Box.from_pairs(e.excitation_box), input_seed=e.seed,
            disturbance_mode=e.disturbance_mode, disturbance_seed=e.disturbance_seed,
            x0=None if e.x0 is None else np.asarray(e.x0, dtype=float),
        )

    def hyperparams(self) -> HyperParams:
        s, r = self.synthesis, self.rom
        anchor = None
        if s.anchor_value is not None:
            anchor = _load_matrix(s.anchor_value, self.base, (len(s.anchor_rows or []), r.nh))
        return HyperParams(
            A_hat=_load_matrix(r.A_hat, self.base, (r.nh, r.nh)),
            B_hat=_load_matrix(r.B_hat, self.base, (r.nh, r.mh)),
            kappa=s.kappa, mu=tuple(s.mu), eta=s.eta, delta=s.delta, psd_slack=s.psd_slack,
            eq_tol=s.eq_tol, weights=tuple(s.weights), mu_weight=s.mu_weight,
            anchor_rows=s.anchor_rows, anchor_value=anchor,
        )

    def solver_options(self) -> SolverOptions:
        s = self.synthesis
        return SolverOptions(backend=s.backend, max_iters=s.max_iters, abstol=s.solver_tol,
                             reltol=s.solver_tol, feastol=s.solver_tol)

    def rom_boxes(self) -> Tuple[Box, Box]:
        return Box.from_pairs(self.rom.state_box), Box.from_pairs(self.rom.input_box)

    def geometry(self) -> Optional[DemoGeometry]:
        d = self.demo
        if d is None:
            return None
        return DemoGeometry(
            start=Box.from_pairs(d.start), target=Box.from_pairs(d.target),
            obstacles=[Box.from_pairs(o) for o in d.obstacles],
            waypoints=[np.asarray(p, dtype=float) for p in d.waypoints],
            dims=list(d.dims), gain=d.gain, switch_radius=d.switch_radius,
        )


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(tree: dict, base_dir=".") -> RunConfig:
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    try:
        return RunConfig.model_validate({**tree, "base_dir": str(base_dir)})
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    """Read a YAML config; the name ``casestudy`` selects the bundled preset."""
    if str(path) == "casestudy":
        path = PRESET_DIR / "casestudy.yaml"
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        tree = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    return parse_config(tree, path.parent)
