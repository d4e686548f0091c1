"""Single-trajectory experiment and the data matrices built from it."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .system import Box, DisturbanceSampler, PlantModel, as_vector, step_plant


@dataclass
class ExperimentConfig:
    T: int
    input_box: Box
    input_seed: int = 0
    disturbance_mode: str = "uniform-ball"
    disturbance_seed: Optional[int] = None
    x0: Optional[np.ndarray] = None

    def validate(self, n: int, m: int) -> None:
        if self.T < m + n:
            raise ValueError(f"horizon T={self.T} is below m + n = {m + n}; the rank condition cannot hold")
        if self.input_box.dim != m:
            raise ValueError(f"excitation box has dimension {self.input_box.dim}, plant has {m} inputs")


@dataclass(frozen=True)
class DataSet:
    """Input-state data of one experiment.

    ``W_true`` is oracle-only: synthesis code never reads it (see
    :func:`ddrom.synthesis.build_program`), tests use it to check the
    disturbance bound.
    """

    X: np.ndarray
    U: np.ndarray
    X_plus: np.ndarray
    eps: float
    Delta: np.ndarray
    seed: Optional[int] = None
    W_true: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        T = self.X.shape[1]
        if self.U.shape[1] != T or self.X_plus.shape[1] != T:
            raise ValueError("X, U and X_plus must have the same number of columns")
        if self.X_plus.shape[0] != self.X.shape[0]:
            raise ValueError("X and X_plus must have the same number of rows")
        for arr in (self.X, self.U, self.X_plus, self.Delta):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.U.shape[0]

    def without_oracle(self) -> "DataSet":
        return DataSet(self.X, self.U, self.X_plus, self.eps, self.Delta, self.seed)

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.X, self.U, self.X_plus):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        h.update(repr(float(self.eps)).encode())
        return h.hexdigest()


def disturbance_cap(eps: float, T: int, n: int) -> np.ndarray:
    """Bound ``eps^2 T I_n`` on ``W W^T`` for any disturbance run with ``|w| <= eps``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    return (eps * eps * T) * np.eye(n)


def run_experiment(plant: PlantModel, cfg: ExperimentConfig) -> DataSet:
    n, m = plant.state_dim, plant.input_dim
    cfg.validate(n, m)
    T = cfg.T
    rng = np.random.default_rng(cfg.input_seed)
    dseed = cfg.input_seed + 1 if cfg.disturbance_seed is None else cfg.disturbance_seed
    sampler = DisturbanceSampler(plant.disturbance_radius, dseed, cfg.disturbance_mode)

    x = np.zeros(n) if cfg.x0 is None else as_vector(cfg.x0, n, "x0")
    traj = np.empty((n, T + 1))
    U = np.empty((m, T))
    W = np.empty((n, T))
    traj[:, 0] = x
    for k in range(T):
        U[:, k] = cfg.input_box.sample(rng)
        W[:, k] = sampler.draw(n)
        traj[:, k + 1] = step_plant(plant, traj[:, k], U[:, k], W[:, k])
    return DataSet(
        X=traj[:, :T].copy(),
        U=U,
        X_plus=traj[:, 1:].copy(),
        eps=float(plant.disturbance_radius),
        Delta=disturbance_cap(plant.disturbance_radius, T, n),
        seed=cfg.input_seed,
        W_true=W,
    )


def stacked_data(ds: DataSet) -> np.ndarray:
    """``H = [U; X]``."""
    return np.vstack([ds.U, ds.X])


def check_rank(ds: DataSet, tol: float = 1e-8):
    """Numerical rank of ``H`` with a relative singular-value threshold."""
    s = np.linalg.svd(stacked_data(ds), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(s > tol * s[0]))
    return rank, rank == ds.m + ds.n


# --- directory format ------------------------------------------------------

def _write_csv(path, arr):
    np.savetxt(path, np.atleast_2d(arr), delimiter=",", fmt="%.17g")


def _read_csv(path, rows):
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    return arr.reshape(rows, -1)


def save_dataset(ds: DataSet, directory, oracle: bool = False) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    _write_csv(d / "X.csv", ds.X)
    _write_csv(d / "U.csv", ds.U)
    _write_csv(d / "Xplus.csv", ds.X_plus)
    meta = {"T": ds.T, "eps": ds.eps, "n": ds.n, "m": ds.m, "seed": ds.seed}
    (d / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    w_path = d / "W_true.csv"
    if oracle and ds.W_true is not None:
        _write_csv(w_path, ds.W_true)
    elif w_path.exists():
        os.remove(w_path)
    return d


def load_dataset(directory, oracle: bool = False) -> DataSet:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    n, m = meta["n"], meta["m"]
    W = None
    if oracle and (d / "W_true.csv").exists():
        W = _read_csv(d / "W_true.csv", n)
    return DataSet(
        X=_read_csv(d / "X.csv", n),
        U=_read_csv(d / "U.csv", m),
        X_plus=_read_csv(d / "Xplus.csv", n),
        eps=float(meta["eps"]),
        Delta=disturbance_cap(float(meta["eps"]), int(meta["T"]), n),
        seed=meta.get("seed"),
        W_true=W,
    )
