"""Closed-loop refinement of ROM inputs to the plant and the resulting bound checks."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .certificate import Certificate, closeness_bound, initial_rom_state, interface_input, sf_value
from .system import (Box, DisturbanceSampler, PlantModel, RomModel, check_input_box, sphere_directions, step_plant,
                     step_rom)

log = logging.getLogger(__name__)

__all__ = [
    "interface_input", "RomController", "PairedTrajectory", "run_paired", "check_bound",
    "BoundReport", "validation_runs", "DemoGeometry", "DemoReport", "reach_avoid_demo",
]

CONTROLLER_KINDS = ("constant", "waypoint", "sequence")


@dataclass
class RomController:
    """Stand-in for a symbolic ROM controller.

    ``waypoint`` steers the ROM output coordinates ``dims`` towards each
    waypoint in turn: the desired next state moves a fraction ``gain`` of the
    way to the waypoint and the input solving ``Bh uh = xh_des - Ah xh`` in
    least squares is clipped into the input box.
    """

    kind: str
    input_box: Box
    value: Optional[np.ndarray] = None
    sequence: Optional[np.ndarray] = None
    waypoints: Sequence[np.ndarray] = ()
    dims: Sequence[int] = (0, 1)
    gain: float = 0.2
    switch_radius: float = 0.1
    sup_norm: float = field(default=0.0, init=False)
    _wp: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if self.kind not in CONTROLLER_KINDS:
            raise ValueError(f"unknown controller {self.kind!r}; choose from {CONTROLLER_KINDS}")
        if self.kind == "constant" and self.value is None:
            self.value = np.zeros(self.input_box.dim)
        if self.kind == "sequence" and self.sequence is None:
            raise ValueError("sequence controller needs an input sequence")
        if self.kind == "waypoint" and len(self.waypoints) == 0:
            raise ValueError("waypoint controller needs at least one waypoint")

    def reset(self):
        self.sup_norm = 0.0
        self._wp = 0

    def _raw(self, rom: RomModel, xh, k) -> np.ndarray:
        if self.kind == "constant":
            return np.asarray(self.value, dtype=float)
        if self.kind == "sequence":
            seq = np.atleast_2d(self.sequence)
            return seq[min(k, len(seq) - 1)]
        dims = list(self.dims)
        Cd = rom.C_hat[dims]
        yd = Cd @ xh
        if self._wp < len(self.waypoints) - 1 and np.linalg.norm(yd - self.waypoints[self._wp]) <= self.switch_radius:
            self._wp += 1
        goal = np.linalg.lstsq(Cd, np.asarray(self.waypoints[self._wp], dtype=float), rcond=None)[0]
        xh_des = xh + self.gain * (goal - xh)
        return np.linalg.lstsq(rom.B_hat, xh_des - rom.A_hat @ xh, rcond=None)[0]

    def __call__(self, rom: RomModel, xh, k) -> np.ndarray:
        uh = self.input_box.clip(self._raw(rom, xh, k))
        self.sup_norm = max(self.sup_norm, float(np.linalg.norm(uh)))
        return uh


@dataclass
class PairedTrajectory:
    x: np.ndarray
    xh: np.ndarray
    u: np.ndarray
    uh: np.ndarray
    w: np.ndarray
    y: np.ndarray
    yh: np.ndarray
    V: np.ndarray
    mismatch: np.ndarray
    S0: float
    bound: float
    seed: Optional[int] = None
    input_box_violations: int = 0

    @property
    def K(self) -> int:
        return self.u.shape[0]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n, nh, m, mh = self.x.shape[1], self.xh.shape[1], self.u.shape[1], self.uh.shape[1]
        header = (["k"] + [f"x{i + 1}" for i in range(n)] + [f"xh{i + 1}" for i in range(nh)]
                  + [f"u{i + 1}" for i in range(m)] + [f"uh{i + 1}" for i in range(mh)]
                  + ["mismatch", "V", "bound"])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for k in range(self.K + 1):
                ins = ([repr(float(v)) for v in self.u[k]] + [repr(float(v)) for v in self.uh[k]]
                       if k < self.K else [""] * (m + mh))
                wr.writerow([k] + [repr(float(v)) for v in self.x[k]] + [repr(float(v)) for v in self.xh[k]]
                            + ins + [repr(float(self.mismatch[k])), repr(float(self.V[k])), repr(self.bound)])
        return path


def run_paired(plant: PlantModel, rom: RomModel, cert: Certificate, ctrl: RomController, x0,
               sampler: DisturbanceSampler, K: int, bound: Optional[float] = None) -> PairedTrajectory:
    """Simulate plant and ROM in lockstep with the interface in the loop.

    ``bound`` defaults to the closeness bound for the achieved ``S0`` and the
    ROM input box.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    n, nh, m, mh = cert.n, cert.nh, cert.m, cert.mh
    xh0, S0 = initial_rom_state(cert, x0)
    if bound is None:
        nu = np.sqrt(rom.input_box.max_sq_norm()) if rom.input_box is not None else ctrl.input_box.max_sq_norm() ** 0.5
        bound = closeness_bound(cert, S0, nu)
    ctrl.reset()
    x = np.empty((K + 1, n))
    xh = np.empty((K + 1, nh))
    y = np.empty((K + 1, n))
    yh = np.empty((K + 1, n))
    u = np.empty((K, m))
    uh = np.empty((K, mh))
    w = np.empty((K, n))
    x[0], xh[0] = np.asarray(x0, dtype=float), xh0
    bad_u = 0
    for k in range(K):
        uh[k] = ctrl(rom, xh[k], k)
        # causal: depends on the current x, xh, uh only
        u[k] = interface_input(cert, x[k], xh[k], uh[k])
        if not check_input_box(plant.input_box, u[k], log):
            bad_u += 1
        w[k] = sampler.draw(n)
        x[k + 1] = step_plant(plant, x[k], u[k], w[k])
        xh[k + 1], yh[k] = step_rom(rom, xh[k], uh[k])
        y[k] = x[k]
    y[K] = x[K]
    yh[K] = rom.C_hat @ xh[K]
    V = np.array([sf_value(cert, x[k], xh[k]) for k in range(K + 1)])
    mismatch = np.linalg.norm(y - yh, axis=1)
    return PairedTrajectory(x, xh, u, uh, w, y, yh, V, mismatch, float(S0), float(bound), sampler.seed, bad_u)


@dataclass
class BoundReport:
    max_mismatch: float
    bound: float
    margins: np.ndarray
    recursion_slack: np.ndarray
    chain_ok: bool
    slack_tol: float
    violation_steps: List[int]
    recursion_violation_steps: List[int]

    @property
    def passed(self) -> bool:
        return not self.violation_steps and not self.recursion_violation_steps and self.chain_ok

    def to_dict(self) -> dict:
        return {
            "passed": self.passed, "max_mismatch": self.max_mismatch, "bound": self.bound,
            "min_margin": float(self.margins.min()), "min_recursion_slack": float(self.recursion_slack.min()),
            "chain_ok": self.chain_ok, "violation_steps": self.violation_steps,
            "recursion_violation_steps": self.recursion_violation_steps,
        }


def check_bound(traj: PairedTrajectory, cert: Certificate, bound: float, slack_tol: float = 1e-7) -> BoundReport:
    margins = bound - traj.mismatch
    uh_sq = np.sum(traj.uh**2, axis=1)
    rec = cert.kappa * traj.V[:-1] + cert.rho * uh_sq + cert.psi - traj.V[1:]
    # mismatch <= sqrt(V / alpha) holds pointwise; allow rounding in the squares
    chain = bool(np.all(cert.alpha * traj.mismatch**2 <= traj.V * (1 + 1e-10) + 1e-12))
    return BoundReport(
        max_mismatch=float(traj.mismatch.max()), bound=float(bound), margins=margins, recursion_slack=rec,
        chain_ok=chain, slack_tol=slack_tol,
        violation_steps=[int(k) for k in np.flatnonzero(margins < 0)],
        recursion_violation_steps=[int(k) for k in np.flatnonzero(rec < -slack_tol)],
    )


def run_validation(plant, rom, cert, ctrl_factory, x0_list, seeds, K, eps, mode="boundary-sphere",
                   bound=None, workers=1):
    """Paired runs for several seeds; returns ``[(traj, report), ...]``."""

    def one(args):
        seed, x0 = args
        sampler = DisturbanceSampler(eps, seed, mode)
        traj = run_paired(plant, rom, cert, ctrl_factory(), x0, sampler, K, bound)
        return traj, check_bound(traj, cert, traj.bound)

    jobs = list(zip(seeds, x0_list))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            return list(ex.map(one, jobs))
    return [one(j) for j in jobs]


def validation_runs(plant, rom, cert, seeds, K, eps, mode="boundary-sphere", x0_offset=0.05):
    """Paired runs from ``x0 = R xh0 + offset`` under random ROM input sequences.

    ``xh0`` is drawn from the ROM state box and the offset has norm
    ``x0_offset`` in a random direction, so ``S0 > 0`` in general. Each seed
    fixes the start, the input sequence and the disturbance stream.
    """
    out = []
    for s in seeds:
        rng = np.random.default_rng([s, 11])
        x0 = cert.R @ rom.state_box.sample(rng) + x0_offset * sphere_directions(rng, 1, cert.n)[0]
        seq = rom.input_box.sample(np.random.default_rng([s, 13]), K)
        out += run_validation(plant, rom, cert, lambda: RomController("sequence", rom.input_box, sequence=seq),
                              [x0], [s], K, eps, mode)
    return out


# --- reach-while-avoid demo -------------------------------------------------------

@dataclass
class DemoGeometry:
    """Boxes in the output coordinates ``dims`` (other coordinates are free)."""

    start: Box
    target: Box
    obstacles: List[Box] = field(default_factory=list)
    waypoints: List[np.ndarray] = field(default_factory=list)
    dims: Sequence[int] = (0, 1)
    gain: float = 0.2
    switch_radius: float = 0.1

    def min_obstacle_gap(self) -> float:
        """Smallest per-axis gap between two obstacles (inf for fewer than two)."""
        best = np.inf
        for i, a in enumerate(self.obstacles):
            for b in self.obstacles[i + 1:]:
                sep = np.maximum(b.lo - a.hi, a.lo - b.hi)
                best = min(best, float(sep.max()))
        return best


def box_distance(box: Box, p) -> float:
    """Euclidean distance from ``p`` to ``box`` (zero inside)."""
    d = np.maximum(box.lo - p, 0.0) + np.maximum(p - box.hi, 0.0)
    return float(np.linalg.norm(d))


def _boxes_overlap(a: Box, b: Box) -> bool:
    return bool(np.all(a.lo <= b.hi) and np.all(b.lo <= a.hi))


@dataclass
class RunOutcome:
    seed: int
    rom_ok: bool
    plant_ok: bool
    reach_step: Optional[int]
    plant_obstacle_margin: float
    max_mismatch: float
    bound_ok: bool


@dataclass
class DemoReport:
    outcome: str  # "pass", "fail" or "bound too loose"
    eps_bar: float
    reason: str = ""
    runs: List[RunOutcome] = field(default_factory=list)

    @property
    def rom_ok(self) -> bool:
        return bool(self.runs) and all(r.rom_ok for r in self.runs)

    @property
    def plant_ok(self) -> bool:
        return bool(self.runs) and all(r.plant_ok for r in self.runs)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome, "eps_bar": self.eps_bar, "reason": self.reason,
            "rom_ok": self.rom_ok, "plant_ok": self.plant_ok,
            "runs": [r.__dict__ for r in self.runs],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, default=float)


def _spec_ok(Yd, target: Box, obstacles: List[Box]):
    """Reach ``target`` at some step while staying out of every obstacle up to then."""
    for k, p in enumerate(Yd):
        if any(o.contains(p) for o in obstacles):
            return False, None
        if target.contains(p):
            return True, k
    return False, None


def reach_avoid_demo(plant: PlantModel, rom: RomModel, cert: Certificate, geometry: DemoGeometry, K: int,
                     seeds: Sequence[int] = (0, 1, 2, 3, 4), eps: Optional[float] = None,
                     mode: str = "boundary-sphere", traj_dir=None) -> DemoReport:
    dims = list(geometry.dims)
    if rom.input_box is None:
        raise ValueError("the ROM needs an input box")
    # plant starts in col(R), so S0 = 0
    eps_bar = closeness_bound(cert, 0.0, np.sqrt(rom.input_box.max_sq_norm()))
    target_in = geometry.target.deflate(eps_bar)
    obst_out = [o.inflate(eps_bar) for o in geometry.obstacles]
    start_in = geometry.start

    if target_in.is_empty:
        return DemoReport("bound too loose", eps_bar, "target box narrower than 2 * eps_bar")
    if any(_boxes_overlap(o, target_in) for o in obst_out):
        return DemoReport("bound too loose", eps_bar, "inflated obstacle covers the shrunken target")
    if any(_boxes_overlap(o, start_in) for o in obst_out):
        return DemoReport("bound too loose", eps_bar, "inflated obstacle overlaps the start set")

    eps = plant.disturbance_radius if eps is None else eps
    waypoints = geometry.waypoints or [geometry.target.center()]
    Cd = rom.C_hat[dims]
    runs: List[RunOutcome] = []
    for seed in seeds:
        rng = np.random.default_rng([seed, 7])
        y0 = start_in.sample(rng)
        xh0 = np.linalg.lstsq(Cd, y0, rcond=None)[0]
        x0 = cert.R @ xh0
        ctrl = RomController("waypoint", rom.input_box, waypoints=[np.asarray(p, float) for p in waypoints],
                             dims=dims, gain=geometry.gain, switch_radius=geometry.switch_radius)
        sampler = DisturbanceSampler(eps, seed, mode)
        traj = run_paired(plant, rom, cert, ctrl, x0, sampler, K, bound=eps_bar)
        rom_ok, k_reach = _spec_ok(traj.yh[:, dims], target_in, obst_out)
        plant_ok = False
        if k_reach is not None:
            Yp = traj.y[: k_reach + 1, dims]
            plant_ok = (geometry.target.contains(Yp[-1])
                        and not any(o.contains(p) for p in Yp for o in geometry.obstacles))
        margin = min((box_distance(o, p) for p in traj.y[:, dims] for o in geometry.obstacles), default=np.inf)
        bound_ok = bool(np.all(traj.mismatch <= eps_bar))
        runs.append(RunOutcome(int(seed), bool(rom_ok), bool(plant_ok), k_reach, float(margin),
                               float(traj.mismatch.max()), bound_ok))
        if traj_dir is not None:
            traj.to_csv(Path(traj_dir) / f"run_{seed}.csv")
    outcome = "pass" if all(r.rom_ok and r.plant_ok for r in runs) else "fail"
    return DemoReport(outcome, eps_bar, "", runs)
