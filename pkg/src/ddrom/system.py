"""Plant and reduced-order model semantics, box sets and disturbance sampling.

The plant is ``x+ = A x + B u + w`` with identity output, the ROM is
``xh+ = Ah xh + Bh uh`` with output ``Ch xh``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError

# Six-state plant and disturbance radius of the reference case study.
CASESTUDY_A = np.array([
    [0.82, 0.10, 0.00, 0.00, 0.00, 0.00],
    [0.00, 0.78, 0.12, 0.00, 0.00, 0.00],
    [0.00, 0.00, 0.75, 0.10, 0.00, 0.00],
    [0.00, 0.00, 0.00, 0.72, 0.08, 0.00],
    [0.00, 0.00, 0.00, 0.00, 0.70, 0.10],
    [0.05, 0.00, 0.00, 0.00, 0.00, 0.68],
])
CASESTUDY_B = np.array([
    [0.68, 0.34, 0.17, 0.00, 0.00, 0.00],
    [0.00, 0.00, 0.00, 0.34, 0.68, 0.34],
]).T
CASESTUDY_EPS = 0.0014


def as_vector(v, n, name) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.shape[0] != n:
        raise DimensionError(name, (n,), v.shape)
    return v


def as_matrix(M, shape, name) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape != tuple(shape):
        raise DimensionError(name, tuple(shape), M.shape)
    return M


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]``; empty when any ``lo > hi``."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimensionError("box bounds", lo.shape, hi.shape)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def symmetric(cls, radius, dim) -> "Box":
        r = np.broadcast_to(np.asarray(radius, dtype=float), (dim,))
        return cls(-r, r.copy())

    @classmethod
    def from_pairs(cls, pairs) -> "Box":
        arr = np.asarray(pairs, dtype=float)
        return cls(arr[:, 0], arr[:, 1])

    def to_pairs(self) -> list:
        return [[float(a), float(b)] for a, b in zip(self.lo, self.hi)]

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lo > self.hi))

    def contains(self, p, tol=0.0) -> bool:
        p = np.asarray(p, dtype=float)
        return bool(np.all(p >= self.lo - tol) and np.all(p <= self.hi + tol))

    def inflate(self, r) -> "Box":
        return Box(self.lo - r, self.hi + r)

    def deflate(self, r) -> "Box":
        return Box(self.lo + r, self.hi - r)

    def clip(self, p) -> np.ndarray:
        return np.clip(p, self.lo, self.hi)

    def max_sq_norm(self) -> float:
        # |x|^2 is convex, so its maximum over a box sits at a vertex
        return float(np.sum(np.maximum(self.lo**2, self.hi**2)))

    def sample(self, rng, size=None) -> np.ndarray:
        shape = (self.dim,) if size is None else (size, self.dim)
        return rng.uniform(self.lo, self.hi, size=shape)

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)


@dataclass
class PlantModel:
    """True plant ``(A, B)``; only the simulator and oracle checks may read it."""

    A: np.ndarray
    B: np.ndarray
    disturbance_radius: float = 0.0
    input_box: Optional[Box] = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.ndim != 2 or self.A.shape[0] != self.A.shape[1] or self.A.shape[0] < 1:
            raise DimensionError("A", "(n, n)", self.A.shape)
        if self.B.ndim != 2 or self.B.shape[0] != self.A.shape[0] or self.B.shape[1] < 1:
            raise DimensionError("B", (self.A.shape[0], "m"), self.B.shape)
        if self.disturbance_radius < 0:
            raise ValueError("disturbance radius must be nonnegative")
        if self.input_box is not None and self.input_box.dim != self.input_dim:
            raise DimensionError("input_box", (self.input_dim,), (self.input_box.dim,))

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    @classmethod
    def casestudy(cls, input_box: Optional[Box] = None) -> "PlantModel":
        return cls(CASESTUDY_A.copy(), CASESTUDY_B.copy(), CASESTUDY_EPS, input_box)


@dataclass
class RomModel:
    A_hat: np.ndarray
    B_hat: np.ndarray
    C_hat: np.ndarray
    state_box: Optional[Box] = None
    input_box: Optional[Box] = None

    def __post_init__(self):
        self.A_hat = np.asarray(self.A_hat, dtype=float)
        self.B_hat = np.asarray(self.B_hat, dtype=float)
        self.C_hat = np.asarray(self.C_hat, dtype=float)
        nh = self.A_hat.shape[0]
        if self.A_hat.ndim != 2 or self.A_hat.shape != (nh, nh):
            raise DimensionError("A_hat", "(nh, nh)", self.A_hat.shape)
        if self.B_hat.ndim != 2 or self.B_hat.shape[0] != nh:
            raise DimensionError("B_hat", (nh, "mh"), self.B_hat.shape)
        if self.C_hat.ndim != 2 or self.C_hat.shape[1] != nh:
            raise DimensionError("C_hat", ("n", nh), self.C_hat.shape)
        if nh > self.C_hat.shape[0]:
            raise DimensionError("C_hat", "nh <= n", self.C_hat.shape)
        if self.state_box is not None and self.state_box.dim != nh:
            raise DimensionError("state_box", (nh,), (self.state_box.dim,))
        if self.input_box is not None and self.input_box.dim != self.input_dim:
            raise DimensionError("input_box", (self.input_dim,), (self.input_box.dim,))

    @property
    def state_dim(self) -> int:
        return self.A_hat.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B_hat.shape[1]

    @property
    def output_dim(self) -> int:
        return self.C_hat.shape[0]


def step_plant(plant: PlantModel, x, u, w) -> np.ndarray:
    """One step of the plant; the output is the state itself."""
    n, m = plant.state_dim, plant.input_dim
    x = as_vector(x, n, "x")
    u = as_vector(u, m, "u")
    w = as_vector(w, n, "w")
    return plant.A @ x + plant.B @ u + w


def step_rom(rom: RomModel, xh, uh):
    """Return ``(next ROM state, current ROM output)``."""
    xh = as_vector(xh, rom.state_dim, "x_hat")
    uh = as_vector(uh, rom.input_dim, "u_hat")
    return rom.A_hat @ xh + rom.B_hat @ uh, rom.C_hat @ xh


SAMPLER_MODES = ("uniform-ball", "boundary-sphere", "zero")


@dataclass
class DisturbanceSampler:
    """Seeded stream of disturbances with ``|w| <= radius``.

    Each instance owns its generator. ``fork`` derives an independent child
    stream deterministically from the seed.
    """

    radius: float
    seed: int = 0
    mode: str = "uniform-ball"
    _rng: np.random.Generator = field(init=False, repr=False)
    _seq: np.random.SeedSequence = field(init=False, repr=False)

    def __post_init__(self):
        if self.radius < 0:
            raise ValueError("radius must be nonnegative")
        if self.mode not in SAMPLER_MODES:
            raise ValueError(f"unknown sampler mode {self.mode!r}; choose from {SAMPLER_MODES}")
        self._seq = np.random.SeedSequence(self.seed)
        self._rng = np.random.default_rng(self._seq)

    def fork(self, index=0) -> "DisturbanceSampler":
        child_seed = int(np.random.SeedSequence([self.seed, 0xD15, index]).generate_state(1, np.uint64)[0])
        return DisturbanceSampler(self.radius, child_seed, self.mode)

    def draw(self, n) -> np.ndarray:
        return sample_disturbance(self, n)


def _cap_norm(w, radius):
    # rounding can put |w| one ulp above the radius
    nw = np.linalg.norm(w)
    while nw > radius:
        w = w * (radius / nw) * (1.0 - 2.0**-52)
        nw = np.linalg.norm(w)
    return w


def sample_disturbance(sampler: DisturbanceSampler, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if sampler.mode == "zero" or sampler.radius == 0.0:
        return np.zeros(n)
    rng = sampler._rng
    d = rng.standard_normal(n)
    d /= np.linalg.norm(d)
    if sampler.mode == "boundary-sphere":
        r = sampler.radius
    else:
        r = sampler.radius * rng.uniform() ** (1.0 / n)
    return _cap_norm(r * d, sampler.radius)


def sphere_directions(rng, count, n) -> np.ndarray:
    d = rng.standard_normal((count, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def scaled_identity_or_matrix(spec, dim) -> np.ndarray:
    """Accept a scalar ``a`` (meaning ``a * I``) or an explicit matrix."""
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    return arr


def check_input_box(box: Optional[Box], u, log=None) -> bool:
    if box is None or box.contains(u):
        return True
    if log is not None:
        log.debug("plant input %s outside box", np.array2string(np.asarray(u), precision=4))
    return False


__all__: Sequence[str] = [
    "Box", "PlantModel", "RomModel", "DisturbanceSampler", "step_plant", "step_rom",
    "sample_disturbance", "CASESTUDY_A", "CASESTUDY_B", "CASESTUDY_EPS",
]
