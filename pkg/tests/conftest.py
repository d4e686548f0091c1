import numpy as np
import pytest

from ddrom.certificate import extract_certificate
from ddrom.config import load_config
from ddrom.data import run_experiment
from ddrom.synthesis import synthesize

CASESTUDY_SEEDS = (0, 1, 2)


class Pipeline:
    """Data, solution and certificate for one case-study seed."""

    def __init__(self, seed):
        cfg = load_config("casestudy")
        cfg.experiment.seed = seed
        self.cfg = cfg
        self.plant = cfg.build_plant()
        self.ds = run_experiment(self.plant, cfg.experiment_config())
        self.hp = cfg.hyperparams()
        self.sol, self.report = synthesize(self.ds, self.hp, cfg.solver_options())
        sbox, ubox = cfg.rom_boxes()
        self.cert, self.rom = extract_certificate(self.sol, self.ds, self.hp, sbox, ubox, self.report)


_cache = {}


def casestudy(seed=1) -> Pipeline:
    if seed not in _cache:
        _cache[seed] = Pipeline(seed)
    return _cache[seed]


@pytest.fixture(scope="session")
def cs():
    return casestudy(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


MU = (0.5, 0.25, 0.25, 0.1, 1.0, 1.0)


def random_instance(rng, n, m, nh, mh):
    """Random plant matrices and a random (not necessarily valid) certificate."""
    from ddrom.certificate import Certificate

    A, B = rng.normal(size=(n, n)), rng.normal(size=(n, m))
    Ah, Bh = rng.normal(size=(nh, nh)), rng.normal(size=(nh, mh))
    M = rng.normal(size=(n, n))
    P = M @ M.T + np.eye(n)
    lam = np.linalg.eigvalsh(P)
    cert = Certificate(
        R=rng.normal(size=(n, nh)), P=P, alpha=float(lam[0]), kappa=0.5, rho=1.0, psi=1.0, Z=0.0,
        E=rng.normal(size=(m, nh)), D=rng.normal(size=(m, mh)), GP=rng.normal(size=(m, n)), mu=MU, eps=0.1,
        delta_max=0.0, xhat_max_sq=1.0, lam_max_P=float(lam[-1]), norm_K1=0.0, norm_K2=0.0, norm_mismatch=0.0)
    return A, B, Ah, Bh, cert


def error_dynamics_rhs(A, B, Ah, Bh, cert, x, xh, uh, w):
    """Closed-form one-step error ``x+ - R xh+`` under the interface input."""
    R = cert.R
    return ((A + B @ cert.GP) @ (x - R @ xh) + (A @ R + B @ cert.E - R @ Ah) @ xh
            + (B @ cert.D - R @ Bh) @ uh + w)
