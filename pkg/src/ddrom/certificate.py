"""Simulation-function certificate extracted from a validated SDP solution.

``S(x, xh) = (x - R xh)^T P (x - R xh)`` with the interface
``u = GP (x - R xh) + E xh + D uh``. For such a pair the one-step decrease

    S(x+, xh+) <= kappa S(x, xh) + rho |uh|^2 + psi

holds for every admissible disturbance, which gives the output bound
:func:`closeness_bound`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from .data import DataSet
from .errors import CertificateError, DimensionError
from .synthesis import HyperParams, SynthesisSolution, ValidationReport, validate_solution
from .system import Box, PlantModel, RomModel, as_vector, sphere_directions

MAX_PBAR_COND = 1e12


@dataclass(frozen=True)
class Certificate:
    R: np.ndarray
    P: np.ndarray
    alpha: float
    kappa: float
    rho: float
    psi: float
    Z: float
    E: np.ndarray
    D: np.ndarray
    GP: np.ndarray
    mu: Tuple[float, ...]
    eps: float
    delta_max: float
    xhat_max_sq: float
    lam_max_P: float
    norm_K1: float
    norm_K2: float
    norm_mismatch: float
    psi_terms: Tuple[float, float] = (0.0, 0.0)
    provenance: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.R.shape[0]

    @property
    def nh(self) -> int:
        return self.R.shape[1]

    @property
    def m(self) -> int:
        return self.E.shape[0]

    @property
    def mh(self) -> int:
        return self.D.shape[1]

    def with_changes(self, **changes) -> "Certificate":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        out["mu"] = list(self.mu)
        out["psi_terms"] = list(self.psi_terms)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Certificate":
        d = json.loads(text)
        for k in ("R", "P", "E", "D", "GP"):
            d[k] = np.array(d[k], dtype=float)
        d["mu"] = tuple(d["mu"])
        d["psi_terms"] = tuple(d["psi_terms"])
        return cls(**d)


def compute_rho_psi(lam_max_P, norm_K1, norm_K2, norm_mismatch, delta_max, eps, xhat_max_sq, mu):
    """Return ``(rho, psi, Z, (psi_data, psi_noise))`` from the scalar constituents."""
    mu1, mu2, mu3, mu4, mu5, mu6 = mu
    Z = (norm_mismatch + np.sqrt(delta_max) * norm_K2) ** 2
    rho = (1.0 + 1.0 / mu2 + 1.0 / mu4 + mu6) * lam_max_P * Z
    psi_data = (1.0 + 1.0 / mu1 + mu4 + mu5) * lam_max_P * delta_max * norm_K1**2 * xhat_max_sq
    psi_noise = (1.0 + 1.0 / mu3 + 1.0 / mu5 + 1.0 / mu6) * lam_max_P * eps**2
    return float(rho), float(psi_data + psi_noise), float(Z), (float(psi_data), float(psi_noise))


def bound_value(alpha, kappa, rho, psi, S0=0.0, nu_hat_inf=0.0) -> float:
    if not 0.0 < kappa < 1.0:
        raise ValueError("kappa must lie in (0, 1)")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return float(np.sqrt(S0 / alpha + (rho * nu_hat_inf**2 + psi) / (alpha * (1.0 - kappa))))


def closeness_bound(cert: Certificate, S0: float, nu_hat_inf: float) -> float:
    """Output-mismatch bound for initial SF value ``S0`` and input sup-norm ``nu_hat_inf``."""
    return bound_value(cert.alpha, cert.kappa, cert.rho, cert.psi, S0, nu_hat_inf)


def spd_inverse(Pbar) -> np.ndarray:
    Pbar = np.asarray(Pbar, dtype=float)
    Pbar = 0.5 * (Pbar + Pbar.T)
    lam = np.linalg.eigvalsh(Pbar)
    if lam[0] <= 0 or lam[-1] / lam[0] > MAX_PBAR_COND:
        raise CertificateError(
            f"Pbar is numerically singular (eigenvalues in [{lam[0]:.3e}, {lam[-1]:.3e}]); refusing to invert")
    c = sla.cho_factor(Pbar, lower=True)
    P = sla.cho_solve(c, np.eye(Pbar.shape[0]))
    return 0.5 * (P + P.T)


def extract_certificate(sol: SynthesisSolution, ds: DataSet, hp: HyperParams, rom_state_box: Box,
                        rom_input_box: Optional[Box] = None,
                        report: Optional[ValidationReport] = None) -> Tuple[Certificate, RomModel]:
    if report is None:
        report = validate_solution(sol, ds, hp)
    if not report.passed:
        names = ", ".join(c.name for c in report.failures()) or "degenerate solution"
        raise CertificateError(f"solution failed validation ({names})")
    if rom_state_box.dim != hp.nh:
        raise DimensionError("rom_state_box", (hp.nh,), (rom_state_box.dim,))

    X, U, Xp = ds.X, ds.U, ds.X_plus
    R = X @ sol.K1
    P = spd_inverse(sol.Pbar)
    lam = np.linalg.eigvalsh(P)
    E = U @ sol.K1
    D = U @ sol.K2
    GP = sol.G @ P
    norm_K1 = float(np.linalg.norm(sol.K1, 2))
    norm_K2 = float(np.linalg.norm(sol.K2, 2))
    norm_mis = float(np.linalg.norm(Xp @ sol.K2 - X @ sol.K1 @ hp.B_hat, 2))
    delta_max = float(np.linalg.eigvalsh(ds.Delta)[-1])
    xmax_sq = rom_state_box.max_sq_norm()
    rho, psi, Z, terms = compute_rho_psi(lam[-1], norm_K1, norm_K2, norm_mis, delta_max, ds.eps, xmax_sq, hp.mu)
    cert = Certificate(
        R=R, P=P, alpha=float(lam[0]), kappa=hp.kappa, rho=rho, psi=psi, Z=Z, E=E, D=D, GP=GP,
        mu=tuple(hp.mu), eps=float(ds.eps), delta_max=delta_max, xhat_max_sq=xmax_sq,
        lam_max_P=float(lam[-1]), norm_K1=norm_K1, norm_K2=norm_K2, norm_mismatch=norm_mis,
        psi_terms=terms,
        provenance={
            "data_sha256": ds.digest(), "hyperparams_sha256": hp.digest(),
            "solver_status": sol.status, "solver_backend": sol.backend,
        },
    )
    # the ROM output map is the very same array object content as R
    rom = RomModel(hp.A_hat.copy(), hp.B_hat.copy(), R.copy(), rom_state_box, rom_input_box)
    return cert, rom


def sf_value(cert: Certificate, x, xh) -> float:
    e = as_vector(x, cert.n, "x") - cert.R @ as_vector(xh, cert.nh, "x_hat")
    return float(max(e @ cert.P @ e, 0.0))


def initial_rom_state(cert: Certificate, x0):
    """ROM state minimizing ``S(x0, xh)``; returns ``(xh0, S0)``."""
    x0 = as_vector(x0, cert.n, "x0")
    if np.linalg.matrix_rank(cert.R) < cert.nh:
        raise CertificateError("R is rank deficient; the initial ROM state is not unique")
    L = np.linalg.cholesky(cert.P)
    # S = |L^T (x0 - R xh)|^2
    xh0, *_ = np.linalg.lstsq(L.T @ cert.R, L.T @ x0, rcond=None)
    return xh0, sf_value(cert, x0, xh0)


# --- SF condition checks ------------------------------------------------------

def worst_boundary_disturbance(P, c, eps, eig=None) -> np.ndarray:
    """Maximizer of ``(c + w)^T P (c + w)`` over ``|w| <= eps``.

    The objective is convex, so the maximum sits on the sphere. Stationarity
    gives ``w = (s I - P)^-1 P c`` with ``s >= lambda_max(P)`` fixed by
    ``|w| = eps``; ``s`` is found by bracketing the secular equation.
    """
    if eps == 0.0:
        return np.zeros_like(c)
    lam, V = eig if eig is not None else np.linalg.eigh(P)
    b = V.T @ (P @ c)
    top = lam[-1]
    gap = top - lam
    bnorm = np.linalg.norm(b)
    on_top = np.isclose(gap, 0.0, atol=1e-12 * max(top, 1.0))
    b_top = np.linalg.norm(b[on_top])

    def phi(s):
        return float(np.sum(b**2 / (s + gap) ** 2) - eps**2)

    if b_top > 1e-14 * max(bnorm, 1e-300):
        lo, hi = b_top / eps, bnorm / eps
        s = lo if phi(lo) <= 0 else (hi if phi(hi) >= 0 else brentq(phi, lo, hi, xtol=1e-15 * hi, rtol=1e-15))
        y = b / (s + gap)
    else:
        # hard case: put the missing norm on the top eigenvector
        y = np.zeros_like(b)
        y[~on_top] = b[~on_top] / gap[~on_top]
        rest = eps**2 - float(y @ y)
        if rest < 0:
            s = brentq(phi, 1e-300, bnorm / eps)
            y = b / (s + gap)
        else:
            y[np.argmax(on_top)] = np.sqrt(rest)
    w = V @ y
    nw = np.linalg.norm(w)
    return w * (eps / nw) if nw > 0 else w


@dataclass
class SearchOptions:
    seed: int = 0
    n_directions: int = 64
    slack: float = 1e-7
    # plant states are drawn from ``state_box`` if given, otherwise as
    # ``R xh + e`` with ``|e|`` uniform up to ``error_radius``
    state_box: Optional[Box] = None
    error_radius: Optional[float] = None
    eps_override: Optional[float] = None


@dataclass
class SfCheckReport:
    n_samples: int
    alpha_gap: float
    lower_bound_ok: bool
    violations: int
    worst_slack: float
    worst_relative_slack: float
    worst_index: int
    sampled_max_excess: float
    slack_tol: float

    @property
    def passed(self) -> bool:
        return self.lower_bound_ok and self.violations == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def _ball_points(rng, count, n, radius):
    d = sphere_directions(rng, count, n)
    r = radius * rng.uniform(size=count) ** (1.0 / n)
    return d * r[:, None]


def verify_sf_conditions(cert: Certificate, plant: PlantModel, rom: RomModel, n_samples: int = 10_000,
                         search_opts: Optional[SearchOptions] = None) -> SfCheckReport:
    """Oracle check of the SF conditions on the true plant (test path only)."""
    opts = search_opts or SearchOptions()
    if rom.state_box is None or rom.input_box is None:
        raise ValueError("the ROM needs state and input boxes to draw samples")
    rng = np.random.default_rng(opts.seed)
    n = cert.n
    eps = plant.disturbance_radius if opts.eps_override is None else opts.eps_override
    eig = np.linalg.eigh(cert.P)
    # same routine as extract_certificate, so the gap is exactly zero
    alpha_gap = float(np.linalg.eigvalsh(cert.P)[0] - cert.alpha)

    XH = rom.state_box.sample(rng, n_samples)
    UH = rom.input_box.sample(rng, n_samples)
    if opts.state_box is not None:
        Xs = opts.state_box.sample(rng, n_samples)
    else:
        radius = opts.error_radius
        if radius is None:
            radius = 2.0 * closeness_bound(cert, 0.0, np.sqrt(rom.input_box.max_sq_norm()))
        Xs = XH @ cert.R.T + _ball_points(rng, n_samples, n, radius)

    # lower bound: alpha |e|^2 <= e^T P e holds with alpha = lambda_min(P)
    Es = Xs - XH @ cert.R.T
    V = np.einsum("ij,jk,ik->i", Es, cert.P, Es)
    lower_ok = bool(alpha_gap == 0.0 and np.all(cert.alpha * np.sum(Es**2, axis=1) <= V * (1 + 1e-12) + 1e-12))

    dirs = sphere_directions(rng, opts.n_directions, n) * eps
    worst, worst_rel, worst_i, viol, excess = np.inf, np.inf, -1, 0, -np.inf
    for i in range(n_samples):
        x, xh, uh = Xs[i], XH[i], UH[i]
        u = interface_input(cert, x, xh, uh)
        c = plant.A @ x + plant.B @ u - cert.R @ (rom.A_hat @ xh + rom.B_hat @ uh)
        w = worst_boundary_disturbance(cert.P, c, eps, eig)
        v_next = float((c + w) @ cert.P @ (c + w))
        cand = c[None, :] + dirs
        v_dirs = np.einsum("ij,jk,ik->i", cand, cert.P, cand)
        excess = max(excess, float(v_dirs.max() - v_next))
        v_next = max(v_next, float(v_dirs.max()))
        rhs = cert.kappa * V[i] + cert.rho * float(uh @ uh) + cert.psi
        s = rhs - v_next
        if s < -opts.slack:
            viol += 1
        if s < worst:
            worst, worst_i = s, i
        worst_rel = min(worst_rel, s / max(abs(rhs), 1e-300))
    return SfCheckReport(n_samples, alpha_gap, lower_ok, viol, float(worst), float(worst_rel), worst_i,
                         float(excess), opts.slack)


def interface_input(cert: Certificate, x, xh, uh) -> np.ndarray:
    """``u = GP (x - R xh) + E xh + D uh``."""
    x = as_vector(x, cert.n, "x")
    xh = as_vector(xh, cert.nh, "x_hat")
    uh = as_vector(uh, cert.mh, "u_hat")
    return cert.GP @ (x - cert.R @ xh) + cert.E @ xh + cert.D @ uh
