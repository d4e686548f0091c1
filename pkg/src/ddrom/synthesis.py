"""Data-driven semidefinite program for the ROM, simulation function and interface.

Decision variables: ``K1`` (T x nh), ``K2`` (T x mh), ``Pbar`` (n x n, SPD),
``G`` (m x n), ``beta`` and the S-procedure multiplier ``mu_bar >= 0``.

The main LMI is ``Q1 - mu_bar Q2 >> 0`` with the block matrices built by
:func:`q1_matrix` and :func:`q2_matrix`.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .conic import Affine, ConicProgram, SolveStatus, SolverOptions, solve_program
from .data import DataSet, stacked_data
from .errors import DimensionError, SolverError

log = logging.getLogger(__name__)


@dataclass
class HyperParams:
    A_hat: np.ndarray
    B_hat: np.ndarray
    kappa: float = 0.7
    mu: Tuple[float, ...] = (0.5, 0.25, 0.25, 0.1, 1.0, 1.0)
    eta: float = 0.01
    delta: float = 1e-6
    psd_slack: float = 1e-7
    eq_tol: float = 1e-7
    weights: Tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    # tie-break on mu_bar: without it mu_bar has a free direction when the
    # data pin the plant exactly (Delta = 0) and drifts to huge values
    mu_weight: float = 1e-3
    # optional equality pinning rows of R = X K1 (None disables it)
    anchor_rows: Optional[Sequence[int]] = None
    anchor_value: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.A_hat is None:
            raise ValueError("A_hat must be provided")
        self.A_hat = np.atleast_2d(np.asarray(self.A_hat, dtype=float))
        self.B_hat = np.atleast_2d(np.asarray(self.B_hat, dtype=float))
        nh = self.A_hat.shape[0]
        if self.A_hat.shape != (nh, nh):
            raise DimensionError("A_hat", "(nh, nh)", self.A_hat.shape)
        if self.B_hat.shape[0] != nh:
            raise DimensionError("B_hat", (nh, "mh"), self.B_hat.shape)
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        self.mu = tuple(float(v) for v in self.mu)
        if len(self.mu) != 6 or min(self.mu) <= 0:
            raise ValueError("mu needs six positive entries")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.psd_slack < 0 or self.eq_tol < 0:
            raise ValueError("tolerances must be nonnegative")
        self.weights = tuple(float(v) for v in self.weights)
        if len(self.weights) != 4 or min(self.weights) < 0:
            raise ValueError("weights needs four nonnegative entries")
        if self.mu_weight < 0:
            raise ValueError("mu_weight must be nonnegative")
        if self.anchor_rows is not None:
            self.anchor_rows = [int(r) for r in self.anchor_rows]
            self.anchor_value = np.atleast_2d(np.asarray(self.anchor_value, dtype=float))
            if self.anchor_value.shape != (len(self.anchor_rows), nh):
                raise DimensionError("anchor_value", (len(self.anchor_rows), nh), self.anchor_value.shape)

    @property
    def nh(self) -> int:
        return self.A_hat.shape[0]

    @property
    def mh(self) -> int:
        return self.B_hat.shape[1]

    @property
    def schur_factor(self) -> float:
        return 1.0 / (1.0 + sum(self.mu[:3]))

    def to_dict(self) -> dict:
        return {
            "A_hat": self.A_hat.tolist(), "B_hat": self.B_hat.tolist(), "kappa": self.kappa,
            "mu": list(self.mu), "eta": self.eta, "delta": self.delta, "psd_slack": self.psd_slack,
            "eq_tol": self.eq_tol, "weights": list(self.weights),
            "mu_weight": self.mu_weight, "anchor_rows": self.anchor_rows,
            "anchor_value": None if self.anchor_value is None else self.anchor_value.tolist(),
        }

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --- dense reference assembly ------------------------------------------------

def q1_matrix(Pbar, G, kappa, mu) -> np.ndarray:
    """Dense Q1; block rows of size n, n + m, n."""
    Pbar = np.asarray(Pbar, dtype=float)
    G = np.asarray(G, dtype=float)
    n, m = Pbar.shape[0], G.shape[0]
    c = 1.0 / (1.0 + sum(mu[:3]))
    GP = np.vstack([G, Pbar])
    Q = np.zeros((3 * n + m, 3 * n + m))
    Q[:n, :n] = kappa * Pbar
    Q[n:2 * n + m, 2 * n + m:] = GP
    Q[2 * n + m:, n:2 * n + m] = GP.T
    Q[2 * n + m:, 2 * n + m:] = c * Pbar
    return Q


def q2_matrix(X, U, X_plus, Delta) -> np.ndarray:
    """Dense Q2 (the data-consistency quadratic form padded with a zero block row)."""
    H = np.vstack([U, X])
    n, m = X.shape[0], U.shape[0]
    Q = np.zeros((3 * n + m, 3 * n + m))
    Q[:n, :n] = Delta - X_plus @ X_plus.T
    Q[:n, n:2 * n + m] = X_plus @ H.T
    Q[n:2 * n + m, :n] = H @ X_plus.T
    Q[n:2 * n + m, n:2 * n + m] = -H @ H.T
    return Q


def kernel_basis(ds: DataSet, tol=1e-12) -> np.ndarray:
    """Orthonormal basis of the row space of ``[X; X_plus; U; 1^T]``.

    K1 and K2 enter every constraint and objective term only through these
    rows, and the spectral norm cannot grow under orthogonal projection, so
    restricting ``K = Q Y`` loses no optimal value. ``||Q Y|| = ||Y||``.
    """
    L = np.vstack([ds.X, ds.X_plus, ds.U, np.ones((1, ds.T))])
    _, s, Vt = np.linalg.svd(L, full_matrices=False)
    r = int(np.sum(s > tol * s[0]))
    return Vt[:r].T.copy()


def s_procedure_congruence(ds: DataSet) -> Optional[np.ndarray]:
    """Invertible ``J`` that block-diagonalizes ``J^T Q2 J``.

    With the least-squares fit ``S_ls = X_plus H^+`` and ``H H^T = L L^T``,
    ``J = [[I, 0, 0], [S_ls^T, L^-T, 0], [0, 0, I]]`` maps Q2 to
    ``diag(Delta - E E^T, -I, 0)`` where ``E`` is the fit residual. Returns
    None when ``H H^T`` is singular.
    """
    H = stacked_data(ds)
    n, m = ds.n, ds.m
    HH = H @ H.T
    try:
        L = np.linalg.cholesky(HH)
    except np.linalg.LinAlgError:
        return None
    S_ls = np.linalg.lstsq(H.T, ds.X_plus.T, rcond=None)[0].T
    J = np.eye(3 * n + m)
    J[n:2 * n + m, :n] = S_ls.T
    J[n:2 * n + m, n:2 * n + m] = np.linalg.inv(L).T
    return J


def build_program(ds: DataSet, hp: HyperParams, reduce_kernel: bool = True,
                  precondition: bool = True) -> ConicProgram:
    ds = ds.without_oracle()
    X, U, Xp = ds.X, ds.U, ds.X_plus
    n, m, T = ds.n, ds.m, ds.T
    nh, mh = hp.nh, hp.mh
    if hp.anchor_rows is not None and max(hp.anchor_rows) >= n:
        raise DimensionError("anchor_rows", f"indices < {n}", hp.anchor_rows)

    prog = ConicProgram()
    if reduce_kernel:
        Q = kernel_basis(ds)
        r = Q.shape[1]
        Y1 = prog.variable("Y1", (r, nh))
        Y2 = prog.variable("Y2", (r, mh))
        K1 = Q @ Y1
        K2 = Q @ Y2
        norm1, norm2 = Y1, Y2
    else:
        K1 = prog.variable("K1", (T, nh))
        K2 = prog.variable("K2", (T, mh))
        norm1, norm2 = K1, K2
    # the main LMI is homogeneous in (Pbar, G, mu_bar) and Pbar >= delta I fixes
    # their scale, so delta is the natural unit for these variables
    sc = hp.delta if precondition else 1.0
    Pbar = prog.variable("Pbar", (n, n), symmetric=True, scale=sc)
    G = prog.variable("G", (m, n), scale=sc)
    beta = prog.variable("beta", scale=sc)
    mu_bar = prog.variable("mu_bar", scale=sc)
    t = [prog.variable(f"t{i}") for i in (1, 2, 3)]
    prog.derived["K1"] = K1
    prog.derived["K2"] = K2

    w = hp.weights
    prog.minimize(w[0] * t[0] + w[1] * t[1] + w[2] * t[2] + w[3] * beta + hp.mu_weight * mu_bar)

    prog.add_nonneg("eta_exclusion", (np.ones((1, T)) @ K1).sum() - hp.eta)
    prog.add_nonneg("mu_bar_nonneg", mu_bar)
    prog.add_equality("invariance", Xp @ K1 - (X @ K1) @ hp.A_hat)
    prog.add_equality("input_nullspace", X @ K2)
    if hp.anchor_rows is not None:
        sel = np.eye(n)[hp.anchor_rows]
        prog.add_equality("anchor", (sel @ X) @ K1 - hp.anchor_value)
    prog.add_psd("beta_bound", beta.times(np.eye(n)) - Pbar)
    prog.add_psd("pbar_pd", Pbar - hp.delta * np.eye(n))

    GP = Affine.bmat([[G], [Pbar]])
    Q1 = Affine.bmat([
        [hp.kappa * Pbar, None, None],
        [None, np.zeros((n + m, n + m)), GP],
        [None, GP.T, hp.schur_factor * Pbar],
    ])
    Q2 = q2_matrix(X, U, Xp, ds.Delta)
    lmi = Q1 - mu_bar.times(Q2)
    prog.derived["s_procedure"] = lmi
    J = s_procedure_congruence(ds) if precondition else None
    prog.add_psd("s_procedure", lmi, congruence=J)

    prog.add_norm_epigraph("norm_K1", "t1", norm1)
    prog.add_norm_epigraph("norm_K2", "t2", norm2)
    prog.add_norm_epigraph("norm_mismatch", "t3", Xp @ K2 - (X @ K1) @ hp.B_hat)
    return prog


@dataclass
class SynthesisSolution:
    K1: np.ndarray
    K2: np.ndarray
    Pbar: np.ndarray
    G: np.ndarray
    beta: float
    mu_bar: float
    t: Tuple[float, float, float]
    status: str
    objective: float
    residuals: dict = field(default_factory=dict)
    backend: str = ""

    def to_json(self) -> str:
        def mat(a):
            return np.asarray(a).tolist()

        payload = {
            "status": self.status, "objective": self.objective, "backend": self.backend,
            "beta": self.beta, "mu_bar": self.mu_bar, "t": list(self.t),
            "K1": mat(self.K1), "K2": mat(self.K2), "Pbar": mat(self.Pbar), "G": mat(self.G),
            "residuals": self.residuals,
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SynthesisSolution":
        d = json.loads(text)
        return cls(
            K1=np.array(d["K1"], dtype=float), K2=np.array(d["K2"], dtype=float),
            Pbar=np.array(d["Pbar"], dtype=float), G=np.array(d["G"], dtype=float),
            beta=float(d["beta"]), mu_bar=float(d["mu_bar"]), t=tuple(d["t"]),
            status=d["status"], objective=float(d["objective"]),
            residuals=d.get("residuals", {}), backend=d.get("backend", ""),
        )

    def replace(self, **changes) -> "SynthesisSolution":
        from dataclasses import replace

        return replace(self, **changes)


def solve(prog: ConicProgram, solver_opts: Optional[SolverOptions] = None) -> SynthesisSolution:
    """Run the backend and map variables back.

    Raises :class:`SolverError` on backend crashes; infeasibility and other
    non-optimal outcomes are returned through ``status``.
    """
    res = solve_program(prog, solver_opts)
    if res.z is None or not np.all(np.isfinite(res.z)):
        if res.status.ok:
            raise SolverError("backend reported success without a finite point", res.residuals)
        nan = np.full((0, 0), np.nan)
        return SynthesisSolution(nan, nan, nan, nan, np.nan, np.nan, (np.nan,) * 3,
                                 res.status.value, np.nan, res.residuals, res.backend)
    vals = prog.unpack(res.z)
    K1 = prog.evaluate(prog.derived["K1"], vals)
    K2 = prog.evaluate(prog.derived["K2"], vals)
    Pbar = vals["Pbar"]
    return SynthesisSolution(
        K1=K1, K2=K2, Pbar=0.5 * (Pbar + Pbar.T), G=vals["G"],
        beta=float(vals["beta"][0, 0]), mu_bar=float(vals["mu_bar"][0, 0]),
        t=tuple(float(vals[f"t{i}"][0, 0]) for i in (1, 2, 3)),
        status=res.status.value, objective=res.objective, residuals=res.residuals,
        backend=res.backend,
    )


@dataclass
class Check:
    name: str
    value: float
    threshold: float
    passed: bool
    detail: str = ""


@dataclass
class ValidationReport:
    checks: List[Check]
    degenerate: bool = False
    warnings: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks) and not self.degenerate

    def failures(self) -> List[Check]:
        return [c for c in self.checks if not c.passed]

    def table(self) -> str:
        lines = [f"{'check':<22}{'value':>14}{'threshold':>14}  ok"]
        for c in self.checks:
            lines.append(f"{c.name:<22}{c.value:>14.6g}{c.threshold:>14.6g}  {'yes' if c.passed else 'NO'}")
        if self.degenerate:
            lines.append("degenerate certificate: K1 or R numerically zero")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed, "degenerate": self.degenerate, "warnings": self.warnings,
            "checks": [c.__dict__ for c in self.checks],
        }


def validate_solution(sol: SynthesisSolution, ds: DataSet, hp: HyperParams) -> ValidationReport:
    """Re-check every constraint with dense numpy, independent of the program object."""
    X, U, Xp = ds.X, ds.U, ds.X_plus
    n, T = ds.n, ds.T
    checks: List[Check] = []
    warnings: List[str] = []
    finite = all(np.all(np.isfinite(a)) for a in (sol.K1, sol.K2, sol.Pbar, sol.G)) and sol.K1.size > 0
    if not finite or sol.K1.shape != (T, hp.nh) or sol.K2.shape != (T, hp.mh):
        checks.append(Check("well_formed", 0.0, 1.0, False, f"solver status {sol.status}"))
        return ValidationReport(checks, degenerate=True)

    Pbar = sol.Pbar
    asym = float(np.max(np.abs(Pbar - Pbar.T)))
    checks.append(Check("pbar_symmetric", asym, hp.eq_tol, asym <= hp.eq_tol))
    lam_p = float(np.linalg.eigvalsh(0.5 * (Pbar + Pbar.T))[0])
    checks.append(Check("pbar_positive", lam_p, 0.0, lam_p > 0.0))
    checks.append(Check("pbar_lower", lam_p - hp.delta, -hp.psd_slack, lam_p - hp.delta >= -hp.psd_slack))

    s1 = float(np.ones(T) @ sol.K1 @ np.ones(hp.nh))
    checks.append(Check("eta_exclusion", s1, hp.eta, s1 >= hp.eta - hp.eq_tol))

    lam_b = float(np.linalg.eigvalsh(sol.beta * np.eye(n) - 0.5 * (Pbar + Pbar.T))[0])
    checks.append(Check("beta_bound", lam_b, -hp.psd_slack, lam_b >= -hp.psd_slack))
    checks.append(Check("beta_positive", sol.beta, 0.0, sol.beta > 0.0))

    r_inv = float(np.linalg.norm(Xp @ sol.K1 - X @ sol.K1 @ hp.A_hat))
    checks.append(Check("invariance", r_inv, hp.eq_tol, r_inv <= hp.eq_tol))
    r_null = float(np.linalg.norm(X @ sol.K2))
    checks.append(Check("input_nullspace", r_null, hp.eq_tol, r_null <= hp.eq_tol))
    if hp.anchor_rows is not None:
        r_anc = float(np.linalg.norm((X @ sol.K1)[hp.anchor_rows] - hp.anchor_value))
        checks.append(Check("anchor", r_anc, hp.eq_tol, r_anc <= hp.eq_tol))

    checks.append(Check("mu_bar_nonneg", sol.mu_bar, 0.0, sol.mu_bar >= 0.0))
    if sol.mu_bar < 1e-12:
        warnings.append("mu_bar is (numerically) zero; the rank-based feasibility argument needs mu_bar > 0")

    M = q1_matrix(Pbar, sol.G, hp.kappa, hp.mu) - sol.mu_bar * q2_matrix(X, U, Xp, ds.Delta)
    lam_m = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
    checks.append(Check("s_procedure", lam_m, -hp.psd_slack, lam_m >= -hp.psd_slack))

    norms = (
        np.linalg.norm(sol.K1, 2),
        np.linalg.norm(sol.K2, 2),
        np.linalg.norm(Xp @ sol.K2 - X @ sol.K1 @ hp.B_hat, 2),
    )
    for i, (tv, nv) in enumerate(zip(sol.t, norms), start=1):
        gap = float(tv - nv)
        checks.append(Check(f"epigraph_t{i}", gap, -hp.psd_slack, gap >= -hp.psd_slack))

    degenerate = bool(np.linalg.norm(sol.K1) < 1e-10 or np.linalg.norm(X @ sol.K1) < 1e-10)
    return ValidationReport(checks, degenerate, warnings)


def synthesize(ds: DataSet, hp: HyperParams, solver_opts: Optional[SolverOptions] = None,
               reduce_kernel: bool = True):
    """Build, solve and validate. Returns ``(solution, report)``."""
    prog = build_program(ds, hp, reduce_kernel=reduce_kernel)
    sol = solve(prog, solver_opts)
    if not SolveStatus(sol.status).ok:
        return sol, ValidationReport([Check("solver_status", 0.0, 1.0, False, sol.status)], degenerate=True)
    return sol, validate_solution(sol, ds, hp)
