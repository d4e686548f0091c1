"""A small conic-program representation and its solver backends.

Every decision variable is flattened into one vector ``z``. Matrix-valued
expressions are affine in ``z``::

    vec(expr) = const + sum_v  coef_v @ z_v

with row-major ``vec``. Symmetric variables are parameterized by their
lower triangle. A program has a linear objective, affine equalities
(``expr == 0``), elementwise nonnegativity (``expr >= 0``) and PSD blocks
(``expr >> 0``, symmetrized when added).

Text dump schema (``ConicProgram.dump``), one record per line::

    VAR <name> <rows> <cols> <sym|full> <offset> <size> <scale>
    OBJ <index> <coef>
    EQ <row> <index> <coef>       (sparse entries of A in  A z = b)
    EQB <row> <value>
    NN <row> <index> <coef>        (G_l z <= h_l)
    NNH <row> <value>
    PSD <block> <name> <side>             (entries are those of the emitted block)
    PSDC <block> <i> <j> <index> <coef>   (coefficient of z_index in entry (i, j))
    PSDK <block> <i> <j> <value>          (constant entry)

Indices are zero based; PSD entries list the lower triangle only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import SolverError

log = logging.getLogger(__name__)


class Affine:
    """Matrix-valued affine expression in the program variables."""

    __array_ufunc__ = None  # let ndarray @ Affine dispatch to __rmatmul__

    def __init__(self, shape, const=None, terms=None):
        self.shape = (int(shape[0]), int(shape[1]))
        size = self.shape[0] * self.shape[1]
        self.const = np.zeros(size) if const is None else np.asarray(const, dtype=float).reshape(size)
        self.terms: Dict[str, sp.csr_matrix] = dict(terms or {})

    @classmethod
    def constant(cls, M) -> "Affine":
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return cls(M.shape, M.ravel())

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    def _linmap(self, L: sp.spmatrix, shape) -> "Affine":
        L = sp.csr_matrix(L)
        return Affine(shape, L @ self.const, {k: sp.csr_matrix(L @ v) for k, v in self.terms.items()})

    def __add__(self, other):
        other = _lift(other, self.shape)
        if other.shape != self.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        terms = dict(self.terms)
        for k, v in other.terms.items():
            terms[k] = terms[k] + v if k in terms else v
        return Affine(self.shape, self.const + other.const, terms)

    __radd__ = __add__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-_lift(other, self.shape))

    def __rsub__(self, other):
        return _lift(other, self.shape) + (-self)

    def __mul__(self, a):
        if isinstance(a, Affine):
            raise TypeError("product of two affine expressions is not affine")
        a = float(a)
        return Affine(self.shape, a * self.const, {k: a * v for k, v in self.terms.items()})

    __rmul__ = __mul__

    def __truediv__(self, a):
        return self * (1.0 / float(a))

    def __matmul__(self, M):
        # E @ M, M constant (c x q):  vec(E M) = (I_r kron M^T) vec(E)
        M = np.atleast_2d(np.asarray(M, dtype=float))
        r, c = self.shape
        if M.shape[0] != c:
            raise ValueError(f"cannot multiply {self.shape} by {M.shape}")
        return self._linmap(sp.kron(sp.identity(r), sp.csr_matrix(M.T)), (r, M.shape[1]))

    def __rmatmul__(self, L):
        # L @ E, L constant (p x r):  vec(L E) = (L kron I_c) vec(E)
        L = np.atleast_2d(np.asarray(L, dtype=float))
        r, c = self.shape
        if L.shape[1] != r:
            raise ValueError(f"cannot multiply {L.shape} by {self.shape}")
        return self._linmap(sp.kron(sp.csr_matrix(L), sp.identity(c)), (L.shape[0], c))

    @property
    def T(self) -> "Affine":
        r, c = self.shape
        idx = np.arange(r * c).reshape(r, c).T.ravel()
        perm = sp.csr_matrix((np.ones(r * c), (np.arange(r * c), idx)), shape=(r * c, r * c))
        return self._linmap(perm, (c, r))

    def times(self, M) -> "Affine":
        """Scalar expression times a constant matrix."""
        if self.shape != (1, 1):
            raise ValueError("times() needs a 1x1 expression")
        M = np.atleast_2d(np.asarray(M, dtype=float))
        col = sp.csr_matrix(M.reshape(-1, 1))
        return self._linmap(col, M.shape)

    def sum(self) -> "Affine":
        return self._linmap(sp.csr_matrix(np.ones((1, self.size))), (1, 1))

    def symmetrized(self) -> "Affine":
        if self.shape[0] != self.shape[1]:
            raise ValueError("only square expressions can be symmetrized")
        return 0.5 * (self + self.T)

    def evaluate(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        """Value at the given free-parameter vectors (see ``ConicProgram.evaluate``)."""
        out = self.const.copy()
        for k, v in self.terms.items():
            out += v @ np.asarray(values[k], dtype=float).ravel()
        return out.reshape(self.shape)

    def variables(self):
        return set(self.terms)

    @staticmethod
    def bmat(blocks) -> "Affine":
        """Block matrix of expressions, constants or ``None`` (zero)."""
        nr, nc = len(blocks), len(blocks[0])
        heights = [None] * nr
        widths = [None] * nc
        for i, row in enumerate(blocks):
            if len(row) != nc:
                raise ValueError("ragged block rows")
            for j, b in enumerate(row):
                if b is None:
                    continue
                shape = b.shape if isinstance(b, Affine) else np.atleast_2d(b).shape
                for store, idx, val in ((heights, i, shape[0]), (widths, j, shape[1])):
                    if store[idx] is None:
                        store[idx] = val
                    elif store[idx] != val:
                        raise ValueError(f"inconsistent block size at ({i}, {j})")
        if None in heights or None in widths:
            raise ValueError("every block row and column needs one sized block")
        H, W = sum(heights), sum(widths)
        out = Affine((H, W))
        r0 = 0
        for i, row in enumerate(blocks):
            c0 = 0
            for j, b in enumerate(row):
                h, w = heights[i], widths[j]
                if b is not None:
                    b = _lift(b, (h, w))
                    rows = ((r0 + np.arange(h))[:, None] * W + c0 + np.arange(w)[None, :]).ravel()
                    scatter = sp.csr_matrix((np.ones(h * w), (rows, np.arange(h * w))), shape=(H * W, h * w))
                    out = out + b._linmap(scatter, (H, W))
                c0 += w
            r0 += heights[i]
        return out


def _lift(x, shape) -> Affine:
    if isinstance(x, Affine):
        return x
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = np.full(shape, float(arr))
    return Affine.constant(arr)


@dataclass
class Variable:
    name: str
    shape: Tuple[int, int]
    symmetric: bool
    offset: int = 0
    # value = scale * parameter; keeps the solver's iterates near unit size
    scale: float = 1.0

    @property
    def size(self) -> int:
        r, c = self.shape
        return r * (r + 1) // 2 if self.symmetric else r * c

    def embedding(self) -> sp.csr_matrix:
        """Map from the free parameters to the row-major full matrix."""
        r, c = self.shape
        if not self.symmetric:
            return self.scale * sp.identity(r * c, format="csr")
        rows, cols = [], []
        k = 0
        for i in range(r):
            for j in range(i + 1):
                rows.append(i * c + j)
                cols.append(k)
                if i != j:
                    rows.append(j * c + i)
                    cols.append(k)
                k += 1
        return sp.csr_matrix((np.full(len(rows), self.scale), (rows, cols)), shape=(r * c, self.size))

    def params_from_full(self, M) -> np.ndarray:
        M = np.asarray(M, dtype=float) / self.scale
        if not self.symmetric:
            return M.ravel()
        il = np.tril_indices(self.shape[0])
        return 0.5 * (M + M.T)[il]


@dataclass
class PsdBlock:
    """``expr >> 0``, emitted to the solver as ``J^T expr J >> 0``.

    ``J`` (``congruence``) is invertible, so both forms are equivalent; it only
    serves to avoid cancellation inside the solver.
    """

    name: str
    expr: Affine
    congruence: Optional[np.ndarray] = None

    def emitted(self) -> Affine:
        if self.congruence is None:
            return self.expr
        J = self.congruence
        return ((J.T @ self.expr) @ J).symmetrized()


@dataclass
class EpigraphLink:
    """``t >= ||M||_2`` encoded as ``[[t I, M], [M^T, t I]] >> 0``."""

    name: str
    t: str
    matrix: Affine


@dataclass
class StandardForm:
    """``min c'z  s.t.  A z = b,  h - G z in K`` with ``K = R_+^l x S^s1 x ...``."""

    c: np.ndarray
    A: sp.csr_matrix
    b: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    dims: dict
    n_var: int


class ConicProgram:
    def __init__(self):
        self.variables: Dict[str, Variable] = {}
        self.objective: Affine = Affine((1, 1))
        self.equalities: List[Tuple[str, Affine]] = []
        self.nonneg: List[Tuple[str, Affine]] = []
        self.psd: List[PsdBlock] = []
        self.epigraphs: List[EpigraphLink] = []
        # named derived expressions (e.g. a matrix expressed through a basis)
        self.derived: Dict[str, Affine] = {}
        self._n = 0

    # -- construction -----------------------------------------------------
    def variable(self, name, shape=(1, 1), symmetric=False, scale=1.0) -> Affine:
        if name in self.variables:
            raise ValueError(f"variable {name!r} already declared")
        shape = (int(shape[0]), int(shape[1]))
        if symmetric and shape[0] != shape[1]:
            raise ValueError("symmetric variables must be square")
        var = Variable(name, shape, symmetric, self._n, float(scale))
        self.variables[name] = var
        self._n += var.size
        return Affine(shape, None, {name: var.embedding()})

    def var_expr(self, name) -> Affine:
        var = self.variables[name]
        return Affine(var.shape, None, {name: var.embedding()})

    def minimize(self, expr: Affine):
        if expr.shape != (1, 1):
            raise ValueError("objective must be scalar")
        self.objective = expr

    def add_equality(self, name, expr: Affine):
        self.equalities.append((name, expr))

    def add_nonneg(self, name, expr: Affine):
        self.nonneg.append((name, expr))

    def add_psd(self, name, expr: Affine, congruence=None):
        if congruence is not None:
            congruence = np.asarray(congruence, dtype=float)
            if congruence.shape != expr.shape:
                raise ValueError("congruence must match the block size")
        self.psd.append(PsdBlock(name, expr.symmetrized(), congruence))

    def add_norm_epigraph(self, name, t_name, M: Affine):
        t = self.var_expr(t_name)
        if t.shape != (1, 1):
            raise ValueError("epigraph variable must be scalar")
        r, c = M.shape
        block = Affine.bmat([[t.times(np.eye(r)), M], [M.T, t.times(np.eye(c))]])
        self.epigraphs.append(EpigraphLink(name, t_name, M))
        self.add_psd(name, block)

    @property
    def n_var(self) -> int:
        return self._n

    # -- flattening -------------------------------------------------------
    def _flatten(self, expr: Affine):
        rows, cols, vals = [], [], []
        for name, coef in expr.terms.items():
            coo = sp.coo_matrix(coef)
            rows.append(coo.row)
            cols.append(coo.col + self.variables[name].offset)
            vals.append(coo.data)
        if not rows:
            return expr.const.copy(), sp.csr_matrix((expr.size, self._n))
        F = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(expr.size, self._n),
        )
        F.sum_duplicates()
        return expr.const.copy(), F

    def to_standard_form(self) -> StandardForm:
        c0, cF = self._flatten(self.objective)
        c = np.asarray(cF.todense()).ravel()
        if self.equalities:
            flats = [self._flatten(e) for _, e in self.equalities]
            A = sp.vstack([F for _, F in flats]).tocsr()
            b = -np.concatenate([k for k, _ in flats])
        else:
            A = sp.csr_matrix((0, self._n))
            b = np.zeros(0)
        G_parts, h_parts = [], []
        n_l = 0
        for _, e in self.nonneg:
            k, F = self._flatten(e)
            G_parts.append(-F)
            h_parts.append(k)
            n_l += e.size
        sides = []
        for blk in self.psd:
            k, F = self._flatten(blk.emitted())
            G_parts.append(-F)
            h_parts.append(k)
            sides.append(blk.expr.shape[0])
        G = sp.vstack(G_parts).tocsr() if G_parts else sp.csr_matrix((0, self._n))
        h = np.concatenate(h_parts) if h_parts else np.zeros(0)
        return StandardForm(c, A, b, G, h, {"l": n_l, "q": [], "s": sides}, self._n)

    def unpack(self, z) -> Dict[str, np.ndarray]:
        out = {}
        for name, var in self.variables.items():
            params = z[var.offset:var.offset + var.size]
            out[name] = (var.embedding() @ params).reshape(var.shape)
        return out

    def pack(self, values: Dict[str, np.ndarray]) -> np.ndarray:
        z = np.zeros(self._n)
        for name, var in self.variables.items():
            z[var.offset:var.offset + var.size] = var.params_from_full(values[name])
        return z

    def evaluate(self, expr: Affine, values: Dict[str, np.ndarray]) -> np.ndarray:
        """Value of ``expr`` with variables given as full matrices."""
        params = {k: self.variables[k].params_from_full(values[k]) for k in expr.terms}
        return expr.evaluate(params)

    def evaluate_objective(self, values) -> float:
        return float(self.evaluate(self.objective, values)[0, 0])

    # -- text export ------------------------------------------------------
    def dump(self, fp) -> None:
        std = self.to_standard_form()
        w = fp.write
        for var in self.variables.values():
            kind = "sym" if var.symmetric else "full"
            w(f"VAR {var.name} {var.shape[0]} {var.shape[1]} {kind} {var.offset} {var.size} {var.scale!r}\n")
        for i in np.flatnonzero(std.c):
            w(f"OBJ {i} {float(std.c[i])!r}\n")
        A = std.A.tocoo()
        for r, i, v in zip(A.row, A.col, A.data):
            w(f"EQ {r} {i} {float(v)!r}\n")
        for r, v in enumerate(std.b):
            w(f"EQB {r} {float(v)!r}\n")
        n_l = std.dims["l"]
        Gl = std.G[:n_l].tocoo()
        for r, i, v in zip(Gl.row, Gl.col, Gl.data):
            w(f"NN {r} {i} {float(v)!r}\n")
        for r in range(n_l):
            w(f"NNH {r} {float(std.h[r])!r}\n")
        for b, blk in enumerate(self.psd):
            emitted = blk.emitted()
            s = emitted.shape[0]
            w(f"PSD {b} {blk.name} {s}\n")
            const = emitted.const.reshape(s, s)
            for i, j in zip(*np.tril_indices(s)):
                if const[i, j] != 0.0:
                    w(f"PSDK {b} {i} {j} {float(const[i, j])!r}\n")
            _, F = self._flatten(emitted)
            F = F.tocoo()
            for r, idx, v in zip(F.row, F.col, F.data):
                i, j = divmod(int(r), s)
                if j <= i:
                    w(f"PSDC {b} {i} {j} {idx} {float(v)!r}\n")


# --- solving ---------------------------------------------------------------

class SolveStatus(str, Enum):
    OPTIMAL = "optimal"
    NEAR_OPTIMAL = "near_optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    NUMERICAL_FAILURE = "numerical_failure"

    @property
    def ok(self) -> bool:
        return self in (SolveStatus.OPTIMAL, SolveStatus.NEAR_OPTIMAL)


@dataclass
class SolverOptions:
    backend: str = "cvxopt"
    max_iters: int = 200
    abstol: float = 1e-8
    reltol: float = 1e-8
    feastol: float = 1e-8
    verbose: bool = False
    cvxpy_solver: str = "CLARABEL"


@dataclass
class ConicResult:
    status: SolveStatus
    z: Optional[np.ndarray]
    objective: float
    residuals: dict = field(default_factory=dict)
    backend: str = ""


def _reduce_equalities(A: sp.csr_matrix, b: np.ndarray, tol=1e-12):
    """Replace ``A z = b`` by an equivalent full-row-rank system.

    Returns ``(A_r, b_r, inconsistency)``. Interior-point backends reject
    rank-deficient equality blocks.
    """
    if A.shape[0] == 0:
        return A, b, 0.0
    Ad = A.toarray()
    U, s, Vt = np.linalg.svd(Ad, full_matrices=False)
    r = int(np.sum(s > tol * max(s[0], 1.0))) if s.size else 0
    Ur = U[:, :r]
    proj = Ur.T @ b
    inconsistency = float(np.linalg.norm(b - Ur @ proj))
    A_r = s[:r, None] * Vt[:r]
    return sp.csr_matrix(A_r), proj, inconsistency


def _solve_cvxopt(std: StandardForm, opts: SolverOptions) -> ConicResult:
    import cvxopt
    from cvxopt import solvers

    A, b, bad = _reduce_equalities(std.A, std.b)
    if bad > 1e-8 * max(1.0, np.linalg.norm(std.b)):
        return ConicResult(SolveStatus.INFEASIBLE, None, np.nan, {"equality_inconsistency": bad}, "cvxopt")

    def spm(M):
        M = sp.coo_matrix(M)
        return cvxopt.spmatrix(M.data.tolist(), M.row.tolist(), M.col.tolist(), size=M.shape)

    dims = {"l": std.dims["l"], "q": [], "s": list(std.dims["s"])}
    options = {
        "show_progress": opts.verbose,
        "maxiters": opts.max_iters,
        "abstol": opts.abstol,
        "reltol": opts.reltol,
        "feastol": opts.feastol,
        "refinement": 2,
    }
    args = dict(c=cvxopt.matrix(std.c), G=spm(std.G), h=cvxopt.matrix(std.h), dims=dims)
    if A.shape[0]:
        args.update(A=cvxopt.matrix(A.toarray()), b=cvxopt.matrix(b))
    try:
        sol = solvers.conelp(options=options, **args)
    except (ArithmeticError, ValueError) as exc:
        raise SolverError(f"cvxopt failed: {exc}") from exc

    residuals = {
        "primal_infeasibility": sol.get("primal infeasibility"),
        "dual_infeasibility": sol.get("dual infeasibility"),
        "gap": sol.get("gap"),
        "relative_gap": sol.get("relative gap"),
        "iterations": sol.get("iterations"),
    }
    raw = sol["status"]
    z = None if sol["x"] is None else np.array(sol["x"]).ravel()
    if raw == "optimal":
        status = SolveStatus.OPTIMAL
    elif raw == "primal infeasible":
        status = SolveStatus.INFEASIBLE
    elif raw == "dual infeasible":
        status = SolveStatus.UNBOUNDED
    else:
        pi = residuals["primal_infeasibility"]
        close = z is not None and pi is not None and pi < 1e-6
        status = SolveStatus.NEAR_OPTIMAL if close else SolveStatus.NUMERICAL_FAILURE
    obj = float(std.c @ z) if z is not None else np.nan
    return ConicResult(status, z, obj, residuals, "cvxopt")


def _solve_cvxpy(std: StandardForm, opts: SolverOptions) -> ConicResult:
    import cvxpy as cp

    z = cp.Variable(std.n_var)
    cons = []
    if std.A.shape[0]:
        cons.append(std.A @ z == std.b)
    n_l = std.dims["l"]
    if n_l:
        cons.append(std.h[:n_l] - std.G[:n_l] @ z >= 0)
    row = n_l
    for s in std.dims["s"]:
        S = cp.Variable((s, s), PSD=True)
        blk = slice(row, row + s * s)
        cons.append(cp.vec(S, order="C") == std.h[blk] - std.G[blk] @ z)
        row += s * s
    prob = cp.Problem(cp.Minimize(std.c @ z), cons)
    try:
        prob.solve(solver=opts.cvxpy_solver, verbose=opts.verbose)
    except cp.error.SolverError as exc:
        raise SolverError(f"{opts.cvxpy_solver} failed: {exc}") from exc
    mapping = {
        cp.OPTIMAL: SolveStatus.OPTIMAL,
        cp.OPTIMAL_INACCURATE: SolveStatus.NEAR_OPTIMAL,
        cp.INFEASIBLE: SolveStatus.INFEASIBLE,
        cp.INFEASIBLE_INACCURATE: SolveStatus.INFEASIBLE,
        cp.UNBOUNDED: SolveStatus.UNBOUNDED,
        cp.UNBOUNDED_INACCURATE: SolveStatus.UNBOUNDED,
    }
    status = mapping.get(prob.status, SolveStatus.NUMERICAL_FAILURE)
    zv = None if z.value is None else np.asarray(z.value).ravel()
    stats = prob.solver_stats
    residuals = {"iterations": getattr(stats, "num_iters", None), "raw_status": prob.status}
    obj = float(std.c @ zv) if zv is not None else np.nan
    return ConicResult(status, zv, obj, residuals, f"cvxpy/{opts.cvxpy_solver}")


BACKENDS: Dict[str, Callable[[StandardForm, SolverOptions], ConicResult]] = {
    "cvxopt": _solve_cvxopt,
    "cvxpy": _solve_cvxpy,
}


def solve_program(prog: ConicProgram, opts: Optional[SolverOptions] = None) -> ConicResult:
    opts = opts or SolverOptions()
    try:
        backend = BACKENDS[opts.backend]
    except KeyError:
        raise ValueError(f"unknown backend {opts.backend!r}; available: {sorted(BACKENDS)}") from None
    std = prog.to_standard_form()
    log.debug("solving: %d variables, %d equalities, %d PSD blocks %s",
              std.n_var, std.A.shape[0], len(std.dims["s"]), std.dims["s"])
    return backend(std, opts)
