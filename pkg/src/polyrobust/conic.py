"""Solver-agnostic conic programs on top of cvxpy.

Every SDP, SOCP and LP of the package is assembled as a :class:`ConicProgram`:
named variable blocks (scalars, vectors, symmetric matrices), constraints
tagged with the cone they live in, and a linear objective. :func:`solve` hands
the program to a conic backend and independently re-verifies the returned
point against every declared constraint before reporting ``optimal``.

Symmetric matrix blocks are reported in packed form (:func:`svec`), where the
off-diagonal entries carry a factor ``sqrt(2)`` so that the Euclidean inner
product of packed vectors equals the trace inner product of the matrices.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import DimensionError, DomainError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
NUMERICAL_FAILURE = "numerical-failure"

DEFAULT_TOL = 1e-8
DEFAULT_SOLVER = "CLARABEL"

_SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# symmetric matrix helpers
# ---------------------------------------------------------------------------

def svec_size(k):
    return k * (k + 1) // 2


def svec(X):
    """Pack a symmetric matrix into its scaled upper triangle (row major)."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] != X.shape[1]:
        raise DimensionError(f"svec expects a square matrix, got shape {X.shape}")
    iu = np.triu_indices(X.shape[0])
    scale = np.where(iu[0] == iu[1], 1.0, _SQRT2)
    return X[iu] * scale


def smat(v):
    """Inverse of :func:`svec`."""
    v = np.asarray(v, dtype=float).ravel()
    k = int(round((math.sqrt(8 * v.size + 1) - 1) / 2))
    if svec_size(k) != v.size:
        raise DimensionError(f"length {v.size} is not a triangular number")
    iu = np.triu_indices(k)
    scale = np.where(iu[0] == iu[1], 1.0, 1.0 / _SQRT2)
    X = np.zeros((k, k))
    X[iu] = v * scale
    return X + np.triu(X, 1).T


def sym(M):
    M = np.asarray(M, dtype=float)
    return 0.5 * (M + M.T)


def psd_check(M, tol=1e-9):
    """Return True iff ``M`` is positive semidefinite up to a relative slack.

    The test is ``lambda_min(M) >= -tol * (1 + ||M||_2)``.

    Raises
    ------
    DimensionError
        If ``M`` is not square.
    DomainError
        If ``M`` is not symmetric within the same relative slack.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionError(f"psd_check expects a square matrix, got {M.shape}")
    if M.size == 0:
        return True
    norm = np.linalg.norm(M, 2)
    if np.max(np.abs(M - M.T)) > max(tol, 1e-12) * (1.0 + norm):
        raise DomainError("psd_check: matrix is not symmetric")
    lmin = np.linalg.eigvalsh(sym(M))[0]
    return bool(lmin >= -tol * (1.0 + norm))


def min_eig(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(sym(M))[0])


def inv_sqrt(M, floor=1e-12):
    """Inverse square root of a symmetric positive (semi)definite matrix.

    Eigenvalues below ``floor`` are raised to ``floor`` before inversion.

    Raises
    ------
    DomainError
        If ``M`` has an eigenvalue below ``-floor`` or ``floor <= 0``.
    """
    if floor <= 0:
        raise DomainError("inv_sqrt: floor must be positive")
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"inv_sqrt expects a square matrix, got {M.shape}")
    w, V = np.linalg.eigh(sym(M))
    if w.size and w[0] < -floor:
        raise DomainError(f"inv_sqrt: matrix is not PSD (lambda_min={w[0]:.3e})")
    w = np.maximum(w, floor)
    return (V / np.sqrt(w)) @ V.T


def psd_factor(M, rtol=1e-12):
    """Return ``F`` with ``F.T @ F == M`` keeping only numerically nonzero modes."""
    w, V = np.linalg.eigh(sym(M))
    keep = w > rtol * max(w[-1], 0.0) if w.size else np.zeros(0, bool)
    return (V[:, keep] * np.sqrt(w[keep])).T


def orth_basis(A, rtol=1e-10):
    """Orthonormal basis of the column space of ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros((A.shape[0], 0))
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((A.shape[0], 0))
    return U[:, s > rtol * s[0]]


# ---------------------------------------------------------------------------
# program representation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    name: str
    kind: str  # scalar | vector | sym
    dim: int
    attr: str  # "" | nonneg | psd
    var: cp.Variable = field(repr=False, compare=False)


@dataclass(frozen=True)
class Constraint:
    name: str
    cone: str  # zero | nonneg | soc | rsoc | psd
    exprs: tuple = field(repr=False, compare=False)
    shape: tuple = ()
    refs: tuple = ()


class ConicProgram:
    """Mutable builder for a conic program.

    Variables are declared through :meth:`scalar`, :meth:`vector` and
    :meth:`symmetric`; constraints through :meth:`equal`, :meth:`leq`,
    :meth:`soc`, :meth:`rsoc` and :meth:`psd`. Every expression handed to a
    constraint may only reference declared blocks and parameters.
    """

    def __init__(self, name="program"):
        self.name = name
        self.blocks = {}
        self.params = {}
        self.constraints = []
        self.sense = None
        self.objective = None
        self._var_ids = {}
        self._param_ids = set()
        self._problem = None

    # -- declarations ------------------------------------------------------
    def _declare(self, name, kind, dim, attr, var):
        if name in self.blocks or name in self.params:
            raise DimensionError(f"duplicate block name {name!r}")
        self.blocks[name] = Block(name, kind, dim, attr, var)
        self._var_ids[var.id] = name
        self._problem = None
        return var

    def scalar(self, name, nonneg=False):
        var = cp.Variable(nonneg=nonneg, name=name)
        return self._declare(name, "scalar", 1, "nonneg" if nonneg else "", var)

    def vector(self, name, n, nonneg=False):
        if n < 1:
            raise DimensionError(f"vector block {name!r} needs positive length")
        var = cp.Variable(n, nonneg=nonneg, name=name)
        return self._declare(name, "vector", n, "nonneg" if nonneg else "", var)

    def symmetric(self, name, k, psd=False):
        if k < 1:
            raise DimensionError(f"symmetric block {name!r} needs positive order")
        if psd:
            var = cp.Variable((k, k), PSD=True, name=name)
        else:
            var = cp.Variable((k, k), symmetric=True, name=name)
        return self._declare(name, "sym", k, "psd" if psd else "", var)

    def parameter(self, name, shape, value=None):
        if name in self.blocks or name in self.params:
            raise DimensionError(f"duplicate parameter name {name!r}")
        par = cp.Parameter(shape, name=name, value=value)
        self.params[name] = par
        self._param_ids.add(par.id)
        self._problem = None
        return par

    # -- constraints -------------------------------------------------------
    def _refs(self, exprs):
        refs = set()
        for e in exprs:
            if not isinstance(e, cp.Expression):
                continue
            for v in e.variables():
                if v.id not in self._var_ids:
                    raise DimensionError(
                        f"expression references undeclared variable {v.name()!r}")
                refs.add(self._var_ids[v.id])
            for p in e.parameters():
                if p.id not in self._param_ids:
                    raise DimensionError(
                        f"expression references undeclared parameter {p.name()!r}")
        return tuple(sorted(refs))

    def _add(self, name, cone, exprs, build):
        name = name or f"c{len(self.constraints)}"
        refs = self._refs(exprs)
        try:
            cons = build()
        except ValueError as exc:
            raise DimensionError(f"constraint {name!r}: {exc}") from exc
        shape = tuple(getattr(exprs[0], "shape", ()))
        self.constraints.append(Constraint(name, cone, tuple(exprs), shape, refs))
        self._cvx_constraints.extend(cons)
        self._problem = None

    @property
    def _cvx_constraints(self):
        if not hasattr(self, "_cons_list"):
            self._cons_list = []
        return self._cons_list

    def equal(self, lhs, rhs=0.0, name=None):
        """Affine equality ``lhs == rhs``."""
        lhs = cp.Expression.cast_to_const(lhs) if not isinstance(lhs, cp.Expression) else lhs
        rhs = cp.Expression.cast_to_const(rhs) if not isinstance(rhs, cp.Expression) else rhs
        self._add(name, "zero", (lhs, rhs), lambda: [lhs == rhs])

    def leq(self, lhs, rhs, name=None):
        """Componentwise ``lhs <= rhs`` (convex ``lhs``, concave ``rhs``)."""
        lhs = cp.Expression.cast_to_const(lhs) if not isinstance(lhs, cp.Expression) else lhs
        rhs = cp.Expression.cast_to_const(rhs) if not isinstance(rhs, cp.Expression) else rhs
        self._add(name, "nonneg", (lhs, rhs), lambda: [lhs <= rhs])

    def soc(self, t, x, name=None):
        """Second-order cone ``||x||_2 <= t``."""
        t = cp.Expression.cast_to_const(t) if not isinstance(t, cp.Expression) else t
        x = cp.Expression.cast_to_const(x) if not isinstance(x, cp.Expression) else x
        self._add(name, "soc", (t, x), lambda: [cp.SOC(cp.reshape(t, (), order="F"),
                                                       cp.vec(x, order="F"))])

    def rsoc(self, x, y, z, name=None):
        """Rotated second-order cone ``||z||_2^2 <= x * y`` with ``x, y >= 0``."""
        x = cp.Expression.cast_to_const(x) if not isinstance(x, cp.Expression) else x
        y = cp.Expression.cast_to_const(y) if not isinstance(y, cp.Expression) else y
        z = cp.Expression.cast_to_const(z) if not isinstance(z, cp.Expression) else z

        def build():
            xs = cp.reshape(x, (), order="F")
            ys = cp.reshape(y, (), order="F")
            stacked = cp.hstack([2 * cp.vec(z, order="F"), cp.reshape(xs - ys, (1,), order="F")])
            return [cp.SOC(xs + ys, stacked)]

        self._add(name, "rsoc", (x, y, z), build)

    def psd(self, M, name=None):
        """Linear matrix inequality ``M >= 0`` for a symmetric expression."""
        M = cp.Expression.cast_to_const(M) if not isinstance(M, cp.Expression) else M
        if len(M.shape) != 2 or M.shape[0] != M.shape[1]:
            raise DimensionError(f"psd constraint needs a square expression, got {M.shape}")
        self._add(name, "psd", (M,), lambda: [cp.PSD(0.5 * (M + M.T))])

    # -- objective ---------------------------------------------------------
    def minimize(self, expr):
        self._refs((expr,))
        self.sense, self.objective = "min", expr
        self._problem = None

    def maximize(self, expr):
        self._refs((expr,))
        self.sense, self.objective = "max", expr
        self._problem = None

    # -- backend -----------------------------------------------------------
    def problem(self):
        if self.objective is None:
            raise DimensionError(f"program {self.name!r} has no objective")
        if self._problem is None:
            sense = cp.Minimize if self.sense == "min" else cp.Maximize
            obj = sense(self.objective)
            self._problem = cp.Problem(obj, list(self._cvx_constraints))
        return self._problem

    def dump(self):
        """Deterministic text rendering, one declaration or constraint per line."""
        lines = [f"program {self.name}", f"sense {self.sense}"]
        for name in sorted(self.blocks):
            b = self.blocks[name]
            lines.append(f"var {name} {b.kind} {b.dim} {b.attr or '-'}")
        for name in sorted(self.params):
            lines.append(f"param {name} {tuple(self.params[name].shape)}")
        for i, c in enumerate(self.constraints):
            lines.append(f"con {i} {c.name} {c.cone} shape={c.shape} vars={','.join(c.refs)}")
        obj_refs = self._refs((self.objective,)) if self.objective is not None else ()
        lines.append(f"obj vars={','.join(obj_refs)}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SolveResult:
    """Outcome of :func:`solve`.

    ``values`` maps block names to numpy arrays; symmetric blocks are stored
    packed (see :func:`svec`) and unpacked by ``result[name]``.
    """

    status: str
    values: dict
    objective: float
    max_eq_violation: float
    min_cone_margin: float
    backend_status: str = ""
    solve_time: float = 0.0
    kinds: dict = field(default_factory=dict, repr=False)
    tol: float = DEFAULT_TOL

    @property
    def ok(self):
        return self.status == OPTIMAL

    def __getitem__(self, name):
        v = self.values[name]
        if self.kinds.get(name) == "sym":
            return smat(v)
        if self.kinds.get(name) == "scalar":
            return float(np.asarray(v).ravel()[0])
        return v


def _val(e):
    v = e.value
    return np.zeros(e.shape) if v is None else np.asarray(v, dtype=float)


def _constraint_residuals(program):
    """Independent re-evaluation of every constraint at the current point.

    Returns (max relative equality violation, min relative cone margin).
    """
    max_eq = 0.0
    margin = math.inf
    for c in program.constraints:
        if c.cone == "zero":
            lhs, rhs = (_val(e) for e in c.exprs)
            scale = 1.0 + max(np.max(np.abs(lhs), initial=0.0), np.max(np.abs(rhs), initial=0.0))
            max_eq = max(max_eq, float(np.max(np.abs(lhs - rhs), initial=0.0)) / scale)
        elif c.cone == "nonneg":
            lhs, rhs = (_val(e) for e in c.exprs)
            lhs, rhs = np.broadcast_arrays(lhs, rhs)
            scale = 1.0 + np.maximum(np.abs(lhs), np.abs(rhs))
            margin = min(margin, float(np.min((rhs - lhs) / scale, initial=math.inf)))
        elif c.cone == "soc":
            t, x = (_val(e) for e in c.exprs)
            t = float(np.ravel(t)[0])
            margin = min(margin, (t - np.linalg.norm(x)) / (1.0 + abs(t)))
        elif c.cone == "rsoc":
            x, y, z = (_val(e) for e in c.exprs)
            x, y = float(np.ravel(x)[0]), float(np.ravel(y)[0])
            lhs = math.hypot(2 * np.linalg.norm(z), x - y)
            margin = min(margin, (x + y - lhs) / (1.0 + abs(x + y)))
        elif c.cone == "psd":
            M = sym(_val(c.exprs[0]))
            norm = np.linalg.norm(M, 2) if M.size else 0.0
            margin = min(margin, min_eig(M) / (1.0 + norm))
    for b in program.blocks.values():
        if not b.attr:
            continue
        v = _val(b.var)
        scale = 1.0 + float(np.max(np.abs(v), initial=0.0))
        if b.attr == "nonneg":
            margin = min(margin, float(np.min(v, initial=math.inf)) / scale)
        else:
            margin = min(margin, min_eig(v) / (1.0 + np.linalg.norm(sym(v), 2)))
    return max_eq, (margin if margin != math.inf else 0.0)


def _solver_opts(solver, tol, max_iters):
    if solver == "CLARABEL":
        return dict(tol_gap_abs=tol, tol_gap_rel=tol, tol_feas=tol, tol_ktratio=max(tol, 1e-8),
                    max_iter=max_iters)
    if solver == "SCS":
        return dict(eps_abs=tol, eps_rel=tol, max_iters=max(max_iters, 20000))
    if solver == "CVXOPT":
        return dict(abstol=tol, reltol=tol, feastol=tol, max_iters=max_iters)
    return {}


def solve(program, tol=DEFAULT_TOL, solver=None, params=None, max_iters=400, verify_factor=10.0):
    """Solve ``program`` and re-verify the returned point.

    Parameters
    ----------
    program : ConicProgram
        Assembled program.
    tol : float
        Feasibility and duality-gap tolerance passed to the backend.
    solver : str, optional
        cvxpy solver name, defaults to Clarabel.
    params : dict, optional
        Values for declared parameters.
    verify_factor : float
        The point is reported ``optimal`` only when the relative equality
        residual and the negative cone margins stay below ``verify_factor*tol``.

    Returns
    -------
    SolveResult
    """
    if tol <= 0:
        raise DomainError("solve: tol must be positive")
    solver = solver or DEFAULT_SOLVER
    if params:
        for k, v in params.items():
            if k not in program.params:
                raise DimensionError(f"unknown parameter {k!r}")
            program.params[k].value = np.asarray(v, dtype=float).reshape(program.params[k].shape)
    prob = program.problem()
    t0 = time.perf_counter()
    try:
        with warnings.catch_warnings():
            # inaccurate solutions are caught by the residual check below
            warnings.simplefilter("ignore", UserWarning)
            prob.solve(solver=solver, **_solver_opts(solver, tol, max_iters))
        backend = prob.status
    except cp.error.SolverError as exc:
        backend = f"solver_error: {exc}"
    elapsed = time.perf_counter() - t0

    kinds = {n: b.kind for n, b in program.blocks.items()}
    if backend in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolveResult(INFEASIBLE, {}, math.nan, math.nan, math.nan, backend, elapsed, kinds)
    if backend in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return SolveResult(UNBOUNDED, {}, math.nan, math.nan, math.nan, backend, elapsed, kinds)
    if backend not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SolveResult(NUMERICAL_FAILURE, {}, math.nan, math.nan, math.nan, backend, elapsed,
                           kinds)

    values = {}
    for name, b in program.blocks.items():
        v = _val(b.var)
        values[name] = svec(v) if b.kind == "sym" else (v.reshape(()) if b.kind == "scalar" else v)
    max_eq, margin = _constraint_residuals(program)
    bound = verify_factor * tol
    status = OPTIMAL if (max_eq <= bound and margin >= -bound) else NUMERICAL_FAILURE
    return SolveResult(status, values, float(prob.value), max_eq, margin, backend, elapsed, kinds,
                       tol)


def solve_relaxing(program, tol=DEFAULT_TOL, relax=(1.0, 100.0), **kwargs):
    """Solve at ``tol``, retrying at ``tol * r`` for each further factor ``r``.

    Meant for programs whose solution is post-processed into an independently
    verified certificate, so a looser backend tolerance costs accuracy of the
    bound but never soundness. Returns the first verified result, else the last
    one; its ``tol`` field records the tolerance that was used.
    """
    res = None
    for r in relax:
        res = solve(program, tol=tol * r, **kwargs)
        if res.ok:
            break
    return res
