"""Observation model, nuisance specifications and contrast matrices.

Observations are ``omega = A x + N nu + xi`` with ``x`` in a basic ellitope,
``nu`` an adversarial nuisance and ``xi ~ N(0, sigma^2 I)``. The quantity to
recover is ``B x`` and the error is measured in the norm whose unit-ball polar
is the basic ellitope ``Bstar``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .ellitope import BasicEllitope
from .errors import DimensionError, DomainError, MembershipError


def varkappa(sigma, epsilon, count):
    """Gaussian union-bound threshold ``sigma * sqrt(2 ln(2 count / epsilon))``.

    ``count`` is the number of linear forms the threshold is applied to.
    Values ``epsilon`` up to ``2 * count`` are accepted so that the boundary
    case evaluates to 0.
    """
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    if int(count) != count or count < 1:
        raise DomainError("count must be a positive integer")
    if not 0 < epsilon <= 2 * count:
        raise DomainError("epsilon must lie in (0, 2*count]")
    return sigma * math.sqrt(2.0 * math.log(2.0 * count / epsilon))


# ---------------------------------------------------------------------------
# nuisance specifications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoNuisance:
    kind = "none"

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class EllitopicNuisance:
    """``nu`` ranges over a basic ellitope in ``R^n``."""

    set: BasicEllitope
    kind = "ellitopic"

    def to_dict(self):
        return {"kind": self.kind, "set": self.set.to_dict()}


@dataclass(frozen=True)
class CoEllitopic:
    """The contamination set ``N nu`` is the polar of ``Nstar``.

    ``Nstar`` is then the unit ball of the seminorm
    ``pi(h) = max_nu h' N nu``. The contamination is parametrized directly in
    observation space, so the instance must carry ``N = I_m``.
    """

    Nstar: BasicEllitope
    kind = "coellitopic"

    def to_dict(self):
        return {"kind": self.kind, "Nstar": self.Nstar.to_dict()}


@dataclass(frozen=True)
class Sparse:
    """``nu`` has at most ``s`` nonzero entries."""

    s: int
    kind = "sparse"

    def __post_init__(self):
        if int(self.s) != self.s or self.s < 1:
            raise DomainError("sparsity level must be a positive integer")

    def to_dict(self):
        return {"kind": self.kind, "s": int(self.s)}


def nuisance_from_dict(d):
    kind = d["kind"]
    if kind == "none":
        return NoNuisance()
    if kind == "ellitopic":
        return EllitopicNuisance(BasicEllitope.from_dict(d["set"]))
    if kind == "coellitopic":
        return CoEllitopic(BasicEllitope.from_dict(d["Nstar"]))
    if kind == "sparse":
        return Sparse(int(d["s"]))
    raise DomainError(f"unknown nuisance kind {kind!r}")


# ---------------------------------------------------------------------------
# problem instance
# ---------------------------------------------------------------------------

def _mat(M, name):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2:
        raise DimensionError(f"{name} must be a matrix")
    return M


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """Matrices, sets and noise parameters of one estimation problem."""

    A: np.ndarray
    B: np.ndarray
    X: BasicEllitope
    Bstar: BasicEllitope
    nuisance: object = field(default_factory=NoNuisance)
    N: np.ndarray = None
    sigma: float = 0.1
    epsilon: float = 0.05

    def __post_init__(self):
        A = _mat(self.A, "A")
        B = _mat(self.B, "B")
        m, p = A.shape
        N = np.zeros((m, 0)) if self.N is None else _mat(self.N, "N")
        if B.shape[1] != p:
            raise DimensionError(f"A has {p} columns but B has {B.shape[1]}")
        if N.shape[0] != m:
            raise DimensionError(f"A has {m} rows but N has {N.shape[0]}")
        if self.X.dim != p:
            raise DimensionError(f"signal set lives in R^{self.X.dim}, expected R^{p}")
        if self.Bstar.dim != B.shape[0]:
            raise DimensionError(f"norm set lives in R^{self.Bstar.dim}, expected R^{B.shape[0]}")
        nz = self.nuisance
        if isinstance(nz, NoNuisance) and N.shape[1] and np.any(N):
            raise DimensionError("a nonzero N needs a nuisance specification")
        if isinstance(nz, EllitopicNuisance) and nz.set.dim != N.shape[1]:
            raise DimensionError("nuisance ellitope dimension must equal the column count of N")
        if isinstance(nz, CoEllitopic):
            if nz.Nstar.dim != m:
                raise DimensionError("co-ellitopic Nstar must live in R^m")
            if self.N is None or N.shape[1] == 0:
                N = np.eye(m)
            elif N.shape != (m, m) or not np.allclose(N, np.eye(m)):
                raise DimensionError("co-ellitopic nuisance is parametrized with N = I_m")
        if isinstance(nz, Sparse) and nz.s > N.shape[1]:
            raise DimensionError(f"sparsity {nz.s} exceeds nuisance dimension {N.shape[1]}")
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not 0 < self.epsilon < 1:
            raise DomainError("epsilon must lie in (0, 1)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "N", N)

    @property
    def m(self):
        return self.A.shape[0]

    @property
    def p(self):
        return self.A.shape[1]

    @property
    def q(self):
        return self.B.shape[0]

    @property
    def n(self):
        return self.N.shape[1]

    def with_(self, **changes):
        d = dict(A=self.A, B=self.B, X=self.X, Bstar=self.Bstar, nuisance=self.nuisance,
                 N=self.N, sigma=self.sigma, epsilon=self.epsilon)
        d.update(changes)
        return ProblemInstance(**d)

    def to_dict(self):
        return {
            "A": self.A.tolist(), "B": self.B.tolist(), "N": self.N.tolist(),
            "X": self.X.to_dict(), "Bstar": self.Bstar.to_dict(),
            "nuisance": self.nuisance.to_dict(),
            "sigma": self.sigma, "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, d):
        N = np.asarray(d.get("N", []), dtype=float)
        A = np.asarray(d["A"], dtype=float)
        if N.size == 0:
            N = np.zeros((A.shape[0], 0))
        return cls(A=A, B=np.asarray(d["B"], dtype=float),
                   X=BasicEllitope.from_dict(d["X"]), Bstar=BasicEllitope.from_dict(d["Bstar"]),
                   nuisance=nuisance_from_dict(d["nuisance"]), N=N,
                   sigma=float(d["sigma"]), epsilon=float(d["epsilon"]))

    @cached_property
    def digest(self):
        """Stable hash identifying the instance."""
        h = hashlib.sha256()
        for M in (self.A, self.B, self.N):
            h.update(np.ascontiguousarray(M, dtype=float).tobytes())
            h.update(repr(M.shape).encode())
        for E in (self.X, self.Bstar):
            for T in E.forms:
                h.update(np.ascontiguousarray(T).tobytes())
            h.update(json.dumps(E.tset.to_dict(), sort_keys=True).encode())
        nz = self.nuisance
        h.update(nz.kind.encode())
        if isinstance(nz, Sparse):
            h.update(str(nz.s).encode())
        elif isinstance(nz, EllitopicNuisance):
            h.update(json.dumps(nz.set.to_dict(), sort_keys=True).encode())
        elif isinstance(nz, CoEllitopic):
            h.update(json.dumps(nz.Nstar.to_dict(), sort_keys=True).encode())
        h.update(repr((float(self.sigma), float(self.epsilon))).encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# contrast matrices
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ContrastMatrix:
    """Columns ``g_i`` of a contrast matrix with optional per-column role tags.

    ``threshold`` is the confidence threshold applied to the columns by the
    estimator (``|g' xi| <= threshold * ||g||_2``); when ``None`` the estimator
    computes it from the column count.
    """

    matrix: np.ndarray
    roles: tuple = None
    threshold: float = None

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.ndim == 1:
            M = M[:, None]
        if M.ndim != 2:
            raise DimensionError("contrast must be a matrix")
        roles = self.roles
        if roles is None:
            roles = ("g",) * M.shape[1]
        elif isinstance(roles, str):
            roles = (roles,) * M.shape[1]
        roles = tuple(roles)
        if len(roles) != M.shape[1]:
            raise DimensionError("one role tag per column is required")
        if self.threshold is not None and not self.threshold >= 0:
            raise DomainError("threshold must be nonnegative")
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "roles", roles)

    @classmethod
    def from_columns(cls, columns, m, role="g", threshold=None, rtol=1e-12):
        """Build a contrast dropping (numerically) zero columns."""
        cols = [np.asarray(c, dtype=float).ravel() for c in columns]
        if not cols:
            return cls(np.zeros((m, 0)), (), threshold)
        M = np.column_stack(cols)
        norms = np.linalg.norm(M, axis=0)
        keep = norms > rtol * max(norms.max(), 1e-300)
        return cls(M[:, keep], (role,) * int(keep.sum()), threshold)

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def ncols(self):
        return self.matrix.shape[1]

    @property
    def column_norms(self):
        return np.linalg.norm(self.matrix, axis=0)

    @property
    def max_norm(self):
        return float(self.column_norms.max()) if self.ncols else 0.0

    def columns(self):
        return [self.matrix[:, i] for i in range(self.ncols)]

    def block(self, role):
        idx = [i for i, r in enumerate(self.roles) if r == role]
        return ContrastMatrix(self.matrix[:, idx], (role,) * len(idx), self.threshold)

    def with_threshold(self, threshold):
        return ContrastMatrix(self.matrix, self.roles, threshold)

    def scaled(self, c):
        return ContrastMatrix(c * self.matrix, self.roles, self.threshold)

    def drop_zero(self, rtol=1e-12):
        norms = self.column_norms
        if not self.ncols:
            return self
        keep = norms > rtol * max(norms.max(), 1e-300)
        return ContrastMatrix(self.matrix[:, keep],
                              tuple(r for r, k in zip(self.roles, keep) if k), self.threshold)

    @staticmethod
    def concat(parts, threshold=None):
        parts = [p for p in parts if p.ncols]
        if not parts:
            raise DimensionError("nothing to concatenate")
        m = parts[0].m
        if any(p.m != m for p in parts):
            raise DimensionError("contrast blocks must share the row dimension")
        return ContrastMatrix(np.hstack([p.matrix for p in parts]),
                              sum((p.roles for p in parts), ()), threshold)

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "roles": list(self.roles),
                "threshold": self.threshold, "shape": list(self.matrix.shape)}

    @classmethod
    def from_dict(cls, d):
        M = np.asarray(d["matrix"], dtype=float).reshape(d.get("shape", np.shape(d["matrix"])))
        return cls(M, tuple(d["roles"]), d.get("threshold"))


def as_matrix(G):
    return G.matrix if isinstance(G, ContrastMatrix) else np.atleast_2d(np.asarray(G, float))


# ---------------------------------------------------------------------------
# sampling and confidence sets
# ---------------------------------------------------------------------------

def nuisance_member(inst, nu, tol=1e-7):
    """Whether ``nu`` is admissible for the instance's nuisance specification."""
    nz = inst.nuisance
    nu = np.asarray(nu, dtype=float).ravel()
    if isinstance(nz, NoNuisance):
        return not np.any(nu)
    if nu.size != inst.n:
        raise DimensionError(f"nuisance vector of length {nu.size}, expected {inst.n}")
    if isinstance(nz, Sparse):
        return int(np.count_nonzero(nu)) <= nz.s
    if isinstance(nz, EllitopicNuisance):
        return nz.set.contains(nu, tol)
    if isinstance(nz, CoEllitopic):
        return nz.Nstar.max_linear(nu) <= 1.0 + tol
    raise DomainError("unknown nuisance specification")


def sample_observation(inst, x_star, nu_star, seed, checked=False, tol=1e-7):
    """``A x_star + N nu_star + xi`` with ``xi ~ N(0, sigma^2 I_m)``.

    In checked mode ``x_star`` must lie in the signal set and ``nu_star`` must
    be admissible; otherwise a :class:`MembershipError` is raised.
    """
    x_star = np.asarray(x_star, dtype=float).ravel()
    if x_star.size != inst.p:
        raise DimensionError("x_star has the wrong length")
    nu_star = np.zeros(inst.n) if nu_star is None else np.asarray(nu_star, dtype=float).ravel()
    if nu_star.size != inst.n:
        raise DimensionError("nu_star has the wrong length")
    if checked:
        if not inst.X.contains(x_star, tol):
            raise MembershipError("x_star is outside the signal set")
        if not nuisance_member(inst, nu_star, tol):
            raise MembershipError("nu_star is not an admissible nuisance")
    rng = np.random.default_rng(seed)
    xi = inst.sigma * rng.standard_normal(inst.m)
    return inst.A @ x_star + inst.N @ nu_star + xi


def in_confidence_set(G, xi, varkappa_value):
    """Whether ``|g_i' xi| <= varkappa * ||g_i||_2`` for every column."""
    G = as_matrix(G)
    xi = np.asarray(xi, dtype=float).ravel()
    if G.shape[0] != xi.size:
        raise DimensionError("noise vector and contrast have different row counts")
    if G.shape[1] == 0:
        return True
    lhs = np.abs(G.T @ xi)
    rhs = varkappa_value * np.linalg.norm(G, axis=0)
    return bool(np.all(lhs <= rhs))


def nuisance_seminorm(spec, N, h):
    """``pi(h) = sup{h' N u : u admissible}`` for a bounded nuisance."""
    h = np.asarray(h, dtype=float).ravel()
    if isinstance(spec, Sparse):
        raise DomainError("the seminorm is unbounded for sparse nuisance")
    if isinstance(spec, NoNuisance):
        return 0.0
    if isinstance(spec, EllitopicNuisance):
        N = np.asarray(N, dtype=float)
        if N.shape[0] != h.size:
            raise DimensionError("h and N have different row counts")
        return spec.set.max_linear(N.T @ h)
    if isinstance(spec, CoEllitopic):
        if spec.Nstar.dim != h.size:
            raise DimensionError("h has the wrong length")
        return spec.Nstar.gauge(h)
    raise DomainError("unknown nuisance specification")
