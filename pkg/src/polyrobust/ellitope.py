"""Basic ellitopes, their parameter sets and the conic constraints they induce.

A basic ellitope is ``{x : exists t in T, x' T_l x <= t_l for all l}`` where
the ``T_l`` are PSD matrices with a positive definite sum and ``T`` is a
monotone convex compact subset of the nonnegative orthant. The parameter set
``T`` is one of :class:`Box`, :class:`ScaledPBall` or a :class:`Product` of
those, which keeps support functions and gauges in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import cvxpy as cp
import numpy as np

from .conic import ConicProgram, psd_check, psd_factor, solve, sym
from .errors import DimensionError, DomainError, MembershipError, SolverError


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------

def _as_dual(dual, size):
    d = np.asarray(dual, dtype=float).ravel()
    if d.size != size:
        raise DimensionError(f"expected a vector of length {size}, got {d.size}")
    if np.any(d < 0):
        raise DomainError("support function needs a nonnegative argument")
    return d


class TSet:
    """Monotone convex compact subset of the nonnegative orthant."""

    size: int

    def support(self, dual):
        raise NotImplementedError

    def gauge(self, y):
        """Minkowski functional ``min{tau >= 0 : y in tau * T}`` for ``y >= 0``."""
        raise NotImplementedError

    def contains(self, y, tol=1e-9):
        raise NotImplementedError

    def support_expr(self, lam):
        """cvxpy expression of the support function at a nonnegative ``lam``."""
        raise NotImplementedError

    def scaled_membership(self, y, scale):
        """cvxpy constraints stating ``y in scale * T`` for ``y >= 0``."""
        raise NotImplementedError

    def factors(self):
        return [self]

    def to_dict(self):
        raise NotImplementedError

    @staticmethod
    def from_dict(d):
        kind = d["kind"]
        if kind == "box":
            return Box(d["upper"])
        if kind == "pball":
            return ScaledPBall(d["p"], d["radius"], d["size"])
        if kind == "product":
            return Product([TSet.from_dict(f) for f in d["factors"]])
        raise DomainError(f"unknown tset kind {kind!r}")


@dataclass(frozen=True, eq=False)
class Box(TSet):
    """``{t : 0 <= t <= upper}``."""

    upper: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.upper, dtype=float).ravel()
        if u.size == 0 or np.any(u <= 0) or not np.all(np.isfinite(u)):
            raise DomainError("Box upper bounds must be positive and finite")
        object.__setattr__(self, "upper", u)

    @property
    def size(self):
        return self.upper.size

    def support(self, dual):
        return float(_as_dual(dual, self.size) @ self.upper)

    def gauge(self, y):
        y = np.asarray(y, dtype=float).ravel()
        return float(np.max(np.maximum(y, 0.0) / self.upper))

    def contains(self, y, tol=1e-9):
        y = np.asarray(y, dtype=float).ravel()
        return bool(np.all(y <= self.upper + tol) and np.all(y >= -tol))

    def support_expr(self, lam):
        return self.upper @ lam

    def scaled_membership(self, y, scale):
        return [y <= scale * self.upper]

    def to_dict(self):
        return {"kind": "box", "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class ScaledPBall(TSet):
    """``{t >= 0 : ||t||_{p/2} <= radius}`` in ``R^size`` with ``p >= 2``."""

    p: float
    radius: float
    size: int

    def __post_init__(self):
        if not self.p >= 2:
            raise DomainError("ScaledPBall needs p >= 2")
        if not self.radius > 0:
            raise DomainError("ScaledPBall radius must be positive")
        if int(self.size) < 1:
            raise DomainError("ScaledPBall size must be positive")
        object.__setattr__(self, "size", int(self.size))

    @property
    def exponent(self):
        return self.p / 2.0

    @property
    def conjugate(self):
        a = self.exponent
        return math.inf if a == 1 else (1.0 if math.isinf(a) else a / (a - 1.0))

    def support(self, dual):
        d = _as_dual(dual, self.size)
        return float(self.radius * np.linalg.norm(d, self.conjugate))

    def gauge(self, y):
        y = np.maximum(np.asarray(y, dtype=float).ravel(), 0.0)
        return float(np.linalg.norm(y, self.exponent) / self.radius)

    def contains(self, y, tol=1e-9):
        y = np.asarray(y, dtype=float).ravel()
        if np.any(y < -tol):
            return False
        return bool(np.linalg.norm(np.maximum(y, 0.0), self.exponent) <= self.radius + tol)

    def support_expr(self, lam):
        return self.radius * cp.norm(lam, self.conjugate)

    def scaled_membership(self, y, scale):
        return [cp.norm(y, self.exponent) <= scale * self.radius]

    def to_dict(self):
        return {"kind": "pball", "p": self.p, "radius": self.radius, "size": self.size}


@dataclass(frozen=True, eq=False)
class Product(TSet):
    """Cartesian product of parameter sets."""

    parts: tuple

    def __init__(self, parts):
        flat = []
        for f in parts:
            flat.extend(f.factors())
        if not flat:
            raise DomainError("Product needs at least one factor")
        object.__setattr__(self, "parts", tuple(flat))

    @property
    def size(self):
        return sum(f.size for f in self.parts)

    def factors(self):
        return list(self.parts)

    def _split(self, v):
        out, i = [], 0
        for f in self.parts:
            out.append(v[i:i + f.size])
            i += f.size
        return out

    def support(self, dual):
        d = _as_dual(dual, self.size)
        return float(sum(f.support(x) for f, x in zip(self.parts, self._split(d))))

    def gauge(self, y):
        y = np.asarray(y, dtype=float).ravel()
        return max(f.gauge(x) for f, x in zip(self.parts, self._split(y)))

    def contains(self, y, tol=1e-9):
        y = np.asarray(y, dtype=float).ravel()
        return all(f.contains(x, tol) for f, x in zip(self.parts, self._split(y)))

    def support_expr(self, lam):
        terms, i = [], 0
        for f in self.parts:
            terms.append(f.support_expr(lam[i:i + f.size]))
            i += f.size
        return cp.sum(cp.hstack(terms)) if len(terms) > 1 else terms[0]

    def scaled_membership(self, y, scale):
        cons, i = [], 0
        for f in self.parts:
            cons.extend(f.scaled_membership(y[i:i + f.size], scale))
            i += f.size
        return cons

    def to_dict(self):
        return {"kind": "product", "factors": [f.to_dict() for f in self.parts]}


def support_value(tset, dual):
    """Support function of ``tset`` at a nonnegative vector."""
    return tset.support(dual)


# ---------------------------------------------------------------------------
# ellitopes
# ---------------------------------------------------------------------------

class BasicEllitope:
    """``{x in R^k : exists t in tset, x' T_l x <= t_l}``.

    Parameters
    ----------
    forms : sequence of (k, k) arrays
        PSD matrices ``T_l`` with positive definite sum.
    tset : TSet
        Parameter set with ``tset.size == len(forms)``.
    """

    def __init__(self, forms, tset, validate=True):
        forms = [sym(np.atleast_2d(np.asarray(T, dtype=float))) for T in forms]
        if not forms:
            raise DimensionError("an ellitope needs at least one quadratic form")
        k = forms[0].shape[0]
        for T in forms:
            if T.shape != (k, k):
                raise DimensionError("all quadratic forms must share the same square shape")
        if tset.size != len(forms):
            raise DimensionError(f"tset has size {tset.size} but there are {len(forms)} forms")
        if validate:
            for T in forms:
                if not psd_check(T, 1e-9):
                    raise DomainError("quadratic forms of an ellitope must be PSD")
            if np.linalg.eigvalsh(sum(forms))[0] <= 1e-12 * max(1.0, np.linalg.norm(sum(forms), 2)):
                raise DomainError("sum of quadratic forms must be positive definite")
        self.forms = tuple(forms)
        self.tset = tset

    @property
    def dim(self):
        return self.forms[0].shape[0]

    @property
    def n_forms(self):
        return len(self.forms)

    @cached_property
    def factors(self):
        """Matrices ``F_l`` with ``F_l' F_l = T_l``."""
        return tuple(psd_factor(T) for T in self.forms)

    @cached_property
    def form_stack(self):
        return np.stack(self.forms)

    def form_values(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DimensionError(f"vector of length {x.shape[-1]} for ellitope in R^{self.dim}")
        return np.einsum("...i,lij,...j->...l", x, self.form_stack, x)

    def contains(self, x, tol=1e-9):
        return self.tset.contains(self.form_values(x), tol)

    def gauge(self, x):
        """Minkowski functional of the ellitope (a norm, as the set is symmetric)."""
        return math.sqrt(max(self.tset.gauge(self.form_values(x)), 0.0))

    # -- conic modelling --------------------------------------------------
    def constrain(self, prog, x, name, scale=1.0):
        """Add ``x in scale * E`` to a :class:`ConicProgram`.

        ``scale`` may be a float or a nonnegative cvxpy expression. For a
        :class:`Box` factor the forms are bounded directly; otherwise an
        auxiliary vector ``t`` is declared.
        """
        fixed = not isinstance(scale, cp.Expression)
        i = 0
        for j, f in enumerate(self.tset.factors()):
            Fs = self.factors[i:i + f.size]
            if isinstance(f, Box) and fixed:
                for k, (F, u) in enumerate(zip(Fs, f.upper)):
                    prog.soc(scale * math.sqrt(u), F @ x, name=f"{name}_f{i + k}")
            else:
                t = prog.vector(f"{name}_t{j}", f.size, nonneg=True)
                for k, F in enumerate(Fs):
                    if fixed:
                        prog.rsoc(scale ** 2 * t[k], 1.0, F @ x, name=f"{name}_f{i + k}")
                    else:
                        prog.rsoc(t[k], scale, F @ x, name=f"{name}_f{i + k}")
                for c, con in enumerate(f.scaled_membership(t, 1.0 if fixed else scale)):
                    prog.leq(con.args[0], con.args[1], name=f"{name}_T{j}_{c}")
            i += f.size

    def max_linear(self, c, tol=1e-8):
        """``max_{x in E} c'x`` (equal to ``max |c'x|`` by symmetry)."""
        c = np.asarray(c, dtype=float).ravel()
        if c.size != self.dim:
            raise DimensionError("linear form has wrong length")
        if not np.any(c):
            return 0.0
        closed = self._closed_form_max(c)
        if closed is not None:
            return closed
        return self.linear_maximizer().value(c, tol)

    def _closed_form_max(self, c):
        # single form with a box or ball parameter set: an ellipsoid
        if self.n_forms == 1:
            bound = self.tset.upper[0] if isinstance(self.tset, Box) else self.tset.radius
            return float(math.sqrt(bound * c @ np.linalg.solve(self.forms[0], c)))
        return None

    @cached_property
    def _maximizer(self):
        return LinearMaximizer(self)

    def linear_maximizer(self):
        return self._maximizer

    def to_dict(self):
        return {"forms": [T.tolist() for T in self.forms], "tset": self.tset.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls([np.asarray(T) for T in d["forms"]], TSet.from_dict(d["tset"]))

    def __repr__(self):
        tname = type(self.tset).__name__
        return f"BasicEllitope(dim={self.dim}, n_forms={self.n_forms}, tset={tname})"


class LinearMaximizer:
    """Compiled parametric program ``max_{x in E} c'x``."""

    def __init__(self, E):
        self.E = E
        prog = ConicProgram("max-linear")
        x = prog.vector("x", E.dim)
        self.c = prog.parameter("c", E.dim)
        E.constrain(prog, x, "x")
        prog.maximize(self.c @ x)
        self.prog = prog

    def solve(self, c, tol=1e-8):
        res = solve(self.prog, tol=tol, params={"c": c})
        if not res.ok:
            raise SolverError("linear maximization over ellitope failed", res.status)
        return res

    def value(self, c, tol=1e-8):
        return max(float(self.solve(c, tol).objective), 0.0)


@dataclass(frozen=True)
class LinearImageEllitope:
    """Image ``{M y : y in base}`` of a basic ellitope under a linear map."""

    base: BasicEllitope
    map: np.ndarray = field(repr=False)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.map, dtype=float))
        if M.shape[1] != self.base.dim:
            raise DimensionError("map column count must equal the base ellitope dimension")
        object.__setattr__(self, "map", M)

    @property
    def dim(self):
        return self.map.shape[0]

    def image(self, y):
        return self.map @ np.asarray(y, dtype=float)

    def contains(self, x, tol=1e-7):
        """Feasibility of ``x = M y`` with ``y in base`` (solved as a conic program)."""
        x = np.asarray(x, dtype=float).ravel()
        prog = ConicProgram("image-membership")
        y = prog.vector("y", self.base.dim)
        tau = prog.scalar("tau", nonneg=True)
        prog.equal(self.map @ y, x, name="image")
        self.base.constrain(prog, y, "y", scale=tau)
        prog.minimize(tau)
        res = solve(prog)
        if res.status == "infeasible":
            return False
        if not res.ok:
            raise SolverError("image membership program failed", res.status)
        return res.objective <= 1.0 + tol

    def max_linear(self, c):
        return self.base.max_linear(self.map.T @ np.asarray(c, dtype=float))


def contains(E, x, tol=1e-9):
    """Membership of ``x`` in the basic ellitope ``E``."""
    return E.contains(x, tol)


def direct_product(E1, E2):
    """``E1 x E2`` as a basic ellitope in ``R^(k1+k2)``."""
    k1, k2 = E1.dim, E2.dim
    forms = []
    for T in E1.forms:
        M = np.zeros((k1 + k2, k1 + k2))
        M[:k1, :k1] = T
        forms.append(M)
    for T in E2.forms:
        M = np.zeros((k1 + k2, k1 + k2))
        M[k1:, k1:] = T
        forms.append(M)
    return BasicEllitope(forms, Product([E1.tset, E2.tset]))


def cw_ellitope(Nstar, varkappa):
    """Unit ball of ``theta(g) = 2 max[pi(g), varkappa ||g||_2]``.

    ``pi`` is the norm whose unit ball is ``Nstar``. The result has forms
    ``4 R_j`` for the forms ``R_j`` of ``Nstar`` plus ``4 varkappa^2 I`` and
    parameter set ``R x [0, 1]``, i.e. it equals
    ``(1/2) [Nstar  intersected with  {varkappa ||w||_2 <= 1}]``.
    """
    if not varkappa > 0:
        raise DomainError("varkappa must be positive")
    m = Nstar.dim
    forms = [4.0 * R for R in Nstar.forms] + [4.0 * varkappa ** 2 * np.eye(m)]
    return BasicEllitope(forms, Product([Nstar.tset, Box([1.0])]))


# ---------------------------------------------------------------------------
# common constructions
# ---------------------------------------------------------------------------

def unit_box(n):
    """``[-1, 1]^n`` as a basic ellitope (forms ``e_l e_l'``)."""
    forms = []
    for l in range(n):
        T = np.zeros((n, n))
        T[l, l] = 1.0
        forms.append(T)
    return BasicEllitope(forms, Box(np.ones(n)))


def lp_ball(n, p, radius=1.0):
    """``{x : ||x||_p <= radius}`` for ``p >= 2`` as a basic ellitope."""
    forms = []
    for l in range(n):
        T = np.zeros((n, n))
        T[l, l] = 1.0
        forms.append(T)
    return BasicEllitope(forms, ScaledPBall(p, radius ** 2, n))


def euclidean_ball(n, radius=1.0):
    return BasicEllitope([np.eye(n)], Box([radius ** 2]))


def ellipsoid(P, radius=1.0):
    """``{x : ||P x||_2 <= radius}`` for ``P`` with trivial kernel."""
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return BasicEllitope([P.T @ P], Box([radius ** 2]))


def rank_one_box(rows, bounds):
    """``{x : |r_k' x| <= b_k}`` for the rows ``r_k`` of ``rows``."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    bounds = np.asarray(bounds, dtype=float).ravel()
    if bounds.size != rows.shape[0]:
        raise DimensionError("one bound per row is required")
    forms = [np.outer(r, r) for r in rows]
    return BasicEllitope(forms, Box(bounds ** 2))


# ---------------------------------------------------------------------------
# membership of (Theta, rho) in the cone K
# ---------------------------------------------------------------------------

def k_cone_ratio(Theta, W):
    """``min{rho : (Theta, rho) in K(W)}`` for PSD ``Theta``.

    Since the parameter set is monotone, ``(Theta, rho)`` lies in the cone iff
    the vector ``(Tr(Theta R_j))_j`` lies in ``rho * R``, i.e. iff ``rho`` is at
    least the gauge of that vector.
    """
    Theta = sym(Theta)
    y = np.array([np.sum(Theta * R) for R in W.forms])
    return W.tset.gauge(np.maximum(y, 0.0))


def in_k_cone(Theta, rho, W, tol=1e-7):
    if not psd_check(Theta, tol):
        return False
    scale = 1.0 + abs(rho)
    return bool(rho >= -tol * scale and k_cone_ratio(Theta, W) <= rho + tol * scale)


def check_member(E, x, tol, what="vector"):
    if not E.contains(x, tol):
        raise MembershipError(f"{what} does not belong to the ellitope")
