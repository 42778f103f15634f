"""Polyhedral estimates: the recovery programs themselves.

Estimators are compiled once per (instance, contrast) pair with the
observation as a parameter, so Monte-Carlo loops only pay for the solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from .conic import ConicProgram, solve
from .errors import DimensionError, DomainError, SolverError
from .model import CoEllitopic, ContrastMatrix, EllitopicNuisance, Sparse, varkappa


@dataclass(frozen=True)
class RecoveryOutput:
    x_hat: np.ndarray
    nu_hat: np.ndarray
    w_hat: np.ndarray
    feasible: bool
    objective: float


def _unit_columns(D):
    norms = np.linalg.norm(D, axis=0)
    keep = norms > 0
    return D[:, keep] / norms[keep]


def _check_omega(inst, omega):
    omega = np.asarray(omega, dtype=float).ravel()
    if omega.size != inst.m:
        raise DimensionError(f"observation of length {omega.size}, expected {inst.m}")
    return omega


class BoundedEstimator:
    """``min_{x in X, nu in N} ||G'(A x + N nu - omega)||_inf``.

    Columns are normalized to unit length; this rescales the objective but
    not the minimizer set. For co-ellitopic nuisance the contamination
    ``eta = N nu`` ranges over the polar of ``Nstar``, which is expressed as
    ``max_{w in Nstar} eta'w <= 1`` through its conic dual.
    """

    def __init__(self, inst, G, tol=1e-8):
        if isinstance(inst.nuisance, Sparse):
            raise DomainError("bounded estimate needs a bounded nuisance")
        self.inst, self.tol = inst, tol
        Gm = G.matrix if isinstance(G, ContrastMatrix) else np.asarray(G, dtype=float)
        self.U = _unit_columns(Gm)
        self.prog = None
        if self.U.shape[1] == 0:
            return
        prog = ConicProgram("bounded-estimate")
        x = prog.vector("x", inst.p)
        inst.X.constrain(prog, x, "x")
        signal = self.U.T @ inst.A @ x
        nz = inst.nuisance
        if isinstance(nz, EllitopicNuisance):
            nu = prog.vector("nu", inst.n)
            nz.set.constrain(prog, nu, "nu")
            signal = signal + self.U.T @ inst.N @ nu
        elif isinstance(nz, CoEllitopic):
            R = nz.Nstar
            nu = prog.vector("nu", inst.m)
            v = prog.scalar("v")
            chi = prog.vector("chi", R.n_forms, nonneg=True)
            S = sum(chi[j] * Rj for j, Rj in enumerate(R.forms))
            prog.psd(cp.bmat([[cp.reshape(4 * v, (1, 1), order="C"),
                               cp.reshape(nu, (1, inst.m), order="C")],
                              [cp.reshape(nu, (inst.m, 1), order="C"), S]]), name="polar_lmi")
            prog.leq(v + R.tset.support_expr(chi), 1.0, name="polar_budget")
            signal = signal + self.U.T @ nu
        t = prog.scalar("t")
        c = prog.parameter("c", self.U.shape[1], value=np.zeros(self.U.shape[1]))
        prog.leq(cp.abs(signal - c), t * np.ones(self.U.shape[1]), name="contrast")
        prog.minimize(t)
        self.prog = prog

    def estimate(self, omega):
        inst = self.inst
        omega = _check_omega(inst, omega)
        n_nu = inst.m if isinstance(inst.nuisance, CoEllitopic) else inst.n
        if self.prog is None:
            return RecoveryOutput(np.zeros(inst.p), np.zeros(n_nu), np.zeros(inst.q), True, 0.0)
        res = solve(self.prog, tol=self.tol, params={"c": self.U.T @ omega})
        if not res.ok:
            raise SolverError("bounded recovery program failed", res.status)
        x = res["x"]
        nu = res["nu"] if "nu" in res.values else np.zeros(n_nu)
        return RecoveryOutput(x, nu, inst.B @ x, True, float(res.objective))


class L1Estimator:
    """``min ||nu||_1`` over ``x in X`` and ``|d'(N nu + A x - omega)| <= thr ||d||_2``.

    When the program is certified infeasible the estimate is ``(0, 0)`` with
    ``feasible = False``; any other solver failure raises.
    """

    def __init__(self, inst, D, threshold, tol=1e-8):
        if not isinstance(inst.nuisance, Sparse):
            raise DomainError("l1 estimate needs sparse nuisance")
        if not threshold >= 0:
            raise DomainError("threshold must be nonnegative")
        self.inst, self.tol, self.threshold = inst, tol, float(threshold)
        Dm = D.matrix if isinstance(D, ContrastMatrix) else np.asarray(D, dtype=float)
        self.U = _unit_columns(Dm)
        k = self.U.shape[1]
        prog = ConicProgram("l1-estimate")
        x = prog.vector("x", inst.p)
        nu = prog.vector("nu", inst.n)
        inst.X.constrain(prog, x, "x")
        if k:
            c = prog.parameter("c", k, value=np.zeros(k))
            resp = (self.U.T @ inst.N) @ nu + (self.U.T @ inst.A) @ x - c
            prog.leq(cp.abs(resp), self.threshold * np.ones(k), name="contrast")
        prog.minimize(cp.norm1(nu))
        self.prog = prog

    def estimate(self, omega):
        inst = self.inst
        omega = _check_omega(inst, omega)
        params = {"c": self.U.T @ omega} if self.U.shape[1] else None
        res = solve(self.prog, tol=self.tol, params=params)
        if res.status == "infeasible":
            return RecoveryOutput(np.zeros(inst.p), np.zeros(inst.n), np.zeros(inst.q), False,
                                  float("nan"))
        if not res.ok:
            raise SolverError("l1 recovery program failed", res.status)
        x = res["x"]
        return RecoveryOutput(x, res["nu"], inst.B @ x, True, float(res.objective))

    def residual(self, x, nu, omega):
        """Largest normalized constraint excess ``|u'(N nu + A x - omega)| - thr``."""
        r = self.U.T @ (self.inst.N @ nu + self.inst.A @ x - omega)
        return float(np.max(np.abs(r) - self.threshold, initial=-self.threshold))


def _threshold(inst, contrasts, count):
    for c in contrasts:
        if isinstance(c, ContrastMatrix) and c.threshold is not None:
            return c.threshold
    return varkappa(inst.sigma, inst.epsilon, max(count, 1))


def _stack(G, H):
    Gm = G.matrix if isinstance(G, ContrastMatrix) else np.asarray(G, dtype=float)
    Hm = H.matrix if isinstance(H, ContrastMatrix) else np.asarray(H, dtype=float)
    return np.hstack([Hm, Gm])


def estimate_bounded(inst, G, omega):
    """Bounded-nuisance polyhedral estimate."""
    return BoundedEstimator(inst, G).estimate(omega)


def estimate_sparse(inst, G, H, omega, threshold=None):
    """l1 estimate with contrasts ``H`` (``n`` columns) and ``G``."""
    D = _stack(G, H)
    thr = threshold if threshold is not None else _threshold(inst, (G, H), D.shape[1])
    return L1Estimator(inst, D, thr).estimate(omega)


def estimate_alternative(inst, G, H, omega, threshold=None):
    """l1 estimate with an arbitrary ``M``-column ``H`` and ``G``."""
    D = _stack(G, H)
    thr = threshold if threshold is not None else _threshold(inst, (G, H), D.shape[1])
    return L1Estimator(inst, D, thr).estimate(omega)


def estimate_aggregated(inst, combined, omega):
    """l1 estimate with every block of an aggregated contrast."""
    thr = _threshold(inst, (combined,), combined.ncols)
    return L1Estimator(inst, combined, thr).estimate(omega)


def make_estimator(inst, contrast):
    """Compiled estimator matching the nuisance model of ``inst``.

    Sparse nuisance gives the l1 estimate over every column of ``contrast`` at
    its threshold; bounded nuisance gives the l-infinity estimate.
    """
    if isinstance(inst.nuisance, Sparse):
        thr = _threshold(inst, (contrast,), contrast.ncols)
        return L1Estimator(inst, contrast, thr)
    return BoundedEstimator(inst, contrast)
