"""Verifiable sparse-recovery condition and the resulting l1 error bound.

A matrix ``H`` (m x n) together with ``kappa < 1/2`` is admissible for
sparsity ``s`` when every entry of ``I_n - N' H`` is at most ``kappa / s`` in
magnitude. This implies, for all ``w``,

    ||w||_inf <= ||H' N w||_inf + (kappa / s) ||w||_1,

and, for any ``nu_hat`` with ``||nu_hat||_1 <= ||nu||_1`` and ``z = nu_hat - nu``,

    ||z||_q <= (2s)^(1/q) / (1 - 2 kappa) * (||H' N z||_inf + ||nu - nu^s||_1 / s),

where ``nu^s`` keeps the ``s`` largest magnitudes of ``nu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, MembershipError
from .model import ContrastMatrix, as_matrix


@dataclass(frozen=True)
class QInftyWitness:
    H: ContrastMatrix
    kappa: float
    s: int
    max_entry: float


def _check_kappa(kappa, allow_zero=False):
    lo_ok = kappa >= 0 if allow_zero else kappa > 0
    if not (lo_ok and kappa < 0.5):
        raise DomainError("kappa must lie in (0, 1/2)")


def h_max_entry(H, N):
    H, N = as_matrix(H), np.asarray(N, dtype=float)
    if H.shape != N.shape:
        raise DimensionError(f"H has shape {H.shape} but N has shape {N.shape}")
    n = N.shape[1]
    return float(np.max(np.abs(np.eye(n) - N.T @ H), initial=0.0))


def h_set_check(H, N, s, kappa, tol=1e-12, allow_zero=False):
    """Check ``max |[I - N'H]_ij| <= kappa / s``.

    Returns
    -------
    QInftyWitness

    Raises
    ------
    MembershipError
        If the entrywise bound fails.
    """
    _check_kappa(kappa, allow_zero)
    if int(s) != s or s < 1:
        raise DomainError("s must be a positive integer")
    entry = h_max_entry(H, N)
    if entry > kappa / s + tol:
        raise MembershipError(f"max |I - N'H| entry {entry:.3e} exceeds kappa/s = {kappa / s:.3e}")
    Hc = H if isinstance(H, ContrastMatrix) else ContrastMatrix(np.asarray(H, float), "h")
    return QInftyWitness(Hc, float(kappa), int(s), entry)


def top_s(v, s):
    """Indices of the ``s`` largest magnitudes, ties broken by lowest index."""
    v = np.asarray(v, dtype=float).ravel()
    order = np.lexsort((np.arange(v.size), -np.abs(v)))
    return np.sort(order[:min(s, v.size)])


def s_term(v, s):
    """``v^s``: keep the ``s`` largest-magnitude entries, zero the rest."""
    v = np.asarray(v, dtype=float).ravel()
    out = np.zeros_like(v)
    idx = top_s(v, s)
    out[idx] = v[idx]
    return out


def norm_s1(z, s):
    """Sum of the ``s`` largest magnitudes of ``z``."""
    a = np.sort(np.abs(np.asarray(z, dtype=float).ravel()))[::-1]
    return float(a[:max(int(s), 0)].sum())


def _prepare(H, N, nu, nu_hat, s, kappa, tol):
    nu = np.asarray(nu, dtype=float).ravel()
    nu_hat = np.asarray(nu_hat, dtype=float).ravel()
    N = np.asarray(N, dtype=float)
    if nu.size != N.shape[1] or nu_hat.size != N.shape[1]:
        raise DimensionError("nu and nu_hat must have one entry per column of N")
    h_set_check(H, N, s, kappa, allow_zero=True)
    l1, l1_hat = np.abs(nu).sum(), np.abs(nu_hat).sum()
    if l1_hat > l1 + tol * (1.0 + l1):
        raise DomainError("the bound requires ||nu_hat||_1 <= ||nu||_1")
    return as_matrix(H), N, nu, nu_hat


def l1_bound_terms(H, N, nu, nu_hat, s, kappa, tol=1e-12):
    """Quantities entering the bound: ``z``, ``rho = ||H'Nz||_inf`` and the tail."""
    H, N, nu, nu_hat = _prepare(H, N, nu, nu_hat, s, kappa, tol)
    z = nu_hat - nu
    rho = float(np.max(np.abs(H.T @ (N @ z)), initial=0.0))
    support = top_s(nu, s)
    tail = float(np.abs(nu).sum() - np.abs(nu[support]).sum())
    return {"z": z, "rho": rho, "tail": max(tail, 0.0), "support": support}


def _rhs(rho, tail, s, kappa, q):
    factor = 1.0 if math.isinf(q) else (2.0 * s) ** (1.0 / q)
    return factor / (1.0 - 2.0 * kappa) * (rho + tail / s)


def l1_bound_rhs(H, N, nu, nu_hat, s, kappa, q):
    """Right-hand side of the ``q``-norm error bound for ``z = nu_hat - nu``."""
    if not (q >= 1):
        raise DomainError("q must lie in [1, inf]")
    t = l1_bound_terms(H, N, nu, nu_hat, s, kappa)
    return _rhs(t["rho"], t["tail"], s, kappa, q)


def l1_bound_holds(H, N, nu, nu_hat, s, kappa, rtol=1e-9):
    """Whether the bound holds simultaneously for ``q`` in ``{1, 2, inf}``."""
    t = l1_bound_terms(H, N, nu, nu_hat, s, kappa)
    z = t["z"]
    for q in (1.0, 2.0, math.inf):
        lhs = np.linalg.norm(z, q)
        rhs = _rhs(t["rho"], t["tail"], s, kappa, q)
        if lhs > rhs + rtol * max(1.0, rhs):
            return False
    return True


def intermediate_bounds(H, N, nu, nu_hat, s, kappa):
    """Pairs ``(lhs, rhs)`` of the chain of inequalities behind the bound.

    Keys: ``cone`` for ``||z||_1 <= 2||z_I||_1 + 2||nu_Ibar||_1``, ``l1`` for
    ``||z||_1 <= (2 s rho + 2 ||nu_Ibar||_1) / (1 - 2 kappa)`` and ``linf`` for
    ``||z||_inf <= (rho + ||nu_Ibar||_1 / s) / (1 - 2 kappa)``, where ``I`` is
    the support of ``nu^s``.
    """
    t = l1_bound_terms(H, N, nu, nu_hat, s, kappa)
    z, rho, tail, I = t["z"], t["rho"], t["tail"], t["support"]
    zl1 = float(np.abs(z).sum())
    return {
        "cone": (zl1, 2.0 * float(np.abs(z[I]).sum()) + 2.0 * tail),
        "l1": (zl1, (2.0 * s * rho + 2.0 * tail) / (1.0 - 2.0 * kappa)),
        "linf": (float(np.max(np.abs(z), initial=0.0)), (rho + tail / s) / (1.0 - 2.0 * kappa)),
    }
