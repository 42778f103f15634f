"""Risk certificates for polyhedral estimates.

All bounds share one semidefinite template. For multipliers ``lam >= 0`` (one
per quadratic form of the error-norm set ``Bstar``), ``mu >= 0`` (one per form
of the signal set ``X``) and a PSD ``p x p`` matrix ``gram`` collecting the
contrast contribution, the linear matrix inequality

    [[ sum_l lam_l S_l ,  B / 2                  ],
     [ B' / 2          ,  sum_k mu_k T_k + gram  ]]  >= 0

certifies that ``||B Delta|| <= phi_S(lam) + 4 phi_T(mu) + extra`` for every
error ``Delta`` in ``2 X`` whose contrast responses are controlled by ``extra``.
Each certificate kind differs only in how ``gram`` and ``extra`` are formed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache

import cvxpy as cp
import numpy as np

from .conic import ConicProgram, inv_sqrt, min_eig, psd_check, solve, solve_relaxing, sym
from .errors import DimensionError, DomainError, SolverError, UnboundedError
from .model import ContrastMatrix, NoNuisance, Sparse, as_matrix, nuisance_seminorm, varkappa
from .sparse_l1 import h_set_check, norm_s1

log = logging.getLogger(__name__)

CERT_TOL = 1e-7


# ---------------------------------------------------------------------------
# certificate record
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RiskCertificate:
    """Feasible multipliers of a risk-bound program and the bound they certify.

    Attributes
    ----------
    kind : str
        ``bounded``, ``sparse``, ``sparse-alt``, ``aggregated`` or one of the
        synthesis kinds (``no-nuisance``, ``coellitopic``, ``sparse-theta``,
        ``sparse-alt-theta``).
    value : float
        Certified bound, equal to ``phi_S(lam) + 4 phi_T(mu) + extra``.
    gram : ndarray
        ``p x p`` contrast block of the matrix inequality.
    extra : float
        Contrast part of the objective.
    gamma, weights : ndarray, optional
        Per-column multipliers and objective weights (``extra = weights @ gamma``).
    blocks : dict
        Matrix variables of synthesis programs.
    scalars : dict
        Auxiliary scalars (``rho``, ``psi``, ``alpha``, ...).
    """

    kind: str
    value: float
    lam: np.ndarray
    mu: np.ndarray
    gram: np.ndarray = field(repr=False)
    extra: float
    gamma: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)
    blocks: dict = field(default_factory=dict, repr=False)
    scalars: dict = field(default_factory=dict)
    lmi_residual: float = 0.0
    instance: str = ""
    threshold: float = None
    branch: str = None

    def to_dict(self, include_blocks=False):
        d = {
            "kind": self.kind, "value": self.value, "extra": self.extra,
            "lam": self.lam.tolist(), "mu": self.mu.tolist(),
            "gamma": None if self.gamma is None else self.gamma.tolist(),
            "weights": None if self.weights is None else self.weights.tolist(),
            "scalars": {k: float(v) for k, v in self.scalars.items()},
            "lmi_residual": self.lmi_residual, "instance": self.instance,
            "threshold": self.threshold, "branch": self.branch,
            "gram": self.gram.tolist(),
        }
        if include_blocks:
            d["blocks"] = {k: np.asarray(v).tolist() for k, v in self.blocks.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)
        return cls(kind=d["kind"], value=float(d["value"]), lam=arr(d["lam"]), mu=arr(d["mu"]),
                   gram=arr(d["gram"]), extra=float(d["extra"]), gamma=arr(d.get("gamma")),
                   weights=arr(d.get("weights")),
                   blocks={k: arr(v) for k, v in d.get("blocks", {}).items()},
                   scalars=dict(d.get("scalars", {})), lmi_residual=float(d.get("lmi_residual", 0)),
                   instance=d.get("instance", ""), threshold=d.get("threshold"),
                   branch=d.get("branch"))


@dataclass(frozen=True)
class SparseAux:
    """Accuracy bounds of sparse nuisance recovery.

    ``opt_inf`` and ``opt2`` bound ``||nu_hat - nu_star||_inf`` and
    ``||nu_hat - nu_star||_2``; ``varrho2 = min(opt2, sqrt(2 s) opt_inf)``.
    ``rho_H`` is set when the auxiliary data come from an admissible ``H``.
    """

    opt2: float
    opt_inf: float
    varrho2: float
    s: int
    threshold: float
    rho_H: float = None
    psi_values: np.ndarray = None
    opt2_each: np.ndarray = field(default=None, repr=False)
    opt_inf_each: np.ndarray = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# shared pieces
# ---------------------------------------------------------------------------

def phi_s(inst, lam):
    return inst.Bstar.tset.support(np.maximum(lam, 0.0))


def phi_t(inst, mu):
    return inst.X.tset.support(np.maximum(mu, 0.0))


def lmi_matrix(inst, lam, mu, gram):
    S = np.tensordot(lam, inst.Bstar.form_stack, axes=1) if lam.size else 0 * np.eye(inst.q)
    T = np.tensordot(mu, inst.X.form_stack, axes=1) + gram
    return sym(np.block([[S, 0.5 * inst.B], [0.5 * inst.B.T, T]]))


def _lmi_rel(M):
    return min_eig(M) / (1.0 + np.linalg.norm(M, 2))


@lru_cache(maxsize=64)
def _bump_scale(inst):
    S = inst.Bstar.form_stack.sum(axis=0)
    T = inst.X.form_stack.sum(axis=0)
    return min(min_eig(S), min_eig(T))


def _bump_repair(inst, lam, mu, gram):
    """Raise every ``lam`` and ``mu`` until the matrix inequality holds."""
    c = _bump_scale(inst)
    for _ in range(20):
        M = lmi_matrix(inst, lam, mu, gram)
        lmin = min_eig(M)
        if lmin >= 0:
            return lam, mu
        delta = (-lmin * (1.0 + 1e-6) + 1e-14 * (1.0 + np.linalg.norm(M, 2))) / c
        lam = lam + delta
        mu = mu + delta
    return None


def _scale_repair(inst, lam, mu, gram, f_max=1e6):
    """Smallest factor ``f >= 1`` (up to bisection) making ``f * (lam, mu, gram)`` feasible.

    ``f M(lam, mu, gram)`` keeps the ``B`` block while scaling the diagonal
    blocks, so any point with positive definite diagonal blocks is repaired
    for a large enough ``f``.
    """
    def ok(f):
        return min_eig(lmi_matrix(inst, f * lam, f * mu, f * gram)) >= 0

    hi = 1.0 + 1e-9
    while not ok(hi):
        hi = 1.0 + 2.0 * (hi - 1.0) if hi < 2.0 else 2.0 * hi
        if hi > f_max:
            return None
    lo = 1.0
    for _ in range(50):
        if hi - lo <= 1e-12 * hi:
            break
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def _scaled_fields(fields, f):
    out = dict(fields)
    if out.get("gamma") is not None:
        out["gamma"] = f * np.asarray(out["gamma"], dtype=float)
    if "blocks" in out:
        out["blocks"] = {k: f * np.asarray(v, dtype=float) for k, v in out["blocks"].items()}
    if "rho" in out.get("scalars", {}):
        out["scalars"] = dict(out["scalars"], rho=f * out["scalars"]["rho"])
    return out


def finalize(inst, kind, lam, mu, gram, extra, **fields):
    """Repair solver output into an exactly feasible certificate.

    Multipliers are clipped to be nonnegative. If the matrix inequality is
    violated, two repairs are tried and the smaller bound kept: raising every
    ``lam`` and ``mu`` uniformly (a positive definite block-diagonal shift), and
    scaling all multipliers, the contrast block and ``extra`` by a common
    factor ``f >= 1``; the objective is positively homogeneous, so the scaled
    point certifies ``f`` times the value for the same estimate. The value is
    recomputed at the repaired point.
    """
    lam = np.maximum(np.asarray(lam, dtype=float).ravel(), 0.0)
    mu = np.maximum(np.asarray(mu, dtype=float).ravel(), 0.0)
    gram = sym(gram)
    extra = float(extra)
    if min_eig(lmi_matrix(inst, lam, mu, gram)) < 0:
        candidates = []
        bumped = _bump_repair(inst, lam, mu, gram)
        if bumped is not None:
            v = phi_s(inst, bumped[0]) + 4.0 * phi_t(inst, bumped[1]) + extra
            candidates.append((v, bumped[0], bumped[1], gram, extra, fields))
        f = _scale_repair(inst, lam, mu, gram)
        if f is not None:
            v = f * (phi_s(inst, lam) + 4.0 * phi_t(inst, mu) + extra)
            candidates.append((v, f * lam, f * mu, f * gram, f * extra, _scaled_fields(fields, f)))
        if not candidates:
            raise SolverError(f"{kind}: could not repair the matrix inequality")
        _, lam, mu, gram, extra, fields = min(candidates, key=lambda c: c[0])
    M = lmi_matrix(inst, lam, mu, gram)
    value = phi_s(inst, lam) + 4.0 * phi_t(inst, mu) + extra
    return RiskCertificate(kind=kind, value=float(value), lam=lam, mu=mu, gram=gram,
                           extra=float(extra), lmi_residual=_lmi_rel(M),
                           instance=inst.digest, **fields)


LMI_SCALINGS = ("none", "full", "jacobi")


def _congruence(forms, scaling):
    """``D`` with ``D (sum of forms) D`` well scaled; returned as a vector when diagonal."""
    k = forms[0].shape[0]
    if scaling == "none":
        return np.ones(k)
    total = sum(forms)
    if scaling == "jacobi":
        d = np.diag(total)
        return 1.0 / np.sqrt(np.where(d > 0, d, 1.0))
    if scaling == "full":
        return inv_sqrt(total, floor=1e-12 * max(np.linalg.norm(total, 2), 1e-300))
    raise DomainError(f"unknown LMI scaling {scaling!r}")


def _congruent(D, M):
    return D[:, None] * M * D if D.ndim == 1 else D @ M @ D


def add_risk_lmi(prog, inst, gram_expr, scaling="none"):
    """Declare ``lam``, ``mu`` and the risk matrix inequality; return the base objective.

    The inequality may be imposed after a congruence ``diag(D_S, D_T)``
    (``scaling`` is ``none``, ``jacobi`` for ``D = diag(sum of forms)^(-1/2)``
    or ``full`` for ``D = (sum of forms)^(-1/2)``); the feasible set is the
    same, but badly scaled forms such as second differences on fine grids are
    evened out.
    """
    lam = prog.vector("lam", inst.Bstar.n_forms, nonneg=True)
    mu = prog.vector("mu", inst.X.n_forms, nonneg=True)
    DS, DT = _congruence(inst.Bstar.forms, scaling), _congruence(inst.X.forms, scaling)
    S = sum(lam[l] * _congruent(DS, Sl) for l, Sl in enumerate(inst.Bstar.forms))
    T = sum(mu[k] * _congruent(DT, Tk) for k, Tk in enumerate(inst.X.forms))
    if gram_expr is not None:
        if DT.ndim == 1:
            T = T + cp.multiply(np.outer(DT, DT), gram_expr)
        else:
            T = T + DT @ gram_expr @ DT
    Bs = (DS[:, None] * inst.B if DS.ndim == 1 else DS @ inst.B)
    Bs = Bs * DT if DT.ndim == 1 else Bs @ DT
    prog.psd(cp.bmat([[S, 0.5 * Bs], [0.5 * Bs.T, T]]), name="risk_lmi")
    base = inst.Bstar.tset.support_expr(lam) + 4 * inst.X.tset.support_expr(mu)
    return lam, mu, base


def solve_risk_program(build, tol=1e-8):
    """Solve a program containing the risk LMI, trying each LMI scaling in turn.

    ``build(scaling)`` returns ``(program, state)``. Scalings are tried in the
    order of :data:`LMI_SCALINGS` (each with :func:`solve_relaxing`) until one
    verifies; returns ``(result, program, state)`` of the last attempt.
    """
    for scaling in LMI_SCALINGS:
        prog, state = build(scaling)
        res = solve_relaxing(prog, tol=tol)
        if res.ok:
            break
        log.info("%s: LMI scaling %s failed (%s)", prog.name, scaling, res.backend_status)
    return res, prog, state


def rank_one_sum(vectors, coef):
    """cvxpy expression ``sum_i coef_i v_i v_i'`` for the columns ``v_i``."""
    V = np.asarray(vectors, dtype=float)
    k = V.shape[0]
    K = np.einsum("ai,bi->abi", V, V).reshape(k * k, -1)
    return cp.reshape(K @ coef, (k, k), order="C")


# solver-accuracy noise in A'g: columns orthogonal to the range of A otherwise stall the solver
RESPONSE_RTOL = 1e-6


def certify_weighted(inst, G, weights, kind, tol=1e-8, **fields):
    """Solve ``min phi_S + 4 phi_T + sum_i w_i gamma_i`` over the risk LMI.

    The contribution of column ``g_i`` to the inequality is
    ``gamma_i A' g_i g_i' A``. Columns with zero weight or zero response are
    dropped (giving them ``gamma_i = 0`` keeps the certificate valid); a
    response counts as zero below ``RESPONSE_RTOL`` times the largest one.
    """
    G = as_matrix(G)
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != G.shape[1]:
        raise DimensionError("one weight per contrast column is required")
    C = inst.A.T @ G
    if not np.any(inst.B):
        # zero target map: all multipliers vanish
        return finalize(inst, kind, np.zeros(inst.Bstar.n_forms), np.zeros(inst.X.n_forms),
                        np.zeros((inst.p, inst.p)), 0.0, gamma=np.zeros(G.shape[1]),
                        weights=w, **fields)
    resp = np.linalg.norm(C, axis=0)
    keep = (w > 0) & (resp > RESPONSE_RTOL * resp.max(initial=0.0))
    gamma = np.zeros(G.shape[1])

    def build(scaling):
        prog = ConicProgram(kind)
        gram_expr, extra = None, 0
        if keep.any():
            # gamma_i w_i is the variable; columns scaled by 1/sqrt(w_i)
            Cs = C[:, keep] / np.sqrt(w[keep])
            g = prog.vector("gamma_w", int(keep.sum()), nonneg=True)
            gram_expr, extra = rank_one_sum(Cs, g), cp.sum(g)
        _, _, base = add_risk_lmi(prog, inst, gram_expr, scaling)
        prog.minimize(base + extra)
        return prog, None

    res, _, _ = solve_risk_program(build, tol)
    if not res.ok:
        raise SolverError(f"{kind} certification program failed", res.status)
    if keep.any():
        gamma[keep] = np.maximum(res["gamma_w"], 0.0) / w[keep]
    gram = (C * gamma) @ C.T
    return finalize(inst, kind, res["lam"], res["mu"], gram, float(w @ gamma),
                    gamma=gamma, weights=w, **fields)


def _count_threshold(inst, contrast, count):
    if isinstance(contrast, ContrastMatrix) and contrast.threshold is not None:
        return float(contrast.threshold)
    return varkappa(inst.sigma, inst.epsilon, max(int(count), 1))


# ---------------------------------------------------------------------------
# bounded nuisance
# ---------------------------------------------------------------------------

def contrast_seminorms(inst, G):
    """``pi(g_i)`` for every column."""
    G = as_matrix(G)
    nz = inst.nuisance
    if isinstance(nz, Sparse):
        raise DomainError("bounded-nuisance certification needs a bounded nuisance")
    if isinstance(nz, NoNuisance) or inst.n == 0:
        return np.zeros(G.shape[1])
    return np.array([nuisance_seminorm(nz, inst.N, g) for g in G.T])


def certify_bounded(inst, G, tol=1e-8):
    """Risk bound of the estimate ``min_{x, nu} ||G'(Ax + N nu - omega)||_inf``.

    Objective ``phi_S(lam) + 4 phi_T(mu) + 4 psi^2 sum_i gamma_i`` with
    ``psi = max_i pi(g_i) + varkappa * max_i ||g_i||_2``.
    """
    if not isinstance(G, ContrastMatrix):
        G = ContrastMatrix(G)
    G = G.drop_zero()
    kap = _count_threshold(inst, G, G.ncols)
    if G.ncols == 0:
        return certify_weighted(inst, G.matrix, [], "bounded", tol, threshold=kap,
                                scalars={"psi": 0.0})
    psi = float(contrast_seminorms(inst, G).max() + kap * G.max_norm)
    w = np.full(G.ncols, 4.0 * psi ** 2)
    return certify_weighted(inst, G.matrix, w, "bounded", tol, threshold=kap,
                            scalars={"psi": psi})


# ---------------------------------------------------------------------------
# sparse nuisance
# ---------------------------------------------------------------------------

def max_abs_response(inst, H):
    """``max_{x in X} |h_k' A x|`` for every column ``h_k``."""
    H = as_matrix(H)
    return np.array([inst.X.max_linear(inst.A.T @ h) for h in H.T])


def rho_h(inst, H, kappa, threshold=None, check=True):
    """Bound on ``||nu_hat - nu_star||_inf`` for an admissible ``H``.

    ``rho_H = max_k [2 thr ||h_k||_2 + 2 max_{x in X} |h_k' A x|] / (1 - 2 kappa)``
    where ``thr`` is the estimator's threshold. The factor 2 in front of
    ``thr`` accounts for both the estimate and the truth satisfying the
    contrast constraints.
    """
    if not (0 <= kappa < 0.5):
        raise DomainError("kappa must lie in [0, 1/2)")
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("rho_H is defined for sparse nuisance")
    Hm = as_matrix(H)
    if check:
        h_set_check(Hm, inst.N, inst.nuisance.s, kappa, tol=1e-9, allow_zero=True)
    if threshold is None:
        threshold = _count_threshold(inst, H, Hm.shape[1] + 2 * inst.m)
    resp = max_abs_response(inst, Hm)
    per = 2.0 * threshold * np.linalg.norm(Hm, axis=0) + 2.0 * resp
    return float(per.max(initial=0.0) / (1.0 - 2.0 * kappa))


def psi_h_columns(inst, G, rho, threshold):
    """``2 thr ||g_i||_2 + rho_H ||N' g_i||_{2s,1}`` per column."""
    G = as_matrix(G)
    s2 = 2 * inst.nuisance.s
    return np.array([2.0 * threshold * np.linalg.norm(g) + rho * norm_s1(inst.N.T @ g, s2)
                     for g in G.T])


def certify_sparse(inst, G, H, kappa, threshold=None, rho=None, tol=1e-8):
    """Risk bound of the l1 estimate with contrasts ``H`` (admissible) and ``G``.

    Objective ``phi_S + 4 phi_T + psi_H[G]^2 sum_i gamma_i`` with
    ``psi_H[G] = max_i [2 thr ||g_i||_2 + rho_H ||N' g_i||_{2s,1}]``.
    """
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("sparse certification needs sparse nuisance")
    if not isinstance(G, ContrastMatrix):
        G = ContrastMatrix(G)
    Hm = as_matrix(H)
    G = G.drop_zero()
    if threshold is None:
        threshold = _count_threshold(inst, G, Hm.shape[1] + G.ncols)
    if rho is None:
        rho = rho_h(inst, Hm, kappa, threshold)
    else:
        h_set_check(Hm, inst.N, inst.nuisance.s, kappa, tol=1e-9, allow_zero=True)
    per = psi_h_columns(inst, G.matrix, rho, threshold)
    psi = float(per.max(initial=0.0))
    w = np.full(G.ncols, psi ** 2)
    return certify_weighted(inst, G.matrix, w, "sparse", tol, threshold=threshold,
                            scalars={"psi": psi, "rho_H": rho, "kappa": kappa})


class OptPrograms:
    """Compiled programs bounding the nuisance recovery error.

    For each index ``i``: maximize ``w_i`` (resp. ``sqrt(w_i t)``) over
    ``v in 2X``, ``|w_j| <= w_i``, ``||w||_1 <= 2 s w_i`` (resp.
    ``||w||_1 <= t <= 2 s w_i``) and ``|h_k'(N w + A v)| <= 2 thr ||h_k||_2``.
    """

    def __init__(self, inst, H, threshold):
        H = as_matrix(H)
        s = inst.nuisance.s
        n = inst.n
        HN, HA = H.T @ inst.N, H.T @ inst.A
        bound = 2.0 * threshold * np.linalg.norm(H, axis=0)
        self.progs = {}
        for which in ("inf", "two"):
            prog = ConicProgram(f"opt-{which}")
            w = prog.vector("w", n)
            v = prog.vector("v", inst.p)
            e = prog.parameter("e", n, value=np.eye(n)[0])
            wi = e @ w
            inst.X.constrain(prog, v, "v", scale=2.0)
            prog.leq(cp.abs(w), wi * np.ones(n), name="linf")
            resp = HN @ w + HA @ v
            prog.leq(cp.abs(resp), bound, name="contrast")
            if which == "inf":
                prog.leq(cp.norm1(w), 2 * s * wi, name="l1")
                prog.maximize(wi)
            else:
                t = prog.scalar("t", nonneg=True)
                u = prog.scalar("u")
                prog.leq(cp.norm1(w), t, name="l1")
                prog.leq(t, 2 * s * wi, name="t_cap")
                prog.rsoc(wi, t, u, name="geo")
                prog.maximize(u)
            self.progs[which] = prog

    def value(self, which, i, tol=1e-8):
        prog = self.progs[which]
        e = np.zeros(prog.params["e"].shape[0])
        e[i] = 1.0
        res = solve(prog, tol=tol, params={"e": e})
        if res.status == "unbounded":
            raise UnboundedError(f"nuisance accuracy program is unbounded at index {i}; "
                                 "the H contrast does not control the nuisance")
        if not res.ok:
            raise SolverError(f"nuisance accuracy program failed at index {i}", res.status)
        return max(float(res.objective), 0.0)


def opt_programs(inst, H, threshold=None, tol=1e-8):
    """Compute ``Opt_2``, ``Opt_inf`` and ``varrho_2`` for contrast ``H``."""
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("nuisance accuracy programs need sparse nuisance")
    Hm = as_matrix(H)
    if threshold is None:
        threshold = _count_threshold(inst, H, Hm.shape[1] + 2 * inst.m)
    progs = OptPrograms(inst, Hm, threshold)
    oi = np.array([progs.value("inf", i, tol) for i in range(inst.n)])
    o2 = np.array([progs.value("two", i, tol) for i in range(inst.n)])
    s = inst.nuisance.s
    opt_inf, opt2 = float(oi.max()), float(o2.max())
    return SparseAux(opt2=opt2, opt_inf=opt_inf, varrho2=min(opt2, math.sqrt(2 * s) * opt_inf),
                     s=s, threshold=float(threshold), opt2_each=o2, opt_inf_each=oi)


class PiBar:
    """Compiled ``min ||u||_1 a + ||v||_2 b + 2 s ||w||_inf a`` over ``u + v + w = y``."""

    def __init__(self, n, opt_inf, opt2, s):
        prog = ConicProgram("pi-bar")
        u, v, w = prog.vector("u", n), prog.vector("v", n), prog.vector("w", n)
        y = prog.parameter("y", n, value=np.zeros(n))
        prog.equal(u + v + w, y, name="split")
        prog.minimize(opt_inf * cp.norm1(u) + opt2 * cp.norm2(v)
                      + 2 * s * opt_inf * cp.norm_inf(w))
        self.prog = prog

    def __call__(self, y, tol=1e-9):
        y = np.asarray(y, dtype=float).ravel()
        if not np.any(y):
            return 0.0
        scale = np.abs(y).max()
        res = solve(self.prog, tol=tol, params={"y": y / scale})
        if not res.ok:
            raise SolverError("pi-bar program failed", res.status)
        return max(float(res.objective), 0.0) * scale


def pi_bar(d, N, aux, s=None):
    """``pi_bar(N' d)``: bound on ``|d' N z|`` over the nuisance error set."""
    N = np.asarray(N, dtype=float)
    s = aux.s if s is None else s
    return _pi_bar_program(N.shape[1], aux.opt_inf, aux.opt2, s)(N.T @ np.asarray(d, float))


@lru_cache(maxsize=16)
def _pi_bar_program(n, opt_inf, opt2, s):
    return PiBar(n, opt_inf, opt2, s)


def psi_alt_columns(inst, D, aux):
    """``pi_bar(N' d_i) + 2 thr ||d_i||_2`` per column."""
    D = as_matrix(D)
    f = _pi_bar_program(inst.n, aux.opt_inf, aux.opt2, aux.s)
    return np.array([f(inst.N.T @ d) + 2.0 * aux.threshold * np.linalg.norm(d) for d in D.T])


def certify_sparse_alt(inst, D, aux, tol=1e-8):
    """Risk bound using per-column weights ``psi_H(d_i)^2`` over all columns of ``D``."""
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("sparse certification needs sparse nuisance")
    if not isinstance(D, ContrastMatrix):
        D = ContrastMatrix(D)
    D = D.drop_zero()
    psi = psi_alt_columns(inst, D.matrix, aux)
    return certify_weighted(inst, D.matrix, psi ** 2, "sparse-alt", tol,
                            threshold=aux.threshold,
                            scalars={"opt2": aux.opt2, "opt_inf": aux.opt_inf})


def certify_aggregated(cert_a, cert_b):
    """Smaller of two bounds valid for the same aggregated estimate."""
    if cert_a.instance != cert_b.instance:
        raise DomainError("certificates refer to different instances")
    win, tag = (cert_a, "a") if cert_a.value <= cert_b.value else (cert_b, "b")
    return RiskCertificate(kind="aggregated", value=win.value, lam=win.lam, mu=win.mu,
                           gram=win.gram, extra=win.extra, gamma=win.gamma,
                           weights=win.weights, blocks=win.blocks,
                           scalars=dict(win.scalars, bound_a=cert_a.value, bound_b=cert_b.value),
                           lmi_residual=win.lmi_residual, instance=win.instance,
                           threshold=win.threshold, branch=f"{tag}:{win.kind}")


# ---------------------------------------------------------------------------
# evaluation and verification
# ---------------------------------------------------------------------------

def error_norm(inst, v):
    """``||v|| = max_{u in Bstar} u'v``."""
    return inst.Bstar.max_linear(np.asarray(v, dtype=float))


def verify_certificate(inst, cert, contrast=None, tol=CERT_TOL, value_rtol=1e-8):
    """Independent check of a certificate.

    Verifies multiplier signs, the matrix inequality, and that ``value``
    equals the objective at the stored multipliers. When ``contrast`` is given
    for a per-column certificate, ``gram`` and ``extra`` are recomputed from the
    contrast columns and ``gamma``.

    Returns
    -------
    list of str
        Human readable failures; empty when the certificate verifies.
    """
    fails = []
    if cert.instance and cert.instance != inst.digest:
        fails.append("instance digest mismatch")
    if np.any(cert.lam < 0) or np.any(cert.mu < 0):
        fails.append("negative lam/mu")
    gram, extra = cert.gram, cert.extra
    if cert.gamma is not None:
        if np.any(cert.gamma < 0):
            fails.append("negative gamma")
        if contrast is not None:
            G = as_matrix(contrast)
            if isinstance(contrast, ContrastMatrix):
                G = contrast.drop_zero().matrix
            if G.shape[1] != cert.gamma.size:
                fails.append("contrast column count differs from gamma")
            else:
                C = inst.A.T @ G
                gram = (C * cert.gamma) @ C.T
                extra = float(cert.weights @ cert.gamma)
                if np.linalg.norm(gram - cert.gram) > 1e-8 * (1 + np.linalg.norm(gram)):
                    fails.append("stored gram differs from contrast gram")
    for name, M in cert.blocks.items():
        if M.ndim == 2 and M.shape[0] == M.shape[1] and not psd_check(M, tol):
            fails.append(f"block {name} not PSD")
    if not psd_check(lmi_matrix(inst, cert.lam, cert.mu, gram), tol):
        fails.append("matrix inequality violated")
    value = phi_s(inst, cert.lam) + 4 * phi_t(inst, cert.mu) + extra
    if abs(value - cert.value) > value_rtol * max(1.0, abs(value)):
        fails.append(f"value mismatch {value!r} vs {cert.value!r}")
    return fails
