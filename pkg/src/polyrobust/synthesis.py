"""Design of contrast matrices with small certified risk.

The designs replace the nonconvex search over contrast columns by a convex
program in the aggregated matrix ``Theta = sum_i gamma_i g_i g_i'`` and then
split an optimal ``Theta`` back into columns: by eigendecomposition when the
column constraint is a Euclidean ball, and by a randomized rank-one
decomposition when it is a general basic ellitope.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .certification import (RiskCertificate, add_risk_lmi, certify_aggregated, certify_bounded,
                            certify_sparse, certify_sparse_alt, finalize, opt_programs,
                            psi_alt_columns, rank_one_sum, rho_h, solve_risk_program)
from .conic import ConicProgram, inv_sqrt, orth_basis, solve, sym
from .ellitope import BasicEllitope, Box, cw_ellitope, direct_product, in_k_cone, k_cone_ratio
from .errors import (DecompositionError, DimensionError, DomainError, InfeasibleError,
                     MembershipError, SolverError)
from .model import (CoEllitopic, ContrastMatrix, EllitopicNuisance, NoNuisance, ProblemInstance,
                    Sparse, as_matrix, varkappa)
from .sparse_l1 import h_set_check

FULL_THETA_MAX_DIM = 32

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DecompositionResult:
    """``Theta ~= sum_i gammas[i] * w_i w_i'`` with ``w_i = vectors[:, i]``."""

    gammas: np.ndarray
    vectors: np.ndarray
    claimed_budget: float
    reconstruction_error: float
    attempts: int = 1

    @property
    def budget_used(self):
        return float(self.gammas.sum())


@dataclass(frozen=True, eq=False)
class SynthesisReport:
    """Synthesized contrast together with the certificate that motivated it."""

    contrast: ContrastMatrix
    certificate: RiskCertificate
    diagnostics: dict = field(default_factory=dict)
    decomposition: DecompositionResult = None
    extras: dict = field(default_factory=dict, repr=False)

    @property
    def value(self):
        return self.certificate.value


def _psd_clip(M):
    w, V = np.linalg.eigh(sym(M))
    return (V * np.maximum(w, 0.0)) @ V.T


def _alpha(m, J):
    return 2.0 * math.sqrt(2.0) * math.log(4.0 * m * m * J)


def _diag(res, prog):
    return {"solve_time": res.solve_time, "max_eq_violation": res.max_eq_violation,
            "min_cone_margin": res.min_cone_margin, "program_objective": res.objective,
            "backend_status": res.backend_status}


class _ThetaBlock:
    """PSD matrix ``Theta = U Z U'`` restricted to the range of an orthonormal ``U``."""

    def __init__(self, prog, name, U):
        self.U = U
        self.Z = prog.symmetric(name, U.shape[1], psd=True)
        self.name = name

    def gram(self, L):
        """``L' Theta L`` as an expression."""
        C = self.U.T @ L
        return C.T @ self.Z @ C

    def trace(self):
        return cp.trace(self.Z)

    def quad(self, V):
        """``(v_j' Theta v_j)_j`` for the columns of ``V``."""
        C = self.U.T @ V
        return cp.sum(cp.multiply(C, self.Z @ C), axis=0)

    def value(self, res):
        Z = _psd_clip(res[self.name])
        return self.U @ Z @ self.U.T


def _theta_basis(mode, m, A):
    if mode == "auto":
        mode = "full" if m <= FULL_THETA_MAX_DIM else "range"
    if mode == "full":
        return np.eye(m)
    if mode == "range":
        return orth_basis(A)
    if mode == "zero":
        return None
    raise DomainError(f"unknown Theta mode {mode!r}")


# ---------------------------------------------------------------------------
# rank-one decomposition over an ellitope
# ---------------------------------------------------------------------------

def _haar(r, rng):
    Z = rng.standard_normal((r, r))
    Q, R = np.linalg.qr(Z)
    return Q * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))


def _gauges(W, V):
    """Gauge of ``W`` at every column of ``V``."""
    vals = W.form_values(V.T)
    return np.sqrt(np.maximum([W.tset.gauge(v) for v in np.atleast_2d(vals)], 0.0))


def decompose_over_ellitope(Theta, rho, W, I=None, seed=0, max_tries=64, rank_rtol=1e-9,
                            check_cone=True, cone_tol=1e-7):
    """Split ``Theta`` into ``sum_i gamma_i w_i w_i'`` with ``w_i`` in ``W``.

    ``Theta = D D'`` with ``D = V diag(sqrt(upsilon))`` over the retained
    eigenpairs. The first attempt uses the eigenvectors themselves, later
    attempts rotate ``D`` by Haar-random orthogonal matrices ``U``: the columns
    ``D u_i`` still reproduce ``Theta`` and are normalized by their exact
    gauge. The first attempt whose total weight meets
    ``2 sqrt(2) ln(4 m^2 J) rho`` is returned.

    Raises
    ------
    MembershipError
        If ``(Theta, rho)`` is not in the cone associated with ``W``.
    DecompositionError
        If no attempt meets the budget.
    """
    Theta = sym(Theta)
    m = W.dim
    if Theta.shape != (m, m):
        raise DimensionError("Theta and W have different dimensions")
    if I is not None and I < m:
        raise DomainError("the number of columns must be at least m")
    if check_cone and not in_k_cone(Theta, rho, W, cone_tol):
        raise MembershipError("(Theta, rho) is not in the cone of W")
    budget = _alpha(m, W.n_forms) * rho
    w, V = np.linalg.eigh(Theta)
    if w.size == 0 or w[-1] <= 0:
        return DecompositionResult(np.zeros(0), np.zeros((m, 0)), budget, 0.0, 0)
    keep = w > rank_rtol * w[-1]
    D = V[:, keep] * np.sqrt(w[keep])
    r = D.shape[1]
    rng = np.random.default_rng(seed)
    best = None
    norm = np.linalg.norm(Theta)
    for attempt in range(max_tries + 1):
        Wt = D if attempt == 0 else D @ _haar(r, rng)
        th = _gauges(W, Wt)
        ok = th > 0
        gam = th[ok] ** 2
        vecs = Wt[:, ok] / th[ok]
        total = float(gam.sum())
        if best is None or total < best[0]:
            best = (total, gam, vecs)
        if total <= budget + 1e-7:
            rec = np.linalg.norm(Theta - (vecs * gam) @ vecs.T) / (1.0 + norm)
            return DecompositionResult(gam, vecs, budget, float(rec), attempt + 1)
    raise DecompositionError("decomposition budget not met", best_budget=best[0],
                             claimed_budget=budget)


# ---------------------------------------------------------------------------
# bounded nuisance
# ---------------------------------------------------------------------------

def _zero_report(inst, kind, threshold, **extras):
    """Empty contrast with the exact zero certificate of a zero target map."""
    cert = finalize(inst, kind, np.zeros(inst.Bstar.n_forms), np.zeros(inst.X.n_forms),
                    np.zeros((inst.p, inst.p)), 0.0, threshold=threshold,
                    scalars={"rho": 0.0})
    G = ContrastMatrix(np.zeros((inst.m, 0)), (), threshold)
    return SynthesisReport(G, cert, extras=dict(extras, instance=inst))


def synth_no_nuisance(inst, I=None, tol=1e-8, rank_rtol=1e-9):
    """Optimal contrast for observations without nuisance.

    Minimizes ``phi_S(lam) + 4 phi_T(mu) + 4 rho`` over ``Theta >= 0`` with
    ``rho >= varkappa^2 Tr(Theta)``; the contrast columns are ``e_i / varkappa``
    for the eigenvectors ``e_i`` of the optimal ``Theta`` and the matching
    multipliers are ``varkappa^2 upsilon_i``. ``Theta`` is searched in the range
    of ``A``, which loses nothing because it enters only through ``A' Theta A``
    and its trace.
    """
    if not isinstance(inst.nuisance, NoNuisance) and inst.n and np.any(inst.N):
        raise DomainError("no-nuisance synthesis needs an instance without nuisance")
    m = inst.m
    I = m if I is None else int(I)
    if I < m:
        raise DomainError("the number of columns must be at least m")
    kap = varkappa(inst.sigma, inst.epsilon, I)
    if not np.any(inst.B):
        return _zero_report(inst, "no-nuisance", kap)
    U = orth_basis(inst.A)

    def build(scaling):
        prog = ConicProgram("no-nuisance-synthesis")
        theta = _ThetaBlock(prog, "Z", U)
        rho = prog.scalar("rho", nonneg=True)
        prog.leq(kap ** 2 * theta.trace(), rho, name="trace")
        _, _, base = add_risk_lmi(prog, inst, theta.gram(inst.A), scaling)
        prog.minimize(base + 4 * rho)
        return prog, theta

    res, prog, theta = solve_risk_program(build, tol)
    if not res.ok:
        raise SolverError("no-nuisance synthesis failed", res.status)
    Theta = theta.value(res)
    ups, E = np.linalg.eigh(Theta)
    keep = ups > rank_rtol * max(ups[-1], 0.0) if ups.size and ups[-1] > 0 else np.zeros(m, bool)
    ups, E = ups[keep], E[:, keep]
    Theta_k = (E * ups) @ E.T
    rho_v = kap ** 2 * float(ups.sum())
    G = ContrastMatrix(E / kap, ("g",) * E.shape[1], kap)
    gamma = kap ** 2 * ups
    weights = np.full(gamma.size, 4.0 * kap ** 2 * G.max_norm ** 2)
    C = inst.A.T @ G.matrix
    cert = finalize(inst, "no-nuisance", res["lam"], res["mu"], (C * gamma) @ C.T,
                    float(weights @ gamma), gamma=gamma, weights=weights, threshold=kap,
                    blocks={"Theta": Theta_k}, scalars={"rho": rho_v})
    return SynthesisReport(G, cert, _diag(res, prog), extras={"Theta": Theta_k})


def augmented_instance(inst):
    """Fold an ellitopic nuisance into the signal: ``[x; nu]`` in ``X x N``."""
    if not isinstance(inst.nuisance, EllitopicNuisance):
        raise DomainError("augmentation needs an ellitopic nuisance")
    X = direct_product(inst.X, inst.nuisance.set)
    A = np.hstack([inst.A, inst.N])
    B = np.hstack([inst.B, np.zeros((inst.q, inst.n))])
    return ProblemInstance(A=A, B=B, X=X, Bstar=inst.Bstar, nuisance=NoNuisance(),
                           N=np.zeros((inst.m, 0)), sigma=inst.sigma, epsilon=inst.epsilon)


def synth_ellitopic_nuisance(inst, I=None, tol=1e-8):
    """Contrast for ellitopic nuisance through the augmented no-nuisance problem.

    The certificate refers to the augmented instance (see
    :func:`augmented_instance`); the estimate over ``x in X, nu in N`` on the
    original instance coincides with the augmented estimate.
    """
    aug = augmented_instance(inst)
    rep = synth_no_nuisance(aug, I=I, tol=tol)
    return SynthesisReport(rep.contrast, rep.certificate,
                           dict(rep.diagnostics, augmented_dim=aug.p),
                           extras=dict(rep.extras, augmented=aug))


def synth_coellitopic(inst, I=None, seed=0, tol=1e-8, max_tries=64):
    """Contrast for a nuisance whose contamination set is the polar of ``Nstar``.

    Solves ``min phi_S + 4 phi_T + 4 alpha rho`` over ``(Theta, rho)`` in the cone
    of ``W = {theta(w) <= 1}``, ``theta = 2 max[pi, varkappa ||.||_2]``, then
    decomposes ``Theta`` over ``W``. The certificate of the returned contrast
    uses weights ``4 max_i theta(g_i)^2 = 4`` and the decomposition weights.
    """
    if not isinstance(inst.nuisance, CoEllitopic):
        raise DomainError("co-ellitopic synthesis needs a co-ellitopic nuisance")
    m = inst.m
    I = m if I is None else int(I)
    kap = varkappa(inst.sigma, inst.epsilon, I)
    if not np.any(inst.B):
        return _zero_report(inst, "bounded", kap)
    W = cw_ellitope(inst.nuisance.Nstar, kap)
    alpha = _alpha(m, W.n_forms)

    def build(scaling):
        prog = ConicProgram("coellitopic-synthesis")
        Theta = prog.symmetric("Theta", m, psd=True)
        rho = prog.scalar("rho", nonneg=True)
        y = cp.hstack([cp.trace(R @ Theta) for R in W.forms])
        for c, con in enumerate(W.tset.scaled_membership(y, rho)):
            prog.leq(con.args[0], con.args[1], name=f"cone{c}")
        _, _, base = add_risk_lmi(prog, inst, inst.A.T @ Theta @ inst.A, scaling)
        prog.minimize(base + 4 * alpha * rho)
        return prog, None

    res, prog, _ = solve_risk_program(build, tol)
    if not res.ok:
        raise SolverError("co-ellitopic synthesis failed", res.status)
    Th = _psd_clip(res["Theta"])
    rho_v = max(float(res["rho"]), k_cone_ratio(Th, W))
    opt_cert = finalize(inst, "coellitopic", res["lam"], res["mu"], inst.A.T @ Th @ inst.A,
                        4 * alpha * rho_v, threshold=kap, blocks={"Theta": Th},
                        scalars={"rho": rho_v, "alpha": alpha})
    dec = decompose_over_ellitope(Th, rho_v, W, I=I, seed=seed, max_tries=max_tries,
                                  check_cone=False)
    G = ContrastMatrix(dec.vectors, ("g",) * dec.vectors.shape[1], kap)
    if G.ncols == 0:
        cert = certify_bounded(inst, G)
    else:
        theta_max = float(_gauges(W, G.matrix).max())
        weights = np.full(G.ncols, 4.0 * theta_max ** 2)
        C = inst.A.T @ G.matrix
        cert = finalize(inst, "bounded", opt_cert.lam, opt_cert.mu, (C * dec.gammas) @ C.T,
                        float(weights @ dec.gammas), gamma=dec.gammas.copy(), weights=weights,
                        threshold=kap, scalars={"theta_max": theta_max})
    diag = dict(_diag(res, prog), opt_star=opt_cert.value)
    return SynthesisReport(G, cert, diag, dec, extras={"program_certificate": opt_cert, "W": W})


# ---------------------------------------------------------------------------
# sparse nuisance
# ---------------------------------------------------------------------------

def hg_threshold(inst):
    """Threshold of the estimate with ``n`` H-columns and ``2m`` G-columns."""
    return varkappa(inst.sigma, inst.epsilon, inst.n + 2 * inst.m)


def ig_threshold(inst, M):
    """Threshold of the estimate with ``M`` H-columns and ``2m`` G-columns."""
    return varkappa(inst.sigma, inst.epsilon, M + 2 * inst.m)


def aggregated_threshold(inst, M):
    """Threshold of the aggregated estimate (``n + M + 4m`` columns)."""
    return varkappa(inst.sigma, inst.epsilon, inst.n + M + 4 * inst.m)


class _HProgram:
    """Compiled per-column program for the H contrast."""

    def __init__(self, inst, kappa, threshold, margin):
        s = inst.nuisance.s
        prog = ConicProgram("h-column")
        h = prog.vector("h", inst.m)
        v = prog.scalar("v")
        chi = prog.vector("chi", inst.X.n_forms, nonneg=True)
        e = prog.parameter("e", inst.n, value=np.zeros(inst.n))
        a = (inst.A.T @ h)
        T = sum(chi[k] * Tk for k, Tk in enumerate(inst.X.forms))
        prog.psd(cp.bmat([[cp.reshape(v, (1, 1), order="C"), cp.reshape(a, (1, inst.p), order="C")],
                          [cp.reshape(a, (inst.p, 1), order="C"), T]]), name="resp_lmi")
        prog.leq(cp.abs(e - inst.N.T @ h), (1.0 - margin) * kappa / s * np.ones(inst.n),
                 name="h_set")
        prog.minimize(2 * threshold * cp.norm2(h) + v + inst.X.tset.support_expr(chi))
        self.prog = prog

    def column(self, k, tol):
        e = np.zeros(self.prog.params["e"].shape[0])
        e[k] = 1.0
        res = solve(self.prog, tol=tol, params={"e": e})
        if res.status == "infeasible":
            raise InfeasibleError(f"no H column satisfies the entrywise bound for column {k}")
        if not res.ok:
            raise SolverError(f"H column program failed for column {k}", res.status)
        return res["h"], float(res.objective)


def synth_h_sparse(inst, s=None, kappa=0.25, threshold=None, tol=1e-8, margin=1e-6):
    """H contrast: per column ``min 2 thr ||h||_2 + 2 max_{x in X} |h'Ax|``
    subject to ``|[I - N'h e_k']_{jk}| <= kappa / s``.

    The inner maximum is replaced by its exact conic dual
    ``min_{v, chi >= 0} v + phi_T(chi)`` with ``[[v, h'A], [A'h, sum chi_k T_k]] >= 0``.
    The entrywise bound is imposed with a relative margin so the result is
    admissible exactly rather than up to solver tolerance.
    """
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("H synthesis needs sparse nuisance")
    if s is not None and s != inst.nuisance.s:
        raise DomainError("s disagrees with the instance sparsity")
    if not 0 < kappa < 0.5:
        raise DomainError("kappa must lie in (0, 1/2)")
    thr = hg_threshold(inst) if threshold is None else float(threshold)
    hp = _HProgram(inst, kappa, thr, margin)
    cols, objs = [], []
    for k in range(inst.n):
        h, obj = hp.column(k, tol)
        cols.append(h)
        objs.append(obj)
    H = ContrastMatrix(np.column_stack(cols), "h", thr)
    h_set_check(H, inst.N, inst.nuisance.s, kappa, tol=1e-12)
    return H


def _sparse_theta_program(inst, Mdiag, Mrank, Qm, alpha, theta1_basis, tol, h_cols=None,
                          h_weights=None, name="sparse-theta"):
    """Shared program: ``min phi_S + 4 phi_T [+ sum tau psi^2] + Tr(Theta2) + alpha rho``.

    Constraints: ``Tr(M_j Theta1) <= rho`` with ``M_j = Mdiag I + Mrank n_j n_j'``
    and the risk LMI with ``A'(Theta1 + Q Theta2 Q)A [+ A'H diag(tau) H'A]``.
    """
    A, N = inst.A, inst.N
    QA = Qm @ A
    U2 = orth_basis(QA)
    keep = None
    if h_cols is not None:
        C = A.T @ h_cols
        keep = (h_weights > 0) & (np.linalg.norm(C, axis=0) > 0)

    def build(scaling):
        prog = ConicProgram(name)
        t2 = _ThetaBlock(prog, "Z2", U2)
        gram = t2.gram(QA)
        obj = t2.trace()
        t1 = None
        rho = prog.scalar("rho", nonneg=True)
        if theta1_basis is not None:
            t1 = _ThetaBlock(prog, "Z1", theta1_basis)
            gram = gram + t1.gram(A)
            prog.leq(Mdiag * t1.trace() + Mrank * t1.quad(N), rho * np.ones(N.shape[1]),
                     name="m_cone")
        obj = obj + alpha * rho
        if keep is not None and keep.any():
            tau = prog.vector("tau_w", int(keep.sum()), nonneg=True)
            gram = gram + rank_one_sum(C[:, keep] / np.sqrt(h_weights[keep]), tau)
            obj = obj + cp.sum(tau)
        _, _, base = add_risk_lmi(prog, inst, gram, scaling)
        prog.minimize(base + obj)
        return prog, (t1, t2)

    res, prog, (t1, t2) = solve_risk_program(build, tol)
    if not res.ok:
        raise SolverError(f"{name} program failed", res.status)
    Theta2 = t2.value(res)
    Theta1 = t1.value(res) if t1 is not None else np.zeros((inst.m, inst.m))
    tau = None
    if h_cols is not None:
        tau = np.zeros(h_cols.shape[1])
        if keep.any():
            tau[keep] = np.maximum(res["tau_w"], 0.0) / h_weights[keep]
    return res, prog, Theta1, Theta2, tau


def _m_ratio(Theta1, Mdiag, Mrank, N):
    """``max_j Tr(M_j Theta1)``: the smallest ``rho`` making ``(Theta1, rho)`` feasible."""
    quad = np.einsum("ij,ik,kj->j", N, Theta1, N)
    return float(np.max(Mdiag * np.trace(Theta1) + Mrank * quad, initial=0.0))


def _solve_theta_modes(inst, mode, *args, **kwargs):
    """Run :func:`_sparse_theta_program` for ``mode``; ``auto`` tries ``full``
    (small ``m`` only) and falls back to ``range`` if that program fails."""
    if mode == "auto":
        modes = ["full", "range"] if inst.m <= FULL_THETA_MAX_DIM else ["range"]
    else:
        modes = [mode]
    for k, md in enumerate(modes):
        try:
            out = _sparse_theta_program(inst, *args[:4], _theta_basis(md, inst.m, inst.A),
                                        *args[4:], **kwargs)
            return out + (md,)
        except SolverError:
            if k == len(modes) - 1:
                raise
            log.info("Theta1 mode %s failed, retrying with %s", md, modes[k + 1])


def _columns_from_thetas(inst, Theta1, Theta2, rho, Mdiag, Mrank, Qm, seed, max_tries):
    """``G1`` from a decomposition of ``Theta1`` over ``{g : g'M_j g <= 1}``, ``G2 = Q Gamma``."""
    m, n = inst.m, inst.n
    forms = [Mdiag * np.eye(m) + Mrank * np.outer(nj, nj) for nj in inst.N.T]
    Mset = BasicEllitope(forms, Box(np.ones(n)), validate=False)
    dec = decompose_over_ellitope(Theta1, rho, Mset, seed=seed, max_tries=max_tries,
                                  check_cone=False)
    chi, Gamma = np.linalg.eigh(Theta2)
    chi = np.maximum(chi, 0.0)
    G2 = Qm @ Gamma
    return dec, G2, chi, Mset


def synth_g_sparse(inst, H, kappa=0.25, threshold=None, theta1_mode="auto", seed=0, tol=1e-8,
                   max_tries=64):
    """G contrast for an admissible H.

    With ``rho_H`` the nuisance bound of ``H``, ``M_j = 8 thr^2 I + 8 s^2 rho_H^2 n_j n_j'``
    and ``Q = (8 thr^2 I + 4 s rho_H^2 N N')^(-1/2)``, solves
    ``min phi_S + 4 phi_T + Tr(Theta2) + alpha rho`` subject to
    ``Tr(M_j Theta1) <= rho`` and the risk LMI with ``A'(Theta1 + Q Theta2 Q)A``,
    ``alpha = 2 sqrt(2) ln(4 m^2 n)``. ``G1`` decomposes ``Theta1`` over
    ``{g'M_j g <= 1}``; ``G2 = Q Gamma`` for ``Theta2 = Gamma diag(chi) Gamma'``.

    ``theta1_mode`` is ``full``, ``range`` (``Theta1`` restricted to the range of
    ``A``), ``zero`` or ``auto`` (full for small ``m``, falling back to ``range``).
    Restrictions shrink the feasible set, so the certificate stays valid.
    """
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("G synthesis needs sparse nuisance")
    s, m, n = inst.nuisance.s, inst.m, inst.n
    thr = float(threshold if threshold is not None else
                (H.threshold if isinstance(H, ContrastMatrix) and H.threshold is not None
                 else hg_threshold(inst)))
    Hm = as_matrix(H)
    rho_H = rho_h(inst, Hm, kappa, thr)
    if not np.any(inst.B):
        return _zero_report(inst, "sparse-theta", thr, H=ContrastMatrix(Hm, "h", thr),
                            rho_H=rho_H, kappa=kappa)
    Mdiag, Mrank = 8 * thr ** 2, 8 * s ** 2 * rho_H ** 2
    Qm = inv_sqrt(8 * thr ** 2 * np.eye(m) + 4 * s * rho_H ** 2 * inst.N @ inst.N.T, floor=1e-14)
    alpha = _alpha(m, n)
    res, prog, Theta1, Theta2, _, used = _solve_theta_modes(inst, theta1_mode, Mdiag, Mrank, Qm,
                                                            alpha, tol)
    rho_v = max(float(res["rho"]), _m_ratio(Theta1, Mdiag, Mrank, inst.N))
    QA = Qm @ inst.A
    cert = finalize(inst, "sparse-theta", res["lam"], res["mu"],
                    inst.A.T @ Theta1 @ inst.A + QA.T @ Theta2 @ QA,
                    float(np.trace(Theta2)) + alpha * rho_v, threshold=thr,
                    blocks={"Theta1": Theta1, "Theta2": Theta2},
                    scalars={"rho": rho_v, "alpha": alpha, "rho_H": rho_H, "kappa": kappa})
    dec, G2, chi, Mset = _columns_from_thetas(inst, Theta1, Theta2, rho_v, Mdiag, Mrank, Qm,
                                              seed, max_tries)
    G = ContrastMatrix(np.hstack([dec.vectors, G2]),
                       ("g1",) * dec.vectors.shape[1] + ("g2",) * G2.shape[1], thr)
    diag = dict(_diag(res, prog), theta1_mode=used, rho_H=rho_H)
    extras = {"H": ContrastMatrix(Hm, "h", thr), "instance": inst, "rho_H": rho_H, "Q": Qm,
              "chi": chi, "M": Mset, "kappa": kappa}
    return SynthesisReport(G, cert, diag, dec, extras)


def synth_alternative(inst, H_bar, threshold=None, theta1_mode="auto", use_tau=True, seed=0,
                      tol=1e-8, aux=None, max_tries=64):
    """G contrast for an arbitrary H (no admissibility requirement).

    Uses the nuisance accuracy bounds ``Opt_inf``, ``Opt_2`` of ``H_bar``,
    ``M_j = 8 thr^2 I + 8 s^2 Opt_inf^2 n_j n_j'`` and
    ``Q = (8 thr^2 I + 2 varrho_2^2 N N')^(-1/2)``, and adds multipliers
    ``tau >= 0`` on the H columns weighted by ``psi_H(h_i)^2``.
    """
    if not isinstance(inst.nuisance, Sparse):
        raise DomainError("alternative synthesis needs sparse nuisance")
    s, m, n = inst.nuisance.s, inst.m, inst.n
    Hm = as_matrix(H_bar)
    if threshold is None:
        threshold = (H_bar.threshold if isinstance(H_bar, ContrastMatrix)
                     and H_bar.threshold is not None else ig_threshold(inst, Hm.shape[1]))
    thr = float(threshold)
    if aux is None:
        aux = opt_programs(inst, Hm, thr, tol=tol)
    psi_h = psi_alt_columns(inst, Hm, aux)
    Hc = H_bar if isinstance(H_bar, ContrastMatrix) else ContrastMatrix(Hm, "h", thr)
    if not np.any(inst.B):
        return _zero_report(inst, "sparse-alt-theta", thr, H=Hc.with_threshold(thr), aux=aux,
                            psi_h=psi_h)
    Mdiag, Mrank = 8 * thr ** 2, 8 * s ** 2 * aux.opt_inf ** 2
    Qm = inv_sqrt(8 * thr ** 2 * np.eye(m) + 2 * aux.varrho2 ** 2 * inst.N @ inst.N.T, floor=1e-14)
    alpha = _alpha(m, n)
    try:
        res, prog, Theta1, Theta2, tau, used = _solve_theta_modes(
            inst, theta1_mode, Mdiag, Mrank, Qm, alpha, tol,
            h_cols=Hm if use_tau else None, h_weights=psi_h ** 2 if use_tau else None,
            name="sparse-alt-theta")
    except SolverError:
        if not use_tau:
            raise
        # tau = 0 is a restriction of the same program, so the bound stays valid
        log.info("sparse-alt-theta with tau failed, retrying with tau = 0")
        use_tau = False
        res, prog, Theta1, Theta2, tau, used = _solve_theta_modes(
            inst, theta1_mode, Mdiag, Mrank, Qm, alpha, tol, name="sparse-alt-theta")
    rho_v = max(float(res["rho"]), _m_ratio(Theta1, Mdiag, Mrank, inst.N))
    QA = Qm @ inst.A
    gram = inst.A.T @ Theta1 @ inst.A + QA.T @ Theta2 @ QA
    extra = float(np.trace(Theta2)) + alpha * rho_v
    if tau is not None:
        C = inst.A.T @ Hm
        gram = gram + (C * tau) @ C.T
        extra += float(tau @ psi_h ** 2)
    cert = finalize(inst, "sparse-alt-theta", res["lam"], res["mu"], gram, extra, threshold=thr,
                    blocks={"Theta1": Theta1, "Theta2": Theta2,
                            "tau": np.zeros(0) if tau is None else tau},
                    scalars={"rho": rho_v, "alpha": alpha, "opt2": aux.opt2,
                             "opt_inf": aux.opt_inf, "varrho2": aux.varrho2})
    dec, G2, chi, Mset = _columns_from_thetas(inst, Theta1, Theta2, rho_v, Mdiag, Mrank, Qm,
                                              seed, max_tries)
    G = ContrastMatrix(np.hstack([dec.vectors, G2]),
                       ("g1",) * dec.vectors.shape[1] + ("g2",) * G2.shape[1], thr)
    diag = dict(_diag(res, prog), theta1_mode=used, use_tau=use_tau)
    extras = {"H": Hc.with_threshold(thr), "instance": inst, "aux": aux, "psi_h": psi_h,
              "Q": Qm, "chi": chi, "M": Mset}
    return SynthesisReport(G, cert, diag, dec, extras)


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

AGG_ROLES = ("h_tilde", "h_bar", "g_tilde", "g_bar")


def build_aggregated_contrast(tilde, bar):
    """Stack ``[H~, H-, G~, G-]`` with role tags and the aggregated threshold.

    ``tilde`` comes from :func:`synth_g_sparse` (its ``extras['H']`` is ``H~``)
    and ``bar`` from :func:`synth_alternative`. The threshold uses the nominal
    column count ``n + M + 4m``.
    """
    inst = tilde.extras["instance"]
    if tilde.certificate.instance != bar.certificate.instance:
        raise DomainError("reports refer to different instances")
    Ht, Hb = tilde.extras["H"], bar.extras["H"]
    blocks = [(Ht.matrix, "h_tilde"), (Hb.matrix, "h_bar"),
              (tilde.contrast.matrix, "g_tilde"), (bar.contrast.matrix, "g_bar")]
    thr = aggregated_threshold(inst, Hb.ncols)
    mat = np.hstack([b for b, _ in blocks])
    roles = sum(((r,) * b.shape[1] for b, r in blocks), ())
    return ContrastMatrix(mat, roles, thr)


def certify_aggregated_contrast(inst, combined, kappa, tol=1e-8):
    """Both bounds of the aggregated estimate at its own threshold, and their minimum.

    Branch ``a`` treats ``H~`` as the admissible contrast and every other column
    as a G column; branch ``b`` bounds the nuisance error with all H columns and
    weights every column by ``psi_H``.
    """
    thr = combined.threshold
    Ht = combined.block("h_tilde")
    rest = ContrastMatrix(combined.matrix[:, [r != "h_tilde" for r in combined.roles]],
                          tuple(r for r in combined.roles if r != "h_tilde"), thr)
    cert_a = certify_sparse(inst, rest, Ht.matrix, kappa, threshold=thr, tol=tol)
    Hall = ContrastMatrix.concat([Ht, combined.block("h_bar")], thr)
    aux = opt_programs(inst, Hall.matrix, thr, tol=tol)
    cert_b = certify_sparse_alt(inst, combined, aux, tol=tol)
    return certify_aggregated(cert_a, cert_b), cert_a, cert_b, aux
