import math

import numpy as np
import pytest

from polyrobust.certification import (certify_bounded, certify_sparse, certify_sparse_alt,
                                      lmi_matrix, phi_s, phi_t, verify_certificate)
from polyrobust.conic import psd_check
from polyrobust.ellitope import (BasicEllitope, Box, ScaledPBall, cw_ellitope,
                                 euclidean_ball, k_cone_ratio, unit_box)
from polyrobust.errors import DecompositionError, DomainError, MembershipError, SolverError
from polyrobust.model import (CoEllitopic, ContrastMatrix, EllitopicNuisance, ProblemInstance,
                              in_confidence_set, varkappa)
from polyrobust.recovery import L1Estimator
from polyrobust.sparse_l1 import h_set_check
from polyrobust import synthesis as syn

from conftest import bounded_instance, sparse_instance


def random_ellitope(m, J, rng):
    forms = []
    for _ in range(J):
        k = int(rng.integers(1, m + 1))
        F = rng.standard_normal((k, m))
        forms.append(F.T @ F)
    forms[0] = forms[0] + 0.5 * np.eye(m)
    tset = Box(rng.uniform(0.5, 2.0, J)) if rng.random() < 0.5 else ScaledPBall(
        float(rng.choice([2.0, 4.0, 6.0])), float(rng.uniform(0.5, 2.0)), J)
    return BasicEllitope(forms, tset)


def random_cone_point(m, J, rng):
    W = random_ellitope(m, J, rng)
    r = int(rng.integers(1, m + 1))
    F = rng.standard_normal((m, r))
    Theta = F @ F.T
    return Theta, k_cone_ratio(Theta, W), W


def check_decomposition(Theta, rho, W, dec):
    rec = np.linalg.norm(Theta - (dec.vectors * dec.gammas) @ dec.vectors.T)
    assert rec <= 1e-6 * (1 + np.linalg.norm(Theta))
    assert all(W.gauge(w) <= 1 + 1e-7 for w in dec.vectors.T)
    assert dec.gammas.sum() <= dec.claimed_budget + 1e-7
    assert dec.claimed_budget == pytest.approx(2 * math.sqrt(2) * math.log(4 * W.dim ** 2
                                                                             * W.n_forms) * rho)


def test_single_ball_decomposition_is_eigendecomposition(rng):
    F = rng.standard_normal((5, 5))
    Theta = F @ F.T
    W = euclidean_ball(5)
    rho = np.trace(Theta)
    dec = syn.decompose_over_ellitope(Theta, rho, W)
    ev = np.linalg.eigvalsh(Theta)
    assert dec.attempts == 1
    assert np.allclose(np.sort(dec.gammas), ev, rtol=1e-10)
    assert np.allclose(np.linalg.norm(dec.vectors, axis=0), 1.0)
    assert dec.gammas.sum() == pytest.approx(rho)
    check_decomposition(Theta, rho, W, dec)


def test_zero_and_invalid_decompositions():
    W = euclidean_ball(3)
    dec = syn.decompose_over_ellitope(np.zeros((3, 3)), 0.0, W)
    assert dec.gammas.size == 0
    with pytest.raises(MembershipError):
        syn.decompose_over_ellitope(np.eye(3), 1.0, W)
    with pytest.raises(DomainError):
        syn.decompose_over_ellitope(np.eye(3), 3.0, W, I=2)


def test_random_ellitope_decompositions(rng):
    Theta, rho, W = random_cone_point(8, 3, rng)
    for seed in range(20):
        dec = syn.decompose_over_ellitope(Theta, rho, W, seed=seed)
        check_decomposition(Theta, rho, W, dec)


def test_decomposition_failure_is_reported():
    W = euclidean_ball(2)
    Theta = np.eye(2)
    with pytest.raises(DecompositionError) as err:
        syn.decompose_over_ellitope(Theta, 0.01, W, check_cone=False, max_tries=2)
    assert err.value.best_budget > err.value.claimed_budget


# ---------------------------------------------------------------------------
# bounded nuisance
# ---------------------------------------------------------------------------

def test_no_nuisance_rank_one():
    A = np.zeros((4, 1))
    A[0, 0] = 1.0
    inst = ProblemInstance(A=A, B=np.eye(1), X=unit_box(1), Bstar=euclidean_ball(1))
    rep = syn.synth_no_nuisance(inst)
    kap = varkappa(inst.sigma, inst.epsilon, 4)
    assert rep.contrast.ncols == 1
    assert np.allclose(np.abs(rep.contrast.matrix[:, 0]), np.eye(4)[0] / kap)
    ups = rep.extras["Theta"][0, 0]
    assert rep.certificate.gamma[0] == pytest.approx(kap ** 2 * ups)


def test_no_nuisance_zero_target():
    inst = bounded_instance(B=np.zeros((2, 3)))
    rep = syn.synth_no_nuisance(inst)
    assert rep.value == 0.0 and rep.contrast.ncols == 0


def test_no_nuisance_round_trip_and_scaling():
    for seed in range(3):
        inst = bounded_instance(m=6, p=3, seed=seed)
        rep = syn.synth_no_nuisance(inst)
        assert verify_certificate(inst, rep.certificate, rep.contrast) == []
        again = certify_bounded(inst, rep.contrast).value
        assert again == pytest.approx(rep.value, rel=1e-5)
        doubled = certify_bounded(inst, rep.contrast.scaled(2.0)).value
        assert doubled == pytest.approx(again, rel=1e-6)


def test_more_columns_than_observations():
    inst = bounded_instance(m=5, p=2)
    rep = syn.synth_no_nuisance(inst, I=12)
    assert rep.contrast.threshold == pytest.approx(varkappa(inst.sigma, inst.epsilon, 12))
    with pytest.raises(DomainError):
        syn.synth_no_nuisance(inst, I=3)


def test_ellitopic_nuisance_continuity(rng):
    inst = bounded_instance(m=6, p=3)
    base = syn.synth_no_nuisance(inst).value
    tiny = inst.with_(nuisance=EllitopicNuisance(euclidean_ball(2, 1e-4)),
                      N=rng.standard_normal((6, 2)))
    rep = syn.synth_ellitopic_nuisance(tiny)
    assert rep.extras["augmented"].p == inst.p + 2
    assert base - 1e-6 <= rep.value <= 2 * base
    assert verify_certificate(rep.extras["augmented"], rep.certificate, rep.contrast) == []


def coellitopic_instance(sigma=0.01, radius=20.0, seed=0, m=6, p=3):
    inst = bounded_instance(m=m, p=p, seed=seed, sigma=sigma)
    return inst.with_(nuisance=CoEllitopic(euclidean_ball(m, radius)), N=None)


def test_coellitopic_audit():
    inst = coellitopic_instance()
    rep = syn.synth_coellitopic(inst)
    opt_star = rep.diagnostics["opt_star"]
    assert rep.value <= opt_star + 1e-6 * (1 + opt_star)
    assert verify_certificate(inst, rep.certificate, rep.contrast) == []
    # the decomposed contrast certified from scratch is no worse than the audit value
    assert certify_bounded(inst, rep.contrast).value <= rep.value + 1e-6 * (1 + rep.value)
    W = rep.extras["W"]
    assert all(W.gauge(g) <= 1 + 1e-7 for g in rep.contrast.matrix.T)


def test_coellitopic_zero_target():
    inst = coellitopic_instance().with_(B=np.zeros((3, 3)))
    rep = syn.synth_coellitopic(inst)
    assert rep.value == 0.0 and rep.contrast.ncols == 0


@pytest.mark.parametrize("t", [0.5, 2.0])
def test_coellitopic_scaled_multipliers_stay_feasible(t):
    inst = coellitopic_instance()
    cert = syn.synth_coellitopic(inst).extras["program_certificate"]
    Theta, rho = cert.blocks["Theta"], cert.scalars["rho"]
    lam, mu = cert.lam / t, t * cert.mu
    gram = inst.A.T @ (t * Theta) @ inst.A
    assert psd_check(lmi_matrix(inst, lam, mu, gram), 1e-7)
    W = cw_ellitope(inst.nuisance.Nstar, cert.threshold)
    assert k_cone_ratio(t * Theta, W) <= t * rho * (1 + 1e-7) + 1e-12
    alpha = cert.scalars["alpha"]
    obj = phi_s(inst, lam) + t * (4 * phi_t(inst, cert.mu) + 4 * alpha * rho)
    assert obj == pytest.approx(phi_s(inst, cert.lam) / t
                                + t * (4 * phi_t(inst, cert.mu) + 4 * alpha * rho))


# ---------------------------------------------------------------------------
# sparse nuisance
# ---------------------------------------------------------------------------

def test_h_synthesis_identity_upper_bound():
    inst = sparse_instance(m=6, p=2, s=1)
    inst0 = inst.with_(A=np.zeros_like(inst.A))
    H = syn.synth_h_sparse(inst0, kappa=0.25)
    thr = H.threshold
    objs = 2 * thr * np.linalg.norm(H.matrix, axis=0)
    # e_k is feasible with objective 2 thr
    assert np.all(objs <= 2 * thr * (1 + 1e-6))
    h_set_check(H, inst.N, 1, 0.25)


def test_h_synthesis_monotone_in_kappa():
    inst = sparse_instance(m=8, p=2, s=1, seed=3)
    from polyrobust.certification import rho_h
    H1 = syn.synth_h_sparse(inst, kappa=0.25)
    H2 = syn.synth_h_sparse(inst, kappa=0.125)
    h_set_check(H2, inst.N, 1, 0.125)
    r1 = rho_h(inst, H1, 0.25, H1.threshold) * (1 - 0.5)
    r2 = rho_h(inst, H2, 0.125, H2.threshold) * (1 - 0.25)
    assert r2 >= r1 - 1e-6 * (1 + r1)


@pytest.fixture(scope="module")
def sparse_reports():
    inst = sparse_instance(m=12, p=3, s=1, seed=1, sigma=0.02)
    H = syn.synth_h_sparse(inst, kappa=0.25)
    tilde = syn.synth_g_sparse(inst, H, kappa=0.25)
    Hbar = ContrastMatrix(np.eye(inst.m), "h", syn.ig_threshold(inst, inst.m))
    bar = syn.synth_alternative(inst, Hbar)
    return inst, H, tilde, bar


def test_g_sparse_certificate(sparse_reports):
    inst, H, tilde, _ = sparse_reports
    assert verify_certificate(inst, tilde.certificate) == []
    again = certify_sparse(inst, tilde.contrast, H, 0.25, threshold=H.threshold)
    assert again.value <= tilde.value + 1e-6 * (1 + tilde.value)
    assert tilde.contrast.ncols <= 2 * inst.m


def test_g_sparse_identity_theta2(sparse_reports):
    inst, H, tilde, _ = sparse_reports
    Q = tilde.extras["Q"]
    _, G2, chi, _ = syn._columns_from_thetas(inst, np.zeros((inst.m, inst.m)), np.eye(inst.m),
                                             0.0, 1.0, 1.0, Q, 0, 4)
    assert np.allclose(G2 @ G2.T, Q @ Q.T, atol=1e-10)
    assert np.allclose(chi, 1.0)


def test_g_sparse_zero_target(sparse_reports):
    inst, H, _, _ = sparse_reports
    rep = syn.synth_g_sparse(inst.with_(B=np.zeros((3, 3))), H.matrix, kappa=0.25)
    assert rep.value == 0.0


def test_g_columns_obey_the_unit_bounds(sparse_reports):
    inst, H, tilde, _ = sparse_reports
    D = ContrastMatrix.concat([H, tilde.contrast], H.threshold)
    est = L1Estimator(inst, D, H.threshold)
    rng = np.random.default_rng(8)
    G = tilde.contrast
    checked = 0
    for _ in range(30):
        x = rng.uniform(-1, 1, inst.p)
        nu = np.zeros(inst.n)
        nu[rng.integers(inst.n)] = rng.choice([-1, 1]) * 0.5
        xi = inst.sigma * rng.standard_normal(inst.m)
        if not in_confidence_set(D, xi, H.threshold):
            continue
        out = est.estimate(inst.A @ x + nu + xi)
        resp = G.matrix.T @ inst.A @ (out.x_hat - x)
        assert np.all(resp ** 2 <= 1 + 1e-6)
        checked += 1
    assert checked >= 25


def test_alternative_certificate(sparse_reports):
    inst, _, _, bar = sparse_reports
    assert verify_certificate(inst, bar.certificate) == []
    Hbar = bar.extras["H"]
    D = ContrastMatrix.concat([Hbar, bar.contrast], Hbar.threshold)
    again = certify_sparse_alt(inst, D, bar.extras["aux"])
    assert again.value <= bar.value + 1e-6 * (1 + bar.value)


def test_alternative_restrictions_do_not_help(sparse_reports):
    inst, _, _, bar = sparse_reports
    aux, Hbar = bar.extras["aux"], bar.extras["H"]
    no_tau = syn.synth_alternative(inst, Hbar, aux=aux, use_tau=False)
    no_theta1 = syn.synth_alternative(inst, Hbar, aux=aux, theta1_mode="zero")
    opt = bar.certificate.value
    assert no_tau.certificate.value >= opt - 1e-5 * (1 + opt)
    assert no_theta1.certificate.value >= opt - 1e-5 * (1 + opt)


def test_alternative_falls_back_to_zero_tau(sparse_reports, monkeypatch):
    inst, _, _, bar = sparse_reports
    aux, Hbar = bar.extras["aux"], bar.extras["H"]
    real = syn._solve_theta_modes

    def failing_with_tau(*args, h_cols=None, **kwargs):
        if h_cols is not None:
            raise SolverError("forced failure", "numerical-failure")
        return real(*args, **kwargs)

    monkeypatch.setattr(syn, "_solve_theta_modes", failing_with_tau)
    rep = syn.synth_alternative(inst, Hbar, aux=aux)
    assert rep.diagnostics["use_tau"] is False
    assert np.all(rep.certificate.blocks["tau"] == 0)
    assert verify_certificate(inst, rep.certificate) == []
    monkeypatch.setattr(syn, "_solve_theta_modes", real)
    ref = syn.synth_alternative(inst, Hbar, aux=aux, use_tau=False)
    assert rep.value == pytest.approx(ref.value, rel=1e-6)


def test_aggregated_contrast(sparse_reports):
    inst, H, tilde, bar = sparse_reports
    combined = syn.build_aggregated_contrast(tilde, bar)
    M = bar.extras["H"].ncols
    assert combined.ncols == inst.n + M + tilde.contrast.ncols + bar.contrast.ncols
    assert combined.ncols <= inst.n + M + 4 * inst.m
    assert set(combined.roles) == set(syn.AGG_ROLES)
    assert sum(combined.block(r).ncols for r in syn.AGG_ROLES) == combined.ncols
    assert combined.threshold == pytest.approx(
        varkappa(inst.sigma, inst.epsilon, inst.n + M + 4 * inst.m))
    agg, a, b, _ = syn.certify_aggregated_contrast(inst, combined, 0.25)
    assert agg.value == min(a.value, b.value)
