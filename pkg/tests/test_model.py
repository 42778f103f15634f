import math

import numpy as np
import pytest

from polyrobust.ellitope import euclidean_ball, unit_box
from polyrobust.errors import DimensionError, DomainError, MembershipError
from polyrobust.model import (CoEllitopic, ContrastMatrix, EllitopicNuisance,
                              ProblemInstance, Sparse, in_confidence_set, nuisance_member,
                              nuisance_seminorm, sample_observation, varkappa)

from conftest import bounded_instance, sparse_instance


def test_varkappa_values():
    import mpmath
    mpmath.mp.dps = 30
    exact = float(mpmath.mpf("0.1") * mpmath.sqrt(2 * mpmath.log(2 * 512 / mpmath.mpf("0.05"))))
    assert varkappa(0.1, 0.05, 512) == pytest.approx(exact, rel=1e-14)
    assert varkappa(0.1, 0.05, 512) == pytest.approx(0.445585, abs=5e-6)
    assert varkappa(0.1, 2 * 7, 7) == 0.0
    assert varkappa(0.2, 0.05, 9) == pytest.approx(2 * varkappa(0.1, 0.05, 9))
    for bad in ((0.0, 0.05, 1), (0.1, 0.0, 1), (0.1, 0.05, 0), (0.1, 5.0, 2)):
        with pytest.raises(DomainError):
            varkappa(*bad)


def test_instance_validation():
    inst = bounded_instance()
    assert (inst.m, inst.p, inst.q, inst.n) == (6, 3, 3, 0)
    with pytest.raises(DimensionError):
        ProblemInstance(A=np.ones((4, 3)), B=np.eye(2), X=unit_box(3), Bstar=euclidean_ball(2))
    with pytest.raises(DimensionError):
        ProblemInstance(A=np.ones((4, 3)), B=np.eye(3), X=unit_box(2), Bstar=euclidean_ball(3))
    with pytest.raises(DimensionError):
        ProblemInstance(A=np.ones((4, 3)), B=np.eye(3), X=unit_box(3), Bstar=euclidean_ball(3),
                        nuisance=Sparse(3), N=np.eye(4)[:, :2])
    with pytest.raises(DimensionError):
        ProblemInstance(A=np.ones((4, 3)), B=np.eye(3), X=unit_box(3), Bstar=euclidean_ball(3),
                        nuisance=CoEllitopic(euclidean_ball(4)), N=2 * np.eye(4))
    with pytest.raises(DomainError):
        Sparse(0)
    co = ProblemInstance(A=np.ones((4, 3)), B=np.eye(3), X=unit_box(3), Bstar=euclidean_ball(3),
                         nuisance=CoEllitopic(euclidean_ball(4)))
    assert np.array_equal(co.N, np.eye(4))


def test_instance_round_trip_and_digest():
    inst = sparse_instance()
    again = ProblemInstance.from_dict(inst.to_dict())
    assert again.digest == inst.digest
    assert inst.with_(sigma=0.2).digest != inst.digest


def test_sample_observation():
    inst = bounded_instance(sigma=1e-12)
    x = np.array([0.2, -0.1, 0.3])
    assert np.allclose(sample_observation(inst, x, None, 0), inst.A @ x, atol=1e-10)
    inst = bounded_instance(sigma=0.3)
    a, b = sample_observation(inst, x, None, 7), sample_observation(inst, x, None, 7)
    assert np.array_equal(a, b)
    with pytest.raises(MembershipError):
        sample_observation(inst, 3 * np.ones(3), None, 0, checked=True)


def test_noise_variance():
    inst = bounded_instance(m=5, sigma=0.3)
    draws = np.array([sample_observation(inst, np.zeros(3), None, k) for k in range(10_000)])
    assert np.allclose(draws.var(axis=0), 0.09, rtol=0.05)


def test_confidence_set_examples(rng):
    g = rng.standard_normal((5, 1))
    assert in_confidence_set(g, np.zeros(5), 0.3)
    xi = (0.3 + 1e-6) * g[:, 0] / np.linalg.norm(g)
    assert not in_confidence_set(g, xi, 0.3)
    assert in_confidence_set(np.zeros((5, 0)), xi, 0.3)


def test_confidence_set_frequency(rng):
    eps, sigma, I = 0.05, 1.0, 8
    G = rng.standard_normal((10, I))
    kap = varkappa(sigma, eps, I)
    out = sum(not in_confidence_set(G, sigma * rng.standard_normal(10), kap)
              for _ in range(10_000))
    assert out / 10_000 <= eps + 3 * math.sqrt(eps * (1 - eps) / 10_000)


def test_nuisance_seminorm(rng):
    spec = EllitopicNuisance(euclidean_ball(4))
    h = rng.standard_normal(4)
    assert nuisance_seminorm(spec, np.eye(4), h) == pytest.approx(np.linalg.norm(h), rel=1e-9)
    assert nuisance_seminorm(spec, np.eye(4), np.zeros(4)) == 0.0
    box = EllitopicNuisance(unit_box(5))
    N = rng.standard_normal((3, 5))
    h = rng.standard_normal(3)
    verts = np.array(np.meshgrid(*[[-1, 1]] * 5)).T.reshape(-1, 5)
    assert nuisance_seminorm(box, N, h) == pytest.approx((verts @ (N.T @ h)).max(), rel=1e-6)
    co = CoEllitopic(euclidean_ball(3, 2.0))
    assert nuisance_seminorm(co, np.eye(3), h) == pytest.approx(np.linalg.norm(h) / 2)
    with pytest.raises(DomainError):
        nuisance_seminorm(Sparse(1), np.eye(3), h)


def test_nuisance_member():
    inst = sparse_instance(m=6, s=2)
    assert nuisance_member(inst, np.r_[1.0, 0, 0, 0, 2.0, 0])
    assert not nuisance_member(inst, np.r_[1.0, 1, 1, 0, 0, 0])
    co = bounded_instance().with_(nuisance=CoEllitopic(euclidean_ball(6, 2.0)), N=None)
    assert nuisance_member(co, np.full(6, 0.5 / math.sqrt(6)))
    assert not nuisance_member(co, np.full(6, 0.6 / math.sqrt(6)))


def test_contrast_matrix():
    G = ContrastMatrix.from_columns([np.r_[1.0, 0], np.zeros(2), np.r_[0, 2.0]], 2, "g", 0.5)
    assert G.ncols == 2 and G.max_norm == 2.0
    H = ContrastMatrix(np.eye(2), "h")
    C = ContrastMatrix.concat([H, G], 0.7)
    assert C.roles == ("h", "h", "g", "g") and C.threshold == 0.7
    assert C.block("g").ncols == 2
    assert ContrastMatrix.from_dict(C.to_dict()).roles == C.roles
    with pytest.raises(DimensionError):
        ContrastMatrix(np.eye(2), ("g",))
    with pytest.raises(DomainError):
        ContrastMatrix(np.eye(2), None, -1.0)
