import numpy as np
import pytest

from polyrobust.ellitope import euclidean_ball, lp_ball, unit_box
from polyrobust.model import ProblemInstance, Sparse

ACCEPTANCE = []


def record_acceptance(criterion, passed, detail=""):
    ACCEPTANCE.append((criterion, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}")


def bounded_instance(m=6, p=3, seed=0, sigma=0.1, epsilon=0.05, X=None, B=None):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((m, p))
    B = np.eye(p) if B is None else B
    X = lp_ball(p, 2, 1.0) if X is None else X
    return ProblemInstance(A=A, B=B, X=X, Bstar=euclidean_ball(B.shape[0]), sigma=sigma,
                           epsilon=epsilon)


def sparse_instance(m=12, p=3, s=1, seed=0, sigma=0.05, epsilon=0.05, X=None):
    rng = np.random.default_rng(seed)
    A = np.linalg.qr(rng.standard_normal((m, p)))[0]
    X = unit_box(p) if X is None else X
    return ProblemInstance(A=A, B=np.eye(p), X=X, Bstar=euclidean_ball(p), nuisance=Sparse(s),
                           N=np.eye(m), sigma=sigma, epsilon=epsilon)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
