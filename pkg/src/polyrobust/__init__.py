"""Polyhedral estimates of linear images of signals observed with nuisance.

Modules
-------
conic
    Conic program assembly and a verified solve wrapper.
ellitope
    Basic ellitopes: membership, gauges, support functions, conic encodings.
model
    Problem instances, nuisance models, contrast matrices and thresholds.
certification
    Risk certificates for given contrasts.
synthesis
    Contrast design with certified risk.
recovery
    The polyhedral and l1 recovery programs.
sparse_l1
    Verifiable sparse-recovery condition and l1 error bounds.
harness
    Seeded Monte-Carlo experiments.
"""

from .certification import (RiskCertificate, certify_bounded, certify_sparse,
                            certify_sparse_alt, opt_programs, verify_certificate)
from .ellitope import BasicEllitope, Box, Product, ScaledPBall, euclidean_ball, lp_ball
from .errors import (DecompositionError, DimensionError, DomainError, InfeasibleError,
                     MembershipError, PolyRobustError, SolverError, UnboundedError)
from .model import (CoEllitopic, ContrastMatrix, EllitopicNuisance, NoNuisance, ProblemInstance,
                    Sparse, varkappa)
from .recovery import RecoveryOutput, make_estimator

__version__ = "0.1.0"

__all__ = [
    "BasicEllitope", "Box", "CoEllitopic", "ContrastMatrix", "DecompositionError",
    "DimensionError", "DomainError", "EllitopicNuisance", "InfeasibleError", "MembershipError",
    "NoNuisance", "PolyRobustError", "Product", "ProblemInstance", "RecoveryOutput",
    "RiskCertificate", "ScaledPBall", "SolverError", "Sparse", "UnboundedError",
    "certify_bounded", "certify_sparse", "certify_sparse_alt", "euclidean_ball", "lp_ball",
    "make_estimator", "opt_programs", "varkappa", "verify_certificate",
]
