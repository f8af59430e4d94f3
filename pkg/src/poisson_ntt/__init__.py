"""Poisson-structure-preserving new-time transformations.

Decide whether dtau = dt/eta(x) keeps the structure matrix of a Poisson
system x' = J(x) grad H(x), build the rescaled Hamiltonian when it does, and
verify the Poisson data (Jacobi PDEs, Casimirs, rank) on sampled domains.
"""
from .expr import (DomainError, Expr, ParseError, check_derivative_numerically, differentiate,
                   evaluate, gradient, parse, simplify, substitute)
from .poisson import (Domain, PoissonSystem, SamplePlan, StructureMatrix, VerificationReport,
                      bracket, check_casimir, check_casimir_independence, check_jacobi,
                      check_rank_constant, numerical_rank, rank_at)
from .ntt import (Factorization, NttPremiseError, NttVerdict, analyze, classify,
                  functional_dependence_test, gradient_test, implicit_eta, rescale)
from .dynamics import Trajectory, integrate, invariant_drift, orbit_coincidence

__version__ = "0.1.0"
