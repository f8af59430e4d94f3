"""New-time transformations dtau = dt / eta(x) that keep the structure matrix.

The reparametrized field eta*J*grad(H) is again Poisson with the *same* J iff
eta*J*grad(H) = J*grad(H*) for some rescaled Hamiltonian H*.  This module
decides that question on a sample plan (curl test in the symplectic case,
functional dependence of eta on H and the Casimirs otherwise), builds H* from
a user-supplied primitive Phi, derives eta from an implicit relation
F(H, H*, C...) = 0, and checks the rescaled-structure cases J* = eta0*J,
C*J and c*J.

Functions of H and the Casimirs are written over reserved symbols: ``z1``
stands for H and ``z2``, ``z3``, ... for the Casimirs (for Phi); in F, ``z1``
is H, ``z2`` is H* and ``z3``, ... are the Casimirs.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .expr import (Binary, Const, Expr, Var, compile_exprs, differentiate, free_indices,
                   gradient, parse, substitute)
from .poisson import (FAIL, INCONCLUSIVE, PASS, SKIPPED, CheckResult, PoissonSystem,
                      SamplePlan, StructureMatrix, VerificationReport, check_casimir,
                      check_jacobi, check_nonvanishing, numerical_rank, plan_tolerances,
                      residual_check, sweep)

YES, NO = "yes", "no"

CRITERION_GRADIENT = "gradient test (curl conditions), sampled"
CRITERION_DEPENDENCE = "functional dependence, sampled"

# fraction of degenerate points tolerated before the dependence test gives up
MAX_DEGENERATE_FRACTION = 0.10


class NttPremiseError(ValueError):
    """A premise of the transformation fails at a sample point (e.g. eta vanishes)."""

    def __init__(self, message: str, check: CheckResult | None = None):
        self.check = check
        if check is not None and check.witness is not None:
            message += (f" (|value| = {check.residual:.3e} at "
                        f"({', '.join(f'{v:.6g}' for v in check.witness)}))")
        super().__init__(message)


# ---------------------------------------------------------------------------
# specs and verdicts

@dataclass(frozen=True)
class ExplicitEta:
    eta: Expr


@dataclass(frozen=True)
class Constructive:
    """Primitive Phi(z1, z2, ...) with z1 -> H and z_{i+1} -> C_i."""
    phi: Expr


@dataclass(frozen=True)
class Implicit:
    """Relation F(z1, z2, z3, ...) = 0 with z1 -> H, z2 -> H*, z_{i+2} -> C_i."""
    F: Expr
    hstar: Expr | None = None


@dataclass(frozen=True)
class Factorization:
    """Candidate eta = factor * d_H Phi for the rescaled-structure cases.

    Exactly one of ``eta0`` (rank 2), ``casimir_factor`` (rank >= 4) or ``c``
    (symplectic, rank >= 4) is given.
    """
    phi: Expr
    eta0: Expr | None = None
    casimir_factor: Expr | None = None
    c: Fraction | None = None


NttSpec = ExplicitEta | Constructive | Implicit


@dataclass
class NttVerdict:
    preserves: str
    criterion: str
    report: VerificationReport
    eta: Expr | None = None
    hstar: Expr | None = None
    tag: str | None = None
    eta_variables: tuple[str, ...] = field(default=())

    @property
    def label(self) -> str:
        return f"{self.preserves} (criterion: {self.criterion})"


def reserved_symbols(count: int) -> list[str]:
    return [f"z{i}" for i in range(1, count + 1)]


def _check_reserved(system: PoissonSystem, names: Sequence[str]):
    clash = set(system.variables) & set(names)
    if clash:
        raise ValueError(f"system variables {sorted(clash)} collide with reserved symbols")


def parse_phi(system: PoissonSystem, source: str) -> Expr:
    names = reserved_symbols(len(system.casimirs) + 1)
    _check_reserved(system, names)
    return parse(source, names)


def parse_relation(system: PoissonSystem, source: str) -> Expr:
    names = reserved_symbols(len(system.casimirs) + 2)
    _check_reserved(system, names)
    return parse(source, names)


def _yes_no(verdict: str) -> str:
    return {PASS: YES, FAIL: NO}.get(verdict, INCONCLUSIVE)


# ---------------------------------------------------------------------------
# criteria

def curl_components(eta: Expr, H: Expr, n: int):
    """Product-rule pieces of d_i(eta d_j H) - d_j(eta d_i H) for i < j."""
    dH, deta = gradient(H, n), gradient(eta, n)
    out = []
    for i, j in itertools.combinations(range(n), 2):
        out.append(((i, j), [deta[i] * dH[j], eta * differentiate(dH[j], i),
                             deta[j] * dH[i], eta * differentiate(dH[i], j)]))
    return out


def gradient_test(eta: Expr, H: Expr, plan: SamplePlan, name: str = "gradient_test") -> CheckResult:
    """Sampled test that eta*grad(H) is curl-free.

    Keeps the signed residual of every pair (i, j), i < j, at every point in
    ``samples``, ordered as ``itertools.combinations(range(n), 2)``.
    """
    n = plan.domain.dim
    comps = curl_components(eta, H, n)
    if not comps:
        return CheckResult(name, PASS, detail="n = 1")
    fn = compile_exprs([t for _, terms in comps for t in terms])

    def at(p):
        v = fn(p)
        res = [v[4 * q] + v[4 * q + 1] - v[4 * q + 2] - v[4 * q + 3] for q in range(len(comps))]
        return res, max(map(abs, v))

    return residual_check(name, plan, at, keep_samples=True,
                          detail=f"{len(comps)} curl condition(s) on ({eta})*grad(H)")


def _normalized_rows(m: np.ndarray) -> np.ndarray:
    scale = np.abs(m).max(axis=1, keepdims=True)
    scale[scale == 0.0] = 1.0
    return m / scale


def functional_dependence_test(eta: Expr, H: Expr, casimirs: Sequence[Expr], plan: SamplePlan,
                               name: str = "functional_dependence") -> CheckResult:
    """Is eta a function of (H, C_1, ..., C_k) on the sample?

    Compares the numerical rank of the Jacobian of (eta, H, C...) with that
    of (H, C...) at each point, rows scaled to unit max-norm.  Points where
    the base Jacobian loses rank are excluded; past 10% of the sample the
    verdict is inconclusive.  The residual is the relative distance of
    grad(eta) from the span of the base gradients.
    """
    n = plan.domain.dim
    base = [H, *casimirs]
    k1 = len(base)
    fn = compile_exprs([d for f in (eta, *base) for d in gradient(f, n)])

    def at(p):
        m = np.array(fn(p)).reshape(k1 + 1, n)
        b = _normalized_rows(m[1:])
        rank_base = numerical_rank(b, rtol=plan.pivot_rtol)
        aug = _normalized_rows(m)
        rank_aug = numerical_rank(aug, rtol=plan.pivot_rtol)
        g = m[0]
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            dist = 0.0
        else:
            coef, *_ = np.linalg.lstsq(b.T, g, rcond=None)
            dist = float(np.linalg.norm(g - b.T @ coef) / gnorm)
        return rank_base, rank_aug, dist

    results, discarded = sweep(plan, at, name)
    tol = f"pivot_rtol={plan.pivot_rtol:g}"
    degenerate = [p for p, (rb, _, _) in results if rb < k1]
    independent = [(p, d) for p, (rb, ra, d) in results if rb == k1 and ra > rb]
    used = len(results) - len(degenerate)
    detail = f"rank(grad H, grad C...) < {k1} at {len(degenerate)} point(s)" if degenerate else ""
    if independent:
        p, d = max(independent, key=lambda pd: pd[1])
        return CheckResult(name, FAIL, d, p, tol, used, discarded,
                           f"eta is independent of (H, C...) at {len(independent)} point(s)"
                           + (f"; {detail}" if detail else ""))
    if len(degenerate) > MAX_DEGENERATE_FRACTION * len(results):
        return CheckResult(name, INCONCLUSIVE, 0.0, degenerate[0], tol, used, discarded,
                           detail + " (more than 10% of the sample)")
    worst = max((d for _, (_, _, d) in results), default=0.0)
    return CheckResult(name, PASS, worst, None, tol, used, discarded, detail)


def identity_check(J_left: StructureMatrix, eta: Expr, H: Expr, J_right: StructureMatrix,
                   hstar: Expr, plan: SamplePlan, name: str = "rescaled_hamiltonian_identity",
                   keep_samples: bool = True) -> CheckResult:
    """Sampled check of eta * J_left grad(H) = J_right grad(H*)."""
    n = J_left.n
    fn = compile_exprs([eta, *gradient(H, n), *gradient(hstar, n)])

    def at(p):
        v = fn(p)
        e, gH, gS = v[0], np.array(v[1:n + 1]), np.array(v[n + 1:])
        A = e * J_left.evaluate(p) * gH
        B = J_right.evaluate(p) * gS
        scale = max(np.abs(A).max(initial=0.0), np.abs(B).max(initial=0.0))
        return A.sum(axis=1) - B.sum(axis=1), scale

    return residual_check(name, plan, at, keep_samples, detail=f"H* = {hstar}")


def _require(check: CheckResult, message: str):
    if check.verdict == FAIL:
        raise NttPremiseError(message, check)
    return check


# ---------------------------------------------------------------------------
# operations

def analyze(system: PoissonSystem, eta: Expr, plan: SamplePlan,
            phi: Expr | None = None) -> NttVerdict:
    """Decide whether dtau = dt/eta keeps the structure matrix of ``system``.

    Symplectic systems use the curl test on eta*grad(H); otherwise eta must
    be functionally dependent on H and the Casimirs.  When a primitive
    ``phi`` is supplied, yes additionally requires eta J grad H = J grad H*.
    """
    report = VerificationReport(tolerances=plan_tolerances(plan))
    report.add(_require(check_nonvanishing(eta, plan, "eta_nonvanishing"),
                        "eta vanishes at an accepted point"))
    if system.symplectic:
        criterion = CRITERION_GRADIENT
        main = gradient_test(eta, system.hamiltonian, plan)
    else:
        criterion = CRITERION_DEPENDENCE
        main = functional_dependence_test(eta, system.hamiltonian, system.casimirs, plan)
    report.add(main)
    preserves = _yes_no(main.verdict)
    hstar = None
    if phi is not None:
        subs = [system.hamiltonian, *system.casimirs]
        hstar = substitute(phi, subs)
        ident = identity_check(system.J, eta, system.hamiltonian, system.J, hstar, plan)
        report.add(ident)
        if ident.verdict == FAIL:
            preserves = NO
    return NttVerdict(preserves, criterion, report, eta, hstar)


def rescale(system: PoissonSystem, phi: Expr, plan: SamplePlan) -> NttVerdict:
    """Build H* = Phi(H, C...) and eta = d_z1 Phi(H, C...), then verify them."""
    subs = [system.hamiltonian, *system.casimirs]
    hstar = substitute(phi, subs)
    eta = substitute(differentiate(phi, 0), subs)
    report = VerificationReport(tolerances=plan_tolerances(plan))
    report.add(_require(check_nonvanishing(eta, plan, "eta_nonvanishing"),
                        f"derived eta = {eta} vanishes at an accepted point"))
    ident = identity_check(system.J, eta, system.hamiltonian, system.J, hstar, plan)
    report.add(ident)
    return NttVerdict(_yes_no(ident.verdict), "constructive primitive, sampled identity",
                      report, eta, hstar)


def _additive_terms(e: Expr) -> list[Expr]:
    if isinstance(e, Binary) and e.op in ("add", "sub"):
        right = _additive_terms(e.right)
        if e.op == "sub":
            right = [-t for t in right]
        return _additive_terms(e.left) + right
    return [e]


def implicit_eta(system: PoissonSystem, F: Expr, plan: SamplePlan,
                 hstar_hint: Expr | None = None) -> NttVerdict:
    """eta = -(d_z1 F)/(d_z2 F) from an implicit relation F(H, H*, C...) = 0.

    When F is affine in z2, H* is solved for directly.  Otherwise, without a
    hint for H*, the result is expressed over the system variables plus the
    free symbol ``z2`` and the verdict is inconclusive: the relation
    guarantees that H* exists, not a closed form for it.
    """
    n = system.n
    dz1, dz2 = differentiate(F, 0), differentiate(F, 1)
    eta_z = -(dz1 / dz2)
    report = VerificationReport(tolerances=plan_tolerances(plan))
    criterion = "implicit relation"
    if hstar_hint is None and 1 not in free_indices(dz2):
        # affine in z2: F = a*z2 + b, so H* = -b/a in closed form
        zero_z2 = [Var(0, "z1"), Const(Fraction(0)),
                   *(Var(i, f"z{i + 1}") for i in range(2, len(system.casimirs) + 2))]
        hstar_hint = substitute(-(substitute(F, zero_z2) / dz2),
                                [system.hamiltonian, Const(Fraction(0)), *system.casimirs])
        criterion = "implicit relation, affine in H*"
    if hstar_hint is None:
        free = Var(n, "z2")
        subs = [system.hamiltonian, free, *system.casimirs]
        eta = substitute(eta_z, subs)
        for label in ("dF_dz2_nonvanishing", "dF_dz1_nonvanishing", "relation_residual",
                      "rescaled_hamiltonian_identity"):
            report.add(CheckResult(label, SKIPPED, detail="no H* hint: depends on free symbol z2"))
        return NttVerdict(INCONCLUSIVE, criterion, report, eta, None,
                          eta_variables=(*system.variables, "z2"))
    subs = [system.hamiltonian, hstar_hint, *system.casimirs]
    report.add(_require(check_nonvanishing(substitute(dz2, subs), plan, "dF_dz2_nonvanishing"),
                        "d F / d z2 vanishes at an accepted point"))
    report.add(_require(check_nonvanishing(substitute(dz1, subs), plan, "dF_dz1_nonvanishing"),
                        "d F / d z1 vanishes at an accepted point (eta would vanish)"))
    eta = substitute(eta_z, subs)
    terms = [substitute(t, subs) for t in _additive_terms(F)]
    fn = compile_exprs(terms)

    def relation(p):
        v = fn(p)
        return [sum(v)], max(map(abs, v))

    report.add(residual_check("relation_residual", plan, relation, detail=f"F(H, H*, C...) = {F}"))
    report.add(identity_check(system.J, eta, system.hamiltonian, system.J, hstar_hint, plan))
    return NttVerdict(_yes_no(report.verdict), criterion, report, eta, hstar_hint,
                      eta_variables=system.variables)


CASE_R2, CASE_R4, CASE_SYMPLECTIC = "r=2", "r≥4", "symplectic"


def classify(system: PoissonSystem, fac: Factorization, plan: SamplePlan) -> NttVerdict:
    """Check a rescaled-structure factorization eta = factor * d_H Phi.

    The tag names the case matched: ``r=2`` (J* = eta0 J), ``r≥4``
    (J* = C J for a Casimir C) or ``symplectic`` (J* = c J, c constant).
    Premise violations appear as failed ``premise_*`` checks.
    """
    given = [fac.eta0 is not None, fac.casimir_factor is not None, fac.c is not None]
    if sum(given) != 1:
        raise ValueError("exactly one of eta0, casimir_factor, c must be given")
    report = VerificationReport(tolerances=plan_tolerances(plan))
    r, n = system.rank, system.n

    def premise(label: str, ok: bool, detail: str):
        report.add(CheckResult(f"premise_{label}", PASS if ok else FAIL,
                               0.0 if ok else 1.0, detail=detail))

    if fac.eta0 is not None:
        tag, factor = CASE_R2, fac.eta0
        premise("rank", r == 2, f"requires r = 2, system has r = {r}")
        report.add(check_nonvanishing(factor, plan, "premise_eta0_nonvanishing"))
    elif fac.casimir_factor is not None:
        tag, factor = CASE_R4, fac.casimir_factor
        premise("rank", r >= 4, f"requires r >= 4, system has r = {r}")
        report.add(check_casimir(factor, system.J, plan, name="premise_factor_is_casimir"))
        report.add(check_nonvanishing(factor, plan, "premise_casimir_nonvanishing"))
    else:
        tag, factor = CASE_SYMPLECTIC, Const(Fraction(fac.c))
        premise("rank", r == n and r >= 4, f"requires symplectic J with r >= 4, got r = {r}, n = {n}")
        premise("c_nonzero", fac.c != 0, f"c = {fac.c}")

    subs = [system.hamiltonian, *system.casimirs]
    hstar = substitute(fac.phi, subs)
    dphi = substitute(differentiate(fac.phi, 0), subs)
    report.add(check_nonvanishing(dphi, plan, "premise_dPhi_dz1_nonvanishing"))
    eta = factor * dphi
    j_star = system.J.scaled(factor)
    report.add(check_jacobi(j_star, plan, name="jacobi_rescaled_structure"))
    report.add(identity_check(system.J, eta, system.hamiltonian, j_star, hstar, plan,
                              name="rescaled_structure_identity"))
    return NttVerdict(_yes_no(report.verdict), f"rescaled structure, case {tag}", report,
                      eta, hstar, tag)


def premise_failures(verdict: NttVerdict) -> list[CheckResult]:
    return [c for c in verdict.report.checks if c.name.startswith("premise_") and c.verdict == FAIL]
