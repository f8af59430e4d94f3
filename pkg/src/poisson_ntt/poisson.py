"""Poisson systems and sampled verification of their defining properties.

"Everywhere in the domain" statements are decided on a deterministic point
cloud (`SamplePlan`).  A failing verdict is certain, since it comes with a
witness point.  A passing verdict means the property held at every accepted
sample point.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
from scipy.stats import qmc

from .expr import (Const, DomainError, Expr, ZERO, compile_exprs, differentiate,
                   evaluate, gradient, parse)

log = logging.getLogger(__name__)

PASS, FAIL, SKIPPED, INCONCLUSIVE = "pass", "fail", "skipped", "inconclusive"


class SamplingError(RuntimeError):
    """Not enough admissible points could be drawn from the domain."""


# ---------------------------------------------------------------------------
# domain and sampling

@dataclass(frozen=True)
class Domain:
    """Axis-aligned box with optional exclusion predicates.

    A point is rejected when ``|g(p)| < epsilon_exclude`` for some exclusion
    expression ``g``, or when ``g`` cannot be evaluated there.
    """

    box: tuple[tuple[float, float], ...]
    exclusions: tuple[Expr, ...] = ()
    epsilon_exclude: float = 1e-6

    def __post_init__(self):
        box = tuple((float(lo), float(hi)) for lo, hi in self.box)
        for lo, hi in box:
            if not lo < hi:
                raise ValueError(f"empty range [{lo}, {hi}]")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "exclusions", tuple(self.exclusions))

    @property
    def dim(self) -> int:
        return len(self.box)

    def in_box(self, p: Sequence[float]) -> bool:
        return all(lo <= v <= hi for v, (lo, hi) in zip(p, self.box))

    def rejects(self, p: Sequence[float]) -> str | None:
        """Reason for rejecting ``p``, or None when it is admissible."""
        if not self.in_box(p):
            return "outside box"
        for g in self.exclusions:
            try:
                if abs(evaluate(g, p)) < self.epsilon_exclude:
                    return f"excluded by |{g}| < {self.epsilon_exclude:g}"
            except DomainError as err:
                return f"exclusion not evaluable: {err.reason}"
        return None


@dataclass(frozen=True)
class SamplePlan:
    """Deterministic point cloud over a domain, with the tolerances used on it.

    The cloud starts with the box centre and (for small dimension) its
    corners, then continues with a seeded scrambled Halton sequence.  Rejected
    candidates are skipped, so the accepted sequence is reproducible from the
    seed alone.
    """

    domain: Domain
    points: int = 200
    seed: int = 42
    atol: float = 1e-9
    rtol: float = 1e-9
    pivot_rtol: float = 1e-10
    min_eta: float = 1e-10
    max_draws: int = 100

    def __post_init__(self):
        if self.points <= 0:
            raise ValueError("points must be positive")

    def candidates(self) -> Iterator[tuple[float, ...]]:
        box = np.array(self.domain.box)
        lo, hi = box[:, 0], box[:, 1]
        n = self.domain.dim
        yield tuple((lo + hi) / 2.0)
        if 2 ** n <= self.points // 4:
            for corner in itertools.product(*self.domain.box):
                yield tuple(corner)
        engine = qmc.Halton(d=n, scramble=True, seed=self.seed)
        chunk = max(self.points, 64)
        for _ in range(self.max_draws):
            for u in engine.random(chunk):
                yield tuple(lo + u * (hi - lo))

    def accepted(self) -> Iterator[tuple[float, ...]]:
        for p in self.candidates():
            reason = self.domain.rejects(p)
            if reason is None:
                yield p

    def sample_points(self) -> list[tuple[float, ...]]:
        return list(itertools.islice(self.accepted(), self.points))


def sweep(plan: SamplePlan, fn: Callable, label: str = "check"):
    """Apply ``fn`` at ``plan.points`` accepted points.

    Points where ``fn`` raises DomainError are discarded, logged, and
    replaced by the next accepted candidate.  Returns ``(results, discarded)``
    where results is a list of ``(point, value)``.
    """
    results = []
    discarded = 0
    for p in plan.accepted():
        try:
            value = fn(p)
        except DomainError as err:
            discarded += 1
            log.info("%s: discarding sample point: %s", label, err)
            continue
        results.append((p, value))
        if len(results) == plan.points:
            return results, discarded
    raise SamplingError(f"{label}: only {len(results)} of {plan.points} points usable "
                        f"({discarded} discarded for domain violations)")


# ---------------------------------------------------------------------------
# reports

def _fmt_point(p) -> str:
    return ",".join(f"{v:.12g}" for v in p)


@dataclass
class CheckResult:
    name: str
    verdict: str
    residual: float = 0.0
    witness: tuple[float, ...] | None = None
    tolerance: str = ""
    points: int = 0
    discarded: int = 0
    detail: str = ""
    samples: list = field(default_factory=list, repr=False)
    sampled: bool = True

    @property
    def passed(self) -> bool:
        return self.verdict in (PASS, SKIPPED)

    def to_text(self) -> str:
        label = self.verdict
        if self.verdict == PASS and self.points and self.sampled:
            label = "pass (sampled)"
        line = f"{self.name:<32} {label:<15} residual={self.residual:.3e}"
        if self.witness is not None and self.verdict != PASS:
            line += f" witness=({_fmt_point(self.witness)})"
        if self.points:
            line += f" points={self.points}"
        if self.discarded:
            line += f" discarded={self.discarded}"
        if self.detail:
            line += f"\n{'':<33}{self.detail}"
        return line

    def to_kv(self) -> str:
        witness = "" if self.witness is None else _fmt_point(self.witness)
        return f"check={self.name} verdict={self.verdict} residual={self.residual:.6e} witness={witness}"


@dataclass
class VerificationReport:
    checks: list[CheckResult] = field(default_factory=list)
    tolerances: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def verdict(self) -> str:
        if any(c.verdict == FAIL for c in self.checks):
            return FAIL
        if any(c.verdict == INCONCLUSIVE for c in self.checks):
            return INCONCLUSIVE
        return PASS

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def __contains__(self, name: str) -> bool:
        return any(c.name == name for c in self.checks)

    def add(self, other: "VerificationReport | CheckResult") -> "VerificationReport":
        if isinstance(other, CheckResult):
            self.checks.append(other)
        else:
            self.checks.extend(other.checks)
            self.tolerances.update(other.tolerances)
        return self

    def to_text(self) -> str:
        lines = [c.to_text() for c in self.checks]
        if self.tolerances:
            tol = " ".join(f"{k}={v:g}" for k, v in self.tolerances.items())
            lines.append(f"tolerances (artifact choices, not from theory): {tol}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        return "\n".join(c.to_kv() for c in self.checks)


def plan_tolerances(plan: SamplePlan) -> dict:
    return {"atol": plan.atol, "rtol": plan.rtol, "pivot_rtol": plan.pivot_rtol}


def residual_check(name: str, plan: SamplePlan, fn: Callable, keep_samples: bool = False,
                   detail: str = "") -> CheckResult:
    """Generic sampled zero test.

    ``fn(p)`` returns ``(residuals, scale)``; the check passes iff every
    ``|r| <= atol + rtol*scale``.  The witness is the point with the largest
    ratio of residual to allowed tolerance.
    """
    results, discarded = sweep(plan, fn, name)
    worst_ratio, witness, witness_res = -1.0, None, 0.0
    samples = []
    for p, (residuals, scale) in results:
        allowed = plan.atol + plan.rtol * scale
        big = max((abs(r) for r in residuals), default=0.0)
        ratio = big / allowed
        if ratio > worst_ratio:
            worst_ratio, witness, witness_res = ratio, p, big
        if keep_samples:
            samples.append((p, tuple(residuals)))
    verdict = PASS if worst_ratio <= 1.0 else FAIL
    return CheckResult(name, verdict, witness_res, witness,
                       f"|r| <= {plan.atol:g} + {plan.rtol:g}*scale",
                       len(results), discarded, detail, samples)


# ---------------------------------------------------------------------------
# structure matrix

class StructureMatrix:
    """Skew-symmetric n x n matrix of expressions, stored by its upper triangle.

    Keys of ``upper`` are 0-based pairs ``(i, j)`` with ``i < j``; absent
    entries are zero.  The lower triangle and diagonal are implied, so a
    non-skew matrix cannot be represented.
    """

    def __init__(self, n: int, upper: Mapping[tuple[int, int], Expr]):
        self.n = n
        entries = {}
        for (i, j), e in upper.items():
            if not 0 <= i < j < n:
                raise ValueError(f"structure entry ({i + 1},{j + 1}) must satisfy 1 <= i < j <= {n}")
            if not (isinstance(e, Const) and e.value == 0):
                entries[(i, j)] = e
        self.upper = entries
        self._compiled = None

    def entry(self, i: int, j: int) -> Expr:
        if i < j:
            return self.upper.get((i, j), ZERO)
        if i > j:
            return -self.upper.get((j, i), ZERO)
        return ZERO

    def rows(self) -> list[list[Expr]]:
        return [[self.entry(i, j) for j in range(self.n)] for i in range(self.n)]

    def scaled(self, factor: Expr) -> "StructureMatrix":
        return StructureMatrix(self.n, {k: factor * e for k, e in self.upper.items()})

    def evaluate(self, p: Sequence[float]) -> np.ndarray:
        if self._compiled is None:
            keys = sorted(self.upper)
            self._keys = keys
            self._compiled = compile_exprs([self.upper[k] for k in keys]) if keys else None
        m = np.zeros((self.n, self.n))
        if self._compiled is not None:
            for (i, j), v in zip(self._keys, self._compiled(p)):
                m[i, j] = v
                m[j, i] = -v
        return m

    def apply(self, vector: Sequence[Expr]) -> list[Expr]:
        """Symbolic product J . v."""
        out = []
        for i in range(self.n):
            acc: Expr = ZERO
            for j in range(self.n):
                if i != j and (min(i, j), max(i, j)) in self.upper:
                    acc = acc + self.entry(i, j) * vector[j]
            out.append(acc)
        return out

    @classmethod
    def canonical(cls, n: int) -> "StructureMatrix":
        """Constant symplectic matrix [[0, I], [-I, 0]] of even size n."""
        if n % 2:
            raise ValueError("canonical symplectic matrix needs even dimension")
        half = n // 2
        return cls(n, {(i, i + half): Const(1) for i in range(half)})

    def __repr__(self):
        body = ", ".join(f"J{i + 1}{j + 1}={e}" for (i, j), e in sorted(self.upper.items()))
        return f"StructureMatrix(n={self.n}, {body})"


def numerical_rank(m: np.ndarray, tol: float | None = None, rtol: float = 1e-10) -> int:
    """Rank by Gaussian elimination with complete pivoting.

    Pivots with magnitude <= ``tol`` count as zero; the default threshold is
    ``rtol * ||m||_inf``.
    """
    a = np.array(m, dtype=float, copy=True)
    if a.size == 0:
        return 0
    if tol is None:
        tol = rtol * np.abs(a).sum(axis=1).max()
    rows, cols = a.shape
    rank = 0
    for k in range(min(rows, cols)):
        sub = np.abs(a[k:, k:])
        i, j = np.unravel_index(np.argmax(sub), sub.shape)
        if sub[i, j] <= tol or sub[i, j] == 0.0:
            break
        i += k
        j += k
        a[[k, i]] = a[[i, k]]
        a[:, [k, j]] = a[:, [j, k]]
        a[k + 1:] -= np.outer(a[k + 1:, k] / a[k, k], a[k])
        rank += 1
    return rank


def rank_at(J: StructureMatrix, p: Sequence[float], pivot_tol: float | None = None,
            pivot_rtol: float = 1e-10) -> int:
    return numerical_rank(J.evaluate(p), pivot_tol, pivot_rtol)


# ---------------------------------------------------------------------------
# checks

def bracket(f: Expr, g: Expr, J: StructureMatrix) -> Expr:
    """Poisson bracket {f, g} = sum_ij d_i f J_ij d_j g."""
    df, dg = gradient(f, J.n), gradient(g, J.n)
    acc: Expr = ZERO
    for (i, j), e in sorted(J.upper.items()):
        # J_ij and J_ji = -J_ij contribute together
        acc = acc + e * (df[i] * dg[j] - df[j] * dg[i])
    return acc


def check_jacobi(J: StructureMatrix, plan: SamplePlan, name: str = "jacobi",
                 keep_samples: bool = False) -> CheckResult:
    """Sampled check of the Jacobi PDEs over all triples i < j < k."""
    n = J.n
    triples = list(itertools.combinations(range(n), 3))
    if not triples:
        return CheckResult(name, PASS, detail="n < 3: every triple repeats an index")
    full = J.rows()
    # derivative table d_l J_ab for every stored entry
    pairs = sorted(J.upper)
    entry_exprs = [full[a][b] for a in range(n) for b in range(n)]
    deriv_exprs = [differentiate(J.upper[k], l) for k in pairs for l in range(n)]
    fn = compile_exprs(entry_exprs + deriv_exprs)
    slot = {k: idx for idx, k in enumerate(pairs)}

    def dJ(values, a, b, l):
        if a == b:
            return 0.0
        if a < b:
            key, sign = (a, b), 1.0
        else:
            key, sign = (b, a), -1.0
        idx = slot.get(key)
        if idx is None:
            return 0.0
        return sign * values[n * n + idx * n + l]

    def at(p):
        values = fn(p)
        residuals, scale = [], 0.0
        for i, j, k in triples:
            total = 0.0
            for l in range(n):
                for a, b, c in ((i, j, k), (j, k, i), (k, i, j)):
                    term = values[l * n + a] * dJ(values, b, c, l)
                    total += term
                    scale = max(scale, abs(term))
            residuals.append(total)
        return residuals, scale

    return residual_check(name, plan, at, keep_samples,
                          detail=f"{len(triples)} triples")


def check_casimir(C: Expr, J: StructureMatrix, plan: SamplePlan, name: str = "casimir") -> CheckResult:
    """Sampled check of J . grad C = 0."""
    n = J.n
    grad = gradient(C, n)
    rows = J.rows()
    products = [[rows[i][j] * grad[j] for j in range(n)] for i in range(n)]
    fn = compile_exprs([e for row in products for e in row])

    def at(p):
        v = np.array(fn(p)).reshape(n, n)
        return v.sum(axis=1), float(np.abs(v).max(initial=0.0))

    return residual_check(name, plan, at, detail=f"C = {C}")


def check_rank_constant(J: StructureMatrix, r: int, plan: SamplePlan,
                        name: str = "rank_constant") -> CheckResult:
    results, discarded = sweep(plan, lambda p: rank_at(J, p, pivot_rtol=plan.pivot_rtol), name)
    bad = [(p, rk) for p, rk in results if rk != r]
    if bad:
        p, rk = bad[0]
        return CheckResult(name, FAIL, float(abs(rk - r)), p, f"pivot_rtol={plan.pivot_rtol:g}",
                           len(results), discarded,
                           f"rank {rk} != declared {r} at {len(bad)} point(s); "
                           "exclude degenerate points via domain predicates")
    return CheckResult(name, PASS, 0.0, None, f"pivot_rtol={plan.pivot_rtol:g}",
                       len(results), discarded, f"rank {r} at every point")


def check_casimir_independence(casimirs: Sequence[Expr], plan: SamplePlan,
                               name: str = "casimir_independence") -> CheckResult:
    k = len(casimirs)
    if k == 0:
        return CheckResult(name, PASS, detail="no Casimirs declared")
    n = plan.domain.dim
    fn = compile_exprs([d for c in casimirs for d in gradient(c, n)])
    results, discarded = sweep(
        plan, lambda p: numerical_rank(np.array(fn(p)).reshape(k, n), rtol=plan.pivot_rtol), name)
    bad = [(p, rk) for p, rk in results if rk != k]
    if bad:
        p, rk = bad[0]
        return CheckResult(name, FAIL, float(k - rk), p, f"pivot_rtol={plan.pivot_rtol:g}",
                           len(results), discarded,
                           f"Jacobian of Casimirs has rank {rk} < {k} at {len(bad)} point(s)")
    return CheckResult(name, PASS, 0.0, None, f"pivot_rtol={plan.pivot_rtol:g}",
                       len(results), discarded)


def check_nonvanishing(e: Expr, plan: SamplePlan, name: str, min_abs: float | None = None) -> CheckResult:
    """|e| >= min_abs at every accepted point; reports sign changes as a warning."""
    threshold = plan.min_eta if min_abs is None else min_abs
    fn = compile_exprs([e])
    results, discarded = sweep(plan, lambda p: fn(p)[0], name)
    worst_p, worst = min(results, key=lambda pv: abs(pv[1]))
    detail = f"{e}; min |value| = {abs(worst):.3e}"
    signs = {v > 0 for _, v in results}
    if len(signs) > 1:
        detail += "; warning: changes sign over the sample, the domain must avoid its zero set"
        log.warning("%s: %s changes sign over the sample", name, e)
    verdict = PASS if abs(worst) >= threshold else FAIL
    return CheckResult(name, verdict, abs(worst), worst_p, f"|value| >= {threshold:g}",
                       len(results), discarded, detail)


# ---------------------------------------------------------------------------
# system

@dataclass(frozen=True)
class PoissonSystem:
    """Poisson system x' = J(x) grad H(x) with declared Casimirs and rank."""

    variables: tuple[str, ...]
    J: StructureMatrix
    hamiltonian: Expr
    casimirs: tuple[Expr, ...] = ()
    rank: int | None = None
    domain: Domain | None = None

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "casimirs", tuple(self.casimirs))
        n = len(self.variables)
        if len(set(self.variables)) != n:
            raise ValueError("variable names must be unique")
        if self.J.n != n:
            raise ValueError(f"structure matrix is {self.J.n}x{self.J.n} for {n} variables")
        r = self.rank if self.rank is not None else n - len(self.casimirs)
        if r % 2 or not 0 < r <= n:
            raise ValueError(f"rank must be even with 0 < r <= n, got r={r}, n={n}")
        object.__setattr__(self, "rank", r)
        if self.domain is not None and self.domain.dim != n:
            raise ValueError("domain dimension does not match the number of variables")

    @property
    def n(self) -> int:
        return len(self.variables)

    @property
    def symplectic(self) -> bool:
        return self.rank == self.n

    def parse(self, source: str) -> Expr:
        return parse(source, self.variables)

    @classmethod
    def from_strings(cls, variables: Sequence[str], entries: Mapping[tuple[int, int], str],
                     hamiltonian: str, casimirs: Sequence[str] = (), rank: int | None = None,
                     box: Sequence[tuple[float, float]] | None = None,
                     exclude: Sequence[str] = (), epsilon_exclude: float = 1e-6) -> "PoissonSystem":
        """Build a system from DSL strings; ``entries`` uses 1-based (i, j) keys."""
        variables = tuple(variables)
        p = lambda s: parse(s, variables)  # noqa: E731
        J = StructureMatrix(len(variables), {(i - 1, j - 1): p(s) for (i, j), s in entries.items()})
        domain = None
        if box is not None:
            domain = Domain(tuple(box), tuple(p(s) for s in exclude), epsilon_exclude)
        return cls(variables, J, p(hamiltonian), tuple(p(c) for c in casimirs), rank, domain)

    def plan(self, **kwargs) -> SamplePlan:
        if self.domain is None:
            raise ValueError("system has no domain to sample")
        return SamplePlan(self.domain, **kwargs)

    def vector_field(self, eta: Expr | None = None) -> list[Expr]:
        field_ = self.J.apply(gradient(self.hamiltonian, self.n))
        if eta is not None:
            field_ = [eta * f for f in field_]
        return field_

    def verify(self, plan: SamplePlan) -> VerificationReport:
        """Run every structural check; the report passes iff the system is verified."""
        report = VerificationReport(tolerances=plan_tolerances(plan))
        report.add(CheckResult("skew_symmetry", PASS,
                               detail="structural: only the upper triangle is stored"))
        k = len(self.casimirs)
        if k == self.n - self.rank:
            report.add(CheckResult("casimir_count", PASS, detail=f"k = n - r = {k}"))
        else:
            report.add(CheckResult("casimir_count", FAIL, float(abs(self.n - self.rank - k)),
                                   detail=f"{k} Casimir(s) declared, n - r = {self.n - self.rank}"))
        report.add(check_jacobi(self.J, plan))
        for idx, c in enumerate(self.casimirs, 1):
            report.add(check_casimir(c, self.J, plan, name=f"casimir_{idx}"))
        report.add(check_casimir_independence(self.casimirs, plan))
        report.add(check_rank_constant(self.J, self.rank, plan))
        return report
