"""Acceptance criteria 1-8.

Run under pytest (one summary line per criterion is printed at the end of the
session) or directly with ``python tests/test_acceptance.py``.
"""
from __future__ import annotations

import math
import random
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from poisson_ntt import dynamics, ntt  # noqa: E402
from poisson_ntt.expr import (DomainError, check_derivative_numerically, compile_exprs,  # noqa: E402
                              differentiate, evaluate, parse, substitute)
from poisson_ntt.poisson import PASS, FAIL, check_jacobi  # noqa: E402

import _systems as S  # noqa: E402

pytestmark = pytest.mark.acceptance

RESULTS: dict[int, tuple[bool, str, float]] = {}

OSC_YES = {"1": "z1", "x1^2 + x2^2": "z1^2", "(x1^2 + x2^2)^2": "4*z1^3/3",
           "exp(x1^2 + x2^2)": "exp(2*z1)/2"}
OSC_NO = ("x1", "x2", "x1*x2")


# ---------------------------------------------------------------------------

def criterion_1():
    system = S.oscillator()
    plan = system.plan(points=200)
    names = system.variables
    bad = []
    for src in OSC_YES:
        v = ntt.analyze(system, parse(src, names), plan)
        if v.preserves != "yes":
            bad.append(f"{src}: {v.preserves}")
    worst = 0.0
    for src in OSC_NO:
        eta = parse(src, names)
        v = ntt.analyze(system, eta, plan)
        if v.preserves != "no":
            bad.append(f"{src}: {v.preserves}")
        # characteristic PDE x2 d1(eta) - x1 d2(eta)
        pde = compile_exprs([parse("x2", names) * differentiate(eta, 0)
                             - parse("x1", names) * differentiate(eta, 1)])
        samples = v.report["gradient_test"].samples
        if len(samples) != 200:
            bad.append(f"{src}: {len(samples)} samples")
        for p, (r,) in samples:
            ref = pde(p)[0]
            worst = max(worst, abs(r - ref) / max(abs(r), abs(ref), 1e-300))
    ok = not bad and worst <= 1e-12
    return ok, f"verdicts {'ok' if not bad else bad}; curl vs PDE max rel err {worst:.1e} (<= 1e-12)"


def criterion_2():
    system = S.rigid_body()
    plan = system.plan(points=200)
    v = ntt.rescale(system, ntt.parse_phi(system, "z1*z2^2"), plan)
    H, C = system.hamiltonian, system.casimirs[0]
    fn = compile_exprs([v.hstar, H * C ** 2, v.eta, C ** 2])
    form_err = max(max(abs(a - b) / abs(b), abs(c - d) / abs(d))
                   for a, b, c, d in (fn(p) for p in plan.sample_points()))
    ident = v.report["rescaled_hamiltonian_identity"]
    # direct sup-norm of eta J grad H - J grad H*, independent of the check's own scaling
    lhs = compile_exprs(system.vector_field(v.eta))
    rhs = compile_exprs(system.J.apply([differentiate(v.hstar, i) for i in range(3)]))
    sup = max(max(abs(a - b) for a, b in zip(lhs(p), rhs(p))) for p in plan.sample_points())
    no = ntt.analyze(system, parse("x1*((x1^2 + x2^2 + x3^2)/2)^2", S.X), plan).preserves
    yes = ntt.analyze(system, parse("(x1^2/2 + x2^2)*((x1^2 + x2^2 + x3^2)/2)^4", S.X),
                      plan).preserves
    ok = (v.preserves == "yes" and ident.verdict == PASS and sup <= 1e-9 and form_err <= 1e-13
          and no == "no" and yes == "yes")
    return ok, (f"H* = H*C^2, eta = C^2 (rel err {form_err:.1e}); identity sup {sup:.1e} (<= 1e-9); "
                f"eta = x1*C^2 -> {no}; eta = H*C^4 -> {yes}")


def _random_phi(rng):
    z = ("z1", "z2")
    return S.random_polynomial(rng, 2, 3, names=z, terms=rng.randint(2, 5))


def criterion_3():
    system = S.rigid_body()
    plan = system.plan(points=200)
    rng = random.Random(2024)
    done, redraws, worst = 0, 0, 0.0
    problems = []
    while done < 10:
        phi = _random_phi(rng)
        try:
            r = ntt.rescale(system, phi, plan)
            # F = z2 - Phi(z1, z3): z2 is H*, z3 the Casimir
            F = parse("z2", ("z1", "z2", "z3")) - substitute(
                phi, [parse("z1", ("z1", "z2", "z3")), parse("z3", ("z1", "z2", "z3"))])
            im = ntt.implicit_eta(system, F, plan)
        except ntt.NttPremiseError:
            redraws += 1
            continue
        done += 1
        if im.preserves != "yes" or r.preserves != "yes":
            problems.append(str(phi))
        fn = compile_exprs([r.eta, im.eta])
        for p in plan.sample_points():
            a, b = fn(p)
            worst = max(worst, abs(a - b) / max(abs(a), abs(b)))
    ok = not problems and worst <= 1e-12
    return ok, f"10 primitives ({redraws} redrawn on premise); max rel eta diff {worst:.1e} (<= 1e-12)"


def criterion_4():
    rng = random.Random(7)
    worst, fails = 0.0, []
    for name, factory in S.CATALOG_3D.items():
        system = factory()
        plan = system.plan(points=200)
        for _ in range(20):
            eta = S.random_polynomial(rng, 3, 3, terms=rng.randint(1, 6))
            res = check_jacobi(system.J.scaled(eta), plan)
            worst = max(worst, res.residual)
            if res.verdict != PASS or res.residual > 1e-9:
                fails.append(f"{name}: {eta}")
    return not fails, f"60 rescaled structures; max Jacobi residual {worst:.1e} (<= 1e-9)"


def criterion_5():
    system = S.canonical(4)
    plan = system.plan(points=200)
    names = system.variables
    parts, ok = [], True
    for src in ("x1", "x1 + x2^2", "exp(x1)"):
        res = check_jacobi(system.J.scaled(parse(src, names)), plan)
        ok &= res.verdict == FAIL and res.residual >= 1e-3 and res.witness is not None
        parts.append(f"{src}: {res.verdict} {res.residual:.2f}")
    const = check_jacobi(system.J.scaled(parse("7", names)), plan)
    ok &= const.verdict == PASS
    parts.append(f"7: {const.verdict}")
    return ok, "; ".join(parts)


def criterion_6():
    system = S.rigid_body()
    res = check_jacobi(system.J.scaled(system.casimirs[0]), system.plan(points=200))
    return res.verdict == PASS and res.residual <= 1e-9, f"C*J Jacobi residual {res.residual:.1e} (<= 1e-9)"


def _period_error(dt):
    traj = dynamics.integrate(S.oscillator(), (1.0, 0.0), 2 * math.pi, dt)
    return float(np.abs(traj.end - (1.0, 0.0)).max())


def criterion_7():
    err = _period_error(1e-3)
    coarse, fine = _period_error(2 * math.pi / 128), _period_error(2 * math.pi / 256)
    factor = coarse / fine
    worst_drift, bad = 0.0, []
    osc = S.oscillator()
    z = ("z1",)
    for src, prim in OSC_YES.items():
        eta = parse(src, osc.variables)
        hstar = substitute(parse(prim, z), [osc.hamiltonian])
        # H* must be the primitive: d/dH Phi(H) == eta
        assert abs(evaluate(substitute(differentiate(parse(prim, z), 0), [osc.hamiltonian]),
                            (0.3, 0.8)) - evaluate(eta, (0.3, 0.8))) < 1e-12
        traj = dynamics.integrate(osc, (1.0, 0.0), 10.0, 1e-3, eta=eta)
        d = max(dynamics.invariant_drift(traj, [osc.hamiltonian, hstar]))
        worst_drift = max(worst_drift, d)
        bad += [src] if d > 1e-6 else []
    body = S.rigid_body()
    for phi in ("z1*z2^2", "z1^2*z2^4/2"):
        v = ntt.rescale(body, ntt.parse_phi(body, phi), body.plan())
        traj = dynamics.integrate(body, (1.0, 1.0, 1.0), 10.0, 1e-3, eta=v.eta)
        d = max(dynamics.invariant_drift(traj, [body.hamiltonian, *body.casimirs, v.hstar]))
        worst_drift = max(worst_drift, d)
        bad += [phi] if d > 1e-6 else []
    ok = err <= 1e-6 and factor >= 12 and not bad
    return ok, (f"period return err {err:.1e} (<= 1e-6); tau-flow max drift {worst_drift:.1e} "
                f"(<= 1e-6, 6 eta); dt-halving error ratio {factor:.1f} (>= 12)")


def _good_points(fn, rng, nvars, want=100, draws=600, h=1e-5, limit=50.0, stats=None):
    """Points where the expression is smooth enough for a central-difference oracle.

    Values and first derivatives must be finite and moderate nearby, and the
    oracle's own truncation error (estimated from steps h and 2h) must sit
    well below the tolerance.  Near branch points of sqrt or ln the third
    derivative blows up and the difference quotient, not the symbolic
    derivative, is what goes wrong.
    """
    pts = []
    for _ in range(draws):
        p = [rng.uniform(-2.0, 2.0) for _ in range(nvars)]
        try:
            ok = True
            for i in range(nvars):
                for s in (-2 * h, 0.0, 2 * h):
                    q = list(p)
                    q[i] += s
                    vals = fn(q)
                    ok &= all(abs(v) < limit for v in vals)
                qp, qm = list(p), list(p)
                qp[i] += h
                qm[i] -= h
                curv = abs(fn(qp)[0] - 2 * fn(p)[0] + fn(qm)[0]) / h ** 2
                ok &= curv < limit ** 2
                # the central difference must itself be accurate here: Richardson
                # estimate of its truncation error, from function values only
                q2p, q2m = list(p), list(p)
                q2p[i] += 2 * h
                q2m[i] -= 2 * h
                d1 = (fn(qp)[0] - fn(qm)[0]) / (2 * h)
                d2 = (fn(q2p)[0] - fn(q2m)[0]) / (4 * h)
                ok &= abs(d1 - d2) / 3 <= 1e-7 * (1 + abs(d1))
        except DomainError:
            continue
        if not ok and stats is not None:
            stats["gated"] += 1
        if ok:
            pts.append(p)
            if len(pts) == want:
                return pts
    return None


def criterion_8():
    rng = random.Random(8)
    nvars = 3
    exprs, worst, rejected = 0, 0.0, 0
    stats = {"gated": 0}
    while exprs < 100:
        e = S.random_expression(rng, nvars, depth=4)
        derivs = [differentiate(e, i) for i in range(nvars)]
        fn = compile_exprs([e, *derivs])
        pts = _good_points(fn, rng, nvars, stats=stats)
        if pts is None or not S.well_conditioned(e, pts[:3], nvars):
            rejected += 1
            continue
        exprs += 1
        for p in pts:
            vals = fn(p)
            for i in range(nvars):
                err = check_derivative_numerically(e, i, p)
                worst = max(worst, err / (1.0 + abs(vals[1 + i])))
    corpus = [l.strip() for l in (Path(__file__).parent / "data" / "expr_corpus.txt").read_text()
              .splitlines() if l.strip() and not l.startswith("#")]
    names = ("x1", "x2", "x3")
    trips = [parse(s, names) for s in corpus]
    trips += [S.random_expression(random.Random(k), nvars, depth=4) for k in range(200)]
    bad_trips = [str(e) for e in trips if parse(str(e), names) != e]
    ok = worst <= 1e-6 and not bad_trips
    skipped = stats["gated"]
    return ok, (f"100 exprs x 100 pts ({rejected} exprs redrawn, {skipped} points gated): max scaled deriv err "
                f"{worst:.1e} (<= 1e-6); round-trip {len(trips) - len(bad_trips)}/{len(trips)}")


CRITERIA = {
    1: ("harmonic oscillator verdicts and characteristic PDE", criterion_1),
    2: ("rigid body rescaling H* = H*C^2", criterion_2),
    3: ("implicit relation agrees with constructive rescaling", criterion_3),
    4: ("rank-2 structures stay Poisson under any rescaling", criterion_4),
    5: ("symplectic rank-4 rescaling only by constants", criterion_5),
    6: ("Casimir rescaling keeps the Jacobi identity", criterion_6),
    7: ("dynamics cross-check", criterion_7),
    8: ("expression engine derivatives and round-trip", criterion_8),
}


def run_criterion(k):
    title, fn = CRITERIA[k]
    t0 = time.perf_counter()
    ok, detail = fn()
    elapsed = time.perf_counter() - t0
    RESULTS[k] = (ok, f"{title}: {detail}", elapsed)
    return ok, detail, elapsed


def summary_line(k):
    ok, text, elapsed = RESULTS[k]
    return f"criterion {k}: {'PASS' if ok else 'FAIL'} ({elapsed:.1f}s) {text}"


@pytest.mark.parametrize("k", sorted(CRITERIA))
def test_criterion(k):
    ok, detail, elapsed = run_criterion(k)
    print(summary_line(k))
    assert elapsed < 60.0
    assert ok, detail


if __name__ == "__main__":
    status = 0
    for k in CRITERIA:
        ok, _, _ = run_criterion(k)
        print(summary_line(k), flush=True)
        status |= not ok
    sys.exit(status)
