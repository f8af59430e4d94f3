"""Command-line front end.

Exit codes: 0 pass, 1 check failed, 2 input error, 3 transformation premise
violated, 4 inconclusive, 5 runtime abort.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dynamics, ntt
from .expr import substitute, differentiate
from .poisson import FAIL, PASS, CheckResult, SamplingError, VerificationReport
from .sysfile import SystemFile, SystemFileError, load

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_PREMISE, EXIT_INCONCLUSIVE, EXIT_ABORT = range(6)


class InputError(Exception):
    pass


def _plan(args, sf: SystemFile):
    return sf.plan(points=args.points, seed=args.seed, atol=args.atol, rtol=args.rtol,
                   min_eta=args.min_eta)


def _write_report(args, report: VerificationReport):
    if args.report:
        Path(args.report).write_text(report.to_kv() + "\n")


def _emit(args, report: VerificationReport):
    print(report.to_text())
    _write_report(args, report)


def _verified(args, sf, plan, report) -> bool:
    """Run system validation first; the transformation analysis assumes it."""
    base = sf.system.verify(plan)
    report.add(base)
    if not base.passed:
        print("system failed validation; transformation analysis skipped")
        _emit(args, report)
        return False
    return True


def _require(sf: SystemFile, *keys):
    missing = [k for k in keys if k not in sf.ntt]
    if missing:
        raise InputError(f"{sf.source}: [ntt] section needs {' and '.join(missing)}")


def cmd_validate(args, sf: SystemFile) -> int:
    report = sf.system.verify(_plan(args, sf))
    _emit(args, report)
    print(f"system: {'verified' if report.passed else 'NOT verified'}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _verdict_exit(verdict: ntt.NttVerdict) -> int:
    return {ntt.YES: EXIT_OK, ntt.NO: EXIT_FAIL}.get(verdict.preserves, EXIT_INCONCLUSIVE)


def cmd_analyze_ntt(args, sf: SystemFile) -> int:
    _require(sf, "eta")
    plan = _plan(args, sf)
    report = VerificationReport()
    if not _verified(args, sf, plan, report):
        return EXIT_FAIL
    verdict = ntt.analyze(sf.system, sf.ntt["eta"], plan)
    report.add(verdict.report)
    _emit(args, report)
    print(f"eta = {verdict.eta}")
    print(f"preserves structure: {verdict.label}")
    return _verdict_exit(verdict)


def cmd_rescale(args, sf: SystemFile) -> int:
    _require(sf, "Phi")
    plan = _plan(args, sf)
    report = VerificationReport()
    if not _verified(args, sf, plan, report):
        return EXIT_FAIL
    verdict = ntt.rescale(sf.system, sf.ntt["Phi"], plan)
    report.add(verdict.report)
    _emit(args, report)
    print(f"H* = {verdict.hstar}")
    print(f"eta = {verdict.eta}")
    print(f"preserves structure: {verdict.label}")
    return _verdict_exit(verdict)


def cmd_implicit(args, sf: SystemFile) -> int:
    _require(sf, "F")
    plan = _plan(args, sf)
    report = VerificationReport()
    if not _verified(args, sf, plan, report):
        return EXIT_FAIL
    verdict = ntt.implicit_eta(sf.system, sf.ntt["F"], plan, sf.ntt.get("Hstar"))
    report.add(verdict.report)
    _emit(args, report)
    if verdict.hstar is not None:
        print(f"H* = {verdict.hstar}")
    print(f"eta = {verdict.eta}")
    if verdict.preserves == ntt.INCONCLUSIVE:
        print("no Hstar hint: eta depends on the free symbol z2 (H* exists but has no closed form here)")
    print(f"preserves structure: {verdict.label}")
    return _verdict_exit(verdict)


def cmd_classify(args, sf: SystemFile) -> int:
    _require(sf, "Phi")
    factors = {"eta0": sf.ntt.get("eta0"), "casimir_factor": sf.ntt.get("casimir_factor"),
               "c": sf.c}
    if sum(v is not None for v in factors.values()) != 1:
        raise InputError(f"{sf.source}: classify needs exactly one of eta0, casimir_factor, c in [ntt]")
    plan = _plan(args, sf)
    report = VerificationReport()
    if not _verified(args, sf, plan, report):
        return EXIT_FAIL
    fac = ntt.Factorization(sf.ntt["Phi"], **factors)
    verdict = ntt.classify(sf.system, fac, plan)
    report.add(verdict.report)
    _emit(args, report)
    print(f"case: {verdict.tag}")
    factor = next(v for v in factors.values() if v is not None)
    print(f"J* = ({factor})*J")
    print(f"H* = {verdict.hstar}")
    print(f"eta = {verdict.eta}")
    print(f"outcome is Poisson: {verdict.label}")
    if ntt.premise_failures(verdict):
        return EXIT_PREMISE
    return _verdict_exit(verdict)


def _parse_x0(text: str, n: int) -> list[float]:
    try:
        x0 = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise InputError(f"--x0 must be {n} comma-separated numbers, got {text!r}") from None
    if len(x0) != n:
        raise InputError(f"--x0 must have {n} entries, got {len(x0)}")
    return x0


def cmd_simulate(args, sf: SystemFile) -> int:
    system = sf.system
    if args.dt is None or not args.dt > 0:
        raise InputError(f"--dt must be positive, got {args.dt}")
    if not args.t_end > 0:
        raise InputError(f"--t-end must be positive, got {args.t_end}")
    x0 = _parse_x0(args.x0, system.n)
    reason = system.domain.rejects(x0)
    if reason:
        raise InputError(f"x0 = {tuple(x0)} is not in the domain: {reason}")

    subs = [system.hamiltonian, *system.casimirs]
    eta = sf.ntt.get("eta")
    hstar = sf.ntt.get("Hstar")
    if "Phi" in sf.ntt:
        eta = substitute(differentiate(sf.ntt["Phi"], 0), subs)
        hstar = substitute(sf.ntt["Phi"], subs)
    flows = {"t": ["t"], "tau": ["tau"], "both": ["t", "tau"]}[args.flow]
    if "tau" in flows and eta is None:
        raise InputError("the tau-flow needs eta (or Phi) in the [ntt] section")

    names = ["H"] + [f"C{i}" for i in range(1, len(system.casimirs) + 1)]
    invariants = [system.hamiltonian, *system.casimirs]
    report = VerificationReport(tolerances={"drift_tol": args.tol})
    trajectories = {}
    aborted = None
    for flow in flows:
        try:
            traj = dynamics.integrate(system, x0, args.t_end, args.dt,
                                      eta=eta if flow == "tau" else None,
                                      domain=None if args.allow_escape else system.domain,
                                      min_eta=_plan(args, sf).min_eta)
        except dynamics.IntegrationAborted as err:
            aborted = err
            traj = err.trajectory
            print(f"{flow}-flow aborted: {err}")
        trajectories[flow] = traj
        inv_names, invs = list(names), list(invariants)
        if flow == "tau" and hstar is not None:
            inv_names.append("H*")
            invs.append(hstar)
        drifts = dynamics.invariant_drift(traj, invs)
        print(f"{flow}-flow: {len(traj) - 1} steps to {traj.times[-1]:.6g} (rk4, dt={args.dt:g})")
        if traj.truncated_at is not None:
            print(f"  left the domain box at {traj.truncated_at:.6g}: trajectory truncated")
        for name, d in zip(inv_names, drifts):
            print(f"  drift {name:<4} {d:.3e}")
            report.add(CheckResult(f"drift_{name}_{flow}", PASS if d <= args.tol else FAIL,
                                   float(d), None if d <= args.tol else tuple(traj.end),
                                   f"<= {args.tol:g}", len(traj), sampled=False))
        if args.export_trajectory:
            path = Path(args.export_trajectory)
            if len(flows) > 1 and flow == "tau":
                path = path.with_name(f"{path.stem}_tau{path.suffix}")
            with path.open("w", newline="") as out:
                dynamics.export_trajectory(traj, out, system.variables)
        if aborted:
            break
    if aborted is None and len(flows) == 2:
        report.add(dynamics.orbit_coincidence(trajectories["t"], trajectories["tau"],
                                              invariants, args.tol, names))
    _emit(args, report)
    if aborted is not None:
        return EXIT_ABORT
    return EXIT_OK if report.passed else EXIT_FAIL


COMMANDS = {
    "validate": (cmd_validate, "check skew-symmetry, Jacobi PDEs, Casimirs, independence, rank"),
    "analyze-ntt": (cmd_analyze_ntt, "decide whether an explicit eta keeps the structure matrix"),
    "rescale": (cmd_rescale, "build H* and eta from a primitive Phi(z1=H, z2..=C)"),
    "implicit": (cmd_implicit, "derive eta from an implicit relation F(H, H*, C...) = 0"),
    "classify": (cmd_classify, "check a rescaled structure J* = eta0 J, C J or c J"),
    "simulate": (cmd_simulate, "integrate the t- and/or tau-flow and report invariant drift"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("file", help="system definition file")
    common.add_argument("--points", type=int, help="sample points (overrides [sample])")
    common.add_argument("--seed", type=int, help="sampling seed (overrides [sample])")
    common.add_argument("--atol", type=float)
    common.add_argument("--rtol", type=float)
    common.add_argument("--min-eta", type=float, help="smallest |eta| accepted as nonvanishing")
    common.add_argument("--report", metavar="PATH", help="write key=value report lines here")
    common.add_argument("--export-trajectory", metavar="PATH")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="poisson-ntt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "simulate":
            p.add_argument("--x0", required=True, help="initial point, e.g. 1,0")
            p.add_argument("--t-end", type=float, default=10.0)
            p.add_argument("--dt", type=float, default=1e-3)
            p.add_argument("--flow", choices=("t", "tau", "both"), default="both")
            p.add_argument("--tol", type=float, default=1e-6, help="allowed invariant drift")
            p.add_argument("--allow-escape", action="store_true",
                           help="keep integrating after the state leaves the domain box")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        sf = load(args.file)
        if args.points is not None and args.points <= 0:
            raise InputError("--points must be positive")
        return handler(args, sf)
    except (SystemFileError, InputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except ntt.NttPremiseError as err:
        print(f"premise violated: {err}", file=sys.stderr)
        return EXIT_PREMISE
    except SamplingError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
