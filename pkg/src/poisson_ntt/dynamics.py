"""Numerical cross-checks: integrate the original and the reparametrized flow.

Both flows share H and the Casimirs as first integrals, so their orbits lie
on the same joint level sets; `orbit_coincidence` certifies that through the
invariants instead of pointwise curve matching.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Sequence, TextIO

import numpy as np

from .expr import DomainError, Expr, compile_exprs
from .poisson import FAIL, PASS, CheckResult, Domain, PoissonSystem, VerificationReport

log = logging.getLogger(__name__)

T_FLOW, TAU_FLOW = "t", "tau"


@dataclass
class Trajectory:
    times: np.ndarray
    points: np.ndarray
    flow: str
    dt: float
    integrator: str = "rk4"
    truncated_at: float | None = None

    @property
    def x0(self) -> np.ndarray:
        return self.points[0]

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def __len__(self):
        return len(self.times)


class IntegrationAborted(RuntimeError):
    """Integration stopped early; ``trajectory`` holds the steps completed so far."""

    def __init__(self, message: str, trajectory: Trajectory):
        super().__init__(message)
        self.trajectory = trajectory


def _rk4_step(f, x, h):
    k1 = f(x)
    k2 = f([xi + 0.5 * h * ki for xi, ki in zip(x, k1)])
    k3 = f([xi + 0.5 * h * ki for xi, ki in zip(x, k2)])
    k4 = f([xi + h * ki for xi, ki in zip(x, k3)])
    return [xi + h / 6.0 * (a + 2.0 * b + 2.0 * c + d)
            for xi, a, b, c, d in zip(x, k1, k2, k3, k4)]


def integrate(system: PoissonSystem, x0: Sequence[float], t_end: float, dt: float,
              eta: Expr | None = None, domain: Domain | None = None,
              min_eta: float = 1e-10) -> Trajectory:
    """Classical fixed-step RK4 on J grad H (t-flow) or eta J grad H (tau-flow).

    The last step is shortened to land exactly on ``t_end``.  With a
    ``domain``, integration stops when the state leaves the box and the
    trajectory is marked truncated.  A domain violation in the vector field,
    or |eta| dropping below ``min_eta`` (or eta changing sign), raises
    IntegrationAborted carrying the partial trajectory.
    """
    if not dt > 0:
        raise ValueError(f"step size must be positive, got dt={dt}")
    if not t_end > 0:
        raise ValueError(f"t_end must be positive, got {t_end}")
    x = [float(v) for v in x0]
    if len(x) != system.n or not all(map(math.isfinite, x)):
        raise ValueError(f"x0 must be {system.n} finite numbers")
    if domain is not None and domain.rejects(x):
        raise ValueError(f"x0 = {tuple(x)} is not in the domain ({domain.rejects(x)})")

    vf = compile_exprs(system.vector_field(eta))
    eta_fn = compile_exprs([eta]) if eta is not None else None
    flow = T_FLOW if eta is None else TAU_FLOW

    steps = int(math.floor(t_end / dt + 1e-9))
    times = [dt * k for k in range(steps + 1)]
    if t_end - times[-1] > 1e-12 * max(1.0, t_end):
        times.append(t_end)
    else:
        times[-1] = t_end if steps else times[-1]

    out_t, out_x = [0.0], [list(x)]

    def partial(reason):
        traj = Trajectory(np.array(out_t), np.array(out_x), flow, dt)
        return IntegrationAborted(reason, traj)

    eta_sign = 0.0
    if eta_fn is not None:
        e0 = eta_fn(x)[0]
        if abs(e0) < min_eta:
            raise partial(f"|eta| = {abs(e0):.3e} < {min_eta:g} at x0")
        eta_sign = math.copysign(1.0, e0)

    truncated = None
    for k in range(1, len(times)):
        h = times[k] - times[k - 1]
        try:
            x = _rk4_step(vf, x, h)
            if not all(map(math.isfinite, x)):
                raise DomainError("state became non-finite", None, x)
            if eta_fn is not None:
                e = eta_fn(x)[0]
                if abs(e) < min_eta or math.copysign(1.0, e) != eta_sign:
                    raise partial(f"eta sign change or |eta| < {min_eta:g} "
                                  f"(eta = {e:.3e}) at t = {times[k]:.6g}, x = {tuple(x)}")
        except DomainError as err:
            raise partial(f"domain violation at t = {times[k]:.6g}: {err}") from None
        out_t.append(times[k])
        out_x.append(x)
        if domain is not None and not domain.in_box(x):
            truncated = times[k]
            log.info("trajectory left the domain box at t=%g; truncating", truncated)
            break
    return Trajectory(np.array(out_t), np.array(out_x), flow, dt, truncated_at=truncated)


def invariant_drift(traj: Trajectory, invariants: Sequence[Expr]) -> list[float]:
    """Max |I(x) - I(x0)| along the trajectory, one value per invariant."""
    if not invariants:
        return []
    fn = compile_exprs(invariants)
    values = np.array([fn(p) for p in traj.points])
    return [float(v) for v in np.abs(values - values[0]).max(axis=0)]


def orbit_coincidence(traj_a: Trajectory, traj_b: Trajectory, invariants: Sequence[Expr],
                      tol: float = 1e-8, names: Sequence[str] | None = None) -> VerificationReport:
    """Check that two trajectories from the same x0 stay on one joint level set."""
    if not np.allclose(traj_a.x0, traj_b.x0, rtol=0.0, atol=1e-14):
        raise ValueError("trajectories do not share their initial point")
    names = list(names) if names is not None else [f"I{i + 1}" for i in range(len(invariants))]
    report = VerificationReport(tolerances={"orbit_tol": tol})
    if not invariants:
        return report
    fn = compile_exprs(invariants)
    ref = np.array(fn(traj_a.x0))
    pts = np.vstack([traj_a.points, traj_b.points])
    dev = np.abs(np.array([fn(p) for p in pts]) - ref)
    combined = 0.0
    for i, name in enumerate(names):
        j = int(np.argmax(dev[:, i]))
        bound = float(dev[j, i])
        combined = max(combined, bound)
        report.add(CheckResult(f"level_set_{name}", PASS if bound <= tol else FAIL, bound,
                               tuple(pts[j]), f"<= {tol:g}", len(pts),
                               detail=f"{name}(x0) = {ref[i]:.12g}", sampled=False))
    report.add(CheckResult("orbit_coincidence", PASS if combined <= tol else FAIL, combined,
                           None, f"<= {tol:g}",
                           detail="both flows stay on the joint level set of the invariants",
                           sampled=False))
    return report


def export_trajectory(traj: Trajectory, out: TextIO, variables: Sequence[str]):
    """Write ``t,x1,...,xn`` rows with a header line of variable names."""
    writer = csv.writer(out)
    writer.writerow(["t" if traj.flow == T_FLOW else "tau", *variables])
    for t, p in zip(traj.times, traj.points):
        writer.writerow([repr(float(t)), *(repr(float(v)) for v in p)])
