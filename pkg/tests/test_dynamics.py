import io
import math

import numpy as np
import pytest

from poisson_ntt import dynamics, ntt
from poisson_ntt.expr import parse

import _systems as S


def period_error(dt):
    system = S.oscillator()
    traj = dynamics.integrate(system, (1.0, 0.0), 2 * math.pi, dt)
    return float(np.abs(traj.end - (1.0, 0.0)).max())


def test_oscillator_returns_after_one_period():
    assert period_error(1e-3) <= 1e-6


def test_rk4_is_fourth_order():
    errors = [period_error(2 * math.pi / k) for k in (64, 128, 256)]
    assert errors[0] / errors[1] >= 12
    assert errors[1] / errors[2] >= 12


def test_last_step_lands_on_t_end():
    traj = dynamics.integrate(S.oscillator(), (1.0, 0.0), 1.0, 0.3)
    assert traj.times[-1] == 1.0
    assert np.allclose(np.diff(traj.times)[:-1], 0.3)


def test_exact_solution():
    traj = dynamics.integrate(S.oscillator(), (1.0, 0.0), 1.0, 1e-3)
    # x1' = x2, x2' = -x1
    assert traj.end == pytest.approx((math.cos(1.0), -math.sin(1.0)), abs=1e-12)


def test_constant_eta_speeds_up_the_flow():
    system = S.oscillator()
    fast = dynamics.integrate(system, (1.0, 0.0), 1.0, 1e-3, eta=parse("2", system.variables))
    slow = dynamics.integrate(system, (1.0, 0.0), 2.0, 1e-3)
    assert fast.end == pytest.approx(slow.end, abs=1e-10)
    assert fast.flow == "tau"


@pytest.mark.parametrize("dt", [0.0, -1e-3])
def test_nonpositive_step_rejected(dt):
    with pytest.raises(ValueError):
        dynamics.integrate(S.oscillator(), (1.0, 0.0), 1.0, dt)


def test_initial_point_checked():
    system = S.oscillator()
    with pytest.raises(ValueError):
        dynamics.integrate(system, (1.0,), 1.0, 1e-2)
    with pytest.raises(ValueError):
        dynamics.integrate(system, (0.0, 0.0), 1.0, 1e-2, domain=system.domain)


def test_invariants_conserved_on_both_flows():
    system = S.rigid_body()
    verdict = ntt.rescale(system, ntt.parse_phi(system, "z1*z2^2"), system.plan())
    x0 = (1.0, 1.0, 1.0)
    t = dynamics.integrate(system, x0, 10.0, 1e-3)
    tau = dynamics.integrate(system, x0, 10.0, 1e-3, eta=verdict.eta)
    invariants = [system.hamiltonian, *system.casimirs]
    assert max(dynamics.invariant_drift(t, invariants)) <= 1e-6
    assert max(dynamics.invariant_drift(tau, invariants + [verdict.hstar])) <= 1e-6
    report = dynamics.orbit_coincidence(t, tau, invariants, 1e-6, ["H", "C1"])
    assert report.passed
    assert "pass (sampled)" not in report.to_text()


def test_orbit_coincidence_detects_different_level_sets():
    system = S.oscillator()
    a = dynamics.integrate(system, (1.0, 0.0), 1.0, 1e-2)
    b = dynamics.integrate(system, (1.0, 0.0), 1.0, 1e-2, eta=parse("1 + x1^2", system.variables))
    assert dynamics.orbit_coincidence(a, b, [system.hamiltonian], 1e-8).passed
    with pytest.raises(ValueError):
        dynamics.orbit_coincidence(a, dynamics.integrate(system, (0.5, 0.0), 1.0, 1e-2),
                                   [system.hamiltonian])
    # a non-invariant exposes the disagreement
    report = dynamics.orbit_coincidence(a, b, [parse("x1", system.variables)], 1e-8)
    assert not report.passed


def test_leaving_the_box_truncates():
    system = S.rigid_body()
    traj = dynamics.integrate(system, (1.0, 1.0, 1.0), 5.0, 1e-3, domain=system.domain)
    assert traj.truncated_at is not None and traj.truncated_at < 5.0
    assert not system.domain.in_box(traj.end)


def test_small_eta_aborts():
    # zeros of eta are equilibria of the tau-flow, so x1 only decays toward 0
    system = S.oscillator()
    with pytest.raises(dynamics.IntegrationAborted) as info:
        dynamics.integrate(system, (1.0, 0.0), 50.0, 1e-3, eta=parse("x1", system.variables),
                           min_eta=0.5)
    partial = info.value.trajectory
    assert partial.end[0] >= 0.5 and len(partial) > 1


def test_domain_violation_aborts():
    system = S.oscillator()
    # x1 decreases from 1, so the square root's argument turns negative
    eta = parse("1 + sqrt(x1 - 9/10)", system.variables)
    with pytest.raises(dynamics.IntegrationAborted) as info:
        dynamics.integrate(system, (1.0, 0.0), 5.0, 1e-3, eta=eta)
    assert "domain violation" in str(info.value)
    assert info.value.trajectory.end[0] >= 0.9


def test_export_trajectory():
    system = S.oscillator()
    traj = dynamics.integrate(system, (1.0, 0.0), 0.1, 0.05)
    out = io.StringIO()
    dynamics.export_trajectory(traj, out, system.variables)
    rows = out.getvalue().splitlines()
    assert rows[0] == "t,x1,x2"
    assert len(rows) == 4
    assert [float(v) for v in rows[1].split(",")] == [0.0, 1.0, 0.0]
