import math

import numpy as np
import pytest
from scipy.linalg import expm

from vpbsim.collision import BOLTZMANN, KernelSpec, assemble_boltzmann
from vpbsim.diagnostics import conservation_residuals
from vpbsim.errors import ChargeNeutralityError, NumericalAbort, PositivityError, ValidationError
from vpbsim.harness import manufactured_error
from vpbsim.kinetic_solver import KineticConfig, KineticSolver, make_state, run, well_prepared_initial
from vpbsim.spatial import TorusGrid, x_derivative
from vpbsim.velocity_space import HermiteBasis, TwoSpeciesDistribution, fluid_moments, project_micro


def fields(grid, amp=0.05):
    x = grid.x
    return (amp * np.cos(x), amp * np.stack([np.zeros_like(x), np.sin(x), np.cos(2 * x)]), -amp * np.cos(x), amp * np.sin(x))


def test_well_prepared_examples(basis4, grid16):
    assert np.all(well_prepared_initial(basis4, grid16, 0, np.zeros((3, 16)), 0, 0).values == 0)
    rho0, u0, theta0, n0 = fields(grid16)
    u0 = u0 + np.stack([0.02 * np.sin(grid16.x), np.zeros(16), np.zeros(16)])
    f0 = well_prepared_initial(basis4, grid16, rho0, u0, theta0, n0)
    m = fluid_moments(basis4, f0, 0.1)
    for got, want in ((m.rho, rho0), (m.u, u0), (m.theta, theta0), (m.n, n0)):
        assert np.max(np.abs(got - want)) < 1e-12
    assert np.max(np.abs(m.j)) < 1e-12 and np.max(np.abs(m.omega)) < 1e-12
    assert np.sqrt(np.sum(project_micro(basis4, f0.values) ** 2)) < 1e-12


def test_well_prepared_rejects_net_charge(basis4, grid16):
    with pytest.raises(ChargeNeutralityError):
        well_prepared_initial(basis4, grid16, 0, np.zeros((3, 16)), 0, 0.1)
    with pytest.raises(ValidationError):
        well_prepared_initial(HermiteBasis(1), grid16, 0, np.zeros((3, 16)), 0, 0)


def test_rhs_of_zero_is_zero(basis4, grid16, bgk4):
    solver = KineticSolver(basis4, grid16, bgk4, KineticConfig(0.5, 0.01, 0.1))
    stiff, nonstiff = solver.rhs(make_state(0.0, TwoSpeciesDistribution.zeros(basis4, grid16)))
    assert np.all(stiff == 0) and np.max(np.abs(nonstiff)) == 0


def test_rhs_x_homogeneous_is_collision_only(basis4, grid16, bgk4, rng):
    cfg = KineticConfig(0.5, 0.01, 0.1, nonlinear=False)
    solver = KineticSolver(basis4, grid16, bgk4, cfg)
    c = rng.standard_normal((2, basis4.M))
    c[1, 0] = c[0, 0]
    vals = np.broadcast_to(c[:, None, :], (2, 16, basis4.M)).copy()
    stiff, nonstiff = solver.rhs(make_state(0.0, TwoSpeciesDistribution(basis4, grid16, vals)))
    L = bgk4.L_matrix
    want = -(np.concatenate([c[0], c[1]]) @ L.T) / 0.25
    assert np.max(np.abs(nonstiff)) < 1e-12
    assert np.max(np.abs(stiff[0, 3] - want[: basis4.M])) < 1e-12


def test_linear_homogeneous_decay_matches_exponential(basis4, grid16, bgk4, rng):
    eps, dt, T = 0.5, 0.005, 0.2
    cfg = KineticConfig(eps, dt, T, nonlinear=False)
    c = rng.standard_normal((2, basis4.M))
    c[1, 0] = c[0, 0]
    vals = np.broadcast_to(c[:, None, :], (2, 16, basis4.M)).copy()
    traj = run(basis4, grid16, bgk4, cfg, TwoSpeciesDistribution(basis4, grid16, vals))
    exact = expm(-T / eps**2 * bgk4.L_matrix) @ np.concatenate([c[0], c[1]])
    got = traj.snapshots[-1].f.values[:, 0, :].reshape(-1)
    err = np.max(np.abs(got - exact))
    cfg2 = KineticConfig(eps, dt / 2, T, nonlinear=False)
    got2 = run(basis4, grid16, bgk4, cfg2, TwoSpeciesDistribution(basis4, grid16, vals)).snapshots[-1].f.values[:, 0, :].reshape(-1)
    err2 = np.max(np.abs(got2 - exact))
    assert err < 1e-3 and math.log2(err / err2) > 1.8


def test_snapshot_count_and_zero_trajectory(basis4, grid16, bgk4):
    cfg = KineticConfig(0.5, 0.01, 0.1, record_every=3)
    traj = run(basis4, grid16, bgk4, cfg, TwoSpeciesDistribution.zeros(basis4, grid16))
    assert len(traj.snapshots) == math.floor(0.1 / (0.01 * 3)) + 1
    assert all(np.all(s.f.values == 0) for s in traj.snapshots)


def test_mass_conservation_and_poisson_consistency(basis4, grid16, bgk4):
    f0 = well_prepared_initial(basis4, grid16, *fields(grid16))
    traj = run(basis4, grid16, bgk4, KineticConfig(0.3, 0.005, 1.0, record_every=10), f0)
    m0 = [grid16.integrate(f0.values[k, :, 0]) for k in range(2)]
    scale = max(1.0, f0.l2_norm())
    for s in traj.snapshots:
        for k in range(2):
            assert abs(grid16.integrate(s.f.values[k, :, 0]) - m0[k]) <= 1e-8 * scale
        n = s.f.values[0, :, 0] - s.f.values[1, :, 0]
        assert grid16.l2_norm(-x_derivative(grid16, s.phi, 2) - n) <= 1e-10
        assert np.allclose(s.grad_phi[0], x_derivative(grid16, s.phi), atol=1e-12)


def test_species_mass_per_step(basis4, grid16, bgk4):
    f0 = well_prepared_initial(basis4, grid16, *fields(grid16, 0.1))
    solver = KineticSolver(basis4, grid16, bgk4, KineticConfig(0.3, 0.005, 0.01))
    s1 = solver.step(make_state(0.0, f0))
    for k in range(2):
        assert abs(grid16.integrate(s1.f.values[k, :, 0] - f0.values[k, :, 0])) < 1e-12


def test_charge_continuity_second_order(basis4, grid16, bgk4):
    f0 = well_prepared_initial(basis4, grid16, 0, np.stack([0 * grid16.x, 0.05 * np.sin(grid16.x), 0 * grid16.x]), 0, 0.05 * np.sin(grid16.x))
    res = []
    for dt in (0.01, 0.005):
        traj = run(basis4, grid16, bgk4, KineticConfig(0.5, dt, 0.5), f0)
        res.append(np.max(conservation_residuals(traj)["charge"][1:-1]))
    assert 3.0 <= res[0] / res[1] <= 5.0


@pytest.mark.parametrize("scheme,minimum", [("imex-ars222", 1.8), ("imex-euler", 0.8)])
def test_manufactured_order(basis4, grid16, bgk4, scheme, minimum):
    errs = [manufactured_error(basis4, grid16, bgk4, dt, t_end=0.2, scheme=scheme) for dt in (0.02, 0.01)]
    assert math.log2(errs[0] / errs[1]) >= minimum


def test_frozen_manufactured_errors(basis4, grid16, bgk4):
    # values frozen from the independent refinement study at dt = 0.04 .. 0.005
    got = [manufactured_error(basis4, grid16, bgk4, dt) for dt in (0.02, 0.01)]
    assert got[0] == pytest.approx(3.79e-6, rel=0.05)
    assert got[1] == pytest.approx(9.45e-7, rel=0.05)


def test_cfl_violation_names_dt(basis4, grid16, bgk4):
    with pytest.raises(ValidationError, match="dt="):
        KineticSolver(basis4, grid16, bgk4, KineticConfig(0.1, 0.5, 1.0))


@pytest.mark.parametrize(
    "kw",
    [dict(eps=0.0), dict(eps=1.5), dict(dt=0.0), dict(t_end=-1.0), dict(scheme="rk4"), dict(cfl_safety=2.0), dict(record_every=0)],
)
def test_config_validation(kw):
    base = dict(eps=0.5, dt=0.01, t_end=0.1)
    base.update(kw)
    with pytest.raises(ValidationError):
        KineticConfig(**base)


def test_scheme_aliases():
    assert KineticConfig(0.5, 0.01, 0.1, scheme="ARS222").scheme == "imex-ars222"
    assert KineticConfig(0.5, 0.01, 0.1, scheme="euler").scheme == "imex-euler"


def test_backend_mismatch(basis4, grid16, bgk4):
    with pytest.raises(ValidationError):
        KineticSolver(basis4, grid16, bgk4, KineticConfig(0.5, 0.01, 0.1, collision_backend=BOLTZMANN))


def test_positivity_rejection_halves_step(basis4, grid16, bgk4, monkeypatch):
    solver = KineticSolver(basis4, grid16, bgk4, KineticConfig(0.5, 0.01, 0.01))
    original = solver._step_values

    def picky(vals, t, dt):
        if dt > 0.003:
            raise PositivityError("forced")
        return original(vals, t, dt)

    monkeypatch.setattr(solver, "_step_values", picky)
    f0 = well_prepared_initial(basis4, grid16, *fields(grid16))
    out = solver.step(make_state(0.0, f0))
    assert solver.stats.halvings == 1 + 2
    assert out.t == pytest.approx(0.01)


def test_positivity_abort_after_ten_halvings(basis4, grid16, bgk4, monkeypatch):
    solver = KineticSolver(basis4, grid16, bgk4, KineticConfig(0.5, 0.01, 0.01))

    def never(vals, t, dt):
        raise PositivityError("forced")

    monkeypatch.setattr(solver, "_step_values", never)
    with pytest.raises(NumericalAbort, match="10 step halvings"):
        solver.step(make_state(0.0, TwoSpeciesDistribution.zeros(basis4, grid16)))


def test_truncation_counter_reports_overflow(basis4, grid16, bgk4):
    vals = np.zeros((2, 16, basis4.M))
    vals[0, :, basis4.index_of[(4, 0, 0)]] = 1e-3 * np.cos(grid16.x)
    vals[1, :, basis4.index_of[(4, 0, 0)]] = -1e-3 * np.cos(grid16.x)
    solver = KineticSolver(basis4, grid16, bgk4, KineticConfig(0.5, 0.01, 0.01, nonlinear=False))
    solver.nonstiff(vals)
    assert solver.stats.max_overflow == pytest.approx(1e-3 * math.sqrt(5), rel=1e-12)


def test_boltzmann_backend_short_run(grid16):
    b3 = HermiteBasis(3)
    op = assemble_boltzmann(b3, KernelSpec(0.0, 0.5, 1.0, 0.3))
    f0 = well_prepared_initial(b3, grid16, *fields(grid16))
    traj = run(b3, grid16, op, KineticConfig(0.5, 0.01, 0.05, collision_backend=BOLTZMANN), f0)
    assert len(traj.snapshots) == 6
    assert all(np.all(np.isfinite(s.f.values)) for s in traj.snapshots)
    m0 = grid16.integrate(f0.values[0, :, 0])
    assert abs(grid16.integrate(traj.snapshots[-1].f.values[0, :, 0]) - m0) < 1e-12
