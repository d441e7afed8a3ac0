import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from invrod.elastic import ForwardModel, NaturalStrains
from invrod.exceptions import AntiparallelTangents, NewtonStalled, SolverError, ZeroFinalEnergy
from invrod.geometry import frames_of, seed_from_positions
from invrod.loads import ExternalLoads, GravityLoad, assemble_inertia, magnetic_volumes
from invrod.models import MaterialParams, StepStats
from invrod.scenarios import build_problem, cantilever_problem, oracle_error, rest_rotation, round_trip
from invrod.solver import (
    ConstraintSet,
    LoadCase,
    Schedule,
    SolveReport,
    Solver,
    SolverConfig,
    SolverState,
    compare_profiles,
    energy_profile,
    forward_solve,
    inverse_solve,
    relax_to_statics,
    step,
)
from invrod.topology import build_chain, pack_dofs, split_dofs


@pytest.fixture
def material():
    return MaterialParams.circular(youngs_modulus=1e7, radius=1e-2, density=1e3)


def arc(n: int = 12):
    s = np.linspace(0, 1, n)
    positions = np.column_stack([np.cos(2 * s), np.sin(2 * s), 0.3 * s])
    topology = build_chain(positions).with_clamps(nodes={0, 1}, edges={0})
    return topology, pack_dofs(positions, np.zeros(n - 1))


def stats(k: int, es: float, eb: float = 0.0, et: float = 0.0) -> StepStats:
    return StepStats(step=k, residual=0.0, newton_iterations=1, ms=1.0, Es=es, Eb=eb, Et=et)


def test_schedule():
    ramp = Schedule.linear(0.0, 1.0, 10)
    assert ramp.at(0) == 0.0
    assert ramp.at(5) == 0.5
    assert ramp.at(25) == 1.0
    assert ramp.moving
    assert Schedule.constant(2.0).at(100) == 2.0
    assert not Schedule.constant(2.0).moving

    back = ramp.reversed(10)
    assert back.at(0) == 1.0
    assert back.at(10) == 0.0


def test_constraint_set_clamps():
    topology, q = arc()
    constraints = ConstraintSet.clamps(topology, q)
    assert list(constraints.dofs) == [0, 1, 2, 3, 4, 5, 3 * topology.node_count]
    assert constraints.values_at(7) == pytest.approx(q[constraints.dofs])
    assert constraints.duration == 0.0
    assert not constraints.moving
    constraints.validate(topology)

    free = constraints.free_mask(topology.dof_count)
    assert free.sum() == topology.dof_count - 7


def test_constraint_set_motion():
    topology, q = arc()
    constraints = ConstraintSet.clamps(topology, q).with_motion([33, 34], [0.0, 0.0], [1.0, 2.0], 4)
    assert constraints.moving
    assert constraints.duration == 4.0
    at = dict(zip(constraints.dofs.tolist(), constraints.values_at(2), strict=True))
    assert (at[33], at[34]) == pytest.approx((0.5, 1.0))
    back = dict(zip(constraints.dofs.tolist(), constraints.reversed(4).values_at(4), strict=True))
    assert (back[33], back[34]) == (0.0, 0.0)


def test_constraint_set_missing_clamp():
    topology, q = arc()
    partial = ConstraintSet({dof: Schedule.constant(q[dof]) for dof in (0, 1, 2)})
    with pytest.raises(SolverError, match="clamped node 1"):
        partial.validate(topology)


def test_config_defaults():
    config = SolverConfig(dt=0.5, max_steps=40)
    assert config.ramp_steps == 20
    assert config.damping_coefficient == pytest.approx(2.0 / (0.5 * 10))
    assert SolverConfig(damping=0.0).damping_coefficient == 0.0


def test_zero_load_inverse_identity(material):
    topology, dc = arc()
    result = inverse_solve(dc, topology, material)
    assert result.report.converged
    assert len(result.report.steps) <= 2
    assert result.report.steps[0].newton_iterations == 1
    assert np.max(np.abs(result.configuration - dc)) < 1e-10


def test_zero_load_forward_identity(material):
    topology, uc = arc()
    result = forward_solve(uc, topology, material)
    assert result.report.converged
    assert np.max(np.abs(result.configuration - uc)) < 1e-10


@pytest.mark.parametrize("key", ["spherical", "helix", "ring"])
def test_zero_load_inverse_identity_scenarios(key):
    problem = build_problem(key, sample_count=60, intensity=0.0)
    result = inverse_solve(
        problem.dc,
        problem.topology,
        problem.material,
        constraints=ConstraintSet.clamps(problem.topology, problem.dc),
        config=problem.config,
        seed=problem.seed,
    )
    assert result.report.converged
    assert np.max(np.abs(result.configuration - problem.dc)) < 1e-10


def test_prescribed_dofs_are_exact(material):
    topology, uc = arc()
    n = topology.node_count
    dofs = [3 * (n - 1), 3 * (n - 1) + 1, 3 * (n - 1) + 2]
    start = uc[dofs]
    end = start + np.array([-0.05, 0.01, 0.02])
    constraints = ConstraintSet.clamps(topology, uc).with_motion(dofs, start, end, 5)
    seen = []
    result = forward_solve(
        uc,
        topology,
        material,
        constraints=constraints,
        config=SolverConfig(dt=1.0, max_steps=10),
        callback=lambda k, q: seen.append((k, q[dofs].copy(), q[:6].copy())),
    )
    assert result.report.steps
    index = [constraints.dofs.tolist().index(d) for d in dofs]
    for k, moving, clamped in seen:
        assert np.array_equal(moving, constraints.values_at(k)[index])
        assert np.array_equal(clamped, uc[:6])


def test_forward_cantilever_under_gravity(material):
    positions = np.column_stack([np.linspace(0, 1, 20), np.zeros(20), np.zeros(20)])
    topology = build_chain(positions).with_clamps(nodes={0, 1}, edges={0})
    uc = pack_dofs(positions, np.zeros(19))
    result = forward_solve(
        uc,
        topology,
        material,
        loads=LoadCase(gravity=np.array([0.0, 0.0, -1.0])),
        config=SolverConfig(dt=20.0, max_steps=40),
    )
    report = result.report
    assert report.converged
    tip = split_dofs(topology, result.configuration)[0][-1]
    assert tip[2] < 0
    assert all(s.elastic >= 0 for s in report.steps)
    assert [s.step for s in report.steps] == list(range(1, len(report.steps) + 1))
    assert all(s.ms > 0 for s in report.steps)


def inverse_cantilever(gamma: float, node_count: int = 50, **overrides):
    problem = cantilever_problem(gamma, node_count=node_count)
    result = inverse_solve(
        problem.dc,
        problem.topology,
        problem.material,
        loads=problem.loads,
        constraints=problem.constraints,
        config=problem.config.model_copy(update=overrides),
        seed=problem.seed,
    )
    return problem, result


@pytest.mark.parametrize("gamma", [1.0, 3.0, 6.0])
def test_inverse_cantilever_matches_closed_form(gamma):
    problem, result = inverse_cantilever(gamma, node_count=100)
    assert result.report.converged
    assert oracle_error(problem, result.configuration, gamma) < 1e-2


def test_inverse_cantilever_error_shrinks_with_resolution():
    errors = []
    for n in (50, 100, 200):
        problem, result = inverse_cantilever(6.0, node_count=n)
        assert result.report.converged
        errors.append(oracle_error(problem, result.configuration, 6.0))
    assert errors[0] > errors[1] > errors[2]


def test_inverse_cantilever_beyond_closed_form_limit():
    # 12 > 3 pi: the discrete model still finds a rest shape, with the tip turned past 90 degrees
    problem, result = inverse_cantilever(12.0)
    assert result.report.converged
    s, theta = rest_rotation(problem, result.configuration)
    assert theta[-1] > math.pi / 2
    assert oracle_error(problem, result.configuration, 12.0) < 1e-2


@pytest.mark.parametrize("gamma,converged", [(8.0, True), (12.0, False)])
def test_admissibility_cap_is_opt_in(gamma, converged):
    _, result = inverse_cantilever(gamma, max_tangent_rotation=math.pi / 2)
    report = result.report
    assert report.converged is converged
    assert report.diverged is not converged
    if not converged:
        assert report.reason == "inadmissible"


def test_inverse_solve_is_deterministic():
    problem = cantilever_problem(2.0, node_count=30)
    runs = [
        inverse_solve(
            problem.dc,
            problem.topology,
            problem.material,
            loads=problem.loads,
            constraints=problem.constraints,
            config=problem.config,
            seed=problem.seed,
        ).report
        for _ in range(2)
    ]
    assert np.array_equal(runs[0].final, runs[1].final)
    assert [(s.Es, s.Eb, s.Et, s.residual) for s in runs[0].steps] == [
        (s.Es, s.Eb, s.Et, s.residual) for s in runs[1].steps
    ]


def test_energy_profile():
    report = SolveReport(mode="forward", final=np.zeros(1), steps=[stats(1, 1.0), stats(2, 2.0, eb=2.0)])
    profile = energy_profile(report)
    assert list(profile.steps) == [0, 1, 2]
    assert profile.total[-1] == 1.0
    assert profile.Es[1] == 0.25
    assert profile.progress[-1] == 1.0


def test_energy_profile_single_step():
    report = SolveReport(mode="forward", final=np.zeros(1), steps=[stats(1, 3.0)])
    assert len(energy_profile(report).total) == 2


def test_energy_profile_zero_final():
    with pytest.raises(ZeroFinalEnergy):
        energy_profile(SolveReport(mode="forward", final=np.zeros(1), steps=[stats(1, 0.0)]))
    with pytest.raises(ZeroFinalEnergy):
        energy_profile(SolveReport(mode="forward", final=np.zeros(1)))


def test_compare_profiles():
    forward = SolveReport(mode="forward", final=np.zeros(1), steps=[stats(k, k**2 / 16) for k in range(1, 5)])
    inverse = SolveReport(mode="inverse", final=np.zeros(1), steps=[stats(k, k / 4) for k in range(1, 5)])
    comparison = compare_profiles(forward, inverse)
    assert comparison.endpoint_mismatch == 0.0
    assert comparison.max_gap == pytest.approx(0.25, abs=1e-2)


def test_compressed_curve_profiles_nearly_coincide():
    # compressing a clamped curve loads it along nearly the same path in both modes
    trip = round_trip(build_problem("conical", sample_count=40, compression=0.05))
    assert trip.inverse.report.converged
    assert trip.forward.report.converged
    comparison = compare_profiles(trip.forward.report, trip.inverse.report)
    assert comparison.endpoint_mismatch < 1e-2
    assert comparison.max_gap < 0.05


def test_cantilever_profiles_differ_along_the_path():
    trip = round_trip(cantilever_problem(8.0, node_count=40))
    assert trip.forward.report.converged
    comparison = compare_profiles(trip.forward.report, trip.inverse.report)
    assert comparison.endpoint_mismatch < 1e-2
    assert comparison.max_gap > 0.05


def test_seed_is_reused(material):
    topology, uc = arc()
    seed = seed_from_positions(topology, split_dofs(topology, uc)[0])
    result = forward_solve(uc, topology, material, seed=seed)
    assert result.seed is seed
    assert math.isclose(result.report.ms_per_step, result.report.total_ms / len(result.report.steps))


def gravity_solver(topology, uc, material, config: SolverConfig, gravity=(0.0, 0.0, -1.0)) -> Solver:
    seed = seed_from_positions(topology, split_dofs(topology, uc)[0])
    natural = NaturalStrains.from_configuration(topology, uc, seed)
    inertia = assemble_inertia(topology, material, uc, damping=config.damping_coefficient)
    loads = ExternalLoads(
        topology,
        seed,
        inertia,
        gravity=GravityLoad.of(np.asarray(gravity)),
        volumes=magnetic_volumes(topology, material, uc),
    )
    constraints = ConstraintSet.clamps(topology, uc)
    return Solver(ForwardModel(topology, material, natural, seed), loads, inertia, constraints, config)


def straight_rod(n: int = 20):
    positions = np.column_stack([np.linspace(0, 1, n), np.zeros(n), np.zeros(n)])
    topology = build_chain(positions).with_clamps(nodes={0, 1}, edges={0})
    return topology, pack_dofs(positions, np.zeros(n - 1))


def test_step_and_relax_match_forward_solve(material):
    topology, uc = arc()
    config = SolverConfig(dt=20.0, max_steps=30, mode="forward")

    initial = SolverState(x=uc.copy(), v=np.zeros_like(uc))
    state, step_stats = step(initial, gravity_solver(topology, uc, material, config))
    assert state.step == step_stats.step == 1
    assert np.array_equal(state.x[:6], uc[:6])
    assert step_stats.newton_iterations >= 1

    solver = gravity_solver(topology, uc, material, config)
    report = relax_to_statics(uc, solver)
    expected = forward_solve(
        uc,
        topology,
        material,
        loads=LoadCase(gravity=np.array([0.0, 0.0, -1.0])),
        config=config,
        seed=seed_from_positions(topology, split_dofs(topology, uc)[0]),
    )
    assert report.termination == expected.report.termination
    assert np.array_equal(report.final, expected.configuration)


def test_newton_converges_superlinearly(material):
    topology, uc = straight_rod()
    solver = gravity_solver(topology, uc, material, SolverConfig(dt=20.0, max_steps=40))
    norms = []
    evaluate = solver.residual

    def recording(x, state, factor, dt):
        residual, stiffness = evaluate(x, state, factor, dt)
        norms.append(float(np.linalg.norm(residual[solver.free])))
        return residual, stiffness

    solver.residual = recording
    _, step_stats = step(SolverState(x=uc.copy(), v=np.zeros_like(uc)), solver)
    assert step_stats.newton_iterations == len(norms) >= 2
    assert norms[-1] < solver.newton_tol
    assert norms[-1] / norms[-2] < 0.5


def test_forward_cantilever_self_convergence():
    tips = []
    for n in (50, 100, 200):
        problem = cantilever_problem(1.0, node_count=n, steps=80)
        result = forward_solve(
            problem.dc,
            problem.topology,
            problem.material,
            loads=problem.loads,
            constraints=problem.constraints,
            config=problem.config,
            seed=problem.seed,
        )
        assert result.report.converged
        tips.append(split_dofs(problem.topology, result.configuration)[0][-1, 2])
    assert all(t < 0 for t in tips)
    assert abs(tips[1] - tips[2]) < 5e-3 * abs(tips[2])


def test_residual_growth_is_divergence(material):
    topology, uc = arc()
    config = SolverConfig(dt=20.0, max_steps=100, divergence_window=5, divergence_factor=10.0)
    solver = gravity_solver(topology, uc, material, config)

    def growing(state):
        k = state.step + 1
        return SolverState(x=state.x, v=state.v, step=k), stats(k, 1.0).model_copy(update={"residual": 2.0**k})

    solver.step = growing
    report = solver.relax(uc)
    assert report.diverged
    assert report.reason == "residual growth"
    # five rises in a row, the last one 32x the residual the rise started from
    assert len(report.steps) == 6


def test_failed_step_is_cut_into_substeps(material):
    topology, uc = straight_rod()
    config = SolverConfig(dt=20.0, max_steps=40)
    solver = gravity_solver(topology, uc, material, config)
    newton = solver.newton
    lengths = []

    def refuse_full_steps(state, factor, targets, halve, dt=None):
        lengths.append(dt)
        if dt == config.dt:
            raise NewtonStalled("full step refused", step=state.step + 1)
        return newton(state, factor, targets, halve, dt)

    solver.newton = refuse_full_steps
    report = solver.relax(uc)
    assert report.converged
    assert lengths[:4] == [config.dt, config.dt, config.dt / 2, config.dt / 2]
    assert report.steps[-1].residual < solver.relaxation_tol


def test_failed_step_reports_geometric_cause(material):
    topology, uc = arc()
    config = SolverConfig(dt=20.0, max_steps=30, max_cutbacks=2)
    solver = gravity_solver(topology, uc, material, config)
    lengths = []

    def blocked(state, factor, targets, halve, dt=None):
        lengths.append(dt)
        cause = AntiparallelTangents("tangent turned onto the antipode of its seed", element=4)
        raise NewtonStalled("Newton did not converge", step=state.step + 1) from cause

    solver.newton = blocked
    report = solver.relax(uc)
    assert report.diverged
    assert report.reason == "AntiparallelTangents"
    assert not report.steps
    assert lengths == [config.dt, config.dt, config.dt / 2, config.dt / 4]


def test_forward_frames_reanchor_past_the_limit(material):
    topology, uc = arc()
    solver = gravity_solver(topology, uc, material, SolverConfig(dt=20.0))
    positions, thetas = split_dofs(topology, uc)
    turned = pack_dofs(positions @ Rotation.from_rotvec([0.0, 0.0, 2.1]).as_matrix().T, thetas + 0.3)
    before = solver.model.energies(turned)
    frames = frames_of(topology, turned, solver.model.seed)

    assert not solver.reanchor(uc)
    assert solver.reanchor(turned)
    assert solver.loads.seed is solver.model.seed
    assert solver.model.seed.t == pytest.approx(frames.t)
    assert solver.model.seed.u == pytest.approx(frames.u)
    assert solver.model.energies(turned) == pytest.approx(before, rel=1e-9, abs=1e-12)
    assert not solver.reanchor(turned)
