"""Target curves, net fixtures, tabulated case parameters and the analytic cantilever oracle"""

import math
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib.resources import files

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.integrate import quad

from .exceptions import OutOfRange, UnknownKind, UnknownScenario
from .geometry import FrameSet, seed_from_positions
from .loads import MagneticLoad
from .logging import get_logger
from .models import CurveSpec, MaterialParams, ScenarioSpec
from .solver import ConstraintSet, LoadCase, SolveResult, SolverConfig, forward_solve, inverse_solve
from .topology import NetFile, NetTopology, build_chain, node_dofs, pack_dofs, parse_net, split_dofs

CurveFunction = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray, np.ndarray]]


def spherical(s):
    return np.cos(18 * np.pi * s) * np.sin(np.pi * s), np.sin(18 * np.pi * s) * np.sin(np.pi * s), np.cos(np.pi * s)


def conical(s):
    radius = 1 - s / 3
    return radius * np.cos(8 * np.pi * s / 3), radius * np.sin(8 * np.pi * s / 3), 2 * s / 3


def hyperbolic(s):
    radius = (s - 1) ** 2 + 0.5
    return radius * np.cos(6 * np.pi * s), radius * np.sin(6 * np.pi * s), s / 2


def helix(s):
    return 4 * s, np.sin(8 * np.pi * s), np.cos(8 * np.pi * s)


def hyperbolic_surface(s):
    radius = 4 * s**2 + 0.6
    return radius * np.cos(16 * np.pi * s), radius * np.sin(16 * np.pi * s), -4 * s


CURVES: dict[str, tuple[CurveFunction, tuple[float, float]]] = {
    "spherical": (spherical, (0.0, 1.0)),
    "conical": (conical, (0.0, 1.0)),
    "hyperbolic": (hyperbolic, (0.1, 1.9)),
    "helix": (helix, (0.0, 1.0)),
    "hyperbolic_surface": (hyperbolic_surface, (0.0, 1.0)),
}


def generate_curve(spec: CurveSpec) -> np.ndarray:
    """Sample a closed-form target curve uniformly in its parameter, as an (n, 3) array"""
    try:
        function, (s0, s1) = CURVES[spec.kind]
    except KeyError:
        raise UnknownKind(f"unknown curve kind {spec.kind!r}, expected one of {sorted(CURVES)}") from None
    s0 = s0 if spec.s0 is None else spec.s0
    s1 = s1 if spec.s1 is None else spec.s1
    if s1 <= s0:
        raise OutOfRange(f"parameter range [{s0}, {s1}] is empty")
    s = np.linspace(s0, s1, spec.sample_count)
    return spec.scale * np.column_stack([np.broadcast_to(c, s.shape) for c in function(s)])


def max_gamma() -> float:
    """Largest elasto-gravitational parameter for which a horizontal cantilever has a rest shape"""
    return 3 * math.pi


class CantileverOracle(BaseModel):
    """Closed-form rest shape of a straight horizontal cantilever sagging under its own weight"""

    model_config = ConfigDict(frozen=True)

    gamma: float = Field(ge=0, description="rho A g L^3 / EI")
    length: float = Field(default=1.0, gt=0, description="m")

    def theta(self, s):
        """Rest-shape rotation at normalized arclength s"""
        return self.gamma * s * (s * s - 3 * s + 3) / 6


def oracle_theta(oracle: CantileverOracle, s: float) -> float:
    if not 0.0 <= s <= 1.0:
        raise OutOfRange(f"normalized arclength {s} is outside [0, 1]")
    return float(oracle.theta(s))


def oracle_shape(oracle: CantileverOracle, n_samples: int) -> np.ndarray:
    """Planar rest centerline (x, y) at n_samples equally spaced arclengths, clamped end at the origin"""
    if n_samples < 2:
        raise OutOfRange(f"need at least 2 samples, got {n_samples}")
    s = np.linspace(0.0, 1.0, n_samples)
    points = np.zeros((n_samples, 2))
    for i in range(1, n_samples):
        a, b = s[i - 1], s[i]
        dx, _ = quad(lambda u: math.cos(oracle.theta(u)), a, b, epsabs=1e-14, epsrel=1e-13)
        dy, _ = quad(lambda u: math.sin(oracle.theta(u)), a, b, epsabs=1e-14, epsrel=1e-13)
        points[i] = points[i - 1] + oracle.length * np.array([dx, dy])
    return points


SCENARIOS = (
    ScenarioSpec(
        key="spherical",
        name="Spherical curve",
        characteristic_length=36.3,
        radius=1e-2,
        modulus=1e7,
        density=1e3,
        curve="spherical",
    ),
    ScenarioSpec(
        key="conical",
        name="Conical curve",
        characteristic_length=7.0,
        radius=1e-2,
        modulus=1e7,
        density=1e3,
        curve="conical",
    ),
    ScenarioSpec(
        key="hyperbolic",
        name="Hyperbolic curve",
        characteristic_length=15.8,
        radius=1e-2,
        modulus=1e7,
        density=1e3,
        curve="hyperbolic",
    ),
    ScenarioSpec(
        key="helix",
        name="Helix (gravity)",
        characteristic_length=25.4,
        radius=1e-1,
        modulus=1e8,
        density=1e3,
        gravity=(0.0, 0.0, -10.0),
        curve="helix",
        verified_intensity=1e-3,
    ),
    ScenarioSpec(
        key="hyperbole",
        name="Hyperbole (magnetic)",
        characteristic_length=97.4,
        radius=1e-1,
        modulus=1e8,
        density=1e3,
        magnetization=(0.0, 0.0, -1e5),
        field=(-5.0, 0.0, 0.0),
        curve="hyperbolic_surface",
        verified_intensity=0.1,
    ),
    ScenarioSpec(
        key="ring",
        name="Ring",
        characteristic_length=2.1,
        radius=1.5e-3,
        modulus=5e6,
        density=2e2,
        gravity=(0.0, 0.0, -10.0),
        fixture="ring.net",
        verified_intensity=0.01,
    ),
    ScenarioSpec(
        key="knot",
        name="Knot",
        characteristic_length=6.4,
        radius=1.5e-3,
        modulus=5e7,
        density=4e2,
        gravity=(0.0, 0.0, -10.0),
        fixture="knot.net",
        verified_intensity=None,
    ),
    ScenarioSpec(
        key="fulleren",
        name="Fulleren",
        characteristic_length=7.1,
        radius=1e-2,
        modulus=6e6,
        density=5e2,
        gravity=(0.0, 0.0, -10.0),
        magnetization=(0.0, 5e5, 0.0),
        field=(0.0, 0.0, -1.0),
        fixture="fullerene.net",
        verified_intensity=None,
    ),
)


# Published per-step wall time in ms (forward, inverse), for context next to local measurements
REFERENCE_TIMINGS: dict[str, tuple[float, float]] = {
    "spherical": (6.0, 7.0),
    "conical": (6.0, 7.0),
    "hyperbolic": (7.0, 6.0),
    "ring": (113.0, 112.0),
    "knot": (219.0, 208.0),
    "fulleren": (6.0, 7.0),
}


def scenario_catalog() -> list[ScenarioSpec]:
    return list(SCENARIOS)


def get_scenario(key: str) -> ScenarioSpec:
    for spec in SCENARIOS:
        if key in (spec.key, spec.name):
            return spec
    raise UnknownScenario(f"unknown scenario {key!r}, expected one of {[s.key for s in SCENARIOS]}")


def load_fixture(name: str) -> NetFile:
    return parse_net(files("invrod").joinpath("fixtures", name).read_text())


def relaxation_dt(material: MaterialParams, length: float, factor: float = 10.0) -> float:
    """Time step well above the slowest bending period, so each step is close to a static solve"""
    ei = float(np.min(np.atleast_1d(material.EI1)))
    return factor * math.sqrt(material.density * material.area * length**4 / ei)


@dataclass
class DesignProblem:
    """DC target, net, material, loads and inverse constraints of one design case"""

    name: str
    topology: NetTopology
    dc: np.ndarray
    material: MaterialParams
    loads: LoadCase
    constraints: ConstraintSet
    config: SolverConfig
    length_scale: float
    seed: FrameSet

    def forward_constraints(self) -> ConstraintSet:
        """Prescribed motion of the verification solve: the inverse schedule played backwards"""
        return self.constraints.reversed(self.constraints.duration)


def problem_from_net(
    spec: ScenarioSpec,
    topology: NetTopology,
    positions: np.ndarray,
    steps: int,
    intensity: float,
    moving_nodes: tuple[int, ...] = (),
    pull: np.ndarray | None = None,
) -> DesignProblem:
    material = spec.material
    dc = pack_dofs(positions, np.zeros(topology.edge_count))
    seed = seed_from_positions(topology, positions)
    config = SolverConfig(dt=relaxation_dt(material, spec.characteristic_length), max_steps=steps)

    constraints = ConstraintSet.clamps(topology, dc)
    if moving_nodes:
        dofs = [d for node in moving_nodes for d in node_dofs(node)]
        end = dc[dofs] + np.tile(pull, len(moving_nodes))
        constraints = constraints.with_motion(dofs, dc[dofs], end, config.ramp_steps)

    magnetic = None
    if spec.magnetization is not None and spec.field_tesla is not None:
        magnetic = MagneticLoad.imprint(spec.magnetization, spec.field_tesla * intensity, topology, dc, seed)
    gravity = None if spec.gravity is None or intensity == 0 else np.asarray(spec.gravity) * intensity

    return DesignProblem(
        name=spec.key,
        topology=topology,
        dc=dc,
        material=material,
        loads=LoadCase(gravity=gravity, magnetic=magnetic),
        constraints=constraints,
        config=config,
        length_scale=spec.characteristic_length,
        seed=seed,
    )


def build_problem(
    scenario: str | ScenarioSpec,
    sample_count: int | None = None,
    intensity: float = 1.0,
    compression: float = 0.02,
    steps: int = 40,
) -> DesignProblem:
    """Design case for one catalog row.

    Curves without body loads are clamped at both ends and the UC ends are pulled apart along the
    chord by `compression` times its length. Loaded curves are clamped at the first edge only.
    `intensity` scales the gravity and the magnetic field.
    """
    spec = scenario if isinstance(scenario, ScenarioSpec) else get_scenario(scenario)

    if spec.fixture is not None:
        net = load_fixture(spec.fixture)
        return problem_from_net(spec, net.topology, net.positions, steps, intensity)

    positions = generate_curve(CurveSpec(kind=spec.curve, sample_count=sample_count or 500))
    n = len(positions)
    chain = build_chain(positions)
    loaded = spec.gravity is not None or spec.magnetization is not None
    if loaded:
        topology = chain.with_clamps(nodes={0, 1}, edges={0})
        return problem_from_net(spec, topology, positions, steps, intensity)

    topology = chain.with_clamps(nodes={0, 1, n - 2, n - 1}, edges={0, n - 2})
    pull = compression * (positions[-1] - positions[0])
    return problem_from_net(spec, topology, positions, steps, intensity, moving_nodes=(n - 2, n - 1), pull=pull)


def cantilever_problem(
    gamma: float,
    node_count: int = 100,
    length: float = 1.0,
    radius: float = 0.01,
    modulus: float = 1e7,
    gravity: float = 10.0,
    steps: int = 40,
) -> DesignProblem:
    """Straight horizontal DC along +x under gravity along -z.

    The first edge is clamped and its midpoint sits at the origin, so the free length is `length`.
    """
    if node_count < 3:
        raise OutOfRange(f"a cantilever needs at least 3 nodes, got {node_count}")
    h = length / (node_count - 1.5)
    x = (np.arange(node_count) - 0.5) * h
    positions = np.column_stack([x, np.zeros(node_count), np.zeros(node_count)])
    density = max(gamma, 1e-12) * modulus * radius**2 / (4 * gravity * length**3)
    spec = ScenarioSpec(
        key="cantilever",
        name=f"Cantilever gamma={gamma:g}",
        characteristic_length=length,
        radius=radius,
        modulus=modulus,
        density=density,
        gravity=(0.0, 0.0, -gravity),
    )
    topology = build_chain(positions).with_clamps(nodes={0, 1}, edges={0})
    return problem_from_net(spec, topology, positions, steps, intensity=1.0 if gamma > 0 else 0.0)


def rest_rotation(problem: DesignProblem, uc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalized arclength of each free edge midpoint and the rotation of that edge in the x-z plane"""
    positions, _ = split_dofs(problem.topology, uc)
    e = np.diff(positions, axis=0)
    ne = len(e)
    h = problem.length_scale / (ne - 0.5)
    s = np.arange(ne) * h / problem.length_scale
    return s, np.arctan2(e[:, 2], e[:, 0])


def oracle_error(problem: DesignProblem, uc: np.ndarray, gamma: float) -> float:
    """Largest rotation error of a cantilever rest shape against the closed form, relative to its peak"""
    s, theta = rest_rotation(problem, uc)
    expected = CantileverOracle(gamma=gamma, length=problem.length_scale).theta(s)
    return float(np.max(np.abs(theta - expected)) / max(np.max(np.abs(expected)), 1e-300))


@dataclass
class RoundTrip:
    """Inverse result, verification result and per-node distance to the DC.

    Node errors are infinite when the verification solve did not converge.
    """

    inverse: SolveResult
    forward: SolveResult | None
    node_errors: np.ndarray

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.node_errors**2))) if self.node_errors.size else math.inf


def round_trip(problem: DesignProblem, threads: int = 1, inverse_callback=None, forward_callback=None) -> RoundTrip:
    """Solve for the UC, then relax the UC forward and compare the result with the DC"""
    logger = get_logger().bind(scenario=problem.name)
    inverse = inverse_solve(
        problem.dc,
        problem.topology,
        problem.material,
        loads=problem.loads,
        constraints=problem.constraints,
        config=problem.config,
        seed=problem.seed,
        threads=threads,
        callback=inverse_callback,
    )
    if inverse.report.diverged:
        logger.warning("No rest shape found, skipping verification", reason=inverse.report.reason)
        return RoundTrip(inverse=inverse, forward=None, node_errors=np.zeros(0))

    forward = forward_solve(
        inverse.configuration,
        problem.topology,
        problem.material,
        loads=problem.loads,
        constraints=problem.forward_constraints(),
        config=problem.config,
        seed=inverse.seed,
        threads=threads,
        callback=forward_callback,
    )
    target, _ = split_dofs(problem.topology, problem.dc)
    if forward.report.converged:
        reached, _ = split_dofs(problem.topology, forward.configuration)
        errors = np.linalg.norm(reached - target, axis=1)
    else:
        logger.warning(
            "Verification did not converge",
            termination=forward.report.termination,
            reason=forward.report.reason,
        )
        errors = np.full(len(target), math.inf)
    result = RoundTrip(inverse=inverse, forward=forward, node_errors=errors)
    logger.info("Round trip finished", rms=result.rms, max_error=float(errors.max()))
    return result


@dataclass(frozen=True)
class SweepPoint:
    gamma: float
    converged: bool
    reason: str | None
    tip_displacement: float


@dataclass(frozen=True)
class GammaSweep:
    points: tuple[SweepPoint, ...]

    @property
    def onset(self) -> tuple[float | None, float | None]:
        """Largest converged gamma below the first diverged one, and that diverged gamma"""
        last_ok = None
        for point in sorted(self.points, key=lambda p: p.gamma):
            if not point.converged:
                return last_ok, point.gamma
            last_ok = point.gamma
        return last_ok, None


def _sweep_point(gamma: float, node_count: int, steps: int, max_tangent_rotation: float | None) -> SweepPoint:
    problem = cantilever_problem(gamma, node_count=node_count, steps=steps)
    result = inverse_solve(
        problem.dc,
        problem.topology,
        problem.material,
        loads=problem.loads,
        constraints=problem.constraints,
        config=problem.config.model_copy(update={"max_tangent_rotation": max_tangent_rotation}),
        seed=problem.seed,
    )
    dc, _ = split_dofs(problem.topology, problem.dc)
    uc, _ = split_dofs(problem.topology, result.configuration)
    return SweepPoint(
        gamma=gamma,
        converged=result.report.converged,
        reason=result.report.reason,
        tip_displacement=float(np.linalg.norm(uc[-1] - dc[-1])),
    )


def gamma_sweep(
    gammas, node_count: int = 50, steps: int = 40, threads: int = 1, max_tangent_rotation: float | None = None
) -> GammaSweep:
    """Inverse cantilever solves over a list of gamma values.

    `max_tangent_rotation` turns on the admissibility cap, so a rest shape whose tangents turn
    further than that from the target counts as diverged.
    """
    gammas = [float(g) for g in gammas]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            points = list(executor.map(lambda g: _sweep_point(g, node_count, steps, max_tangent_rotation), gammas))
    else:
        points = [_sweep_point(g, node_count, steps, max_tangent_rotation) for g in gammas]
    sweep = GammaSweep(points=tuple(points))
    get_logger().info("Gamma sweep finished", onset=sweep.onset)
    return sweep
