"""Implicit-Euler dynamic relaxation with Newton iterations, in forward and inverse mode"""

import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field
from scipy.sparse import csr_matrix, diags
from scipy.sparse.linalg import splu

from .elastic import ForwardModel, InverseModel, NaturalStrains
from .exceptions import GeometryError, LinearSolveSingular, NewtonStalled, NonFiniteState, SolverError, ZeroFinalEnergy
from .geometry import FrameSet, frames_of, seed_from_positions, tangents_of
from .loads import ExternalLoads, GravityLoad, InertiaModel, MagneticLoad, assemble_inertia, magnetic_volumes
from .logging import StepTimer, get_logger
from .models import MaterialParams, StepStats
from .topology import NetTopology, node_dofs, split_dofs, twist_dof

Mode = Literal["forward", "inverse"]


class SolverConfig(BaseModel):
    mode: Mode = "forward"
    dt: float = Field(default=1e-2, gt=0, description="Time step (s)")
    newton_tol: float | None = Field(default=None, gt=0, description="Force residual norm (N), default 1e-6 EA")
    max_newton_iters: int = Field(default=50, ge=1)
    max_steps: int = Field(default=200, ge=1)
    min_steps: int = Field(default=0, ge=0, description="Steps taken before convergence may be declared")
    relaxation_tol: float | None = Field(
        default=None, gt=0, description="Static residual norm (N), default 1e-4 |F_ext| or 1e-8 when unloaded"
    )
    ramp_fraction: float = Field(default=0.5, ge=0, le=1, description="Share of max_steps used to ramp loads")
    damping: float | None = Field(default=None, ge=0, description="Mass-proportional damping c (1/s)")
    characteristic_steps: int = Field(default=10, ge=1, description="Steps per relaxation period for default c")
    divergence_window: int = Field(default=20, ge=1)
    divergence_factor: float = Field(default=1e3, gt=1)
    backtrack_halvings: int = Field(default=8, ge=0)
    max_cutbacks: int = Field(default=4, ge=0, description="Times a failed step is split into twice as many substeps")
    reanchor_rotation: float | None = Field(
        default=math.pi / 2, gt=0, description="Tangent turn from its seed that re-anchors forward frames"
    )
    max_tangent_rotation: float | None = Field(
        default=None, gt=0, description="Opt-in cap on the turn of a rest tangent away from the target"
    )

    @property
    def ramp_steps(self) -> int:
        return max(1, round(self.ramp_fraction * self.max_steps))

    @property
    def damping_coefficient(self) -> float:
        if self.damping is not None:
            return self.damping
        return 2.0 / (self.dt * self.characteristic_steps)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-linear prescribed value over step count, held after the last breakpoint"""

    steps: tuple[float, ...]
    values: tuple[float, ...]

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls(steps=(0.0,), values=(float(value),))

    @classmethod
    def linear(cls, start: float, end: float, steps: int) -> "Schedule":
        return cls(steps=(0.0, float(steps)), values=(float(start), float(end)))

    def at(self, step: float) -> float:
        if len(self.steps) == 1:
            return self.values[0]
        return float(np.interp(step, self.steps, self.values))

    @property
    def moving(self) -> bool:
        return len(set(self.values)) > 1

    def reversed(self, total: float) -> "Schedule":
        end = max(total, self.steps[-1])
        return Schedule(
            steps=tuple(end - s for s in reversed(self.steps)),
            values=tuple(reversed(self.values)),
        )


class ConstraintSet:
    def __init__(self, schedules: dict[int, Schedule] | None = None) -> None:
        self.schedules = dict(sorted((schedules or {}).items()))

    @classmethod
    def clamps(cls, topology: NetTopology, configuration) -> "ConstraintSet":
        """Hold clamped nodes and clamped edge twists at their values in `configuration`"""
        q = np.asarray(configuration, dtype=float)
        schedules = {}
        for node in topology.clamped_nodes:
            for dof in node_dofs(node):
                schedules[dof] = Schedule.constant(q[dof])
        for edge in topology.clamped_edges:
            dof = twist_dof(topology, edge)
            schedules[dof] = Schedule.constant(q[dof])
        return cls(schedules)

    def with_motion(self, dofs: Iterable[int], start, end, steps: int) -> "ConstraintSet":
        schedules = dict(self.schedules)
        for dof, a, b in zip(dofs, start, end, strict=True):
            schedules[int(dof)] = Schedule.linear(a, b, steps)
        return ConstraintSet(schedules)

    def reversed(self, total: float) -> "ConstraintSet":
        return ConstraintSet({dof: s.reversed(total) for dof, s in self.schedules.items()})

    @property
    def dofs(self) -> np.ndarray:
        return np.fromiter(self.schedules.keys(), dtype=np.int64, count=len(self.schedules))

    @property
    def moving(self) -> bool:
        return any(s.moving for s in self.schedules.values())

    @property
    def duration(self) -> float:
        return max((s.steps[-1] for s in self.schedules.values()), default=0.0)

    def values_at(self, step: float) -> np.ndarray:
        return np.array([s.at(step) for s in self.schedules.values()], dtype=float)

    def free_mask(self, size: int) -> np.ndarray:
        mask = np.ones(size, dtype=bool)
        mask[self.dofs] = False
        return mask

    def validate(self, topology: NetTopology) -> None:
        dofs = set(self.schedules)
        if any(d < 0 or d >= topology.dof_count for d in dofs):
            raise SolverError("constraint DOF out of range")
        for node in topology.clamped_nodes:
            if not set(node_dofs(node)) <= dofs:
                raise SolverError(f"clamped node {node} is missing position constraints")
        for edge in topology.clamped_edges:
            if twist_dof(topology, edge) not in dofs:
                raise SolverError(f"clamped edge {edge} is missing its twist constraint")


@dataclass
class SolverState:
    x: np.ndarray
    v: np.ndarray
    step: int = 0


@dataclass
class SolveReport:
    mode: str
    final: np.ndarray
    steps: list[StepStats] = field(default_factory=list)
    initial_energies: tuple[float, float, float] = (0.0, 0.0, 0.0)
    termination: Literal["converged", "max_steps", "diverged"] = "max_steps"
    reason: str | None = None

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    @property
    def diverged(self) -> bool:
        return self.termination == "diverged"

    @property
    def total_ms(self) -> float:
        return sum(s.ms for s in self.steps)

    @property
    def ms_per_step(self) -> float:
        return self.total_ms / len(self.steps) if self.steps else 0.0


def geometric_cause(exc: BaseException) -> GeometryError | None:
    cause = exc.__cause__
    return cause if isinstance(cause, GeometryError) else None


class Solver:
    """One relaxation run over a fixed model, load set and constraint set"""

    def __init__(
        self,
        model: ForwardModel | InverseModel,
        loads: ExternalLoads,
        inertia: InertiaModel,
        constraints: ConstraintSet,
        config: SolverConfig,
        reference: np.ndarray | None = None,
    ) -> None:
        """`reference` is the frozen DC of an inverse solve, None in forward mode"""
        self.model = model
        self.loads = loads
        self.inertia = inertia
        self.constraints = constraints
        self.config = config
        self.reference = reference
        self.logger = get_logger().bind(mode=config.mode)

        size = len(inertia.diagonal)
        self.free = constraints.free_mask(size)
        self.prescribed = constraints.dofs
        self.mass = inertia.diagonal
        self.damping = config.damping_coefficient * self.mass
        self.relaxation_tol = config.relaxation_tol or 1e-8
        self.newton_tol = config.newton_tol or 1e-6

        if reference is not None:
            positions, _ = split_dofs(model.topology, reference)
            self.reference_tangents = tangents_of(model.topology, positions)
        else:
            self.reference_tangents = None

    def set_tolerances(self, initial: np.ndarray) -> None:
        """Resolve default tolerances from the full load at `initial` and the largest EA.

        Newton is held one decade below the relaxation tolerance so the static check can pass.
        """
        config = self.config
        if config.relaxation_tol is not None:
            self.relaxation_tol = config.relaxation_tol
        else:
            full_load = self.loads.force(initial)[self.free] if self.loads.active else None
            if full_load is not None and np.any(full_load):
                self.relaxation_tol = 1e-4 * float(np.linalg.norm(full_load))
            else:
                self.relaxation_tol = 1e-8
        newton_tol = config.newton_tol
        if newton_tol is None:
            newton_tol = 1e-6 * float(np.max(self.model.stiffness.EA))
        self.newton_tol = min(newton_tol, 0.1 * self.relaxation_tol)

    def load_factor(self, step: float) -> float:
        if not self.loads.active:
            return 1.0
        return min(1.0, step / self.config.ramp_steps)

    def ramp_complete(self, step: int) -> bool:
        loads_done = not self.loads.active or step >= self.config.ramp_steps
        return loads_done and step >= self.constraints.duration

    def residual(self, x, state: SolverState, factor: float, dt: float) -> tuple[np.ndarray, csr_matrix]:
        grad, stiffness = self.model.linearize(x)
        residual = (
            self.mass * (x - state.x - dt * state.v) / dt**2
            + self.damping * (x - state.x) / dt
            + grad
            - factor * self.loads.force(x)
        )
        external = self.loads.stiffness(x)
        if external is not None:
            stiffness = stiffness + factor * external
        return residual, stiffness

    def static_residual(self, x, factor: float) -> float:
        r = -self.model.forces(x) - factor * self.loads.force(x)
        return float(np.linalg.norm(r[self.free]))

    def solve_linear(self, matrix: csr_matrix, rhs: np.ndarray, step: int) -> np.ndarray:
        try:
            dx = splu(matrix.tocsc()).solve(rhs)
        except RuntimeError as exc:
            raise LinearSolveSingular("system matrix is singular", step=step) from exc
        if not np.all(np.isfinite(dx)):
            raise NonFiniteState("Newton update is not finite", step=step)
        return dx

    def newton(
        self, state: SolverState, factor: float, targets: np.ndarray, halve: bool, dt: float | None = None
    ) -> tuple[np.ndarray, int]:
        """Solve one implicit-Euler step of length dt from `state`.

        With `halve`, each update is halved until the residual drops. A geometry error met while
        backtracking becomes the cause of the NewtonStalled raised when iterations run out.
        """
        dt = dt or self.config.dt
        free = self.free
        x = state.x.copy()
        x[self.prescribed] = targets
        inertia = diags((self.mass / dt**2 + self.damping / dt)[free])

        norm = math.inf
        blocked: GeometryError | None = None
        for iteration in range(1, self.config.max_newton_iters + 1):
            residual, stiffness = self.residual(x, state, factor, dt)
            r = residual[free]
            norm = float(np.linalg.norm(r))
            if not math.isfinite(norm):
                raise NonFiniteState("residual is not finite", step=state.step + 1)
            if norm < self.newton_tol:
                return x, iteration
            matrix = (inertia + stiffness[free][:, free]).tocsr()
            dx = self.solve_linear(matrix, -r, state.step + 1)

            if not halve:
                x[free] += dx
                continue

            scale = 1.0
            for _ in range(self.config.backtrack_halvings + 1):
                trial = x.copy()
                trial[free] += scale * dx
                try:
                    trial_norm = float(np.linalg.norm(self.residual(trial, state, factor, dt)[0][free]))
                except GeometryError as exc:
                    blocked = exc
                    trial_norm = math.inf
                if trial_norm < norm:
                    break
                scale *= 0.5
            x = trial

        raise NewtonStalled(f"Newton did not converge, residual {norm:.3e}", step=state.step + 1) from blocked

    def substeps(self, state: SolverState, parts: int, halve: bool) -> tuple[np.ndarray, np.ndarray, int]:
        """Cover the next step with `parts` equal substeps, loads and targets interpolated in between"""
        dt = self.config.dt / parts
        current = state
        iterations = 0
        for j in range(1, parts + 1):
            at = state.step + j / parts
            x, n = self.newton(current, self.load_factor(at), self.constraints.values_at(at), halve, dt)
            current = SolverState(x=x, v=(x - current.x) / dt, step=state.step)
            iterations += n
        return current.x, current.v, iterations

    def advance(self, state: SolverState) -> tuple[np.ndarray, np.ndarray, int]:
        """Plain Newton, then backtracking, then ever finer substeps.

        When every attempt fails, the first geometry error met is raised since it names the fault;
        otherwise the last solver error is.
        """
        attempts = [(1, False)] + [(2**cut, True) for cut in range(self.config.max_cutbacks + 1)]
        cause: GeometryError | None = None
        error: SolverError | GeometryError | None = None
        for parts, halve in attempts:
            try:
                return self.substeps(state, parts, halve)
            except (SolverError, GeometryError) as exc:
                error = exc
                if cause is None:
                    cause = exc if isinstance(exc, GeometryError) else geometric_cause(exc)
                self.logger.debug(
                    "Step attempt failed", step=state.step + 1, substeps=parts, backtracking=halve, error=str(exc)
                )
        raise cause or error

    def step(self, state: SolverState) -> tuple[SolverState, StepStats]:
        k = state.step + 1
        factor = self.load_factor(k)

        with StepTimer() as timer:
            x, v, iterations = self.advance(state)

        es, eb, et = self.model.energies(x)
        potential_at = x if self.reference is None else self.reference
        stats = StepStats(
            step=k,
            residual=self.static_residual(x, factor),
            newton_iterations=iterations,
            ms=max(timer.ms, 1e-6),
            Es=es,
            Eb=eb,
            Et=et,
            external=factor * self.loads.potential(potential_at),
        )
        return SolverState(x=x, v=v, step=k), stats

    def reanchor(self, x: np.ndarray) -> bool:
        """Move the forward seed to the current reference frames once a tangent turns past the limit.

        Twist angles keep their values because the new seed is the reference frame at x, so the
        material frames and energies at x do not change.
        """
        limit = self.config.reanchor_rotation
        if self.reference is not None or limit is None:
            return False
        seed = self.model.seed
        positions, _ = split_dofs(self.model.topology, x)
        tangents = tangents_of(self.model.topology, positions)
        dots = np.clip(np.einsum("ij,ij->i", tangents, seed.t), -1.0, 1.0)
        if np.all(np.arccos(dots) <= limit):
            return False
        frames = frames_of(self.model.topology, x, seed)
        anchored = FrameSet.from_reference(frames.t, frames.u)
        self.model.seed = anchored
        self.loads.seed = anchored
        return True

    def admissible(self, x: np.ndarray) -> bool:
        limit = self.config.max_tangent_rotation
        if self.reference_tangents is None or limit is None:
            return True
        positions, _ = split_dofs(self.model.topology, x)
        tangents = tangents_of(self.model.topology, positions)
        dots = np.clip(np.einsum("ij,ij->i", tangents, self.reference_tangents), -1.0, 1.0)
        return bool(np.all(np.arccos(dots) <= limit))

    def relax(self, initial, callback: Callable[[int, np.ndarray], None] | None = None) -> SolveReport:
        x0 = np.asarray(initial, dtype=float).copy()
        x0[self.prescribed] = self.constraints.values_at(0)
        self.set_tolerances(x0 if self.reference is None else self.reference)
        state = SolverState(x=x0, v=np.zeros_like(x0))
        report = SolveReport(mode=self.config.mode, final=x0, initial_energies=self.model.energies(x0))
        if callback is not None:
            callback(0, x0)

        growth_steps = 0
        growth_start = math.inf
        previous = math.inf

        for _ in range(self.config.max_steps):
            try:
                state, stats = self.step(state)
            except (SolverError, GeometryError) as exc:
                report.termination, report.reason = "diverged", type(exc).__name__
                self.logger.warning("Relaxation diverged", step=state.step + 1, error=str(exc))
                break

            report.steps.append(stats)
            report.final = state.x
            if callback is not None:
                callback(stats.step, state.x)
            self.logger.debug(
                "Step completed",
                step=stats.step,
                residual=stats.residual,
                newton_iterations=stats.newton_iterations,
                ms=round(stats.ms, 3),
            )

            if not np.all(np.isfinite(state.x)) or not math.isfinite(stats.residual):
                report.termination, report.reason = "diverged", "NonFiniteState"
                break

            if self.reanchor(state.x):
                self.logger.debug("Frames re-anchored", step=stats.step)

            if self.config.mode == "inverse" and not self.admissible(state.x):
                report.termination, report.reason = "diverged", "inadmissible"
                self.logger.warning("Rest shape turned beyond the admissible rotation", step=stats.step)
                break

            if stats.residual > previous:
                if growth_steps == 0:
                    growth_start = previous
                growth_steps += 1
                if (
                    growth_steps >= self.config.divergence_window
                    and stats.residual >= self.config.divergence_factor * growth_start
                ):
                    report.termination, report.reason = "diverged", "residual growth"
                    break
            else:
                growth_steps = 0
            previous = stats.residual

            if (
                stats.step >= self.config.min_steps
                and self.ramp_complete(stats.step)
                and stats.residual < self.relaxation_tol
            ):
                report.termination = "converged"
                break

        self.logger.info(
            "Relaxation finished",
            termination=report.termination,
            reason=report.reason,
            steps=len(report.steps),
            ms_per_step=round(report.ms_per_step, 3),
        )
        return report


@dataclass(frozen=True)
class LoadCase:
    gravity: np.ndarray | None = None
    magnetic: MagneticLoad | None = None

    def scaled(self, factor: float) -> "LoadCase":
        return LoadCase(
            gravity=None if self.gravity is None else np.asarray(self.gravity) * factor,
            magnetic=None if self.magnetic is None else self.magnetic.scaled(factor),
        )


@dataclass
class SolveResult:
    configuration: np.ndarray
    report: SolveReport
    seed: FrameSet


def step(state: SolverState, solver: Solver) -> tuple[SolverState, StepStats]:
    """Advance one implicit-Euler step outside of a relaxation run"""
    solver.set_tolerances(state.x if solver.reference is None else solver.reference)
    return solver.step(state)


def relax_to_statics(
    initial, solver: Solver, callback: Callable[[int, np.ndarray], None] | None = None
) -> SolveReport:
    return solver.relax(initial, callback=callback)


def _external(topology, seed, inertia, material, loads: LoadCase | None, length_basis) -> ExternalLoads:
    loads = loads or LoadCase()
    return ExternalLoads(
        topology,
        seed,
        inertia,
        gravity=None if loads.gravity is None else GravityLoad.of(loads.gravity),
        magnetic=loads.magnetic,
        volumes=magnetic_volumes(topology, material, length_basis),
    )


def inverse_solve(
    dc,
    topology: NetTopology,
    material: MaterialParams,
    loads: LoadCase | None = None,
    constraints: ConstraintSet | None = None,
    config: SolverConfig | None = None,
    seed: FrameSet | None = None,
    threads: int = 1,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> SolveResult:
    """Rest shape whose frozen-DC elastic force balances the loads evaluated at the DC"""
    dc = np.asarray(dc, dtype=float)
    config = (config or SolverConfig()).model_copy(update={"mode": "inverse"})
    seed = seed or seed_from_positions(topology, split_dofs(topology, dc)[0])
    constraints = constraints or ConstraintSet.clamps(topology, dc)
    constraints.validate(topology)

    model = InverseModel(topology, material, dc, seed, threads=threads)
    inertia = assemble_inertia(topology, material, dc, damping=config.damping_coefficient)
    external = _external(topology, seed, inertia, material, loads, dc).freeze(dc)

    solver = Solver(model, external, inertia, constraints, config, reference=dc)
    report = solver.relax(dc, callback=callback)
    return SolveResult(configuration=report.final, report=report, seed=seed)


def forward_solve(
    uc,
    topology: NetTopology,
    material: MaterialParams,
    loads: LoadCase | None = None,
    constraints: ConstraintSet | None = None,
    config: SolverConfig | None = None,
    seed: FrameSet | None = None,
    threads: int = 1,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> SolveResult:
    """Static equilibrium of the rod whose rest shape is `uc`.

    The returned seed is the one the final twist angles refer to. It differs from `seed` once
    the frames were re-anchored.
    """
    uc = np.asarray(uc, dtype=float)
    config = (config or SolverConfig()).model_copy(update={"mode": "forward"})
    seed = seed or seed_from_positions(topology, split_dofs(topology, uc)[0])
    constraints = constraints or ConstraintSet.clamps(topology, uc)
    constraints.validate(topology)

    natural = NaturalStrains.from_configuration(topology, uc, seed)
    model = ForwardModel(topology, material, natural, seed, threads=threads)
    inertia = assemble_inertia(topology, material, uc, damping=config.damping_coefficient)
    external = _external(topology, seed, inertia, material, loads, uc)

    solver = Solver(model, external, inertia, constraints, config)
    report = solver.relax(uc, callback=callback)
    return SolveResult(configuration=report.final, report=report, seed=solver.model.seed)


@dataclass(frozen=True)
class EnergyProfile:
    steps: np.ndarray
    Es: np.ndarray
    Eb: np.ndarray
    Et: np.ndarray
    total: np.ndarray

    @property
    def progress(self) -> np.ndarray:
        return self.steps / self.steps[-1] if self.steps[-1] else self.steps.astype(float)


def energy_profile(report: SolveReport) -> EnergyProfile:
    """Per-step energies, starting from the initial state, divided by the final total"""
    if not report.steps:
        raise ZeroFinalEnergy("report has no steps")
    rows = [report.initial_energies] + [(s.Es, s.Eb, s.Et) for s in report.steps]
    energies = np.asarray(rows, dtype=float)
    final = float(energies[-1].sum())
    if final < 1e-14:
        raise ZeroFinalEnergy(f"final elastic energy {final:.3e} is too small to normalize by")
    normalized = energies / final
    return EnergyProfile(
        steps=np.arange(len(rows)),
        Es=normalized[:, 0],
        Eb=normalized[:, 1],
        Et=normalized[:, 2],
        total=normalized.sum(axis=1),
    )


@dataclass(frozen=True)
class ProfileComparison:
    final_forward: float
    final_inverse: float
    max_gap: float

    @property
    def endpoint_mismatch(self) -> float:
        return abs(self.final_forward - self.final_inverse) / max(abs(self.final_inverse), 1e-300)


def compare_profiles(forward: SolveReport, inverse: SolveReport, samples: int = 201) -> ProfileComparison:
    """Endpoint agreement and largest pointwise gap of two normalized energy profiles"""
    a, b = energy_profile(forward), energy_profile(inverse)
    grid = np.linspace(0.0, 1.0, samples)
    gap = np.abs(np.interp(grid, a.progress, a.total) - np.interp(grid, b.progress, b.total))
    return ProfileComparison(
        final_forward=forward.steps[-1].elastic,
        final_inverse=inverse.steps[-1].elastic,
        max_gap=float(gap.max()),
    )
