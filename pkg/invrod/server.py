import argparse
import json
import logging
import sys
from pathlib import Path

from pydantic import ValidationError

from . import __version__
from .exceptions import ConfigError, Diverged, InvrodError, ScenarioError, SolverError, TopologyError
from .export import (
    EnergyCsvExporter,
    ObjSnapshotExporter,
    read_obj_vertices,
    write_bench,
    write_oracle,
    write_roundtrip,
)
from .logging import get_logger, setup_logging
from .models import BenchRow
from .scenarios import (
    REFERENCE_TIMINGS,
    CantileverOracle,
    DesignProblem,
    build_problem,
    cantilever_problem,
    get_scenario,
    problem_from_net,
    rest_rotation,
    round_trip,
)
from .settings import RunConfig, Settings, load_settings
from .solver import SolveResult, forward_solve, inverse_solve
from .topology import build_chain, load_net

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_SOLVE = 2
EXIT_DIVERGED = 3

DEFAULT_STEPS = 40
MAX_TIMING_RATIO = 2.0


class Runner:
    """Executes one RunConfig and writes its artifacts"""

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.settings = config.settings
        self.logger = get_logger().bind(mode=config.mode, scenario=config.scenario)

    @property
    def steps(self) -> int:
        return self.settings.solver.max_steps or DEFAULT_STEPS

    def configure(self, problem: DesignProblem) -> DesignProblem:
        overrides = self.settings.solver.overrides()
        if overrides:
            problem.config = problem.config.model_copy(update=overrides)
        return problem

    def problem(self) -> DesignProblem:
        config = self.config
        if config.scenario == "cantilever":
            problem = cantilever_problem(config.gammas[0], node_count=config.node_count, steps=self.steps)
        elif config.net is not None or config.dc is not None:
            spec = get_scenario(config.scenario or "spherical")
            if config.net is not None:
                net = load_net(config.net)
                topology, positions = net.topology, net.positions
            else:
                positions = read_obj_vertices(Path(config.dc).read_text())
                topology = build_chain(positions).with_clamps(nodes={0, 1}, edges={0})
            problem = problem_from_net(spec, topology, positions, self.steps, config.intensity)
        else:
            problem = build_problem(
                config.scenario,
                sample_count=config.sample_count,
                intensity=config.intensity,
                steps=self.steps,
            )
        return self.configure(problem)

    def export(self, result: SolveResult, snapshots: ObjSnapshotExporter, directory: Path) -> None:
        snapshots.export(result.report)
        EnergyCsvExporter(directory).export(result.report)

    def forward(self) -> int:
        problem = self.problem()
        snapshots = ObjSnapshotExporter(self.config.output, problem.topology, every=self.config.export_every)
        result = forward_solve(
            problem.dc,
            problem.topology,
            problem.material,
            loads=problem.loads,
            constraints=problem.constraints,
            config=problem.config,
            seed=problem.seed,
            threads=self.settings.threads,
            callback=snapshots,
        )
        self.export(result, snapshots, self.config.output)
        return EXIT_OK if result.report.converged else EXIT_SOLVE

    def inverse(self) -> int:
        problem = self.problem()
        snapshots = ObjSnapshotExporter(self.config.output, problem.topology, every=self.config.export_every)
        result = inverse_solve(
            problem.dc,
            problem.topology,
            problem.material,
            loads=problem.loads,
            constraints=problem.constraints,
            config=problem.config,
            seed=problem.seed,
            threads=self.settings.threads,
            callback=snapshots,
        )
        self.export(result, snapshots, self.config.output)
        if result.report.diverged:
            raise Diverged(f"no rest shape found ({result.report.reason})")
        return EXIT_OK if result.report.converged else EXIT_SOLVE

    def roundtrip(self) -> int:
        problem = self.problem()
        every = self.config.export_every
        inverse_dir = self.config.output / "inverse"
        forward_dir = self.config.output / "forward"
        inverse_snapshots = ObjSnapshotExporter(inverse_dir, problem.topology, every=every)
        forward_snapshots = ObjSnapshotExporter(forward_dir, problem.topology, every=every)
        result = round_trip(
            problem,
            threads=self.settings.threads,
            inverse_callback=inverse_snapshots,
            forward_callback=forward_snapshots,
        )
        self.export(result.inverse, inverse_snapshots, inverse_dir)
        if result.forward is None:
            raise Diverged(f"no rest shape found ({result.inverse.report.reason})")
        self.export(result.forward, forward_snapshots, forward_dir)
        write_roundtrip(self.config.output, result.node_errors)
        self.logger.info(
            "Round trip error",
            rms=result.rms,
            tolerance=1e-3 * problem.length_scale,
        )
        return EXIT_OK if result.inverse.report.converged and result.forward.report.converged else EXIT_SOLVE

    def oracle(self) -> int:
        status = EXIT_OK
        for gamma in self.config.gammas:
            problem = self.configure(cantilever_problem(gamma, node_count=self.config.node_count, steps=self.steps))
            result = inverse_solve(
                problem.dc,
                problem.topology,
                problem.material,
                loads=problem.loads,
                constraints=problem.constraints,
                config=problem.config,
                seed=problem.seed,
                threads=self.settings.threads,
            )
            if result.report.diverged:
                self.logger.warning("Cantilever has no rest shape", gamma=gamma, reason=result.report.reason)
                status = EXIT_DIVERGED
                continue
            s, theta = rest_rotation(problem, result.configuration)
            expected = CantileverOracle(gamma=gamma, length=problem.length_scale).theta(s)
            write_oracle(self.config.output, gamma, s, theta, expected)
        return status

    def bench(self) -> int:
        rows = bench_report(self.config.cases, steps=self.steps, threads=self.settings.threads)
        write_bench(self.config.output, rows)
        return EXIT_OK

    def run(self) -> int:
        self.logger.info("Run started", version=__version__, output=str(self.config.output))
        return getattr(self, self.config.mode)()


def bench_report(cases, steps: int = DEFAULT_STEPS, threads: int = 1, check_ratio: bool = True) -> list[BenchRow]:
    """Forward and inverse per-step wall time of each case over the same number of steps.

    Cases run at their verified load intensity. A solve that diverges or takes no step raises
    SolverError, since its timing would not cover the requested steps.
    """
    logger = get_logger()
    rows = []
    for case in cases:
        spec = get_scenario(case)
        problem = build_problem(spec, intensity=spec.verified_intensity or 1.0, steps=steps)
        config = problem.config.model_copy(update={"min_steps": steps, "max_steps": steps})
        common = dict(
            topology=problem.topology,
            material=problem.material,
            loads=problem.loads,
            constraints=problem.constraints,
            config=config,
            seed=problem.seed,
            threads=threads,
        )
        forward = forward_solve(problem.dc, **common).report
        inverse = inverse_solve(problem.dc, **common).report
        for report in (forward, inverse):
            if report.diverged or not report.steps:
                raise SolverError(
                    f"{problem.name}: {report.mode} bench solve stopped after {len(report.steps)} steps "
                    f"({report.reason})"
                )
        reference = REFERENCE_TIMINGS.get(problem.name, (None, None))
        row = BenchRow(
            case=problem.name,
            vertices=problem.topology.node_count,
            edges=problem.topology.edge_count,
            bends=problem.topology.bend_count,
            steps=len(forward.steps),
            forward_total_s=forward.total_ms / 1e3,
            forward_ms_per_step=forward.ms_per_step,
            inverse_total_s=inverse.total_ms / 1e3,
            inverse_ms_per_step=inverse.ms_per_step,
            reference_forward_ms=reference[0],
            reference_inverse_ms=reference[1],
        )
        logger.info("Benchmark case finished", case=row.case, ratio=round(row.ratio, 3))
        if check_ratio and row.ratio > MAX_TIMING_RATIO:
            raise SolverError(f"{row.case}: inverse step is {row.ratio:.2f}x slower than forward")
        rows.append(row)
    return rows


def exit_code(exc: Exception) -> int:
    match exc:
        case Diverged():
            return EXIT_DIVERGED
        case ConfigError() | TopologyError() | ScenarioError() | ValidationError() | OSError():
            return EXIT_CONFIG
        case _:
            return EXIT_SOLVE


def run(config: RunConfig) -> int:
    """Execute a run and map failures to exit codes, printing one JSON error line to stderr"""
    logger = get_logger()
    try:
        return Runner(config).run()
    except (InvrodError, ValidationError, OSError) as exc:
        code = exit_code(exc)
        logger.error("Run failed", error=type(exc).__name__, exc_info=code != EXIT_DIVERGED)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
        return code


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="invrod", description="Rest shapes of elastic rods and rod networks")
    parser.add_argument("--debug", action="store_true", help="Enable debugging")
    parser.add_argument("--log-json", action="store_true", help="Enable JSON logging")

    subparsers = parser.add_subparsers(dest="mode", required=True)
    for mode, text in (
        ("forward", "Relax a rest shape under its loads"),
        ("inverse", "Find the rest shape of a target configuration"),
        ("roundtrip", "Inverse solve followed by forward verification"),
        ("bench", "Time forward and inverse steps"),
        ("oracle", "Compare cantilever rest shapes with the closed form"),
    ):
        sub = subparsers.add_parser(mode, help=text)
        sub.add_argument("--scenario", help="Catalog scenario key, or 'cantilever'")
        sub.add_argument("--config", type=Path, help="JSON configuration file")
        sub.add_argument("--out", type=Path, help="Output directory")
        sub.add_argument("--steps", type=int, help="Maximum number of relaxation steps")
        sub.add_argument("--dt", type=float, help="Time step (s)")
        sub.add_argument("--export-every", type=int, help="Write an OBJ snapshot every k steps")
        sub.add_argument("--net", type=Path, help="Custom net file")
        sub.add_argument("--dc", type=Path, help="Custom polyline (OBJ) file")
        sub.add_argument("--samples", type=int, help="Curve sample count")
        sub.add_argument("--intensity", type=float, default=1.0, help="Scale of gravity and magnetic field")
        sub.add_argument("--gamma", type=float, nargs="+", help="Cantilever gamma values")
        sub.add_argument("--nodes", type=int, default=100, help="Cantilever node count")
        sub.add_argument("--cases", nargs="*", help="Benchmark scenarios")

    return parser.parse_args(argv)


def run_config(args: argparse.Namespace) -> RunConfig:
    solver = {k: v for k, v in (("max_steps", args.steps), ("dt", args.dt)) if v is not None}
    output = {k: v for k, v in (("directory", args.out), ("export_every", args.export_every)) if v is not None}
    overrides = {}
    if solver:
        overrides["solver"] = solver
    if output:
        overrides["output"] = output
    settings: Settings = load_settings(args.config, **overrides)

    fields = {
        "mode": args.mode,
        "scenario": args.scenario,
        "net": args.net,
        "dc": args.dc,
        "sample_count": args.samples,
        "intensity": args.intensity,
        "node_count": args.nodes,
        "settings": settings,
    }
    if args.gamma:
        fields["gammas"] = args.gamma
    if args.cases is not None:
        fields["cases"] = args.cases
    return RunConfig(**fields)


def main(argv: list[str] | None = None) -> None:
    """Main function"""

    args = parse_args(argv)

    setup_logging(level=logging.DEBUG if args.debug else logging.INFO, log_json=args.log_json)

    try:
        config = run_config(args)
    except (ConfigError, ValidationError) as exc:
        get_logger().error("Invalid configuration", error=str(exc))
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": EXIT_CONFIG}), file=sys.stderr)
        sys.exit(EXIT_CONFIG)

    sys.exit(run(config))


if __name__ == "__main__":
    main()
