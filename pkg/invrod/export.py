import csv
from abc import abstractmethod
from collections.abc import Iterable
from pathlib import Path

import numpy as np

from .logging import BoundLogger, get_logger
from .models import BenchRow
from .solver import SolveReport
from .topology import NetTopology, split_dofs

ENERGY_FIELDS = ("step", "Es", "Eb", "Et", "total", "residual", "ms")


class TrajectoryExporter:
    def __init__(self, directory: str | Path) -> None:
        self.logger = get_logger()
        self.directory = Path(directory)

    def path(self, name: str) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        return self.directory / name

    @abstractmethod
    def export(self, report: SolveReport, logger: BoundLogger | None = None) -> Path:
        pass


def obj_text(topology: NetTopology, q: np.ndarray) -> str:
    """Node positions as `v` records and every edge as a two-point `l` record (1-based)"""
    positions, _ = split_dofs(topology, q)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in positions.tolist()]
    lines += [f"l {a + 1} {b + 1}" for a, b in topology.edges]
    return "\n".join(lines) + "\n"


def read_obj_vertices(text: str) -> np.ndarray:
    rows = [line.split()[1:4] for line in text.splitlines() if line.startswith("v ")]
    return np.asarray(rows, dtype=float).reshape(-1, 3)


class ObjSnapshotExporter(TrajectoryExporter):
    """Writes `frame_%06d.obj` snapshots every `every` steps and for the final state"""

    def __init__(self, directory: str | Path, topology: NetTopology, every: int = 1) -> None:
        super().__init__(directory)
        self.topology = topology
        self.every = every
        self.written: list[Path] = []

    def write(self, step: int, q: np.ndarray) -> Path:
        path = self.path(f"frame_{step:06d}.obj")
        path.write_text(obj_text(self.topology, q))
        self.written.append(path)
        return path

    def __call__(self, step: int, q: np.ndarray) -> None:
        if step % self.every == 0:
            self.write(step, q)

    def export(self, report: SolveReport, logger: BoundLogger | None = None) -> Path:
        logger = logger or self.logger
        step = report.steps[-1].step if report.steps else 0
        path = self.directory / f"frame_{step:06d}.obj"
        if path not in self.written:
            self.write(step, report.final)
        logger.info("Snapshots written", directory=str(self.directory), count=len(self.written))
        return path


class EnergyCsvExporter(TrajectoryExporter):
    def __init__(self, directory: str | Path, filename: str = "energies.csv") -> None:
        super().__init__(directory)
        self.filename = filename

    def export(self, report: SolveReport, logger: BoundLogger | None = None) -> Path:
        logger = logger or self.logger
        path = self.path(self.filename)
        with path.open("w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(ENERGY_FIELDS)
            for s in report.steps:
                writer.writerow([s.step] + [repr(v) for v in (s.Es, s.Eb, s.Et, s.elastic, s.residual, s.ms)])
        logger.info("Energies written", path=str(path), steps=len(report.steps))
        return path


def write_roundtrip(directory: str | Path, node_errors: np.ndarray, logger: BoundLogger | None = None) -> Path:
    """Per-node distance between the verified DC and the target, with the RMS as the last row"""
    logger = logger or get_logger()
    path = Path(directory) / "roundtrip.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    rms = float(np.sqrt(np.mean(node_errors**2))) if len(node_errors) else float("nan")
    with path.open("w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(("node", "error"))
        writer.writerows((i, repr(float(e))) for i, e in enumerate(node_errors))
        writer.writerow(("rms", repr(rms)))
    logger.info("Round trip written", path=str(path), rms=rms)
    return path


def write_bench(directory: str | Path, rows: Iterable[BenchRow], logger: BoundLogger | None = None) -> Path:
    logger = logger or get_logger()
    rows = list(rows)
    path = Path(directory) / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(BenchRow.model_fields)
    with path.open("w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=fields)
        writer.writeheader()
        writer.writerows(row.model_dump() for row in rows)
    logger.info("Benchmark written", path=str(path), cases=len(rows))
    return path


def write_oracle(
    directory: str | Path,
    gamma: float,
    s: np.ndarray,
    simulated: np.ndarray,
    closed_form: np.ndarray,
    logger: BoundLogger | None = None,
) -> Path:
    logger = logger or get_logger()
    path = Path(directory) / f"oracle_gamma_{gamma:g}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(("s", "theta_simulated", "theta_closed_form", "error"))
        for row in zip(s, simulated, closed_form, strict=True):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(row[1] - row[2]))])
    logger.info("Oracle comparison written", path=str(path), gamma=gamma)
    return path
