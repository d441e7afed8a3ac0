class InvrodError(Exception):
    pass


class ConfigError(InvrodError):
    pass


class GeometryError(InvrodError):
    """Geometric fault, tagged with the index of the offending edge or bend when known"""

    element_kind = "edge"

    def __init__(self, message: str, element: int | None = None) -> None:
        self.element = element
        if element is not None:
            message = f"{message} ({self.element_kind} {element})"
        super().__init__(message)


class AntiparallelTangents(GeometryError):
    pass


class TurningSingularity(GeometryError):
    element_kind = "bend"


class ZeroRestLength(GeometryError):
    pass


class DegenerateEdge(GeometryError):
    pass


class TopologyError(InvrodError):
    pass


class TooFewNodes(TopologyError):
    pass


class InvalidEdge(TopologyError):
    def __init__(self, message: str, edge: tuple) -> None:
        self.edge = edge
        super().__init__(f"{message}: {edge}")


class DuplicateEdge(InvalidEdge):
    pass


class InvalidClamp(TopologyError):
    def __init__(self, message: str, index: int) -> None:
        self.index = index
        super().__init__(f"{message}: {index}")


class ParseError(TopologyError):
    def __init__(self, message: str, line: int) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}")


class InvalidBend(TopologyError):
    def __init__(self, message: str, bend: tuple) -> None:
        self.reason = message
        self.bend = bend
        super().__init__(f"{message}: {bend}")


class NotIncident(TopologyError):
    pass


class SolverError(InvrodError):
    def __init__(self, message: str, step: int | None = None) -> None:
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class NewtonStalled(SolverError):
    pass


class LinearSolveSingular(SolverError):
    pass


class NonFiniteState(SolverError):
    pass


class Diverged(SolverError):
    pass


class ZeroFinalEnergy(SolverError):
    pass


class ScenarioError(InvrodError):
    pass


class UnknownKind(ScenarioError):
    pass


class OutOfRange(ScenarioError):
    pass


class UnknownScenario(ScenarioError):
    pass
