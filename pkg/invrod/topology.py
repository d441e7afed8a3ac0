"""Connectivity of single rods and rod networks"""

from collections.abc import Iterable
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import DuplicateEdge, InvalidBend, InvalidClamp, InvalidEdge, NotIncident, ParseError, TooFewNodes


@dataclass(frozen=True)
class Bend:
    """Two edges meeting at a center node, listed in traversal order.

    The first edge enters the center, the second leaves it. A sign of +1 means the stored edge
    direction agrees with that traversal.
    """

    edge_in: int
    edge_out: int
    center: int
    sign_in: int
    sign_out: int


@dataclass(frozen=True)
class NetTopology:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    bends: tuple[Bend, ...] = ()
    clamped_nodes: frozenset[int] = frozenset()
    clamped_edges: frozenset[int] = frozenset()

    def __post_init__(self) -> None:
        seen = set()
        for k, (a, b) in enumerate(self.edges):
            if not (0 <= a < self.node_count and 0 <= b < self.node_count) or a == b:
                raise InvalidEdge("edge endpoints out of range", (k, a, b))
            key = (min(a, b), max(a, b))
            if key in seen:
                raise DuplicateEdge("duplicate edge", (k, a, b))
            seen.add(key)
        for bend in self.bends:
            validate_bend(self.edges, bend)
        for node in self.clamped_nodes:
            if not 0 <= node < self.node_count:
                raise InvalidClamp("clamped node out of range", node)
        for edge in self.clamped_edges:
            if not 0 <= edge < self.edge_count:
                raise InvalidClamp("clamped edge out of range", edge)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def bend_count(self) -> int:
        return len(self.bends)

    @property
    def dof_count(self) -> int:
        return 3 * self.node_count + self.edge_count

    @property
    def edge_array(self) -> np.ndarray:
        return np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)

    def with_clamps(self, nodes: Iterable[int] = (), edges: Iterable[int] = ()) -> "NetTopology":
        return NetTopology(
            node_count=self.node_count,
            edges=self.edges,
            bends=self.bends,
            clamped_nodes=frozenset(nodes),
            clamped_edges=frozenset(edges),
        )

    def reversed_edge(self, k: int) -> "NetTopology":
        """Return the same net with edge k stored in the opposite direction"""
        a, b = self.edges[k]
        edges = tuple((b, a) if i == k else e for i, e in enumerate(self.edges))
        bends = tuple(
            Bend(
                edge_in=bend.edge_in,
                edge_out=bend.edge_out,
                center=bend.center,
                sign_in=-bend.sign_in if bend.edge_in == k else bend.sign_in,
                sign_out=-bend.sign_out if bend.edge_out == k else bend.sign_out,
            )
            for bend in self.bends
        )
        return NetTopology(self.node_count, edges, bends, self.clamped_nodes, self.clamped_edges)

    @cached_property
    def maps(self) -> "ElementMaps":
        return ElementMaps.from_topology(self)


def orientation_sign(edge: tuple[int, int], center: int, incoming: bool = False) -> int:
    """Sign of a stored edge relative to the traversal through a center node.

    Outgoing slot: +1 when the edge points away from the center. Incoming slot: +1 when the edge
    points toward the center.
    """
    a, b = edge
    if center not in (a, b):
        raise NotIncident(f"edge {edge} does not touch node {center}")
    away = a == center
    if incoming:
        return -1 if away else 1
    return 1 if away else -1


def other_end(edge: tuple[int, int], node: int) -> int:
    a, b = edge
    if node == a:
        return b
    if node == b:
        return a
    raise NotIncident(f"edge {edge} does not touch node {node}")


def validate_bend(edges: tuple[tuple[int, int], ...], bend: Bend) -> None:
    triple = (bend.edge_in, bend.edge_out, bend.center, bend.sign_in, bend.sign_out)
    if not (0 <= bend.edge_in < len(edges) and 0 <= bend.edge_out < len(edges)):
        raise InvalidBend("bend references unknown edge", triple)
    if bend.edge_in == bend.edge_out:
        raise InvalidBend("bend uses the same edge twice", triple)
    e_in, e_out = edges[bend.edge_in], edges[bend.edge_out]
    shared = set(e_in) & set(e_out)
    if shared != {bend.center}:
        raise InvalidBend("bend edges do not share exactly the center node", triple)
    if bend.sign_in != orientation_sign(e_in, bend.center, incoming=True):
        raise InvalidBend("incoming sign does not match edge direction", triple)
    if bend.sign_out != orientation_sign(e_out, bend.center):
        raise InvalidBend("outgoing sign does not match edge direction", triple)


def make_bend(edges: tuple[tuple[int, int], ...], edge_in: int, edge_out: int) -> Bend:
    shared = set(edges[edge_in]) & set(edges[edge_out])
    if len(shared) != 1:
        raise InvalidBend("edges are not adjacent", (edge_in, edge_out))
    (center,) = shared
    return Bend(
        edge_in=edge_in,
        edge_out=edge_out,
        center=center,
        sign_in=orientation_sign(edges[edge_in], center, incoming=True),
        sign_out=orientation_sign(edges[edge_out], center),
    )


def build_chain(node_positions) -> NetTopology:
    positions = np.asarray(node_positions, dtype=float).reshape(-1, 3)
    nv = len(positions)
    if nv < 2:
        raise TooFewNodes(f"a rod needs at least 2 nodes, got {nv}")
    edges = tuple((i, i + 1) for i in range(nv - 1))
    bends = tuple(Bend(edge_in=i, edge_out=i + 1, center=i + 1, sign_in=1, sign_out=1) for i in range(nv - 2))
    return NetTopology(node_count=nv, edges=edges, bends=bends)


@dataclass
class NetFile:
    topology: NetTopology
    positions: np.ndarray = field(repr=False)


def parse_net(text: str) -> NetFile:
    vertices: list[tuple[float, float, float]] = []
    edges: list[tuple[int, int]] = []
    raw_bends: list[tuple[int, tuple[int, ...]]] = []
    clamped_nodes: set[int] = set()
    clamped_edges: set[int] = set()
    edge_lines: list[int] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tag, *fields = line.split()
        try:
            match tag:
                case "v" if len(fields) == 3:
                    vertices.append(tuple(float(f) for f in fields))
                case "e" if len(fields) == 2:
                    edges.append((int(fields[0]), int(fields[1])))
                    edge_lines.append(lineno)
                case "b" if len(fields) == 5:
                    raw_bends.append((lineno, tuple(int(f) for f in fields)))
                case "clamp_node" if len(fields) == 1:
                    clamped_nodes.add(int(fields[0]))
                case "clamp_edge" if len(fields) == 1:
                    clamped_edges.add(int(fields[0]))
                case _:
                    raise ParseError(f"unexpected record {line!r}", line=lineno)
        except ValueError as exc:
            raise ParseError(f"malformed number in {line!r}", line=lineno) from exc

    for lineno, (a, b) in zip(edge_lines, edges, strict=True):
        if not (0 <= a < len(vertices) and 0 <= b < len(vertices)) or a == b:
            raise ParseError(f"edge {a} {b} references an unknown node", line=lineno)

    edge_tuple = tuple(edges)
    bends = []
    for lineno, (i, j, c, si, sj) in raw_bends:
        bend = Bend(edge_in=i, edge_out=j, center=c, sign_in=si, sign_out=sj)
        try:
            validate_bend(edge_tuple, bend)
        except InvalidBend as exc:
            raise InvalidBend(f"line {lineno}: {exc.reason}", exc.bend) from exc
        bends.append(bend)

    if len(vertices) < 2:
        raise TooFewNodes(f"a net needs at least 2 nodes, got {len(vertices)}")

    topology = NetTopology(
        node_count=len(vertices),
        edges=edge_tuple,
        bends=tuple(bends),
        clamped_nodes=frozenset(clamped_nodes),
        clamped_edges=frozenset(clamped_edges),
    )
    return NetFile(topology=topology, positions=np.asarray(vertices, dtype=float).reshape(-1, 3))


def load_net(path: str | Path) -> NetFile:
    return parse_net(Path(path).read_text())


def dump_net(topology: NetTopology, positions: np.ndarray) -> str:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(positions, dtype=float).reshape(-1, 3).tolist()]
    lines += [f"e {a} {b}" for a, b in topology.edges]
    lines += [f"b {b.edge_in} {b.edge_out} {b.center} {b.sign_in} {b.sign_out}" for b in topology.bends]
    lines += [f"clamp_node {n}" for n in sorted(topology.clamped_nodes)]
    lines += [f"clamp_edge {k}" for k in sorted(topology.clamped_edges)]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ElementMaps:
    """DOF stencils of every element.

    Edge stencils hold the 6 position indices of the stored endpoints followed by the twist index.
    Bend stencils hold the 9 position indices of the (previous, center, next) nodes in traversal
    order followed by the twist indices of the incoming and outgoing edges.
    """

    edge_stencils: np.ndarray
    bend_stencils: np.ndarray
    bend_nodes: np.ndarray
    bend_edges: np.ndarray
    bend_signs: np.ndarray

    @classmethod
    def from_topology(cls, topology: NetTopology) -> "ElementMaps":
        nv = topology.node_count
        edges = topology.edge_array
        edge_stencils = np.column_stack(
            [3 * edges[:, 0], 3 * edges[:, 0] + 1, 3 * edges[:, 0] + 2]
            + [3 * edges[:, 1], 3 * edges[:, 1] + 1, 3 * edges[:, 1] + 2]
            + [3 * nv + np.arange(len(edges))]
        ).astype(np.int64)

        bend_nodes = np.array(
            [
                (
                    other_end(topology.edges[b.edge_in], b.center),
                    b.center,
                    other_end(topology.edges[b.edge_out], b.center),
                )
                for b in topology.bends
            ],
            dtype=np.int64,
        ).reshape(-1, 3)
        bend_edges = np.array([(b.edge_in, b.edge_out) for b in topology.bends], dtype=np.int64).reshape(-1, 2)
        bend_signs = np.array([(b.sign_in, b.sign_out) for b in topology.bends], dtype=float).reshape(-1, 2)
        position_index = (3 * bend_nodes[:, :, None] + np.arange(3)[None, None, :]).reshape(-1, 9)
        bend_stencils = np.column_stack([position_index, 3 * nv + bend_edges]).astype(np.int64).reshape(-1, 11)

        return cls(
            edge_stencils=edge_stencils.reshape(-1, 7),
            bend_stencils=bend_stencils,
            bend_nodes=bend_nodes,
            bend_edges=bend_edges,
            bend_signs=bend_signs,
        )


def node_dofs(node: int) -> list[int]:
    return [3 * node, 3 * node + 1, 3 * node + 2]


def twist_dof(topology: NetTopology, edge: int) -> int:
    return 3 * topology.node_count + edge


def pack_dofs(positions, thetas=None) -> np.ndarray:
    """DofVector layout: all positions first, then all twist angles"""
    positions = np.asarray(positions, dtype=float).reshape(-1)
    thetas = np.zeros(0) if thetas is None else np.asarray(thetas, dtype=float).reshape(-1)
    return np.concatenate([positions, thetas])


def split_dofs(topology: NetTopology, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    q = np.asarray(q, dtype=float)
    if q.shape != (topology.dof_count,):
        raise ValueError(f"expected {topology.dof_count} DOFs, got {q.shape}")
    nv3 = 3 * topology.node_count
    return q[:nv3].reshape(-1, 3), q[nv3:]
