"""External force fields and lumped inertia"""

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy.sparse import csr_matrix

from .elastic import assemble_matrix, assemble_vector
from .exceptions import DegenerateEdge
from .geometry import FrameSet, edge_frame, frames_of, tangents_of
from .models import MaterialParams
from .topology import NetTopology, split_dofs


@dataclass(frozen=True)
class InertiaModel:
    node_masses: np.ndarray
    twist_inertias: np.ndarray
    damping: float = 0.0

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.node_masses))

    @property
    def diagonal(self) -> np.ndarray:
        """Lumped mass matrix diagonal in DofVector layout"""
        return np.concatenate([np.repeat(self.node_masses, 3), self.twist_inertias])


def edge_lengths(topology: NetTopology, configuration) -> np.ndarray:
    positions, _ = split_dofs(topology, np.asarray(configuration, dtype=float))
    edges = topology.edge_array
    return np.linalg.norm(positions[edges[:, 1]] - positions[edges[:, 0]], axis=1)


def assemble_inertia(
    topology: NetTopology, material: MaterialParams, length_basis, damping: float = 0.0
) -> InertiaModel:
    """Lump masses from the edge lengths of `length_basis` (the DC or the UC DofVector)"""
    lengths = edge_lengths(topology, length_basis)
    if np.any(lengths <= 0):
        raise DegenerateEdge("edge has zero length", element=int(np.argmin(lengths)))
    edges = topology.edge_array
    half = 0.5 * material.density * material.area * lengths
    node_masses = np.bincount(edges.ravel(), weights=np.repeat(half, 2), minlength=topology.node_count)
    twist_inertias = material.density * material.polar_moment * lengths
    return InertiaModel(node_masses=node_masses, twist_inertias=twist_inertias, damping=damping)


@dataclass(frozen=True)
class GravityLoad:
    g: np.ndarray

    @classmethod
    def of(cls, g) -> "GravityLoad":
        return cls(g=np.asarray(g, dtype=float).reshape(3))


def gravity_force(topology: NetTopology, inertia: InertiaModel, g) -> np.ndarray:
    g = np.asarray(g, dtype=float).reshape(3)
    force = np.zeros(topology.dof_count)
    force[: 3 * topology.node_count] = (inertia.node_masses[:, None] * g[None, :]).ravel()
    return force


@dataclass(frozen=True)
class MagneticLoad:
    """Per-edge magnetization in material-frame components (A/m) and a uniform field (T)"""

    magnetization: np.ndarray
    ambient_field: np.ndarray

    @classmethod
    def imprint(cls, magnetization, ambient_field, topology: NetTopology, configuration, seed: FrameSet):
        """Attach a global magnetization to the material frames of `configuration`"""
        frames = frames_of(topology, configuration, seed)
        m_global = np.broadcast_to(np.asarray(magnetization, dtype=float), (topology.edge_count, 3))
        components = np.column_stack(
            [
                np.einsum("ij,ij->i", frames.m1, m_global),
                np.einsum("ij,ij->i", frames.m2, m_global),
                np.einsum("ij,ij->i", frames.t, m_global),
            ]
        )
        return cls(magnetization=components, ambient_field=np.asarray(ambient_field, dtype=float).reshape(3))

    def scaled(self, factor: float) -> "MagneticLoad":
        return MagneticLoad(magnetization=self.magnetization, ambient_field=self.ambient_field * factor)


def zeeman_energy_kernel(xl, t0, u0, m_frame, field, volume):
    x = xl[:6].reshape(2, 3)
    t, _, _, m1, m2 = edge_frame(x[1] - x[0], xl[6], t0, u0)
    m = m_frame[0] * m1 + m_frame[1] * m2 + m_frame[2] * t
    return -volume * jnp.dot(m, field)


zeeman_energy_batch = jax.jit(jax.vmap(zeeman_energy_kernel))
zeeman_gradient_batch = jax.jit(jax.vmap(jax.grad(zeeman_energy_kernel)))
zeeman_hessian_batch = jax.jit(jax.vmap(jax.hessian(zeeman_energy_kernel)))


def magnetic_volumes(topology: NetTopology, material: MaterialParams, length_basis) -> np.ndarray:
    return material.area * edge_lengths(topology, length_basis)


def _zeeman_inputs(topology: NetTopology, load: MagneticLoad, state, seed: FrameSet, volumes):
    q = np.asarray(state, dtype=float)
    positions, _ = split_dofs(topology, q)
    tangents_of(topology, positions)
    ne = topology.edge_count
    return (
        q[topology.maps.edge_stencils],
        seed.t,
        seed.u,
        load.magnetization,
        np.broadcast_to(load.ambient_field, (ne, 3)),
        np.asarray(volumes, dtype=float),
    )


def zeeman_energy(topology: NetTopology, load: MagneticLoad, state, seed: FrameSet, volumes) -> float:
    return float(np.sum(zeeman_energy_batch(*_zeeman_inputs(topology, load, state, seed, volumes))))


def magnetic_force(topology: NetTopology, load: MagneticLoad, eval_state, seed: FrameSet, volumes) -> np.ndarray:
    """-dEm/dq at `eval_state`.

    In inverse mode `eval_state` is the frozen DC and the caller holds the result constant.
    """
    if not np.any(load.ambient_field):
        return np.zeros(topology.dof_count)
    local = zeeman_gradient_batch(*_zeeman_inputs(topology, load, eval_state, seed, volumes))
    return -assemble_vector(topology.dof_count, topology.maps.edge_stencils, local)


def magnetic_stiffness(topology: NetTopology, load: MagneticLoad, state, seed: FrameSet, volumes) -> csr_matrix:
    local = zeeman_hessian_batch(*_zeeman_inputs(topology, load, state, seed, volumes))
    return assemble_matrix(topology.dof_count, topology.maps.edge_stencils, local)


class ExternalLoads:
    """Gravity and magnetic loads of one solve.

    Forward mode evaluates the magnetic load at the current state. Inverse mode freezes every load
    at the deformed configuration.
    """

    def __init__(
        self,
        topology: NetTopology,
        seed: FrameSet,
        inertia: InertiaModel,
        gravity: GravityLoad | None = None,
        magnetic: MagneticLoad | None = None,
        volumes: np.ndarray | None = None,
    ) -> None:
        self.topology = topology
        self.seed = seed
        self.inertia = inertia
        self.gravity = gravity
        self.magnetic = magnetic
        self.volumes = volumes
        self.gravity_vector = (
            gravity_force(topology, inertia, gravity.g) if gravity is not None else np.zeros(topology.dof_count)
        )
        self.frozen: np.ndarray | None = None

    @property
    def active(self) -> bool:
        return self.gravity is not None or self.magnetic is not None

    def freeze(self, deformed) -> "ExternalLoads":
        self.frozen = self.force(deformed)
        return self

    def force(self, q) -> np.ndarray:
        if self.frozen is not None:
            return self.frozen
        force = self.gravity_vector.copy()
        if self.magnetic is not None:
            force += magnetic_force(self.topology, self.magnetic, q, self.seed, self.volumes)
        return force

    def stiffness(self, q) -> csr_matrix | None:
        """-dF_ext/dq, None when the load does not depend on the state"""
        if self.frozen is not None or self.magnetic is None:
            return None
        return magnetic_stiffness(self.topology, self.magnetic, q, self.seed, self.volumes)

    def potential(self, q) -> float:
        """External work potential of the loads at q"""
        q = np.asarray(q, dtype=float)
        nv3 = 3 * self.topology.node_count
        value = -float(np.dot(self.gravity_vector[:nv3], q[:nv3]))
        if self.magnetic is not None:
            value += zeeman_energy(self.topology, self.magnetic, q, self.seed, self.volumes)
        return value
