"""Energies, forces and Jacobians of the discrete rod.

Forward mode differentiates the energy with respect to the current configuration, the rest shape
being fixed. Inverse mode keeps the deformed configuration as a frozen reference: its strain values
and strain gradients are computed once, and the unknowns are the rest shape DOFs that set the
natural strains entering the stress prefactors.

Derivative operators follow the stiffness convention: `hessian` and `jacobian` return
`-d(forces)/dq`.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from scipy.sparse import coo_matrix, csr_matrix

from .geometry import (
    FrameSet,
    batched_bend_strains,
    bend_strains,
    check_bends,
    check_transport,
    edge_length,
    local_bend_inputs,
    tangents_of,
)
from .logging import get_logger
from .models import MaterialParams
from .topology import NetTopology, split_dofs


@dataclass(frozen=True)
class NaturalStrains:
    rest_lengths: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    tau: np.ndarray
    voronoi: np.ndarray

    @classmethod
    def from_configuration(cls, topology: NetTopology, q, seed: FrameSet) -> "NaturalStrains":
        """Natural strains of a stress-free configuration measured in frames from `seed`"""
        q = np.asarray(q, dtype=float)
        positions, _ = split_dofs(topology, q)
        check_transport(seed, tangents_of(topology, positions))
        check_bends(topology, positions)
        edges = topology.edge_array
        lengths = np.linalg.norm(positions[edges[:, 1]] - positions[edges[:, 0]], axis=1)
        if topology.bend_count:
            strains = np.asarray(batched_bend_strains(*local_bend_inputs(topology, q, seed)))
            voronoi = 0.5 * lengths[topology.maps.bend_edges].sum(axis=1)
        else:
            strains = np.zeros((0, 3))
            voronoi = np.zeros(0)
        return cls(
            rest_lengths=lengths,
            kappa1=strains[:, 0],
            kappa2=strains[:, 1],
            tau=strains[:, 2],
            voronoi=voronoi,
        )

    @property
    def bend_table(self) -> np.ndarray:
        """Rows of (kappa1, kappa2, tau, voronoi) per bend"""
        return np.column_stack([self.kappa1, self.kappa2, self.tau, self.voronoi]).reshape(-1, 4)


@dataclass(frozen=True)
class ElementStiffness:
    EA: np.ndarray
    bend: np.ndarray

    @classmethod
    def from_material(cls, topology: NetTopology, material: MaterialParams) -> "ElementStiffness":
        ne = topology.edge_count
        per_edge = np.column_stack([material.per_edge(name, ne) for name in ("EI1", "EI2", "GJ")])
        if topology.bend_count:
            bend = 0.5 * per_edge[topology.maps.bend_edges].sum(axis=1)
        else:
            bend = np.zeros((0, 3))
        return cls(EA=material.per_edge("EA", ne), bend=bend)


def stretch_energy(xl, rest_length, EA):
    eps = edge_length(xl.reshape(2, 3)) / rest_length - 1.0
    return 0.5 * EA * eps**2 * rest_length


def bend_energies(ql, t0, u0, signs, natural, stiffness):
    """Bending and twisting energy of one bend from its 11 local DOFs"""
    strains = bend_strains(ql[:9].reshape(3, 3), ql[9:], t0, u0, signs)
    terms = 0.5 * stiffness * (strains - natural[:3]) ** 2 / natural[3]
    return jnp.stack([terms[0] + terms[1], terms[2]])


def bend_total(ql, t0, u0, signs, natural, stiffness):
    return jnp.sum(bend_energies(ql, t0, u0, signs, natural, stiffness))


def stretch_prefactor(xl_uc, length_dc, EA):
    return EA * (length_dc / edge_length(xl_uc.reshape(2, 3)) - 1.0)


def bend_prefactors(ql_uc, t0, u0, signs, strains_dc, stiffness):
    """dE/d(kappa1, kappa2, tau) at the frozen configuration for the rest shape ql_uc"""
    x = ql_uc[:9].reshape(3, 3)
    natural = bend_strains(x, ql_uc[9:], t0, u0, signs)
    voronoi = 0.5 * (jnp.linalg.norm(x[1] - x[0]) + jnp.linalg.norm(x[2] - x[1]))
    return stiffness * (strains_dc - natural) / voronoi


stretch_energy_batch = jax.jit(jax.vmap(stretch_energy))
stretch_gradient_batch = jax.jit(jax.vmap(jax.grad(stretch_energy)))
stretch_hessian_batch = jax.jit(jax.vmap(jax.hessian(stretch_energy)))
bend_energy_batch = jax.jit(jax.vmap(bend_energies))
bend_gradient_batch = jax.jit(jax.vmap(jax.grad(bend_total)))
bend_hessian_batch = jax.jit(jax.vmap(jax.hessian(bend_total)))

length_batch = jax.jit(jax.vmap(lambda xl: edge_length(xl.reshape(2, 3))))
length_gradient_batch = jax.jit(jax.vmap(jax.grad(lambda xl: edge_length(xl.reshape(2, 3)))))
bend_strain_jacobian_batch = jax.jit(
    jax.vmap(jax.jacfwd(lambda ql, t0, u0, signs: bend_strains(ql[:9].reshape(3, 3), ql[9:], t0, u0, signs)))
)
stretch_prefactor_batch = jax.jit(jax.vmap(stretch_prefactor))
stretch_prefactor_gradient_batch = jax.jit(jax.vmap(jax.grad(stretch_prefactor)))
bend_prefactor_batch = jax.jit(jax.vmap(bend_prefactors))
bend_prefactor_jacobian_batch = jax.jit(jax.vmap(jax.jacfwd(bend_prefactors)))


def assemble_vector(size: int, stencils: np.ndarray, local: np.ndarray) -> np.ndarray:
    if not len(stencils):
        return np.zeros(size)
    return np.bincount(stencils.ravel(), weights=np.asarray(local).ravel(), minlength=size)


def assemble_matrix(size: int, stencils: np.ndarray, local: np.ndarray) -> csr_matrix:
    if not len(stencils):
        return csr_matrix((size, size))
    k = stencils.shape[1]
    rows = np.repeat(stencils, k, axis=1).ravel()
    cols = np.tile(stencils, (1, k)).ravel()
    return coo_matrix((np.asarray(local).ravel(), (rows, cols)), shape=(size, size)).tocsr()


class ElementEvaluator:
    """Evaluates a batched element kernel, optionally split over a thread pool.

    Chunk results are concatenated in element order, so the reduction that follows does not depend
    on scheduling.
    """

    def __init__(self, threads: int = 1, chunk_size: int = 4096) -> None:
        self.threads = max(1, threads)
        self.chunk_size = chunk_size

    def __call__(self, kernel, *arrays) -> np.ndarray:
        count = len(arrays[0])
        if self.threads == 1 or count <= self.chunk_size:
            return np.asarray(kernel(*arrays))
        bounds = [(start, min(start + self.chunk_size, count)) for start in range(0, count, self.chunk_size)]
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            parts = list(executor.map(lambda b: np.asarray(kernel(*(a[b[0] : b[1]] for a in arrays))), bounds))
        return np.concatenate(parts, axis=0)


class ElasticModel:
    def __init__(self, topology: NetTopology, material: MaterialParams, seed: FrameSet, threads: int = 1) -> None:
        self.logger = get_logger()
        self.topology = topology
        self.material = material
        self.seed = seed
        self.stiffness = ElementStiffness.from_material(topology, material)
        self.evaluate = ElementEvaluator(threads=threads)
        self.maps = topology.maps
        self.size = topology.dof_count

    def edge_positions(self, q: np.ndarray) -> np.ndarray:
        return q[self.maps.edge_stencils[:, :6]]

    def bend_locals(self, q: np.ndarray) -> np.ndarray:
        return q[self.maps.bend_stencils]

    def bend_seeds(self) -> tuple[np.ndarray, np.ndarray]:
        edges = self.maps.bend_edges
        return self.seed.t[edges], self.seed.u[edges]

    def check(self, q: np.ndarray) -> None:
        positions, _ = split_dofs(self.topology, q)
        check_transport(self.seed, tangents_of(self.topology, positions))
        check_bends(self.topology, positions)


class ForwardModel(ElasticModel):
    """Elastic energy of the current configuration q for fixed natural strains"""

    def __init__(
        self,
        topology: NetTopology,
        material: MaterialParams,
        natural: NaturalStrains,
        seed: FrameSet,
        threads: int = 1,
    ) -> None:
        super().__init__(topology, material, seed, threads)
        self.natural = natural
        self.bend_natural = natural.bend_table

    def energies(self, q) -> tuple[float, float, float]:
        q = np.asarray(q, dtype=float)
        self.check(q)
        es = self.evaluate(stretch_energy_batch, self.edge_positions(q), self.natural.rest_lengths, self.stiffness.EA)
        if self.topology.bend_count:
            t0, u0 = self.bend_seeds()
            ebt = self.evaluate(
                bend_energy_batch,
                self.bend_locals(q),
                t0,
                u0,
                self.maps.bend_signs,
                self.bend_natural,
                self.stiffness.bend,
            )
        else:
            ebt = np.zeros((0, 2))
        return float(np.sum(es)), float(np.sum(ebt[:, 0])), float(np.sum(ebt[:, 1]))

    def gradient(self, q: np.ndarray) -> np.ndarray:
        grad = assemble_vector(
            self.size,
            self.maps.edge_stencils[:, :6],
            self.evaluate(stretch_gradient_batch, self.edge_positions(q), self.natural.rest_lengths, self.stiffness.EA),
        )
        if self.topology.bend_count:
            t0, u0 = self.bend_seeds()
            grad += assemble_vector(
                self.size,
                self.maps.bend_stencils,
                self.evaluate(
                    bend_gradient_batch,
                    self.bend_locals(q),
                    t0,
                    u0,
                    self.maps.bend_signs,
                    self.bend_natural,
                    self.stiffness.bend,
                ),
            )
        return grad

    def forces(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        self.check(q)
        return -self.gradient(q)

    def hessian(self, q) -> csr_matrix:
        q = np.asarray(q, dtype=float)
        self.check(q)
        matrix = assemble_matrix(
            self.size,
            self.maps.edge_stencils[:, :6],
            self.evaluate(stretch_hessian_batch, self.edge_positions(q), self.natural.rest_lengths, self.stiffness.EA),
        )
        if self.topology.bend_count:
            t0, u0 = self.bend_seeds()
            matrix = matrix + assemble_matrix(
                self.size,
                self.maps.bend_stencils,
                self.evaluate(
                    bend_hessian_batch,
                    self.bend_locals(q),
                    t0,
                    u0,
                    self.maps.bend_signs,
                    self.bend_natural,
                    self.stiffness.bend,
                ),
            )
        return matrix.tocsr()

    def linearize(self, q) -> tuple[np.ndarray, csr_matrix]:
        """Elastic force gradient dE/dq and stiffness at q"""
        return -self.forces(q), self.hessian(q)


class InverseModel(ElasticModel):
    """Elastic force on a frozen deformed configuration as a function of the rest shape"""

    def __init__(
        self,
        topology: NetTopology,
        material: MaterialParams,
        deformed,
        seed: FrameSet,
        threads: int = 1,
    ) -> None:
        super().__init__(topology, material, seed, threads)
        self.deformed = np.asarray(deformed, dtype=float)
        self.check(self.deformed)

        xl = self.edge_positions(self.deformed)
        self.lengths = self.evaluate(length_batch, xl)
        self.length_gradients = self.evaluate(length_gradient_batch, xl)

        if topology.bend_count:
            t0, u0 = self.bend_seeds()
            ql = self.bend_locals(self.deformed)
            self.strains = self.evaluate(
                batched_bend_strains, *local_bend_inputs(topology, self.deformed, seed)
            )
            self.strain_gradients = self.evaluate(bend_strain_jacobian_batch, ql, t0, u0, self.maps.bend_signs)
        else:
            self.strains = np.zeros((0, 3))
            self.strain_gradients = np.zeros((0, 3, 11))

        self.logger.debug(
            "Frozen deformed configuration",
            edges=topology.edge_count,
            bends=topology.bend_count,
        )

    def natural(self, q_uc) -> NaturalStrains:
        return NaturalStrains.from_configuration(self.topology, q_uc, self.seed)

    def energies(self, q_uc) -> tuple[float, float, float]:
        """Energy of the frozen configuration with natural strains taken from q_uc"""
        forward = ForwardModel(self.topology, self.material, self.natural(q_uc), self.seed)
        return forward.energies(self.deformed)

    def prefactors(self, q_uc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        stretch = self.evaluate(stretch_prefactor_batch, self.edge_positions(q_uc), self.lengths, self.stiffness.EA)
        if self.topology.bend_count:
            t0, u0 = self.bend_seeds()
            bend = self.evaluate(
                bend_prefactor_batch,
                self.bend_locals(q_uc),
                t0,
                u0,
                self.maps.bend_signs,
                self.strains,
                self.stiffness.bend,
            )
        else:
            bend = np.zeros((0, 3))
        return stretch, bend

    def gradient(self, q_uc: np.ndarray) -> np.ndarray:
        stretch, bend = self.prefactors(q_uc)
        grad = assemble_vector(self.size, self.maps.edge_stencils[:, :6], stretch[:, None] * self.length_gradients)
        if self.topology.bend_count:
            grad += assemble_vector(
                self.size,
                self.maps.bend_stencils,
                np.einsum("bk,bkj->bj", bend, self.strain_gradients),
            )
        return grad

    def forces(self, q_uc) -> np.ndarray:
        q_uc = np.asarray(q_uc, dtype=float)
        self.check(q_uc)
        return -self.gradient(q_uc)

    def jacobian(self, q_uc) -> csr_matrix:
        q_uc = np.asarray(q_uc, dtype=float)
        self.check(q_uc)
        d_stretch = self.evaluate(
            stretch_prefactor_gradient_batch, self.edge_positions(q_uc), self.lengths, self.stiffness.EA
        )
        matrix = assemble_matrix(
            self.size,
            self.maps.edge_stencils[:, :6],
            np.einsum("ei,ej->eij", self.length_gradients, d_stretch),
        )
        if self.topology.bend_count:
            t0, u0 = self.bend_seeds()
            d_bend = self.evaluate(
                bend_prefactor_jacobian_batch,
                self.bend_locals(q_uc),
                t0,
                u0,
                self.maps.bend_signs,
                self.strains,
                self.stiffness.bend,
            )
            matrix = matrix + assemble_matrix(
                self.size,
                self.maps.bend_stencils,
                np.einsum("bki,bkj->bij", self.strain_gradients, d_bend),
            )
        return matrix.tocsr()

    def linearize(self, q_uc) -> tuple[np.ndarray, csr_matrix]:
        return -self.forces(q_uc), self.jacobian(q_uc)


def elastic_energy(topology: NetTopology, current, natural: NaturalStrains, material: MaterialParams, seed: FrameSet):
    return ForwardModel(topology, material, natural, seed).energies(current)


def forward_forces(topology: NetTopology, current, natural: NaturalStrains, material: MaterialParams, seed: FrameSet):
    return ForwardModel(topology, material, natural, seed).forces(current)


def forward_hessian(topology: NetTopology, current, natural: NaturalStrains, material: MaterialParams, seed: FrameSet):
    return ForwardModel(topology, material, natural, seed).hessian(current)


def inverse_forces(topology: NetTopology, deformed, candidate_uc, material: MaterialParams, seed: FrameSet):
    return InverseModel(topology, material, deformed, seed).forces(candidate_uc)


def inverse_jacobian(topology: NetTopology, deformed, candidate_uc, material: MaterialParams, seed: FrameSet):
    return InverseModel(topology, material, deformed, seed).jacobian(candidate_uc)
