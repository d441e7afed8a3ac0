import math

import numpy as np
import pytest

from invrod.exceptions import DegenerateEdge
from invrod.geometry import FrameSet, seed_from_positions
from invrod.loads import (
    ExternalLoads,
    GravityLoad,
    MagneticLoad,
    assemble_inertia,
    gravity_force,
    magnetic_force,
    magnetic_stiffness,
    magnetic_volumes,
    zeeman_energy,
)
from invrod.models import MaterialParams
from invrod.topology import build_chain, pack_dofs, split_dofs

H = 1e-6


@pytest.fixture
def material():
    return MaterialParams.circular(youngs_modulus=1e7, radius=1e-2, density=1e3)


def straight(n: int, length: float = 1.0):
    positions = np.column_stack([np.linspace(0, length, n), np.zeros(n), np.zeros(n)])
    topology = build_chain(positions)
    return topology, pack_dofs(positions, np.zeros(n - 1))


def bent(n: int = 8):
    s = np.linspace(0, 1, n)
    positions = np.column_stack([s, 0.3 * np.sin(3 * s), 0.2 * s**2])
    topology = build_chain(positions)
    rng = np.random.default_rng(0)
    return topology, pack_dofs(positions, 0.2 * rng.normal(size=n - 1))


def test_gravity_two_node_edge(material):
    topology, q = straight(2)
    inertia = assemble_inertia(topology, material, q)
    force, _ = split_dofs(topology, gravity_force(topology, inertia, (0, 0, -10)))
    expected = -0.5 * 1e3 * math.pi * 1e-4 * 10
    assert force[:, 2] == pytest.approx([expected, expected])
    assert expected == pytest.approx(-15.708, abs=1e-3)


def test_gravity_zero_and_twist_free(material):
    topology, q = straight(5)
    inertia = assemble_inertia(topology, material, q)
    assert not np.any(gravity_force(topology, inertia, (0, 0, 0)))
    force = gravity_force(topology, inertia, (1, 2, -10))
    assert not np.any(split_dofs(topology, force)[1])
    totals = split_dofs(topology, force)[0].sum(axis=0)
    assert totals == pytest.approx(inertia.total_mass * np.array([1, 2, -10]), rel=1e-12)


def test_gravity_scales_with_density(material):
    topology, q = straight(4)
    light = gravity_force(topology, assemble_inertia(topology, material, q), (0, 0, -10))
    heavy_material = material.model_copy(update={"density": 2 * material.density})
    heavy = gravity_force(topology, assemble_inertia(topology, heavy_material, q), (0, 0, -10))
    assert heavy == pytest.approx(2 * light)


def test_inertia_lumping(material):
    topology, q = straight(5, length=4.0)
    inertia = assemble_inertia(topology, material, q)
    rho_a = material.density * material.area
    assert inertia.node_masses == pytest.approx([rho_a / 2, rho_a, rho_a, rho_a, rho_a / 2])
    assert inertia.total_mass == pytest.approx(rho_a * 4.0, rel=1e-14)
    assert inertia.twist_inertias == pytest.approx(np.full(4, material.density * material.polar_moment))
    assert inertia.diagonal.shape == (topology.dof_count,)


def test_inertia_length_basis(material):
    topology, q = straight(5)
    stretched = q.copy()
    stretched[: 3 * 5 : 3] *= 1.1
    rest_mass = assemble_inertia(topology, material, q).total_mass
    assert assemble_inertia(topology, material, stretched).total_mass > rest_mass


def test_inertia_degenerate_edge(material):
    topology, q = straight(3)
    q[3:6] = q[0:3]
    with pytest.raises(DegenerateEdge):
        assemble_inertia(topology, material, q)


def test_magnetization_imprint(material):
    topology, q = straight(3)
    seed = seed_from_positions(topology, split_dofs(topology, q)[0])
    load = MagneticLoad.imprint((0, 0, 1e5), (1e-3, 0, 0), topology, q, seed)
    # seeded frame of an x-aligned edge: m1 along y, m2 along z
    assert load.magnetization == pytest.approx(np.tile([0, 1e5, 0], (2, 1)))
    assert load.scaled(2).ambient_field == pytest.approx([2e-3, 0, 0])


def test_magnetic_force_zero_field(material):
    topology, q = bent()
    seed = seed_from_positions(topology, split_dofs(topology, q)[0])
    load = MagneticLoad.imprint((0, 0, 1e5), (0, 0, 0), topology, q, seed)
    volumes = magnetic_volumes(topology, material, q)
    assert not np.any(magnetic_force(topology, load, q, seed, volumes))


def test_magnetic_force_aligned_is_stationary(material):
    topology, q = straight(4)
    seed = seed_from_positions(topology, split_dofs(topology, q)[0])
    load = MagneticLoad.imprint((1e5, 0, 0), (0.1, 0, 0), topology, q, seed)
    volumes = magnetic_volumes(topology, material, q)
    assert magnetic_force(topology, load, q, seed, volumes) == pytest.approx(np.zeros(topology.dof_count), abs=1e-10)


def test_magnetic_force_matches_energy(material):
    topology, q = bent()
    seed = seed_from_positions(topology, split_dofs(topology, q)[0])
    load = MagneticLoad.imprint((1e5, -5e4, 2e5), (0.02, -0.01, 0.05), topology, q, seed)
    volumes = magnetic_volumes(topology, material, q)
    rng = np.random.default_rng(1)
    state = q + 0.02 * rng.normal(size=q.shape)

    expected = np.zeros_like(state)
    for i in range(len(state)):
        step = np.zeros_like(state)
        step[i] = H
        plus = zeeman_energy(topology, load, state + step, seed, volumes)
        minus = zeeman_energy(topology, load, state - step, seed, volumes)
        expected[i] = -(plus - minus) / (2 * H)
    force = magnetic_force(topology, load, state, seed, volumes)
    assert np.linalg.norm(force - expected) < 1e-5 * np.linalg.norm(expected)

    stiffness = magnetic_stiffness(topology, load, state, seed, volumes).toarray()
    assert stiffness == pytest.approx(stiffness.T, abs=1e-9 * np.abs(stiffness).max())


def test_magnetic_force_rotation_equivariant(material):
    topology, q = bent()
    positions, thetas = split_dofs(topology, q)
    seed = seed_from_positions(topology, positions)
    volumes = magnetic_volumes(topology, material, q)
    field = np.array([0.02, -0.01, 0.05])
    load = MagneticLoad.imprint((1e5, -5e4, 2e5), field, topology, q, seed)
    force, _ = split_dofs(topology, magnetic_force(topology, load, q, seed, volumes))

    angle = 0.7
    rotation = np.array([[math.cos(angle), -math.sin(angle), 0], [math.sin(angle), math.cos(angle), 0], [0, 0, 1]])
    rotated_q = pack_dofs(positions @ rotation.T, thetas)
    rotated_seed = FrameSet.from_reference(seed.t @ rotation.T, seed.u @ rotation.T, seed.theta)
    rotated_load = MagneticLoad(magnetization=load.magnetization, ambient_field=rotation @ field)
    rotated_force, _ = split_dofs(topology, magnetic_force(topology, rotated_load, rotated_q, rotated_seed, volumes))
    assert rotated_force == pytest.approx(force @ rotation.T, rel=1e-9, abs=1e-12)


def test_frozen_loads_are_constant(material):
    topology, q = bent()
    seed = seed_from_positions(topology, split_dofs(topology, q)[0])
    inertia = assemble_inertia(topology, material, q)
    load = MagneticLoad.imprint((1e5, 0, 0), (0, 0.05, 0), topology, q, seed)
    loads = ExternalLoads(
        topology,
        seed,
        inertia,
        gravity=GravityLoad.of((0, 0, -10)),
        magnetic=load,
        volumes=magnetic_volumes(topology, material, q),
    ).freeze(q)
    moved = q + 0.01
    first = loads.force(q)
    assert np.array_equal(loads.force(moved), first)
    assert loads.stiffness(moved) is None
    assert loads.active
