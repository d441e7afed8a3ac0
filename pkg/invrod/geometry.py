"""Discrete differential geometry of polyline rods.

The lowercase kernels (`transport`, `signed_angle`, `bend_strains`, ...) are pure `jax.numpy`
functions without checks, so they can be differentiated and vmapped by the elastic model. The
public operations validate their inputs, raise the geometry errors and return numpy arrays.
"""

from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np

from .exceptions import AntiparallelTangents, DegenerateEdge, TurningSingularity, ZeroRestLength
from .topology import NetTopology, split_dofs

DELTA_PAR = 1e-10
DELTA_KB = 1e-12

GLOBAL_AXES = np.eye(3)


def transport(a, t1, t2):
    """Minimal rotation of a taking unit t1 onto unit t2"""
    b = jnp.cross(t1, t2)
    c = jnp.dot(t1, t2)
    return a * c + jnp.cross(b, a) + b * jnp.dot(b, a) / (1.0 + c)


def signed_angle(a, b, n):
    """Angle from a to b about n, in (-pi, pi]"""
    angle = jnp.arctan2(jnp.dot(jnp.cross(a, b), n), jnp.dot(a, b))
    return jnp.where(angle <= -jnp.pi, jnp.pi, angle)


def directors(u, v, theta):
    c, s = jnp.cos(theta), jnp.sin(theta)
    return u * c + v * s, v * c - u * s


def kappa_b(e1, e2):
    return 2.0 * jnp.cross(e1, e2) / (jnp.linalg.norm(e1) * jnp.linalg.norm(e2) + jnp.dot(e1, e2))


def edge_frame(e, theta, t0, u0):
    """Reference and material frame of one stored edge, transported from its seed"""
    t = e / jnp.linalg.norm(e)
    u = transport(u0, t0, t)
    v = jnp.cross(t, u)
    m1, m2 = directors(u, v, theta)
    return t, u, v, m1, m2


def bend_strains(x, theta, t0, u0, signs):
    """Material curvatures and twist of one bend.

    x holds (previous, center, next) node positions in traversal order, theta the stored twist
    angles of the incoming and outgoing edge, t0/u0 their seed frames and signs the agreement of
    the stored edge directions with the traversal.
    """
    ea = x[1] - x[0]
    eb = x[2] - x[1]
    ta = ea / jnp.linalg.norm(ea)
    tb = eb / jnp.linalg.norm(eb)

    ua = transport(u0[0], t0[0], signs[0] * ta)
    ub = transport(u0[1], t0[1], signs[1] * tb)
    tha = signs[0] * theta[0]
    thb = signs[1] * theta[1]
    m1a, m2a = directors(ua, jnp.cross(ta, ua), tha)
    m1b, m2b = directors(ub, jnp.cross(tb, ub), thb)

    kb = kappa_b(ea, eb)
    kappa1 = 0.5 * jnp.dot(m1a + m1b, kb)
    kappa2 = -0.5 * jnp.dot(m2a + m2b, kb)
    tau = thb - tha + signed_angle(transport(ua, ta, tb), ub, tb)
    return jnp.stack([kappa1, kappa2, tau])


def edge_length(x):
    return jnp.linalg.norm(x[1] - x[0])


batched_bend_strains = jax.jit(jax.vmap(bend_strains))


@dataclass(frozen=True)
class FrameSet:
    """Per-edge reference frame (u, v, t) and material frame (m1, m2, m3 = t)"""

    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    theta: np.ndarray

    @property
    def m3(self) -> np.ndarray:
        return self.t

    @property
    def edge_count(self) -> int:
        return len(self.t)

    @classmethod
    def from_reference(cls, t, u, theta=None) -> "FrameSet":
        t = np.asarray(t, dtype=float).reshape(-1, 3)
        u = np.asarray(u, dtype=float).reshape(-1, 3)
        theta = np.zeros(len(t)) if theta is None else np.asarray(theta, dtype=float).reshape(-1)
        v = np.cross(t, u)
        c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
        return cls(t=t, u=u, v=v, m1=u * c + v * s, m2=v * c - u * s, theta=theta)

    def rotation(self, k: int) -> np.ndarray:
        """Columns m1, m2, m3 of edge k"""
        return np.column_stack([self.m1[k], self.m2[k], self.t[k]])


def seed_director(t0: np.ndarray) -> np.ndarray:
    """Projection of the global axis least aligned with t0 onto the plane normal to t0"""
    axis = GLOBAL_AXES[np.argmin(np.abs(t0))]
    u = axis - np.dot(axis, t0) * t0
    return u / np.linalg.norm(u)


def seed_frames(tangents) -> FrameSet:
    t0 = np.asarray(tangents, dtype=float).reshape(-1, 3)
    t0 = t0 / np.linalg.norm(t0, axis=1, keepdims=True)
    u0 = np.array([seed_director(t) for t in t0]).reshape(-1, 3)
    return FrameSet.from_reference(t0, u0)


def edge_vectors(topology: NetTopology, positions: np.ndarray) -> np.ndarray:
    edges = topology.edge_array
    return positions[edges[:, 1]] - positions[edges[:, 0]]


def tangents_of(topology: NetTopology, positions: np.ndarray) -> np.ndarray:
    e = edge_vectors(topology, positions)
    lengths = np.linalg.norm(e, axis=1)
    if np.any(lengths <= 0):
        k = int(np.argmin(lengths))
        raise DegenerateEdge("edge has zero length", element=k)
    return e / lengths[:, None]


def seed_from_positions(topology: NetTopology, positions) -> FrameSet:
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    return seed_frames(tangents_of(topology, positions))


def parallel_transport(a, t1, t2) -> np.ndarray:
    a, t1, t2 = (np.asarray(x, dtype=float) for x in (a, t1, t2))
    if np.dot(t1, t2) <= -1.0 + DELTA_PAR:
        raise AntiparallelTangents(f"cannot transport between antiparallel tangents {t1} and {t2}")
    return np.asarray(transport(a, t1, t2))


def update_reference_frames(initial: FrameSet, current_tangents, theta=None) -> FrameSet:
    """Transport the time-0 frames onto the current tangents.

    The result only depends on the initial frames and the current tangents. Twist angles are kept
    from `initial` unless given.
    """
    t = np.asarray(current_tangents, dtype=float).reshape(-1, 3)
    dots = np.einsum("ij,ij->i", initial.t, t)
    if np.any(dots <= -1.0 + DELTA_PAR):
        k = int(np.argmin(dots))
        raise AntiparallelTangents("tangent turned onto its antipode", element=k)
    u = np.asarray(jax.vmap(transport)(initial.u, initial.t, t))
    return FrameSet.from_reference(t, u, initial.theta if theta is None else theta)


def curvature_binormal(e1, e2) -> np.ndarray:
    e1, e2 = np.asarray(e1, dtype=float), np.asarray(e2, dtype=float)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 <= 0 or n2 <= 0:
        raise DegenerateEdge("curvature binormal of a zero-length edge")
    if n1 * n2 + np.dot(e1, e2) <= DELTA_KB * n1 * n2:
        raise TurningSingularity("edges fold back onto each other")
    return np.asarray(kappa_b(e1, e2))


def material_curvatures(kb, m1_in, m2_in, m1_out, m2_out) -> tuple[float, float]:
    kb = np.asarray(kb, dtype=float)
    kappa1 = 0.5 * np.dot(np.asarray(m1_in) + np.asarray(m1_out), kb)
    kappa2 = -0.5 * np.dot(np.asarray(m2_in) + np.asarray(m2_out), kb)
    return float(kappa1), float(kappa2)


def stretch_strain(e, rest_len: float) -> float:
    if rest_len <= 0:
        raise ZeroRestLength(f"rest length must be positive, got {rest_len}")
    return float(np.linalg.norm(np.asarray(e, dtype=float)) / rest_len - 1.0)


def reference_twist(u1, u2, t1, t2) -> float:
    u1, u2, t1, t2 = (np.asarray(x, dtype=float) for x in (u1, u2, t1, t2))
    transported = parallel_transport(u1, t1, t2)
    return float(signed_angle(transported, u2, t2))


def twist_strain(theta1: float, theta2: float, phi_ref: float) -> float:
    return theta2 - theta1 + phi_ref


@dataclass(frozen=True)
class StrainState:
    eps: np.ndarray
    kappa1: np.ndarray
    kappa2: np.ndarray
    tau: np.ndarray
    voronoi: np.ndarray
    lengths: np.ndarray


def check_bends(topology: NetTopology, positions: np.ndarray) -> None:
    maps = topology.maps
    if not topology.bend_count:
        return
    x = positions[maps.bend_nodes]
    ea = x[:, 1] - x[:, 0]
    eb = x[:, 2] - x[:, 1]
    na = np.linalg.norm(ea, axis=1)
    nb = np.linalg.norm(eb, axis=1)
    denominator = na * nb + np.einsum("ij,ij->i", ea, eb)
    folded = np.flatnonzero(denominator <= DELTA_KB * na * nb)
    if folded.size:
        raise TurningSingularity("edges fold back onto each other", element=int(folded[0]))


def check_transport(seed: FrameSet, tangents: np.ndarray) -> None:
    dots = np.einsum("ij,ij->i", seed.t, tangents)
    bad = np.flatnonzero(dots <= -1.0 + DELTA_PAR)
    if bad.size:
        raise AntiparallelTangents("tangent turned onto the antipode of its seed", element=int(bad[0]))


def local_bend_inputs(topology: NetTopology, q: np.ndarray, seed: FrameSet):
    """Gather per-bend kernel inputs: (x, theta, t0, u0, signs)"""
    positions, thetas = split_dofs(topology, q)
    maps = topology.maps
    return (
        positions[maps.bend_nodes],
        thetas[maps.bend_edges],
        seed.t[maps.bend_edges],
        seed.u[maps.bend_edges],
        maps.bend_signs,
    )


def compute_strain_state(topology: NetTopology, dofs, frames: FrameSet, rest_lengths) -> StrainState:
    """All strain measures of a configuration, with frames transported from the seed `frames`"""
    q = np.asarray(dofs, dtype=float)
    positions, _ = split_dofs(topology, q)
    rest_lengths = np.asarray(rest_lengths, dtype=float).reshape(-1)
    if np.any(rest_lengths <= 0):
        raise ZeroRestLength("rest length must be positive", element=int(np.argmin(rest_lengths)))

    check_transport(frames, tangents_of(topology, positions))
    check_bends(topology, positions)

    lengths = np.linalg.norm(edge_vectors(topology, positions), axis=1)
    eps = lengths / rest_lengths - 1.0

    if topology.bend_count:
        strains = np.asarray(batched_bend_strains(*local_bend_inputs(topology, q, frames)))
        voronoi = 0.5 * rest_lengths[topology.maps.bend_edges].sum(axis=1)
    else:
        strains = np.zeros((0, 3))
        voronoi = np.zeros(0)

    return StrainState(
        eps=eps,
        kappa1=strains[:, 0],
        kappa2=strains[:, 1],
        tau=strains[:, 2],
        voronoi=voronoi,
        lengths=lengths,
    )


def frames_of(topology: NetTopology, dofs, seed: FrameSet) -> FrameSet:
    positions, thetas = split_dofs(topology, np.asarray(dofs, dtype=float))
    return update_reference_frames(seed, tangents_of(topology, positions), thetas)
