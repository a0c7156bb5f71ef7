"""Tendon-driven robot graph: tensions, disc actuation factors, measurements.

Tendons route through holes in discs attached to a subset of the backbone
nodes.  Tension in a tendon pulls each disc toward its neighbor discs along
the chord between the corresponding holes; disc equilibrium factors turn the
tension variable into backbone wrenches.  The first disc has no proximal
segment and the last disc (always at the tip node) anchors the tendons, so
each contributes a single-sided pull.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import se3
from .graph import (
    ConfigurationError,
    Factor,
    FactorGraph,
    PosePriorFactor,
    Values,
    VariableKey,
    VectorPriorFactor,
)
from .rod import (
    DEFAULT_BASE_POSE_SIGMA,
    BoundaryFactor,
    RodSpec,
    add_rod_chain,
    add_stress_transport,
    default_rod_spec,
    unstressed_poses,
)
from .se3 import Pose

DEGENERATE_CHORD = 1e-9


class DegenerateGeometryError(ValueError):
    """Tendon chord between coincident holes: direction undefined."""


@dataclass
class TendonLayout:
    disc_nodes: tuple[int, ...]
    hole_positions: np.ndarray  # (num_discs, num_tendons, 3), body frame, z = 0
    sigma_D: np.ndarray | None = None  # disc equilibrium noise, default (1e-4)^2 I
    sigma_Q: np.ndarray | None = None  # tension prior noise, default (0.01 N)^2 I

    def __post_init__(self):
        self.disc_nodes = tuple(int(d) for d in self.disc_nodes)
        self.hole_positions = np.asarray(self.hole_positions, dtype=float)
        if len(self.disc_nodes) < 2:
            raise ConfigurationError("need at least two routing discs")
        if list(self.disc_nodes) != sorted(set(self.disc_nodes)):
            raise ConfigurationError("disc nodes must be sorted and unique")
        if self.hole_positions.ndim != 3 or self.hole_positions.shape[0] != len(self.disc_nodes):
            raise ConfigurationError("hole_positions must be (num_discs, num_tendons, 3)")
        if np.any(np.abs(self.hole_positions[..., 2]) > 1e-12):
            raise ConfigurationError("hole positions must lie in the disc plane (z = 0)")
        if self.sigma_D is None:
            self.sigma_D = (1e-4) ** 2 * np.eye(6)
        if self.sigma_Q is None:
            self.sigma_Q = (0.01) ** 2 * np.eye(self.tendon_count)

    @property
    def tendon_count(self) -> int:
        return self.hole_positions.shape[1]

    def holes_at(self, node: int) -> np.ndarray:
        return self.hole_positions[self.disc_nodes.index(node)]


def radial_hole_pattern(tendon_count: int, radius: float, phase: float = 0.0) -> np.ndarray:
    angles = phase + 2 * np.pi * np.arange(tendon_count) / tendon_count
    return np.stack([radius * np.cos(angles), radius * np.sin(angles), np.zeros(tendon_count)], axis=-1)


def uniform_layout(
    disc_nodes, tendon_count: int = 4, hole_radius: float = 8e-3, phase: float = 0.0
) -> TendonLayout:
    holes = radial_hole_pattern(tendon_count, hole_radius, phase)
    return TendonLayout(tuple(disc_nodes), np.tile(holes, (len(tuple(disc_nodes)), 1, 1)))


def default_tendon_robot() -> tuple[RodSpec, TendonLayout]:
    """K=30 backbone with 10 equally spaced discs and 4 tendons at 90 degrees."""
    spec = default_rod_spec(length=0.2, num_nodes=31, radius=1e-3)
    layout = uniform_layout(disc_nodes=tuple(range(3, 31, 3)))
    return spec, layout


# -- geometry ------------------------------------------------------------------


def tendon_direction(pose_d: Pose, pose_j: Pose, hole_d: np.ndarray, hole_j: np.ndarray) -> np.ndarray:
    """Body-frame chord from hole on disc d to the same tendon's hole on disc j."""
    rel = pose_d.inverse().compose(pose_j)
    chord = rel.apply(np.asarray(hole_j, dtype=float)) - np.asarray(hole_d, dtype=float)
    if np.linalg.norm(chord) < DEGENERATE_CHORD:
        raise DegenerateGeometryError("tendon holes are coincident")
    return chord


def disc_wrench(
    pose_d: Pose, pose_j: Pose, hole_d: np.ndarray, hole_j: np.ndarray, tension: float
) -> np.ndarray:
    """World-axes wrench on disc d from one tendon segment toward disc j."""
    chord = tendon_direction(pose_d, pose_j, hole_d, hole_j)
    unit = chord / np.linalg.norm(chord)
    force = tension * unit
    body = np.concatenate([np.cross(hole_d, force), force])
    return se3.rotate_wrench(pose_d.rotation, body)


def _segment_terms(pose_d: Pose, pose_j: Pose, holes_d, holes_j, tensions):
    """Summed tendon wrench on disc d toward disc j, with its Jacobians.

    Returns (wrench, J_q (6,N), J_xi_d (6,6), J_xi_j (6,6)); all Jacobians are
    for the world-axes wrench and right pose perturbations.
    """
    n = len(tensions)
    rel = pose_d.inverse().compose(pose_j)
    p = rel.apply(holes_j)  # (N, 3)
    chord = p - holes_d
    norms = np.linalg.norm(chord, axis=-1)
    if np.any(norms < DEGENERATE_CHORD):
        raise DegenerateGeometryError("tendon holes are coincident")
    unit = chord / norms[:, None]

    # per-unit-tension body wrench of each tendon
    u = np.concatenate([np.cross(holes_d, unit), unit], axis=-1)  # (N, 6)
    rot = pose_d.rotation
    world_u = np.concatenate(
        [
            (rot @ np.cross(holes_d, unit)[..., None])[..., 0],
            (rot @ unit[..., None])[..., 0],
        ],
        axis=-1,
    )  # (N, 6)
    j_q = world_u.T
    w_body = (tensions[:, None] * u).sum(axis=0)
    wrench = se3.rotate_wrench(rot, w_body)

    # chain rule through the chord for a right perturbation of rel
    proj = (np.eye(3)[None] - unit[:, :, None] * unit[:, None, :]) / norms[:, None, None]
    d_chord = np.concatenate([-se3.hat3(holes_j), np.broadcast_to(np.eye(3), (n, 3, 3))], axis=-1)
    d_chord = rel.rotation[None] @ d_chord  # (N, 3, 6)
    lever = np.concatenate([se3.hat3(holes_d), np.broadcast_to(np.eye(3), (n, 3, 3))], axis=-2)  # (N, 6, 3)
    d_body = np.einsum("n,nij,njk,nkl->il", tensions, lever, proj, d_chord)  # (6, 6)
    j_delta = np.zeros((6, 6))
    j_delta[:3] = rot @ d_body[:3]
    j_delta[3:] = rot @ d_body[3:]

    j_xi_j = j_delta
    j_xi_d = -j_delta @ se3.adjoint(rel.inverse())
    j_xi_d = j_xi_d.copy()
    j_xi_d[:3, :3] -= rot @ se3.hat3(w_body[:3])
    j_xi_d[3:, :3] -= rot @ se3.hat3(w_body[3:])
    return wrench, j_q, j_xi_d, j_xi_j


class DiscEquilibriumFactor(Factor):
    """e = sum_i (f_i^prev + f_i^next) + E_d - F_d at one routing disc."""

    def __init__(
        self,
        pose_d: VariableKey,
        pose_prev: VariableKey | None,
        pose_next: VariableKey | None,
        tension_key: VariableKey,
        external_key: VariableKey | None,
        wrench_key: VariableKey,
        holes_d: np.ndarray,
        holes_prev: np.ndarray | None,
        holes_next: np.ndarray | None,
        covariance: np.ndarray,
    ):
        keys = [pose_d]
        self.neighbor_slots = []
        if pose_prev is not None:
            keys.append(pose_prev)
            self.neighbor_slots.append(("prev", len(keys) - 1))
        if pose_next is not None:
            keys.append(pose_next)
            self.neighbor_slots.append(("next", len(keys) - 1))
        self.tension_slot = len(keys)
        keys.append(tension_key)
        self.external_slot = None
        if external_key is not None:
            self.external_slot = len(keys)
            keys.append(external_key)
        self.wrench_slot = len(keys)
        keys.append(wrench_key)
        super().__init__(keys, covariance)
        self.holes_d = np.asarray(holes_d, dtype=float)
        self.neighbor_holes = {"prev": holes_prev, "next": holes_next}

    def raw_error(self, values: Values) -> np.ndarray:
        pose_d = values[self.keys[0]]
        tensions = values[self.keys[self.tension_slot]]
        total = np.zeros(6)
        for name, slot in self.neighbor_slots:
            pose_j = values[self.keys[slot]]
            holes_j = self.neighbor_holes[name]
            for i in range(len(tensions)):
                total += disc_wrench(pose_d, pose_j, self.holes_d[i], holes_j[i], tensions[i])
        if self.external_slot is not None:
            total = total + values[self.keys[self.external_slot]]
        return total - values[self.keys[self.wrench_slot]]

    def raw_error_and_jacobians(self, values: Values):
        pose_d = values[self.keys[0]]
        tensions = values[self.keys[self.tension_slot]]
        n = len(tensions)
        total = np.zeros(6)
        j_pose_d = np.zeros((6, 6))
        j_q = np.zeros((6, n))
        neighbor_jacs = {}
        for name, slot in self.neighbor_slots:
            pose_j = values[self.keys[slot]]
            holes_j = self.neighbor_holes[name]
            wrench, jq, jxd, jxj = _segment_terms(pose_d, pose_j, self.holes_d, holes_j, tensions)
            total += wrench
            j_q += jq
            j_pose_d += jxd
            neighbor_jacs[slot] = jxj
        if self.external_slot is not None:
            total = total + values[self.keys[self.external_slot]]
        err = total - values[self.keys[self.wrench_slot]]

        jacs = [j_pose_d]
        for _, slot in self.neighbor_slots:
            jacs.append(neighbor_jacs[slot])
        jacs.append(j_q)
        if self.external_slot is not None:
            jacs.append(np.eye(6))
        jacs.append(-np.eye(6))
        return err, jacs


class TipPositionFactor(Factor):
    """e = Pos(T) - z; plain position measurement of one pose."""

    def __init__(self, pose_key: VariableKey, measured: np.ndarray, covariance: np.ndarray):
        super().__init__([pose_key], covariance)
        self.measured = np.asarray(measured, dtype=float)

    def raw_error(self, values: Values) -> np.ndarray:
        return values[self.keys[0]].translation - self.measured

    def raw_error_and_jacobians(self, values: Values):
        jac = np.zeros((3, 6))
        jac[:, 3:] = values[self.keys[0]].rotation
        return self.raw_error(values), [jac]


@dataclass
class TendonKeys:
    poses: list[VariableKey]
    stresses: list[VariableKey]
    tensions: VariableKey
    node_wrenches: dict[int, VariableKey]  # F_k (disc nodes own variables, others alias E_k)
    external_wrenches: dict[int, VariableKey]

    @property
    def tip_pose(self) -> VariableKey:
        return self.poses[-1]


DEFAULT_EXTERNAL_SIGMA = 1e-6


def build_tendon_graph(
    spec: RodSpec,
    layout: TendonLayout,
    measured_tensions: np.ndarray,
    external_priors: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
    tip_position_measurements: list[tuple[np.ndarray, np.ndarray]] | None = None,
    base_pose_prior: tuple[Pose, np.ndarray] | None = None,
    strain_rule: str = "midpoint",
    include_external: bool = True,
) -> tuple[FactorGraph, TendonKeys]:
    """Rod graph plus tension variable, disc actuation, and measurements.

    external_priors maps node (1..K) to (mean, covariance) of that node's
    external wrench; unlisted nodes get a tight zero prior (assume no load).
    Large covariance at a node switches it to force-inference mode.
    """
    measured_tensions = np.asarray(measured_tensions, dtype=float)
    if measured_tensions.shape != (layout.tendon_count,):
        raise ConfigurationError("measured tensions must match the tendon count")
    if np.any(measured_tensions < 0):
        raise ConfigurationError("measured tensions must be non-negative (tendons pull)")
    if max(layout.disc_nodes) != spec.K:
        raise ConfigurationError("the terminal disc must sit at the tip node")
    if base_pose_prior is None:
        base_pose_prior = (Pose.identity(), DEFAULT_BASE_POSE_SIGMA**2 * np.eye(6))
    external_priors = dict(external_priors or {})

    graph = FactorGraph()
    poses, stresses = add_rod_chain(graph, spec, strain_rule, prefix="tendon")
    tension_key = graph.add_vector_variable(layout.tendon_count, "tendon.Q")
    graph.add_factor(VectorPriorFactor(tension_key, measured_tensions, layout.sigma_Q))

    disc_set = set(layout.disc_nodes)
    node_wrenches: dict[int, VariableKey] = {}
    external: dict[int, VariableKey] = {}
    ext_means: dict[int, np.ndarray] = {}

    base_wrench = graph.add_vector_variable(6, "tendon.F0")
    node_wrenches[0] = base_wrench
    default_cov = DEFAULT_EXTERNAL_SIGMA**2 * np.eye(6)
    for k in range(1, spec.num_nodes):
        mean, cov = external_priors.get(k, (np.zeros(6), default_cov))
        mean = np.asarray(mean, dtype=float)
        if k in disc_set:
            node_wrenches[k] = graph.add_vector_variable(6, f"tendon.F{k}")
            if include_external:
                external[k] = graph.add_vector_variable(6, f"tendon.E{k}")
                graph.add_factor(VectorPriorFactor(external[k], mean, cov))
                ext_means[k] = mean
        else:
            if include_external:
                key = graph.add_vector_variable(6, f"tendon.E{k}")
                graph.add_factor(VectorPriorFactor(key, mean, cov))
                node_wrenches[k] = key  # F_k = E_k by variable aliasing
                external[k] = key
                ext_means[k] = mean

    # disc equilibrium factors (skip a disc coincident with the clamped base:
    # its tendon forces go into the mount, and F_0 stays a free reaction)
    for idx, d in enumerate(layout.disc_nodes):
        if d == 0:
            continue
        prev_node = layout.disc_nodes[idx - 1] if idx > 0 else None
        next_node = layout.disc_nodes[idx + 1] if idx + 1 < len(layout.disc_nodes) else None
        graph.add_factor(
            DiscEquilibriumFactor(
                poses[d],
                poses[prev_node] if prev_node is not None else None,
                poses[next_node] if next_node is not None else None,
                tension_key,
                external.get(d),
                node_wrenches[d],
                layout.holes_at(d),
                layout.holes_at(prev_node) if prev_node is not None else None,
                layout.holes_at(next_node) if next_node is not None else None,
                layout.sigma_D,
            )
        )

    interior = {k: node_wrenches[k] for k in range(1, spec.K) if k in node_wrenches}
    add_stress_transport(graph, spec, poses, stresses, interior)
    graph.add_factor(BoundaryFactor(poses[0], stresses[0], base_wrench, spec, sign=+1))
    graph.add_factor(BoundaryFactor(poses[-1], stresses[-1], node_wrenches[spec.K], spec, sign=-1))
    graph.add_factor(PosePriorFactor(poses[0], base_pose_prior[0], base_pose_prior[1]))

    for measured, cov in tip_position_measurements or []:
        graph.add_factor(TipPositionFactor(poses[-1], measured, cov))

    init = graph.initial_values
    for key, pose in zip(poses, unstressed_poses(spec, base_pose_prior[0])):
        init[key] = pose
    for key in stresses:
        init[key] = np.zeros(6)
    init[tension_key] = measured_tensions.copy()
    init[base_wrench] = np.zeros(6)
    for k, key in external.items():
        init[key] = ext_means[k].copy()
    for k in disc_set:
        if k > 0:
            init[node_wrenches[k]] = np.zeros(6)
    # seed disc wrenches from the nominal geometry so warm solves start close
    for f in graph.factors:
        if isinstance(f, DiscEquilibriumFactor):
            init[f.keys[f.wrench_slot]] = f.raw_error(init) + init[f.keys[f.wrench_slot]]

    keys = TendonKeys(poses, stresses, tension_key, node_wrenches, external)
    return graph, keys
