"""Serial two-tube robot: rod graphs chained base-to-tip.

The outer precurved tube is anchored by a base pose prior carrying the
rotary-actuation uncertainty; the inner straight tube hangs off the outer
tip through a link factor with its own actuation covariance.  Insertion
enters through the node spacing of each segment's chain.  The junction
transfers the full wrench: one shared variable closes both tubes' boundary
factors, so the transmitted stress is continuous across the interface.
"""

from __future__ import annotations

from dataclasses import dataclass, field

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
    BoundaryFactor,
    RodSpec,
    add_rod_chain,
    add_stress_transport,
    stiffness_matrix,
    unstressed_poses,
)
from .se3 import Pose, rotz


@dataclass
class TubeSegment:
    max_length: float
    num_nodes: int
    stiffness: np.ndarray
    precurvature: float = 0.0  # 1/m, bending about body x

    def rod_spec(self, insertion: float) -> RodSpec:
        if not 0.0 < insertion <= self.max_length + 1e-12:
            raise ConfigurationError("insertion must lie in (0, max_length]")
        strain = np.array([self.precurvature, 0.0, 0.0, 0.0, 0.0, 1.0])
        return RodSpec(insertion, self.num_nodes, self.stiffness, strain)


@dataclass
class SerialRobotSpec:
    segments: list[TubeSegment]
    mount_pose: Pose = field(default_factory=Pose.identity)
    base_pose_covariances: list[np.ndarray] | None = None  # actuation uncertainty

    def __post_init__(self):
        if not self.segments:
            raise ConfigurationError("need at least one tube segment")
        if self.base_pose_covariances is None:
            # rotary backlash dominates: looser about the tube axis
            cov = np.diag([1e-4, 1e-4, 4e-4, 1e-8, 1e-8, 1e-8])
            self.base_pose_covariances = [cov.copy() for _ in self.segments]


@dataclass
class SerialActuation:
    rotations: np.ndarray  # radians, per segment
    insertions: np.ndarray  # meters of exposed tube, per segment


def default_serial_robot() -> SerialRobotSpec:
    """Outer precurved tube (60 mm, 10 1/m) plus straight inner tube (40 mm)."""
    outer = TubeSegment(0.06, 11, stiffness_matrix(6e-4, 75e9), precurvature=10.0)
    inner = TubeSegment(0.04, 11, stiffness_matrix(4e-4, 75e9))
    return SerialRobotSpec([outer, inner])


class SerialLinkFactor(Factor):
    """e = log((T_tip_prev Rz(theta))^-1 T_base_next)."""

    def __init__(self, tip_key, base_key, theta: float, covariance):
        super().__init__([tip_key, base_key], covariance)
        self.rotation_offset = Pose(rotz(theta), np.zeros(3))
        self._ad_rot_inv = se3.adjoint(self.rotation_offset.inverse())

    def raw_error(self, values: Values) -> np.ndarray:
        joint = values[self.keys[0]].compose(self.rotation_offset)
        return se3.log_se3(joint.inverse().compose(values[self.keys[1]]))

    def raw_error_and_jacobians(self, values: Values):
        err = self.raw_error(values)
        j_base = se3.right_jacobian_inv(err)
        j_tip = -se3.left_jacobian_inv(err) @ self._ad_rot_inv
        return err, [j_tip, j_base]


@dataclass
class SerialKeys:
    segment_poses: list[list[VariableKey]]
    segment_stresses: list[list[VariableKey]]
    base_wrench: VariableKey
    junction_wrenches: list[VariableKey]
    tip_wrench: VariableKey

    @property
    def tip_pose(self) -> VariableKey:
        return self.segment_poses[-1][-1]


def build_serial_graph(
    spec: SerialRobotSpec,
    actuation: SerialActuation,
    tip_wrench_prior: tuple[np.ndarray, np.ndarray] | None = None,
    tip_position_measurements: list[tuple[np.ndarray, np.ndarray]] | None = None,
    strain_rule: str = "midpoint",
) -> tuple[FactorGraph, SerialKeys]:
    """Chained tube graphs with actuation priors and a shared junction wrench.

    Forward mode: tight tip_wrench_prior, no measurements.  Inverse mode:
    loose tip_wrench_prior plus tip position measurements.
    """
    from .tendon import TipPositionFactor

    rotations = np.asarray(actuation.rotations, dtype=float)
    insertions = np.asarray(actuation.insertions, dtype=float)
    if len(rotations) != len(spec.segments) or len(insertions) != len(spec.segments):
        raise ConfigurationError("actuation entries must match the segment count")
    if tip_wrench_prior is None:
        tip_wrench_prior = (np.zeros(6), (1e-6) ** 2 * np.eye(6))

    graph = FactorGraph()
    keys = SerialKeys([], [], None, [], None)
    rod_specs = [seg.rod_spec(ins) for seg, ins in zip(spec.segments, insertions)]

    prev_tip_pose_key = None
    prev_tip_stress_key = None
    for i, rod_spec in enumerate(rod_specs):
        poses, stresses = add_rod_chain(graph, rod_spec, strain_rule, prefix=f"tube{i}")
        add_stress_transport(graph, rod_spec, poses, stresses, {})
        keys.segment_poses.append(poses)
        keys.segment_stresses.append(stresses)
        if i == 0:
            base_mean = spec.mount_pose.compose(Pose(rotz(rotations[0]), np.zeros(3)))
            graph.add_factor(
                PosePriorFactor(poses[0], base_mean, spec.base_pose_covariances[0])
            )
            base_wrench = graph.add_vector_variable(6, "tube0.F0")
            graph.add_factor(
                BoundaryFactor(poses[0], stresses[0], base_wrench, rod_spec, sign=+1)
            )
            keys.base_wrench = base_wrench
        else:
            graph.add_factor(
                SerialLinkFactor(
                    prev_tip_pose_key, poses[0], rotations[i], spec.base_pose_covariances[i]
                )
            )
            # one junction wrench closes both boundary factors, making the
            # transmitted stress continuous across the interface
            junction = graph.add_vector_variable(6, f"junction{i}.W")
            prev_spec = rod_specs[i - 1]
            graph.add_factor(
                BoundaryFactor(prev_tip_pose_key, prev_tip_stress_key, junction, prev_spec, sign=+1)
            )
            graph.add_factor(BoundaryFactor(poses[0], stresses[0], junction, rod_spec, sign=+1))
            keys.junction_wrenches.append(junction)
        prev_tip_pose_key = poses[-1]
        prev_tip_stress_key = stresses[-1]

    tip_wrench = graph.add_vector_variable(6, "tip.F")
    graph.add_factor(
        BoundaryFactor(prev_tip_pose_key, prev_tip_stress_key, tip_wrench, rod_specs[-1], sign=-1)
    )
    graph.add_factor(VectorPriorFactor(tip_wrench, tip_wrench_prior[0], tip_wrench_prior[1]))
    keys.tip_wrench = tip_wrench

    for measured, cov in tip_position_measurements or []:
        graph.add_factor(TipPositionFactor(prev_tip_pose_key, measured, cov))

    init = graph.initial_values
    pose = spec.mount_pose.compose(Pose(rotz(rotations[0]), np.zeros(3)))
    for i, rod_spec in enumerate(rod_specs):
        if i > 0:
            pose = pose.compose(Pose(rotz(rotations[i]), np.zeros(3)))
        chain = unstressed_poses(rod_spec, pose)
        for key, value in zip(keys.segment_poses[i], chain):
            init[key] = value
        for key in keys.segment_stresses[i]:
            init[key] = np.zeros(6)
        pose = chain[-1]
    init[keys.base_wrench] = np.zeros(6)
    for key in keys.junction_wrenches:
        init[key] = np.zeros(6)
    init[keys.tip_wrench] = np.asarray(tip_wrench_prior[0], dtype=float).copy()
    return graph, keys
