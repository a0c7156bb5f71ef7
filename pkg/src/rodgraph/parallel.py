"""Parallel continuum robot graph: rods joined to a rigid platform.

Each of the M rods is a full Cosserat chain whose base is actuated
vertically.  Pose-constraint factors tie the rod tips to fixed attachment
offsets on the platform, one wrench-balance factor sums the transported tip
stresses against the external platform load, and per-rod displacement/effort
measurements inform the base states.
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
    BoundaryFactor,
    RodSpec,
    add_rod_chain,
    add_stress_transport,
    default_rod_spec,
    unstressed_poses,
)
from .se3 import Pose


@dataclass
class PlatformSpec:
    """Geometry, noise, and rod description of one platform robot."""

    rod_spec: RodSpec
    base_poses: list[Pose]  # world frame at zero insertion
    tip_offsets: list[Pose]  # platform frame -> attachment frame
    platform_nominal: Pose
    sigma_Tp: np.ndarray | None = None  # platform pose constraint noise
    sigma_Fp: np.ndarray | None = None  # wrench balance noise
    sigma_q: float = 1e-4  # base displacement measurement noise, meters
    sigma_z: float = 0.02  # base effort measurement noise, newtons
    base_xy_sigma: float = 1e-6  # clamped base: x, y, rotation
    base_z_sigma: float = 1e-2  # actuated direction, informed by measurement

    def __post_init__(self):
        if len(self.base_poses) != len(self.tip_offsets):
            raise ConfigurationError("need one tip offset per rod")
        if len(self.base_poses) < 3:
            raise ConfigurationError("a constrained platform needs at least 3 rods")
        if self.sigma_Tp is None:
            self.sigma_Tp = (1e-5) ** 2 * np.eye(6)
        if self.sigma_Fp is None:
            self.sigma_Fp = (1e-4) ** 2 * np.eye(6)

    @property
    def rod_count(self) -> int:
        return len(self.base_poses)

    def base_prior_covariance(self) -> np.ndarray:
        # tight in rotation and x, y; loose along the actuated world z, which
        # maps to the base body axes through the (upright-ish) base rotation
        return np.diag(
            [self.base_xy_sigma**2] * 3
            + [self.base_xy_sigma**2, self.base_xy_sigma**2, self.base_z_sigma**2]
        )


def _chord_frame(direction: np.ndarray) -> np.ndarray:
    """Rotation whose body z axis points along `direction`."""
    z = direction / np.linalg.norm(direction)
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def default_hexapod(
    rod_length: float = 0.25,
    num_nodes: int = 21,
    radius: float = 5e-4,
    circle_radius: float = 0.05,
    half_split: float = 15.0,
) -> PlatformSpec:
    """Six-rod Stewart-pattern platform with straight rods at nominal."""
    rod = default_rod_spec(length=rod_length, num_nodes=num_nodes, radius=radius)
    base_angles = np.deg2rad(
        np.array([-half_split, half_split, 120 - half_split, 120 + half_split, 240 - half_split, 240 + half_split])
    )
    plat_angles = base_angles + np.deg2rad(np.array([60, -60, 60, -60, 60, -60]))
    lateral = 2 * circle_radius * np.sin(np.deg2rad(60) / 2)
    height = np.sqrt(rod_length**2 - lateral**2)
    platform_nominal = Pose(np.eye(3), np.array([0.0, 0.0, height]))

    base_poses, tip_offsets = [], []
    for a, b in zip(base_angles, plat_angles):
        base_pos = circle_radius * np.array([np.cos(a), np.sin(a), 0.0])
        plat_pos = circle_radius * np.array([np.cos(b), np.sin(b), 0.0]) + platform_nominal.translation
        rot = _chord_frame(plat_pos - base_pos)
        base_poses.append(Pose(rot, base_pos))
        tip_nominal = Pose(rot, plat_pos)
        tip_offsets.append(platform_nominal.inverse().compose(tip_nominal))
    return PlatformSpec(rod, base_poses, tip_offsets, platform_nominal)


class PlatformPoseFactor(Factor):
    """e = log(offset^-1 T_p^-1 T_tip): rigid attachment of a rod tip."""

    def __init__(self, platform_key, tip_key, offset: Pose, covariance):
        super().__init__([platform_key, tip_key], covariance)
        self.offset_inverse = offset.inverse()
        self._ad_offset_inv = se3.adjoint(self.offset_inverse)

    def _error_pose(self, values):
        return self.offset_inverse.compose(
            values[self.keys[0]].inverse().compose(values[self.keys[1]])
        )

    def raw_error(self, values: Values) -> np.ndarray:
        return se3.log_se3(self._error_pose(values))

    def raw_error_and_jacobians(self, values: Values):
        err = se3.log_se3(self._error_pose(values))
        j_tip = se3.right_jacobian_inv(err)
        j_platform = -se3.left_jacobian_inv(err) @ self._ad_offset_inv
        return err, [j_platform, j_tip]


class PlatformWrenchBalanceFactor(Factor):
    """e = sum_i Ad^T(T_tip_i^-1 T_p) S_tip_i - Rot^T(T_p) F_p."""

    def __init__(self, platform_key, wrench_key, tip_keys, tip_stress_keys, covariance):
        keys = [platform_key, wrench_key]
        self.rod_count = len(tip_keys)
        for tk, sk in zip(tip_keys, tip_stress_keys):
            keys.extend([tk, sk])
        super().__init__(keys, covariance)

    def raw_error(self, values: Values) -> np.ndarray:
        platform = values[self.keys[0]]
        total = -se3.rotate_wrench(platform.rotation.T, values[self.keys[1]])
        for i in range(self.rod_count):
            tip = values[self.keys[2 + 2 * i]]
            stress = values[self.keys[3 + 2 * i]]
            rel = tip.inverse().compose(platform)
            total = total + se3.adjoint(rel).T @ stress
        return total

    def raw_error_and_jacobians(self, values: Values):
        platform = values[self.keys[0]]
        rot_t = platform.rotation.T
        body = se3.rotate_wrench(rot_t, values[self.keys[1]])
        err = -body.copy()
        j_platform = np.zeros((6, 6))
        j_platform[:3, :3] -= se3.hat3(body[:3])
        j_platform[3:, :3] -= se3.hat3(body[3:])
        j_wrench = np.zeros((6, 6))
        j_wrench[:3, :3] = -rot_t
        j_wrench[3:, 3:] = -rot_t
        jacs = [j_platform, j_wrench]
        for i in range(self.rod_count):
            tip = values[self.keys[2 + 2 * i]]
            stress = values[self.keys[3 + 2 * i]]
            rel = tip.inverse().compose(platform)
            ad_t = se3.adjoint(rel).T
            transported = ad_t @ stress
            collect = np.zeros((6, 6))
            collect[:3, :3] = se3.hat3(transported[:3])
            collect[:3, 3:] = se3.hat3(transported[3:])
            collect[3:, :3] = se3.hat3(transported[3:])
            err = err + transported
            j_platform += collect
            jacs.append(-collect @ se3.adjoint(rel.inverse()))
            jacs.append(ad_t)
        return err, jacs


class BaseDisplacementFactor(Factor):
    """e = [0 0 1] Pos(T_base) - measured insertion."""

    def __init__(self, base_key, measured: float, sigma: float):
        super().__init__([base_key], np.array([[sigma**2]]))
        self.measured = float(measured)

    def raw_error(self, values: Values) -> np.ndarray:
        return np.array([values[self.keys[0]].translation[2] - self.measured])

    def raw_error_and_jacobians(self, values: Values):
        jac = np.zeros((1, 6))
        jac[0, 3:] = values[self.keys[0]].rotation[2, :]
        return self.raw_error(values), [jac]


class BaseEffortFactor(Factor):
    """e = [0 0 0 0 0 1] F_base - measured vertical effort."""

    def __init__(self, wrench_key, measured: float, sigma: float):
        super().__init__([wrench_key], np.array([[sigma**2]]))
        self.measured = float(measured)

    def raw_error(self, values: Values) -> np.ndarray:
        return np.array([values[self.keys[0]][5] - self.measured])

    def raw_error_and_jacobians(self, values: Values):
        jac = np.zeros((1, 6))
        jac[0, 5] = 1.0
        return self.raw_error(values), [jac]


@dataclass
class ParallelKeys:
    platform_pose: VariableKey
    platform_wrench: VariableKey
    rod_poses: list[list[VariableKey]]
    rod_stresses: list[list[VariableKey]]
    base_wrenches: list[VariableKey]
    tip_wrenches: list[VariableKey]

    @property
    def base_pose_keys(self) -> list[VariableKey]:
        return [poses[0] for poses in self.rod_poses]


def build_parallel_graph(
    platform: PlatformSpec,
    measured_insertions: np.ndarray,
    measured_efforts: np.ndarray | None = None,
    platform_wrench_prior: tuple[np.ndarray, np.ndarray] | None = None,
    strain_rule: str = "midpoint",
) -> tuple[FactorGraph, ParallelKeys]:
    """M rod graphs + platform pose/wrench variables and coupling factors.

    Parallel rods carry no distributed loads, so interior wrench variables
    are omitted; each rod keeps free base/tip wrenches determined by its
    boundary factors.  The platform wrench prior covariance selects between
    known-load and load-inference modes.
    """
    measured_insertions = np.asarray(measured_insertions, dtype=float)
    if measured_insertions.shape != (platform.rod_count,):
        raise ConfigurationError("one insertion measurement per rod required")
    if platform_wrench_prior is None:
        platform_wrench_prior = (np.zeros(6), np.diag([1e-6**2] * 3 + [1.0] * 3))

    spec = platform.rod_spec
    graph = FactorGraph()
    platform_key = graph.add_pose_variable("platform.T")
    wrench_key = graph.add_vector_variable(6, "platform.F")

    keys = ParallelKeys(platform_key, wrench_key, [], [], [], [])
    base_cov = platform.base_prior_covariance()
    for i in range(platform.rod_count):
        poses, stresses = add_rod_chain(graph, spec, strain_rule, prefix=f"rod{i}")
        base_wrench = graph.add_vector_variable(6, f"rod{i}.F0")
        tip_wrench = graph.add_vector_variable(6, f"rod{i}.FK")
        add_stress_transport(graph, spec, poses, stresses, {})
        graph.add_factor(BoundaryFactor(poses[0], stresses[0], base_wrench, spec, sign=+1))
        graph.add_factor(BoundaryFactor(poses[-1], stresses[-1], tip_wrench, spec, sign=-1))
        graph.add_factor(PosePriorFactor(poses[0], platform.base_poses[i], base_cov))
        graph.add_factor(
            BaseDisplacementFactor(poses[0], measured_insertions[i], platform.sigma_q)
        )
        if measured_efforts is not None:
            graph.add_factor(
                BaseEffortFactor(base_wrench, measured_efforts[i], platform.sigma_z)
            )
        graph.add_factor(
            PlatformPoseFactor(platform_key, poses[-1], platform.tip_offsets[i], platform.sigma_Tp)
        )
        keys.rod_poses.append(poses)
        keys.rod_stresses.append(stresses)
        keys.base_wrenches.append(base_wrench)
        keys.tip_wrenches.append(tip_wrench)

    graph.add_factor(
        PlatformWrenchBalanceFactor(
            platform_key,
            wrench_key,
            [poses[-1] for poses in keys.rod_poses],
            [stresses[-1] for stresses in keys.rod_stresses],
            platform.sigma_Fp,
        )
    )
    graph.add_factor(
        VectorPriorFactor(wrench_key, platform_wrench_prior[0], platform_wrench_prior[1])
    )

    init = graph.initial_values
    mean_insertion = float(measured_insertions.mean())
    init[platform_key] = Pose(
        platform.platform_nominal.rotation.copy(),
        platform.platform_nominal.translation + np.array([0.0, 0.0, mean_insertion]),
    )
    init[wrench_key] = np.asarray(platform_wrench_prior[0], dtype=float).copy()
    for i in range(platform.rod_count):
        shifted = Pose(
            platform.base_poses[i].rotation.copy(),
            platform.base_poses[i].translation + np.array([0.0, 0.0, measured_insertions[i]]),
        )
        for key, pose in zip(keys.rod_poses[i], unstressed_poses(spec, shifted)):
            init[key] = pose
        for key in keys.rod_stresses[i]:
            init[key] = np.zeros(6)
        init[keys.base_wrenches[i]] = np.zeros(6)
        init[keys.tip_wrenches[i]] = np.zeros(6)
    return graph, keys
