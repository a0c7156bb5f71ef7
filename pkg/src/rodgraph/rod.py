"""Discrete Cosserat rod factors and the single-rod graph builder.

A rod with K+1 nodes carries pose, stress, and wrench variables per node.
Kinematics factors penalize the node-to-node pose increment against the
constitutive strain (midpoint or single-node rule), mechanics factors enforce
stress transport with discrete wrench jumps, and boundary factors tie the end
stresses to the end wrenches.

Wrench bookkeeping: the wrench at interior node k jumps the stress inside
mechanics factor k-1, while the tip wrench enters only through the tip
boundary factor.  Node-0 wrenches are reactions absorbed by the mount and do
not jump the stress.  This makes the chain exactly consistent with a
fine-grained shooting solution of the same loading.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import se3
from .graph import (
    ConfigurationError,
    Factor,
    FactorGraph,
    PosePriorFactor,
    Values,
    VariableKey,
    VectorPriorFactor,
    register_batch_kernel,
)
from .se3 import Pose

STRAIGHT_STRAIN = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])


def stiffness_matrix(radius: float, elastic_modulus: float, poisson_ratio: float = 0.3) -> np.ndarray:
    """diag(EI, EI, GJ, GA, GA, EA) for a solid circular cross-section."""
    shear_modulus = elastic_modulus / (2.0 * (1.0 + poisson_ratio))
    area = np.pi * radius**2
    second_moment = np.pi * radius**4 / 4.0
    polar = 2.0 * second_moment
    return np.diag(
        [
            elastic_modulus * second_moment,
            elastic_modulus * second_moment,
            shear_modulus * polar,
            shear_modulus * area,
            shear_modulus * area,
            elastic_modulus * area,
        ]
    )


@dataclass
class RodSpec:
    """Material, geometry, and noise description of one rod."""

    length: float
    num_nodes: int  # K + 1
    stiffness: np.ndarray
    nominal_strain: np.ndarray = field(default_factory=lambda: STRAIGHT_STRAIN.copy())
    sigma_T: np.ndarray | None = None  # kinematics noise, defaults to (1e-4)^2 I ds
    sigma_S: np.ndarray | None = None  # mechanics noise, defaults to (1e-4)^2 I
    sigma_B: np.ndarray | None = None  # boundary noise, defaults to (1e-4)^2 I

    def __post_init__(self):
        self.stiffness = np.asarray(self.stiffness, dtype=float)
        self.nominal_strain = np.asarray(self.nominal_strain, dtype=float)
        if self.num_nodes < 2:
            raise ConfigurationError("a rod needs at least two nodes")
        if self.length <= 0:
            raise ConfigurationError("rod length must be positive")
        try:
            scipy.linalg.cholesky(self.stiffness)
        except scipy.linalg.LinAlgError as exc:
            raise ConfigurationError("stiffness matrix must be SPD") from exc
        if self.nominal_strain.shape not in ((6,), (self.num_nodes - 1, 6)):
            raise ConfigurationError("nominal_strain must be (6,) or (K, 6)")
        if self.sigma_T is None:
            self.sigma_T = (1e-4) ** 2 * self.delta_s * np.eye(6)
        if self.sigma_S is None:
            # ~1e-4 N slack on O(1) N internal forces: far below benchmark
            # precision, and keeps warm-started dogleg steps inside the
            # quadratic model's validity radius
            self.sigma_S = (1e-4) ** 2 * np.eye(6)
        if self.sigma_B is None:
            # matches sigma_S: boundary equality to ~1e-4 N; much tighter
            # values push the normal equations past double precision once
            # ~1 N^2 inference priors enter the same graph
            self.sigma_B = (1e-4) ** 2 * np.eye(6)
        self.stiffness_inv = np.linalg.inv(self.stiffness)

    @property
    def K(self) -> int:
        return self.num_nodes - 1

    @property
    def delta_s(self) -> float:
        return self.length / (self.num_nodes - 1)

    def interval_strain(self, k: int) -> np.ndarray:
        if self.nominal_strain.ndim == 1:
            return self.nominal_strain
        return self.nominal_strain[k]

    def with_nodes(self, num_nodes: int) -> "RodSpec":
        strain = self.nominal_strain
        if strain.ndim == 2:
            raise ConfigurationError("cannot resample per-interval nominal strain")
        return RodSpec(self.length, num_nodes, self.stiffness, strain.copy())


def default_rod_spec(
    length: float = 0.2,
    num_nodes: int = 11,
    radius: float = 5e-4,
    elastic_modulus: float = 75e9,
    poisson_ratio: float = 0.3,
) -> RodSpec:
    """Representative nitinol-scale rod used throughout the benchmarks."""
    return RodSpec(length, num_nodes, stiffness_matrix(radius, elastic_modulus, poisson_ratio))


# -- factors -----------------------------------------------------------------


class MidpointKinematicsFactor(Factor):
    """e = ds*(0.5 Kinv (S_k + S_k1) + eps_bar) - log(T_k^-1 T_k1)."""

    def __init__(self, pose_k, pose_k1, stress_k, stress_k1, spec: RodSpec, k: int):
        super().__init__([pose_k, pose_k1, stress_k, stress_k1], spec.sigma_T)
        ds = spec.delta_s
        self.ds_half_kinv = 0.5 * ds * spec.stiffness_inv
        self.ds_strain = ds * spec.interval_strain(k)

    def _strain_term(self, values):
        s_sum = values[self.keys[2]] + values[self.keys[3]]
        return self.ds_half_kinv @ s_sum + self.ds_strain

    def raw_error(self, values: Values) -> np.ndarray:
        rel = values[self.keys[0]].inverse().compose(values[self.keys[1]])
        return self._strain_term(values) - se3.log_se3(rel)

    def raw_error_and_jacobians(self, values: Values):
        rel = values[self.keys[0]].inverse().compose(values[self.keys[1]])
        d = se3.log_se3(rel)
        err = self._strain_term(values) - d
        j_pose_k = se3.left_jacobian_inv(d)
        j_pose_k1 = -se3.right_jacobian_inv(d)
        return err, [j_pose_k, j_pose_k1, self.ds_half_kinv, self.ds_half_kinv]


class EulerKinematicsFactor(Factor):
    """Single-node strain rule variant, e = ds*(Kinv S_k + eps_bar) - log(...)."""

    def __init__(self, pose_k, pose_k1, stress_k, spec: RodSpec, k: int):
        super().__init__([pose_k, pose_k1, stress_k], spec.sigma_T)
        ds = spec.delta_s
        self.ds_kinv = ds * spec.stiffness_inv
        self.ds_strain = ds * spec.interval_strain(k)

    def raw_error(self, values: Values) -> np.ndarray:
        rel = values[self.keys[0]].inverse().compose(values[self.keys[1]])
        return self.ds_kinv @ values[self.keys[2]] + self.ds_strain - se3.log_se3(rel)

    def raw_error_and_jacobians(self, values: Values):
        rel = values[self.keys[0]].inverse().compose(values[self.keys[1]])
        d = se3.log_se3(rel)
        err = self.ds_kinv @ values[self.keys[2]] + self.ds_strain - d
        return err, [se3.left_jacobian_inv(d), -se3.right_jacobian_inv(d), self.ds_kinv]


def _collection_matrix(transported: np.ndarray) -> np.ndarray:
    """A = [[w^, v^], [v^, 0]] built from a transported stress (w, v)."""
    w = se3.hat3(transported[..., :3])
    v = se3.hat3(transported[..., 3:])
    out = np.zeros(transported.shape[:-1] + (6, 6))
    out[..., :3, :3] = w
    out[..., :3, 3:] = v
    out[..., 3:, :3] = v
    return out


class MechanicsFactor(Factor):
    """e = Ad^T(T_k^-1 T_k1) S_k - Rot^T(T_k1) F_k1 - S_k1.

    The wrench key is omitted for the tip-adjacent interval, where the tip
    wrench is accounted for by the boundary factor instead.
    """

    def __init__(self, pose_k, pose_k1, stress_k, stress_k1, wrench_k1, spec: RodSpec):
        keys = [pose_k, pose_k1, stress_k, stress_k1]
        self.has_wrench = wrench_k1 is not None
        if self.has_wrench:
            keys.append(wrench_k1)
        super().__init__(keys, spec.sigma_S)

    def raw_error(self, values: Values) -> np.ndarray:
        pose_k, pose_k1 = values[self.keys[0]], values[self.keys[1]]
        rel = pose_k.inverse().compose(pose_k1)
        err = se3.adjoint(rel).T @ values[self.keys[2]] - values[self.keys[3]]
        if self.has_wrench:
            err = err - se3.rotate_wrench(pose_k1.rotation.T, values[self.keys[4]])
        return err

    def raw_error_and_jacobians(self, values: Values):
        pose_k, pose_k1 = values[self.keys[0]], values[self.keys[1]]
        rel = pose_k.inverse().compose(pose_k1)
        ad_t = se3.adjoint(rel).T
        transported = ad_t @ values[self.keys[2]]
        err = transported - values[self.keys[3]]
        collect = _collection_matrix(transported)
        j_pose_k = -collect @ se3.adjoint(rel.inverse())
        j_pose_k1 = collect.copy()
        jacs = [j_pose_k, j_pose_k1, ad_t, -np.eye(6)]
        if self.has_wrench:
            rot_t = pose_k1.rotation.T
            wrench = values[self.keys[4]]
            body = se3.rotate_wrench(rot_t, wrench)
            err = err - body
            j_pose_k1[:3, :3] -= se3.hat3(body[:3])
            j_pose_k1[3:, :3] -= se3.hat3(body[3:])
            j_wrench = np.zeros((6, 6))
            j_wrench[:3, :3] = -rot_t
            j_wrench[3:, 3:] = -rot_t
            jacs.append(j_wrench)
        return err, jacs


class StressTransportFactor(MechanicsFactor):
    """Mechanics factor for the interval whose far node carries no wrench."""

    def __init__(self, pose_k, pose_k1, stress_k, stress_k1, spec: RodSpec):
        super().__init__(pose_k, pose_k1, stress_k, stress_k1, None, spec)


class BoundaryFactor(Factor):
    """e = S + sign * Rot^T(T) F; sign +1 at the base, -1 at the tip."""

    def __init__(self, pose_key, stress_key, wrench_key, spec_or_cov, sign: int):
        cov = spec_or_cov.sigma_B if isinstance(spec_or_cov, RodSpec) else spec_or_cov
        super().__init__([pose_key, stress_key, wrench_key], cov)
        self.sign = float(sign)

    def raw_error(self, values: Values) -> np.ndarray:
        rot_t = values[self.keys[0]].rotation.T
        return values[self.keys[1]] + self.sign * se3.rotate_wrench(rot_t, values[self.keys[2]])

    def raw_error_and_jacobians(self, values: Values):
        rot_t = values[self.keys[0]].rotation.T
        wrench = values[self.keys[2]]
        body = se3.rotate_wrench(rot_t, wrench)
        err = values[self.keys[1]] + self.sign * body
        j_pose = np.zeros((6, 6))
        j_pose[:3, :3] = self.sign * se3.hat3(body[:3])
        j_pose[3:, :3] = self.sign * se3.hat3(body[3:])
        j_wrench = np.zeros((6, 6))
        j_wrench[:3, :3] = self.sign * rot_t
        j_wrench[3:, 3:] = self.sign * rot_t
        return err, [j_pose, np.eye(6), j_wrench]


# -- batched kernels for the homogeneous chain factors ------------------------


def _stack_poses(factors, values, slot):
    rot = np.stack([values[f.keys[slot]].rotation for f in factors])
    tr = np.stack([values[f.keys[slot]].translation for f in factors])
    return rot, tr


def _stack_vectors(factors, values, slot):
    return np.stack([values[f.keys[slot]] for f in factors])


def _relative(rot_k, tr_k, rot_k1, tr_k1):
    rot_kt = np.swapaxes(rot_k, -1, -2)
    rel_rot = rot_kt @ rot_k1
    rel_tr = (rot_kt @ (tr_k1 - tr_k)[..., None])[..., 0]
    return Pose(rel_rot, rel_tr)


def _kin_mid_residual(factors, values):
    rot_k, tr_k = _stack_poses(factors, values, 0)
    rot_k1, tr_k1 = _stack_poses(factors, values, 1)
    s_sum = _stack_vectors(factors, values, 2) + _stack_vectors(factors, values, 3)
    d = se3.log_se3(_relative(rot_k, tr_k, rot_k1, tr_k1))
    dhk = np.stack([f.ds_half_kinv for f in factors])
    ds_strain = np.stack([f.ds_strain for f in factors])
    return np.einsum("bij,bj->bi", dhk, s_sum) + ds_strain - d


def _kin_mid_linearize(factors, values):
    rot_k, tr_k = _stack_poses(factors, values, 0)
    rot_k1, tr_k1 = _stack_poses(factors, values, 1)
    s_sum = _stack_vectors(factors, values, 2) + _stack_vectors(factors, values, 3)
    d = se3.log_se3(_relative(rot_k, tr_k, rot_k1, tr_k1))
    dhk = np.stack([f.ds_half_kinv for f in factors])
    ds_strain = np.stack([f.ds_strain for f in factors])
    res = np.einsum("bij,bj->bi", dhk, s_sum) + ds_strain - d
    return res, [se3.left_jacobian_inv(d), -se3.right_jacobian_inv(d), dhk, dhk]


def _kin_euler_residual(factors, values):
    rot_k, tr_k = _stack_poses(factors, values, 0)
    rot_k1, tr_k1 = _stack_poses(factors, values, 1)
    s_k = _stack_vectors(factors, values, 2)
    d = se3.log_se3(_relative(rot_k, tr_k, rot_k1, tr_k1))
    dk = np.stack([f.ds_kinv for f in factors])
    ds_strain = np.stack([f.ds_strain for f in factors])
    return np.einsum("bij,bj->bi", dk, s_k) + ds_strain - d


def _kin_euler_linearize(factors, values):
    rot_k, tr_k = _stack_poses(factors, values, 0)
    rot_k1, tr_k1 = _stack_poses(factors, values, 1)
    s_k = _stack_vectors(factors, values, 2)
    d = se3.log_se3(_relative(rot_k, tr_k, rot_k1, tr_k1))
    dk = np.stack([f.ds_kinv for f in factors])
    ds_strain = np.stack([f.ds_strain for f in factors])
    res = np.einsum("bij,bj->bi", dk, s_k) + ds_strain - d
    return res, [se3.left_jacobian_inv(d), -se3.right_jacobian_inv(d), dk]


def _mech_core(factors, values):
    rot_k, tr_k = _stack_poses(factors, values, 0)
    rot_k1, tr_k1 = _stack_poses(factors, values, 1)
    s_k = _stack_vectors(factors, values, 2)
    s_k1 = _stack_vectors(factors, values, 3)
    wrench = _stack_vectors(factors, values, 4)
    rel = _relative(rot_k, tr_k, rot_k1, tr_k1)
    ad_t = np.swapaxes(se3.adjoint(rel), -1, -2)
    transported = np.einsum("bij,bj->bi", ad_t, s_k)
    rot_k1t = np.swapaxes(rot_k1, -1, -2)
    body = se3.rotate_wrench(rot_k1t, wrench)
    res = transported - s_k1 - body
    return rel, ad_t, transported, rot_k1t, body, res


def _mech_residual(factors, values):
    return _mech_core(factors, values)[-1]


def _mech_linearize(factors, values):
    rel, ad_t, transported, rot_k1t, body, res = _mech_core(factors, values)
    b = len(factors)
    collect = _collection_matrix(transported)
    j_pose_k = -collect @ se3.adjoint(rel.inverse())
    j_pose_k1 = collect.copy()
    j_pose_k1[:, :3, :3] -= se3.hat3(body[:, :3])
    j_pose_k1[:, 3:, :3] -= se3.hat3(body[:, 3:])
    j_sk1 = np.broadcast_to(-np.eye(6), (b, 6, 6))
    j_wrench = np.zeros((b, 6, 6))
    j_wrench[:, :3, :3] = -rot_k1t
    j_wrench[:, 3:, 3:] = -rot_k1t
    return res, [j_pose_k, j_pose_k1, ad_t, j_sk1, j_wrench]


def _transport_core(factors, values):
    rot_k, tr_k = _stack_poses(factors, values, 0)
    rot_k1, tr_k1 = _stack_poses(factors, values, 1)
    s_k = _stack_vectors(factors, values, 2)
    s_k1 = _stack_vectors(factors, values, 3)
    rel = _relative(rot_k, tr_k, rot_k1, tr_k1)
    ad_t = np.swapaxes(se3.adjoint(rel), -1, -2)
    transported = np.einsum("bij,bj->bi", ad_t, s_k)
    return rel, ad_t, transported, transported - s_k1


def _transport_residual(factors, values):
    return _transport_core(factors, values)[-1]


def _transport_linearize(factors, values):
    rel, ad_t, transported, res = _transport_core(factors, values)
    collect = _collection_matrix(transported)
    j_pose_k = -collect @ se3.adjoint(rel.inverse())
    j_sk1 = np.broadcast_to(-np.eye(6), (len(factors), 6, 6))
    return res, [j_pose_k, collect, ad_t, j_sk1]


register_batch_kernel(MidpointKinematicsFactor, _kin_mid_residual, _kin_mid_linearize)
register_batch_kernel(StressTransportFactor, _transport_residual, _transport_linearize)
register_batch_kernel(EulerKinematicsFactor, _kin_euler_residual, _kin_euler_linearize)
register_batch_kernel(MechanicsFactor, _mech_residual, _mech_linearize)


# -- graph builder -------------------------------------------------------------


@dataclass
class RodKeys:
    poses: list[VariableKey]
    stresses: list[VariableKey]
    wrenches: list[VariableKey]


DEFAULT_BASE_POSE_SIGMA = 1e-6
DEFAULT_WRENCH_PRIOR_SIGMA = 1e-6


def add_rod_chain(graph: FactorGraph, spec: RodSpec, strain_rule: str, prefix: str = "rod"):
    """Add pose/stress variables and the K kinematics factors of one rod."""
    if strain_rule not in ("midpoint", "euler"):
        raise ConfigurationError(f"unknown strain rule {strain_rule!r}")
    poses = [graph.add_pose_variable(f"{prefix}.T{k}") for k in range(spec.num_nodes)]
    stresses = [graph.add_vector_variable(6, f"{prefix}.S{k}") for k in range(spec.num_nodes)]
    for k in range(spec.K):
        if strain_rule == "midpoint":
            graph.add_factor(
                MidpointKinematicsFactor(
                    poses[k], poses[k + 1], stresses[k], stresses[k + 1], spec, k
                )
            )
        else:
            graph.add_factor(
                EulerKinematicsFactor(poses[k], poses[k + 1], stresses[k], spec, k)
            )
    return poses, stresses


def add_stress_transport(
    graph: FactorGraph,
    spec: RodSpec,
    poses: list[VariableKey],
    stresses: list[VariableKey],
    node_wrench_keys: dict[int, VariableKey],
):
    """Add the K mechanics factors; node k's wrench (1 <= k <= K-1) jumps factor k-1."""
    for k in range(spec.K):
        wrench_key = node_wrench_keys.get(k + 1) if (k + 1) <= spec.K - 1 else None
        if wrench_key is None:
            graph.add_factor(
                StressTransportFactor(poses[k], poses[k + 1], stresses[k], stresses[k + 1], spec)
            )
        else:
            graph.add_factor(
                MechanicsFactor(poses[k], poses[k + 1], stresses[k], stresses[k + 1], wrench_key, spec)
            )


def unstressed_poses(spec: RodSpec, base_pose: Pose) -> list[Pose]:
    poses = [base_pose]
    for k in range(spec.K):
        poses.append(poses[-1].compose(se3.exp_se3(spec.delta_s * spec.interval_strain(k))))
    return poses


def build_rod_graph(
    spec: RodSpec,
    base_pose_prior: tuple[Pose, np.ndarray] | None = None,
    wrench_priors: dict[int, tuple[np.ndarray, np.ndarray]] | None = None,
    strain_rule: str = "midpoint",
) -> tuple[FactorGraph, RodKeys]:
    """Single-rod graph with a base pose prior and per-node wrench priors.

    wrench_priors maps node index (1..K) to (mean, covariance); unspecified
    nodes get a tight zero-mean prior.  The base wrench variable is free and
    is determined by the base boundary factor.
    """
    if base_pose_prior is None:
        base_pose_prior = (Pose.identity(), DEFAULT_BASE_POSE_SIGMA**2 * np.eye(6))
    wrench_priors = dict(wrench_priors or {})

    graph = FactorGraph()
    poses, stresses = add_rod_chain(graph, spec, strain_rule)
    wrenches = [graph.add_vector_variable(6, f"rod.F{k}") for k in range(spec.num_nodes)]

    add_stress_transport(graph, spec, poses, stresses, {k: wrenches[k] for k in range(1, spec.K)})
    graph.add_factor(BoundaryFactor(poses[0], stresses[0], wrenches[0], spec, sign=+1))
    graph.add_factor(BoundaryFactor(poses[-1], stresses[-1], wrenches[-1], spec, sign=-1))
    graph.add_factor(PosePriorFactor(poses[0], base_pose_prior[0], base_pose_prior[1]))

    default_cov = DEFAULT_WRENCH_PRIOR_SIGMA**2 * np.eye(6)
    means = {}
    for k in range(1, spec.num_nodes):
        mean, cov = wrench_priors.get(k, (np.zeros(6), default_cov))
        means[k] = np.asarray(mean, dtype=float)
        graph.add_factor(VectorPriorFactor(wrenches[k], means[k], cov))

    init = graph.initial_values
    for key, pose in zip(poses, unstressed_poses(spec, base_pose_prior[0])):
        init[key] = pose
    for key in stresses:
        init[key] = np.zeros(6)
    init[wrenches[0]] = np.zeros(6)
    for k in range(1, spec.num_nodes):
        init[wrenches[k]] = means[k]

    return graph, RodKeys(poses, stresses, wrenches)


def lump_distributed_wrench(spec: RodSpec, density) -> np.ndarray:
    """Per-node lumped wrenches w(s_k) * ds with trapezoid end weights.

    density(s) returns the distributed wrench (N, N*m per meter) at arclength
    s in world axes.  The node-0 lump is carried by the mount and dropped.
    """
    out = np.zeros((spec.num_nodes, 6))
    for k in range(spec.num_nodes):
        s = k * spec.delta_s
        weight = spec.delta_s if 0 < k < spec.K else 0.5 * spec.delta_s
        out[k] = weight * np.asarray(density(s), dtype=float)
    out[0] = 0.0
    return out
