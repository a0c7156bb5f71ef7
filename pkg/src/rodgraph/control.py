"""Marginal-based manipulator Jacobians and damped resolved-rates tracking.

The manipulator Jacobian is read straight out of the converged linearization:
with joint covariance blocks S_tq (tip twist vs actuation) and S_qq, the best
linear predictor of tip motion is J = S_tq @ inv(S_qq), expressed in tip body
coordinates.  A damped pseudoinverse of J drives the actuation toward pose or
position targets, and the tracking loop closes the estimation cycle against
the deterministic shooting simulator.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import oracle, se3
from .graph import (
    FactorGraph,
    MapSolution,
    VariableKey,
    joint_marginal,
    solve_map,
    warm_start,
)
from .rod import RodSpec
from .se3 import Pose
from .tendon import TendonLayout, build_tendon_graph


def linearized_state(graph: FactorGraph, values) -> MapSolution:
    """Wrap arbitrary values as a linearization point for marginal queries.

    Used to read manipulator Jacobians out of a measurement-free forward
    model evaluated at the current estimate: a graph whose measurements pin
    the tip would otherwise collapse the tip-actuation cross covariance.
    """
    system = graph.linearize(values)
    return MapSolution(values, system.cost, 0, True, float("nan"), "linearization", system)


class JacobianExtractionError(RuntimeError):
    def __init__(self, message, direction=None):
        super().__init__(message)
        self.direction = direction


@dataclass
class ManipulatorJacobian:
    """Body-frame tip twist per unit actuation change."""

    matrix: np.ndarray  # (6, n_actuation)
    tip_key: VariableKey
    actuation_keys: tuple[VariableKey, ...]


def extract_jacobian(
    graph: FactorGraph,
    solution: MapSolution,
    tip_key: VariableKey,
    actuation_keys,
    actuation_projections: dict[VariableKey, np.ndarray] | None = None,
    condition_limit: float = 1e12,
) -> ManipulatorJacobian:
    """J = S_tq @ inv(S_qq) from the joint marginal at the MAP linearization.

    actuation_projections optionally maps a key to a (r, dim) matrix whose
    rows pick the actuated combinations of that variable's tangent (e.g. the
    world-vertical translation direction of an actuated base pose).
    """
    actuation_keys = tuple(actuation_keys)
    marg = joint_marginal(graph, solution, [tip_key, *actuation_keys])
    total = marg.covariance.shape[0]
    blocks = []
    for key in actuation_keys:
        start = marg.offsets[key]
        if actuation_projections is not None and key in actuation_projections:
            proj = np.atleast_2d(np.asarray(actuation_projections[key], dtype=float))
        else:
            proj = np.eye(key.dim)
        wide = np.zeros((proj.shape[0], total))
        wide[:, start : start + key.dim] = proj
        blocks.append(wide)
    projection = np.vstack(blocks)
    tip_rows = marg.offsets[tip_key] + np.arange(6)
    sigma_tq = marg.covariance[tip_rows, :] @ projection.T
    sigma_qq = projection @ marg.covariance @ projection.T
    eigvals, eigvecs = np.linalg.eigh(sigma_qq)
    if eigvals[0] <= 0 or eigvals[-1] / eigvals[0] > condition_limit:
        direction = eigvecs[:, 0]
        worst = int(np.argmax(np.abs(direction)))
        raise JacobianExtractionError(
            f"actuation covariance is numerically singular along component {worst}",
            direction,
        )
    jac = np.linalg.solve(sigma_qq.T, sigma_tq.T).T
    return ManipulatorJacobian(jac, tip_key, actuation_keys)


def damped_step(
    jacobian: ManipulatorJacobian | np.ndarray,
    current_tip: Pose,
    target: Pose | np.ndarray,
    damping: float = 0.1,
    gain: float = 0.5,
    position_only: bool = True,
) -> np.ndarray:
    """Actuation increment dq = J^T (J J^T + lambda^2 I)^-1 * gain * twist.

    `damping` is relative to the Jacobian's largest singular value, so the
    same value behaves consistently across robots with different actuation
    units.
    """
    jac = jacobian.matrix if isinstance(jacobian, ManipulatorJacobian) else np.asarray(jacobian)
    if not isinstance(target, Pose):
        target = Pose(current_tip.rotation.copy(), np.asarray(target, dtype=float))
    xi = gain * se3.log_se3(current_tip.inverse().compose(target))
    if position_only:
        jac = jac[3:, :]
        xi = xi[3:]
    lam = damping * max(np.linalg.norm(jac, 2), 1e-300)
    gram = jac @ jac.T + lam**2 * np.eye(jac.shape[0])
    return jac.T @ np.linalg.solve(gram, xi)


# -- tendon robot tracking -----------------------------------------------------


@dataclass
class TendonTrackingConfig:
    spec: RodSpec
    layout: TendonLayout
    steps: int = 900
    seed: int = 0
    closed_loop: bool = True
    initial_tensions: np.ndarray | None = None
    tension_limit: float = 40.0
    gain: float = 0.5
    damping: float = 0.1
    sigma_tip: float = 0.5e-3  # tracker noise, meters
    sigma_tension: float = 0.01  # load-cell noise, newtons
    force_prior_sigma: float = 1.0  # tip-force inference prior, newtons
    oracle_coarsen: int = 3
    target_amplitude: float = 0.02
    target_period: int = 450
    # true tip force profile: callable(step) -> (3,) world force; default none
    true_tip_force: object = None


@dataclass
class TrackingLog:
    targets: np.ndarray
    commanded: np.ndarray
    measured_tip: np.ndarray
    estimated_tip: np.ndarray
    true_tip: np.ndarray
    estimated_force: np.ndarray
    true_force: np.ndarray
    force_sigma: np.ndarray
    solve_ms: np.ndarray
    solve_iterations: np.ndarray
    tracking_error: np.ndarray

    def rows(self):
        n = len(self.solve_ms)
        for t in range(n):
            yield {
                "step": t,
                **{f"target_{a}": self.targets[t, i] for i, a in enumerate("xyz")},
                **{f"q{i}": self.commanded[t, i] for i in range(self.commanded.shape[1])},
                **{f"tip_est_{a}": self.estimated_tip[t, i] for i, a in enumerate("xyz")},
                **{f"tip_true_{a}": self.true_tip[t, i] for i, a in enumerate("xyz")},
                **{f"force_est_{a}": self.estimated_force[t, i] for i, a in enumerate("xyz")},
                **{f"force_true_{a}": self.true_force[t, i] for i, a in enumerate("xyz")},
                **{f"force_sigma_{a}": self.force_sigma[t, i] for i, a in enumerate("xyz")},
                "tracking_error": self.tracking_error[t],
                "solve_ms": self.solve_ms[t],
                "solve_iterations": self.solve_iterations[t],
            }


def default_target_path(spec: RodSpec, amplitude: float, period: int, center=None):
    """Slow lateral circle starting at the initial tip position.

    Purely lateral targets keep the path inside the bending workspace; the
    axial direction is close to uncontrollable for a tendon robot.
    """
    center = np.array([0.0, 0.0, spec.length]) if center is None else np.asarray(center, float)

    def target(step: int) -> np.ndarray:
        phase = 2 * np.pi * step / period
        lateral = center[:2] + amplitude * np.array([np.cos(phase) - 1.0, np.sin(phase)])
        # first-order tip drop of a bending rod: z falls with lateral offset
        drop = (2.0 / 3.0) * float(lateral @ lateral) / spec.length
        return np.array([lateral[0], lateral[1], center[2] - drop])

    return target


def run_tendon_tracking(cfg: TendonTrackingConfig) -> TrackingLog:
    """Closed- or open-loop tracking against the shooting simulator.

    Per step: the oracle simulates the true robot under the commanded
    tensions and true tip force, noisy measurements are drawn, the factor
    graph is re-solved warm-started, the marginal Jacobian produces a damped
    resolved-rates tension update.
    """
    rng = np.random.default_rng(cfg.seed)
    spec, layout = cfg.spec, cfg.layout
    n = layout.tendon_count
    q_cmd = (
        np.full(n, 1.0) if cfg.initial_tensions is None else np.asarray(cfg.initial_tensions, float).copy()
    )
    # anchor the target path at the modeled initial tip so the whole path is
    # reachable, including its (slightly compressed) height
    start_graph, start_keys = build_tendon_graph(spec, layout, q_cmd)
    start_sol = solve_map(start_graph)
    target_fn = default_target_path(
        spec, cfg.target_amplitude, cfg.target_period,
        center=start_sol.values[start_keys.tip_pose].translation,
    )
    force_fn = cfg.true_tip_force or (lambda step: np.zeros(3))

    ospec, olayout, node_map = oracle.coarse_oracle_view(spec, layout, cfg.oracle_coarsen)
    tip_node = spec.K

    moment_sigma = 1e-6
    force_cov = np.diag(
        [moment_sigma**2] * 3 + [cfg.force_prior_sigma**2] * 3
    )

    logs = {name: [] for name in (
        "targets", "commanded", "measured_tip", "estimated_tip", "true_tip",
        "estimated_force", "true_force", "force_sigma", "solve_ms",
        "solve_iterations", "tracking_error")}

    previous: MapSolution | None = None
    oracle_warm = None
    for step in range(cfg.steps):
        true_force = np.asarray(force_fn(step), dtype=float)
        external = np.zeros((ospec.num_nodes, 6))
        external[-1, 3:] = true_force
        sim = oracle.shoot_tendon_bvp(
            q_cmd, external, ospec, olayout, warm=oracle_warm
        )
        if not sim.converged:
            raise oracle.OracleError(f"ground-truth simulation failed at step {step}")
        oracle_warm = sim
        true_tip = sim.curve.tip_position

        z_tip = true_tip + cfg.sigma_tip * rng.standard_normal(3)
        q_meas = np.maximum(q_cmd + cfg.sigma_tension * rng.standard_normal(n), 0.0)

        external_priors = {tip_node: (np.zeros(6), force_cov)} if cfg.closed_loop else None
        measurements = [(z_tip, cfg.sigma_tip**2 * np.eye(3))] if cfg.closed_loop else None
        graph, keys = build_tendon_graph(
            spec,
            layout,
            q_meas,
            external_priors=external_priors,
            tip_position_measurements=measurements,
        )
        init = warm_start(previous, graph) if previous is not None else graph.initial_values
        t0 = time.perf_counter()
        sol = solve_map(graph, init)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        if not sol.converged:
            raise RuntimeError(f"estimator failed to converge at step {step}: {sol.status}")
        previous = sol
        est_q = sol.values[keys.tensions]
        if np.any(est_q < -3.0 * np.sqrt(np.diag(layout.sigma_Q))):
            # the Gaussian model allows negative tension estimates; clamping
            # would bias the posterior, so surface them instead
            warnings.warn(
                f"estimated tension below -3 sigma at step {step}: {est_q}", RuntimeWarning
            )

        if cfg.closed_loop:
            forward_graph, forward_keys = build_tendon_graph(spec, layout, q_meas)
            forward_state = linearized_state(forward_graph, warm_start(sol, forward_graph))
            jac = extract_jacobian(
                forward_graph, forward_state, forward_keys.tip_pose, [forward_keys.tensions]
            )
        else:
            jac = extract_jacobian(graph, sol, keys.tip_pose, [keys.tensions])
        tip_est_pose = sol.values[keys.tip_pose]
        target = target_fn(step)
        dq = damped_step(jac, tip_est_pose, target, cfg.damping, cfg.gain)
        q_cmd = np.clip(q_cmd + dq, 0.0, cfg.tension_limit)

        if cfg.closed_loop:
            ext_key = keys.external_wrenches[tip_node]
            marg = joint_marginal(graph, sol, [ext_key])
            est_force = sol.values[ext_key][3:]
            sigma = np.sqrt(np.diag(marg.covariance)[3:])
        else:
            est_force = np.zeros(3)
            sigma = np.zeros(3)

        logs["targets"].append(target)
        logs["commanded"].append(q_cmd.copy())
        logs["measured_tip"].append(z_tip)
        logs["estimated_tip"].append(tip_est_pose.translation.copy())
        logs["true_tip"].append(true_tip.copy())
        logs["estimated_force"].append(est_force.copy())
        logs["true_force"].append(true_force)
        logs["force_sigma"].append(sigma)
        logs["solve_ms"].append(solve_ms)
        logs["solve_iterations"].append(sol.iterations)
        logs["tracking_error"].append(float(np.linalg.norm(true_tip - target)))

    return TrackingLog(**{k: np.asarray(v) for k, v in logs.items()})


def pulsing_force_profile(amplitude: float = 0.3, period: int = 150, axis_period: int = 400):
    """Tip force whose magnitude pulses smoothly and direction rotates."""

    def profile(step: int) -> np.ndarray:
        magnitude = amplitude * np.sin(np.pi * (step % period) / period) ** 2
        angle = 2 * np.pi * step / axis_period
        direction = np.array([np.cos(angle), np.sin(angle), 0.15 * np.sin(3 * angle)])
        return magnitude * direction / np.linalg.norm(direction)

    return profile


def constant_force_profile(force) -> object:
    force = np.asarray(force, dtype=float)
    return lambda step: force


@dataclass
class OpenLoopBenchmarkResult:
    tip_errors: np.ndarray  # per-step |map - oracle| tip distance, meters
    mean_error_fraction: float
    max_error_fraction: float
    solve_ms: np.ndarray
    failed_steps: int


def run_tendon_open_loop_benchmark(
    spec: RodSpec,
    layout: TendonLayout,
    tension_schedule: np.ndarray,
    force_fn,
    oracle_coarsen: int = 3,
    strain_rule: str = "midpoint",
) -> OpenLoopBenchmarkResult:
    """Forward-model accuracy: MAP tip vs deterministic BVP tip per step.

    Ground-truth tensions and tip forces are fed to both solvers; no backbone
    observations are used.
    """
    ospec, olayout, _ = oracle.coarse_oracle_view(spec, layout, oracle_coarsen)
    tip_node = spec.K
    errors = []
    solve_ms = []
    failed = 0
    previous = None
    oracle_warm = None
    for step, tensions in enumerate(tension_schedule):
        force = np.asarray(force_fn(step), dtype=float)
        external = np.zeros((ospec.num_nodes, 6))
        external[-1, 3:] = force
        sim = oracle.shoot_tendon_bvp(tensions, external, ospec, olayout, warm=oracle_warm)
        if not sim.converged:
            failed += 1
            continue
        oracle_warm = sim
        wrench = np.zeros(6)
        wrench[3:] = force
        graph, keys = build_tendon_graph(
            spec,
            layout,
            np.maximum(tensions, 0.0),
            external_priors={tip_node: (wrench, (1e-8) ** 2 * np.eye(6))},
            strain_rule=strain_rule,
        )
        init = warm_start(previous, graph) if previous is not None else graph.initial_values
        t0 = time.perf_counter()
        sol = solve_map(graph, init)
        solve_ms.append(1e3 * (time.perf_counter() - t0))
        if not sol.converged:
            failed += 1
            continue
        previous = sol
        errors.append(
            float(np.linalg.norm(sol.values[keys.tip_pose].translation - sim.curve.tip_position))
        )
    errors = np.asarray(errors)
    return OpenLoopBenchmarkResult(
        errors,
        float(errors.mean() / spec.length) if errors.size else np.nan,
        float(errors.max() / spec.length) if errors.size else np.nan,
        np.asarray(solve_ms),
        failed,
    )


# -- parallel robot tracking -----------------------------------------------------


@dataclass
class ParallelTrackingConfig:
    platform: object  # PlatformSpec
    steps: int = 900
    seed: int = 0
    oracle_nodes: int = 6  # load-free rods integrate exactly on a coarse grid
    gain: float = 0.5
    damping: float = 0.05
    sigma_insertion: float = 1e-4  # encoder noise, meters
    sigma_effort: float = 0.02  # load-cell noise, newtons
    force_prior_sigma: float = 0.5
    use_efforts: bool = True
    log_effort_comparison: bool = False  # also solve without efforts per step
    insertion_limit: float = 0.04
    spiral_radius: float = 0.012
    spiral_turns: float = 2.0
    true_platform_force: object = None  # callable(step) -> (6,) world wrench


@dataclass
class ParallelTrackingLog:
    targets: np.ndarray
    commanded: np.ndarray
    estimated_platform: np.ndarray
    true_platform: np.ndarray
    estimated_force: np.ndarray
    true_force: np.ndarray
    force_sigma: np.ndarray
    position_uncertainty: np.ndarray  # sqrt(trace) of platform position marginal
    position_uncertainty_no_effort: np.ndarray
    solve_ms: np.ndarray
    solve_iterations: np.ndarray
    tracking_error: np.ndarray

    def rows(self):
        for t in range(len(self.solve_ms)):
            row = {
                "step": t,
                **{f"target_{a}": self.targets[t, i] for i, a in enumerate("xyz")},
                **{f"q{i}": self.commanded[t, i] for i in range(self.commanded.shape[1])},
                **{f"platform_est_{a}": self.estimated_platform[t, i] for i, a in enumerate("xyz")},
                **{f"platform_true_{a}": self.true_platform[t, i] for i, a in enumerate("xyz")},
                **{f"force_est_{a}": self.estimated_force[t, i] for i, a in enumerate("xyz")},
                **{f"force_true_{a}": self.true_force[t, i] for i, a in enumerate("xyz")},
                **{f"force_sigma_{a}": self.force_sigma[t, i] for i, a in enumerate("xyz")},
                "position_uncertainty": self.position_uncertainty[t],
                "position_uncertainty_no_effort": self.position_uncertainty_no_effort[t],
                "tracking_error": self.tracking_error[t],
                "solve_ms": self.solve_ms[t],
                "solve_iterations": self.solve_iterations[t],
            }
            yield row


def spiral_target_path(platform, radius: float, turns: float, steps: int):
    """Planar spiral about the nominal platform position, growing over time."""
    center = platform.platform_nominal.translation

    def target(step: int) -> np.ndarray:
        frac = step / max(steps - 1, 1)
        angle = 2 * np.pi * turns * frac
        r = radius * frac
        return center + np.array([r * np.cos(angle), r * np.sin(angle), 0.0])

    return target


def run_parallel_tracking(cfg: ParallelTrackingConfig) -> ParallelTrackingLog:
    """Spiral tracking with base-insertion actuation and load inference."""
    from .parallel import build_parallel_graph

    import dataclasses

    rng = np.random.default_rng(cfg.seed)
    platform = cfg.platform
    oracle_platform = dataclasses.replace(
        platform, rod_spec=platform.rod_spec.with_nodes(cfg.oracle_nodes)
    )
    m = platform.rod_count
    q_cmd = np.zeros(m)
    target_fn = spiral_target_path(platform, cfg.spiral_radius, cfg.spiral_turns, cfg.steps)
    force_fn = cfg.true_platform_force or (lambda step: np.zeros(6))
    wrench_cov = np.diag([1e-6**2] * 3 + [cfg.force_prior_sigma**2] * 3)

    logs = {name: [] for name in (
        "targets", "commanded", "estimated_platform", "true_platform",
        "estimated_force", "true_force", "force_sigma", "position_uncertainty",
        "position_uncertainty_no_effort", "solve_ms", "solve_iterations",
        "tracking_error")}

    previous: MapSolution | None = None
    previous_plain: MapSolution | None = None
    oracle_warm = None
    for step in range(cfg.steps):
        true_wrench = np.asarray(force_fn(step), dtype=float)
        sim = oracle.shoot_parallel_bvp(q_cmd, true_wrench, oracle_platform, warm=oracle_warm)
        if not sim.converged:
            raise oracle.OracleError(f"ground-truth simulation failed at step {step}")
        oracle_warm = sim

        q_meas = q_cmd + cfg.sigma_insertion * rng.standard_normal(m)
        z_meas = sim.base_efforts + cfg.sigma_effort * rng.standard_normal(m)

        graph, keys = build_parallel_graph(
            platform,
            q_meas,
            measured_efforts=z_meas if cfg.use_efforts else None,
            platform_wrench_prior=(np.zeros(6), wrench_cov),
        )
        init = warm_start(previous, graph) if previous is not None else graph.initial_values
        t0 = time.perf_counter()
        sol = solve_map(graph, init)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        if not sol.converged:
            raise RuntimeError(f"estimator failed to converge at step {step}: {sol.status}")
        previous = sol

        forward_graph, forward_keys = build_parallel_graph(
            platform, q_meas, measured_efforts=None,
            platform_wrench_prior=(np.zeros(6), wrench_cov),
        )
        # strip the displacement measurements: the Jacobian must reflect the
        # mechanics coupling, not the posterior under direct base sensing
        forward_graph.factors = [
            f for f in forward_graph.factors if not type(f).__name__ == "BaseDisplacementFactor"
        ]
        forward_state = linearized_state(forward_graph, warm_start(sol, forward_graph))
        base_keys = forward_keys.base_pose_keys
        projections = {}
        for key in base_keys:
            rot = sol.values[key].rotation
            row = np.zeros(6)
            row[3:] = rot[2, :]  # world-vertical motion of the base
            projections[key] = row
        jac = extract_jacobian(
            forward_graph, forward_state, forward_keys.platform_pose, base_keys, projections
        )
        platform_est = sol.values[keys.platform_pose]
        target = target_fn(step)
        dq = damped_step(jac, platform_est, target, cfg.damping, cfg.gain)
        q_cmd = np.clip(q_cmd + dq, -cfg.insertion_limit, cfg.insertion_limit)

        marg = joint_marginal(graph, sol, [keys.platform_pose, keys.platform_wrench])
        pose_cov = marg.block(keys.platform_pose)
        force_cov = marg.block(keys.platform_wrench)
        pos_sigma = float(np.sqrt(np.trace(pose_cov[3:, 3:])))
        force_sigma = np.sqrt(np.diag(force_cov)[3:])

        if cfg.log_effort_comparison:
            plain_graph, plain_keys = build_parallel_graph(
                platform, q_meas, measured_efforts=None,
                platform_wrench_prior=(np.zeros(6), wrench_cov),
            )
            plain_init = (
                warm_start(previous_plain, plain_graph)
                if previous_plain is not None
                else warm_start(sol, plain_graph)
            )
            plain_sol = solve_map(plain_graph, plain_init)
            previous_plain = plain_sol
            plain_marg = joint_marginal(plain_graph, plain_sol, [plain_keys.platform_pose])
            pos_sigma_plain = float(np.sqrt(np.trace(plain_marg.covariance[3:, 3:])))
        else:
            pos_sigma_plain = np.nan

        logs["targets"].append(target)
        logs["commanded"].append(q_cmd.copy())
        logs["estimated_platform"].append(platform_est.translation.copy())
        logs["true_platform"].append(sim.platform_pose.translation.copy())
        logs["estimated_force"].append(sol.values[keys.platform_wrench][3:].copy())
        logs["true_force"].append(true_wrench[3:])
        logs["force_sigma"].append(force_sigma)
        logs["position_uncertainty"].append(pos_sigma)
        logs["position_uncertainty_no_effort"].append(pos_sigma_plain)
        logs["solve_ms"].append(solve_ms)
        logs["solve_iterations"].append(sol.iterations)
        logs["tracking_error"].append(
            float(np.linalg.norm(sim.platform_pose.translation - target))
        )

    return ParallelTrackingLog(**{k: np.asarray(v) for k, v in logs.items()})


# -- serial robot demo -----------------------------------------------------------


@dataclass
class SerialDemoConfig:
    spec: object  # SerialRobotSpec
    steps: int = 200
    seed: int = 0
    oracle_nodes: int = 4
    mode: str = "forward"  # or "inverse"
    sigma_tip: float = 0.5e-3
    force_prior_sigma: float = 0.05
    true_tip_force: object = None  # callable(step) -> (3,)


@dataclass
class SerialDemoLog:
    rotations: np.ndarray
    insertions: np.ndarray
    estimated_tip: np.ndarray
    true_tip: np.ndarray
    tip_position_sigma: np.ndarray
    estimated_force: np.ndarray
    true_force: np.ndarray
    force_sigma: np.ndarray
    solve_ms: np.ndarray
    solve_iterations: np.ndarray

    def rows(self):
        for t in range(len(self.solve_ms)):
            yield {
                "step": t,
                **{f"theta{i}": self.rotations[t, i] for i in range(self.rotations.shape[1])},
                **{f"ell{i}": self.insertions[t, i] for i in range(self.insertions.shape[1])},
                **{f"tip_est_{a}": self.estimated_tip[t, i] for i, a in enumerate("xyz")},
                **{f"tip_true_{a}": self.true_tip[t, i] for i, a in enumerate("xyz")},
                "tip_position_sigma": self.tip_position_sigma[t],
                **{f"force_est_{a}": self.estimated_force[t, i] for i, a in enumerate("xyz")},
                **{f"force_true_{a}": self.true_force[t, i] for i, a in enumerate("xyz")},
                **{f"force_sigma_{a}": self.force_sigma[t, i] for i, a in enumerate("xyz")},
                "solve_ms": self.solve_ms[t],
                "solve_iterations": self.solve_iterations[t],
            }


def serial_actuation_schedule(spec, steps: int):
    """Sweep of rotations and insertions covering the tube workspace."""
    from .serial import SerialActuation

    def schedule(step: int) -> "SerialActuation":
        frac = step / max(steps - 1, 1)
        theta0 = 2.0 * np.pi * frac
        theta1 = -1.5 * np.pi * frac + 0.4 * np.sin(4 * np.pi * frac)
        ell0 = spec.segments[0].max_length * (0.7 + 0.3 * np.sin(2 * np.pi * frac) ** 2)
        ell1 = spec.segments[1].max_length * (0.6 + 0.4 * frac)
        return SerialActuation(np.array([theta0, theta1]), np.array([ell0, ell1]))

    return schedule


def run_serial_demo(cfg: SerialDemoConfig) -> SerialDemoLog:
    """Forward (shape given loads) or inverse (loads given tip) simulation."""
    from .serial import build_serial_graph

    import dataclasses

    rng = np.random.default_rng(cfg.seed)
    oracle_spec = dataclasses.replace(
        cfg.spec,
        segments=[dataclasses.replace(s, num_nodes=cfg.oracle_nodes) for s in cfg.spec.segments],
        base_pose_covariances=[c.copy() for c in cfg.spec.base_pose_covariances],
    )
    schedule = serial_actuation_schedule(cfg.spec, cfg.steps)
    force_fn = cfg.true_tip_force or (
        lambda step: 0.02 * np.array(
            [np.sin(2 * np.pi * step / 80), np.cos(2 * np.pi * step / 110), 0.4]
        )
    )

    logs = {name: [] for name in (
        "rotations", "insertions", "estimated_tip", "true_tip",
        "tip_position_sigma", "estimated_force", "true_force", "force_sigma",
        "solve_ms", "solve_iterations")}

    previous: MapSolution | None = None
    oracle_warm = None
    for step in range(cfg.steps):
        act = schedule(step)
        true_force = np.asarray(force_fn(step), dtype=float)
        wrench = np.concatenate([np.zeros(3), true_force])
        sim = oracle.shoot_serial_bvp(oracle_spec, act, wrench, warm=oracle_warm)
        if not sim.converged:
            raise oracle.OracleError(f"serial simulation failed at step {step}")
        oracle_warm = sim
        true_tip = sim.tip_position

        if cfg.mode == "forward":
            graph, keys = build_serial_graph(
                cfg.spec, act, tip_wrench_prior=(wrench, (1e-6) ** 2 * np.eye(6))
            )
        else:
            z = true_tip + cfg.sigma_tip * rng.standard_normal(3)
            loose = np.diag([1e-6**2] * 3 + [cfg.force_prior_sigma**2] * 3)
            graph, keys = build_serial_graph(
                cfg.spec,
                act,
                tip_wrench_prior=(np.zeros(6), loose),
                tip_position_measurements=[(z, cfg.sigma_tip**2 * np.eye(3))],
            )
        init = warm_start(previous, graph) if previous is not None else graph.initial_values
        t0 = time.perf_counter()
        sol = solve_map(graph, init)
        solve_ms = 1e3 * (time.perf_counter() - t0)
        if not sol.converged:
            raise RuntimeError(f"serial estimator failed at step {step}: {sol.status}")
        previous = sol

        marg = joint_marginal(graph, sol, [keys.tip_pose, keys.tip_wrench])
        tip_cov = marg.block(keys.tip_pose)[3:, 3:]
        force_cov = marg.block(keys.tip_wrench)[3:, 3:]

        logs["rotations"].append(act.rotations.copy())
        logs["insertions"].append(act.insertions.copy())
        logs["estimated_tip"].append(sol.values[keys.tip_pose].translation.copy())
        logs["true_tip"].append(true_tip.copy())
        logs["tip_position_sigma"].append(float(np.sqrt(np.trace(tip_cov))))
        logs["estimated_force"].append(sol.values[keys.tip_wrench][3:].copy())
        logs["true_force"].append(true_force)
        logs["force_sigma"].append(np.sqrt(np.diag(force_cov)))
        logs["solve_ms"].append(solve_ms)
        logs["solve_iterations"].append(sol.iterations)

    return SerialDemoLog(**{k: np.asarray(v) for k, v in logs.items()})


def run_tracking(config):
    """Dispatch a tracking/simulation run on the config's robot type."""
    if isinstance(config, TendonTrackingConfig):
        return run_tendon_tracking(config)
    if isinstance(config, ParallelTrackingConfig):
        return run_parallel_tracking(config)
    if isinstance(config, SerialDemoConfig):
        return run_serial_demo(config)
    raise TypeError(f"unknown tracking configuration {type(config)!r}")
