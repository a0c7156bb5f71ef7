"""Command-line harness for the benchmarks and tracking simulations.

Verbs: rod-convergence, tendon-track, parallel-track, serial-demo,
jacobian-check.  Each reads an optional TOML scenario, writes CSV streams
plus a machine-readable summary.json, and with --check exits 4 if its
acceptance thresholds are violated.  Exit codes: 0 ok, 2 configuration
error, 3 solver failure, 4 threshold violation.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import control, oracle, se3
from .graph import (
    ConfigurationError,
    NumericalFailureError,
    UnderConstrainedGraphError,
    solve_map,
    warm_start,
)
from .parallel import default_hexapod
from .rod import build_rod_graph, default_rod_spec
from .scenario import ScenarioError, config_hash, load_scenario, write_csv, write_summary
from .se3 import Pose
from .serial import default_serial_robot
from .tendon import build_tendon_graph, uniform_layout

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_CHECK = 4


def fibonacci_directions(count: int) -> np.ndarray:
    """Deterministic, roughly uniform unit vectors on the sphere."""
    golden = (1 + 5**0.5) / 2
    k = np.arange(count)
    z = 1 - 2 * (k + 0.5) / count
    radius = np.sqrt(1 - z * z)
    phi = 2 * np.pi * k / golden
    return np.stack([radius * np.cos(phi), radius * np.sin(phi), z], axis=-1)


def convergence_wrench_grid(cfg: dict) -> np.ndarray:
    sweep = cfg["sweep"]
    directions = fibonacci_directions(int(sweep["direction_count"]))
    roll = len(directions) // 2
    moment_dirs = np.roll(directions, roll, axis=0)
    wrenches = []
    for f_mag in sweep["force_magnitudes"]:
        for m_mag in sweep["moment_magnitudes"]:
            for u, v in zip(directions, moment_dirs):
                wrenches.append(np.concatenate([m_mag * v, f_mag * u]))
    return np.asarray(wrenches)


ROD_CONVERGENCE_DEFAULTS = {
    "run": {"seed": 20260808},
    "rod": {"length": 0.2, "radius": 5e-4, "elastic_modulus": 75e9},
    "sweep": {
        "node_counts": [5, 10, 20, 30, 40, 80],
        "rules": ["midpoint", "euler"],
        "force_magnitudes": [0.1, 0.5, 1.0],
        "moment_magnitudes": [0.0, 0.01, 0.05],
        "direction_count": 60,
        "oracle_substeps": 80,
    },
}


def cmd_rod_convergence(cfg: dict, out_dir: Path, check: bool) -> int:
    t_start = time.perf_counter()
    rod_cfg = cfg["rod"]
    sweep = cfg["sweep"]
    wrenches = convergence_wrench_grid(cfg)
    length = float(rod_cfg["length"])
    tight = (1e-6) ** 2 * np.eye(6)

    # one fine reference solve per wrench, shared across the K sweep; the
    # strongest wrenches bend the rod into deep hooks, so the whole grid is
    # ramped up in load-continuation stages with warm-started base stresses
    oracle_spec = default_rod_spec(length, 2, rod_cfg["radius"], rod_cfg["elastic_modulus"])
    oracle_step = length / int(sweep["oracle_substeps"])
    warm = np.zeros((len(wrenches), 6))
    reference = None
    for stage in (0.5, 1.0):
        final = stage == 1.0
        reference = oracle.shoot_rod_bvp(
            Pose.identity(),
            stage * wrenches,
            oracle_spec,
            step=oracle_step,
            initial_base_stress=warm,
            tol=1e-10 if final else 1e-7,
            max_iterations=50 if final else 25,
        )
        warm = reference.base_stress
    ok = reference.converged
    if not np.all(ok):
        # finer ramp, batched over just the wrenches that sit near folds
        idx = np.where(~ok)[0]
        sub_warm = np.zeros((idx.size, 6))
        sub = None
        for stage in (0.2, 0.4, 0.6, 0.8, 0.9, 1.0):
            final = stage == 1.0
            sub = oracle.shoot_rod_bvp(
                Pose.identity(),
                stage * wrenches[idx],
                oracle_spec,
                step=oracle_step,
                initial_base_stress=sub_warm,
                tol=1e-10 if final else 1e-7,
                max_iterations=50 if final else 25,
            )
            sub_warm = sub.base_stress
        base = reference.base_stress.copy()
        base[idx] = sub.base_stress
        ok = ok.copy()
        ok[idx] = sub.converged
        _, _, curve = oracle.integrate_rod_ivp(Pose.identity(), base, None, oracle_spec, oracle_step)
        reference = oracle.ShootingResult(curve, base, ok, reference.residual_norm, reference.iterations)
    failed_total = int((~ok).sum())

    results = []
    for num_k in sweep["node_counts"]:
        spec = default_rod_spec(length, int(num_k) + 1, rod_cfg["radius"], rod_cfg["elastic_modulus"])
        # reference resampled on this grid provides the MAP warm starts
        grid_ref = oracle.integrate_rod_ivp(
            Pose.identity(), reference.base_stress, None, spec, step=spec.delta_s / 8
        )[2]
        for rule in sweep["rules"]:
            errors = []
            failures = 0
            for w_idx in range(len(wrenches)):
                if not ok[w_idx]:
                    failures += 1
                    continue
                graph, keys = build_rod_graph(
                    spec, wrench_priors={spec.K: (wrenches[w_idx], tight)}, strain_rule=rule
                )
                init = graph.initial_values
                for node, key in enumerate(keys.poses):
                    init[key] = grid_ref.poses[node, w_idx]
                for node, key in enumerate(keys.stresses):
                    init[key] = grid_ref.stresses[node, w_idx]
                try:
                    sol = solve_map(graph, init)
                except (NumericalFailureError, UnderConstrainedGraphError, se3.BranchCutError):
                    failures += 1
                    continue
                if not sol.converged:
                    failures += 1
                    continue
                tip = sol.values[keys.poses[-1]].translation
                truth = reference.curve.tip_position[w_idx]
                errors.append(np.linalg.norm(tip - truth) / length)
            errors = np.asarray(errors)
            results.append(
                {
                    "rule": rule,
                    "K": int(num_k),
                    "mean_err_frac": float(errors.mean()),
                    "max_err_frac": float(errors.max()),
                    "solved": int(errors.size),
                    "failed": failures,
                }
            )

    metadata = {
        "seed": cfg["run"]["seed"],
        "config_hash": config_hash(cfg),
        "wrench_count": len(wrenches),
        "oracle_failures": failed_total,
    }
    write_csv(out_dir / "rod_convergence.csv", results, metadata)

    wall = time.perf_counter() - t_start
    summary = {
        "command": "rod-convergence",
        "seed": cfg["run"]["seed"],
        "config_hash": config_hash(cfg),
        "wall_time_s": wall,
        "oracle_failures": failed_total,
        "results": results,
    }
    write_summary(out_dir / "summary.json", summary)

    if check:
        by = {(r["rule"], r["K"]): r["mean_err_frac"] for r in results}
        violations = []
        if ("midpoint", 10) in by and by[("midpoint", 10)] > 0.02:
            violations.append("midpoint K=10 mean error above 2%")
        if ("midpoint", 30) in by and by[("midpoint", 30)] > 0.002:
            violations.append("midpoint K=30 mean error above 0.2%")
        for k in sweep["node_counts"]:
            if ("euler", k) in by and by[("euler", k)] <= by[("midpoint", k)]:
                violations.append(f"euler error not above midpoint at K={k}")
        if wall > 300.0:
            violations.append(f"sweep runtime {wall:.0f}s exceeds 5 minutes")
        if violations:
            print("CHECK FAILED: " + "; ".join(violations), file=sys.stderr)
            return EXIT_CHECK
        print("rod-convergence check passed")
    return EXIT_OK


TENDON_TRACK_DEFAULTS = {
    "run": {"seed": 42},
    "robot": {
        "length": 0.2,
        "num_nodes": 31,
        "radius": 1e-3,
        "tendon_count": 4,
        "hole_radius": 8e-3,
        "disc_node_step": 3,
    },
    "tracking": {
        "steps": 900,
        "gain": 0.5,
        "damping": 0.1,
        "target_amplitude": 0.02,
        "target_period": 450,
        "force_profile": "constant",
        "force_magnitude": 0.5,
        "force_direction": [1.0, 0.0, 0.0],
        "open_loop_comparison": True,
        "oracle_coarsen": 3,
    },
    "noise": {"sigma_tip": 0.5e-3, "sigma_tension": 0.01, "force_prior_sigma": 1.0},
}


def _tendon_robot_from_config(robot: dict):
    spec = default_rod_spec(
        robot["length"], int(robot["num_nodes"]), robot["radius"],
        robot.get("elastic_modulus", 75e9),
    )
    step = int(robot["disc_node_step"])
    layout = uniform_layout(
        disc_nodes=tuple(range(step, spec.num_nodes, step)),
        tendon_count=int(robot["tendon_count"]),
        hole_radius=robot["hole_radius"],
    )
    return spec, layout


def _force_profile(tracking: dict):
    kind = tracking.get("force_profile", "none")
    if kind == "none":
        return None
    if kind == "constant":
        direction = np.asarray(tracking["force_direction"], dtype=float)
        return control.constant_force_profile(tracking["force_magnitude"] * direction)
    if kind == "pulsing":
        return control.pulsing_force_profile(
            amplitude=tracking["force_magnitude"],
            period=int(tracking.get("force_period", 150)),
        )
    raise ScenarioError(f"unknown force profile {kind!r}")


def cmd_tendon_track(cfg: dict, out_dir: Path, check: bool) -> int:
    t_start = time.perf_counter()
    spec, layout = _tendon_robot_from_config(cfg["robot"])
    tracking, noise = cfg["tracking"], cfg["noise"]

    def make_config(closed_loop: bool):
        return control.TendonTrackingConfig(
            spec,
            layout,
            steps=int(tracking["steps"]),
            seed=int(cfg["run"]["seed"]),
            closed_loop=closed_loop,
            gain=tracking["gain"],
            damping=tracking["damping"],
            sigma_tip=noise["sigma_tip"],
            sigma_tension=noise["sigma_tension"],
            force_prior_sigma=noise["force_prior_sigma"],
            oracle_coarsen=int(tracking["oracle_coarsen"]),
            target_amplitude=tracking["target_amplitude"],
            target_period=int(tracking["target_period"]),
            true_tip_force=_force_profile(tracking),
        )

    log = control.run_tendon_tracking(make_config(True))
    metadata = {"seed": cfg["run"]["seed"], "config_hash": config_hash(cfg)}
    write_csv(out_dir / "tendon_track.csv", log.rows(), metadata)

    open_log = None
    if tracking["open_loop_comparison"]:
        open_log = control.run_tendon_tracking(make_config(False))
        write_csv(out_dir / "tendon_track_openloop.csv", open_log.rows(), metadata)

    final = slice(max(0, len(log.solve_ms) - 500), None)
    inside = np.all(
        np.abs(log.estimated_force[final] - log.true_force[final]) <= 2 * log.force_sigma[final],
        axis=1,
    )
    coverage = float(inside.mean())
    summary = {
        "command": "tendon-track",
        "seed": cfg["run"]["seed"],
        "config_hash": config_hash(cfg),
        "wall_time_s": time.perf_counter() - t_start,
        "steps": int(tracking["steps"]),
        "median_solve_ms": float(np.median(log.solve_ms)),
        "mean_solve_ms": float(np.mean(log.solve_ms)),
        "tracking_rmse": float(np.sqrt(np.mean(log.tracking_error**2))),
        "final_tracking_error": float(log.tracking_error[-1]),
        "force_envelope_coverage": coverage,
        "open_loop_final_error": (
            float(open_log.tracking_error[-1]) if open_log is not None else None
        ),
    }
    write_summary(out_dir / "summary.json", summary)

    if check:
        violations = []
        if len(log.solve_ms) != int(tracking["steps"]):
            violations.append("run did not complete all steps")
        if coverage < 0.9:
            violations.append(f"force envelope coverage {coverage:.2f} below 0.9")
        if open_log is not None and not (
            log.tracking_error[-1] < 0.2 * open_log.tracking_error[-1]
        ):
            violations.append("closed-loop final error not below 20% of open loop")
        if violations:
            print("CHECK FAILED: " + "; ".join(violations), file=sys.stderr)
            return EXIT_CHECK
        print("tendon-track check passed")
    return EXIT_OK


PARALLEL_TRACK_DEFAULTS = {
    "run": {"seed": 7},
    "robot": {
        "rod_length": 0.25,
        "num_nodes": 21,
        "radius": 5e-4,
        "circle_radius": 0.05,
    },
    "tracking": {
        "steps": 900,
        "gain": 0.5,
        "damping": 0.05,
        "spiral_radius": 0.012,
        "spiral_turns": 2.0,
        "force_profile": "constant",
        "force_magnitude": 0.2,
        "force_direction": [0.3, 0.2, -1.0],
        "effort_comparison": True,
        "oracle_nodes": 6,
    },
    "noise": {"sigma_insertion": 1e-4, "sigma_effort": 0.02, "force_prior_sigma": 0.5},
}


def cmd_parallel_track(cfg: dict, out_dir: Path, check: bool) -> int:
    t_start = time.perf_counter()
    robot = cfg["robot"]
    platform = default_hexapod(
        rod_length=robot["rod_length"],
        num_nodes=int(robot["num_nodes"]),
        radius=robot["radius"],
        circle_radius=robot["circle_radius"],
    )
    tracking, noise = cfg["tracking"], cfg["noise"]
    profile = _force_profile(tracking)
    wrench_profile = None
    if profile is not None:
        wrench_profile = lambda step: np.concatenate([np.zeros(3), profile(step)])
    run_cfg = control.ParallelTrackingConfig(
        platform,
        steps=int(tracking["steps"]),
        seed=int(cfg["run"]["seed"]),
        oracle_nodes=int(tracking["oracle_nodes"]),
        gain=tracking["gain"],
        damping=tracking["damping"],
        sigma_insertion=noise["sigma_insertion"],
        sigma_effort=noise["sigma_effort"],
        force_prior_sigma=noise["force_prior_sigma"],
        log_effort_comparison=bool(tracking["effort_comparison"]),
        spiral_radius=tracking["spiral_radius"],
        spiral_turns=tracking["spiral_turns"],
        true_platform_force=wrench_profile,
    )
    log = control.run_parallel_tracking(run_cfg)
    metadata = {"seed": cfg["run"]["seed"], "config_hash": config_hash(cfg)}
    write_csv(out_dir / "parallel_track.csv", log.rows(), metadata)

    improved = log.position_uncertainty < log.position_uncertainty_no_effort
    summary = {
        "command": "parallel-track",
        "seed": cfg["run"]["seed"],
        "config_hash": config_hash(cfg),
        "wall_time_s": time.perf_counter() - t_start,
        "steps": int(tracking["steps"]),
        "median_solve_ms": float(np.median(log.solve_ms)),
        "mean_solve_ms": float(np.mean(log.solve_ms)),
        "tracking_rmse": float(np.sqrt(np.mean(log.tracking_error**2))),
        "effort_uncertainty_improvement_rate": (
            float(improved.mean()) if bool(tracking["effort_comparison"]) else None
        ),
    }
    write_summary(out_dir / "summary.json", summary)

    if check:
        violations = []
        if len(log.solve_ms) != int(tracking["steps"]):
            violations.append("run did not complete all steps")
        if bool(tracking["effort_comparison"]) and improved.mean() < 0.95:
            violations.append("effort measurements did not reduce position uncertainty")
        if violations:
            print("CHECK FAILED: " + "; ".join(violations), file=sys.stderr)
            return EXIT_CHECK
        print("parallel-track check passed")
    return EXIT_OK


SERIAL_DEMO_DEFAULTS = {
    "run": {"seed": 11},
    "demo": {
        "steps": 200,
        "modes": ["forward", "inverse"],
        "oracle_nodes": 4,
        "force_magnitude": 0.02,
    },
    "noise": {"sigma_tip": 0.5e-3, "force_prior_sigma": 0.05},
}


def cmd_serial_demo(cfg: dict, out_dir: Path, check: bool) -> int:
    t_start = time.perf_counter()
    spec = default_serial_robot()
    demo, noise = cfg["demo"], cfg["noise"]
    metadata = {"seed": cfg["run"]["seed"], "config_hash": config_hash(cfg)}
    summary = {
        "command": "serial-demo",
        "seed": cfg["run"]["seed"],
        "config_hash": config_hash(cfg),
        "steps": int(demo["steps"]),
        "modes": {},
    }
    logs = {}
    for mode in demo["modes"]:
        run_cfg = control.SerialDemoConfig(
            spec,
            steps=int(demo["steps"]),
            seed=int(cfg["run"]["seed"]),
            mode=mode,
            oracle_nodes=int(demo["oracle_nodes"]),
            sigma_tip=noise["sigma_tip"],
            force_prior_sigma=noise["force_prior_sigma"],
        )
        log = control.run_serial_demo(run_cfg)
        logs[mode] = log
        write_csv(out_dir / f"serial_{mode}.csv", log.rows(), metadata)
        tip_err = np.linalg.norm(log.estimated_tip - log.true_tip, axis=1)
        summary["modes"][mode] = {
            "median_solve_ms": float(np.median(log.solve_ms)),
            "mean_solve_ms": float(np.mean(log.solve_ms)),
            "mean_tip_error": float(tip_err.mean()),
        }
    summary["wall_time_s"] = time.perf_counter() - t_start
    write_summary(out_dir / "summary.json", summary)

    if check:
        violations = []
        fwd = summary["modes"].get("forward")
        if fwd and fwd["mean_tip_error"] > 1e-3:
            violations.append("forward-mode tip error above 1 mm")
        if "inverse" in logs:
            log = logs["inverse"]
            inside = np.all(
                np.abs(log.estimated_force[:, :2] - log.true_force[:, :2])
                <= 2 * log.force_sigma[:, :2],
                axis=1,
            )
            if inside.mean() < 0.8:
                violations.append("inverse-mode lateral force coverage below 80%")
        if violations:
            print("CHECK FAILED: " + "; ".join(violations), file=sys.stderr)
            return EXIT_CHECK
        print("serial-demo check passed")
    return EXIT_OK


JACOBIAN_CHECK_DEFAULTS = {
    "run": {"seed": 3},
    "robot": TENDON_TRACK_DEFAULTS["robot"],
    "check": {
        "config_count": 10,
        "tension_low": 0.5,
        "tension_high": 6.0,
        "fd_tension_step": 0.01,
        "oracle_coarsen": 3,
    },
}


def cmd_jacobian_check(cfg: dict, out_dir: Path, check: bool) -> int:
    t_start = time.perf_counter()
    spec, layout = _tendon_robot_from_config(cfg["robot"])
    params = cfg["check"]
    rng = np.random.default_rng(int(cfg["run"]["seed"]))
    ospec, olayout, _ = oracle.coarse_oracle_view(spec, layout, int(params["oracle_coarsen"]))
    h = float(params["fd_tension_step"])
    n = layout.tendon_count

    rows = []
    for index in range(int(params["config_count"])):
        q0 = rng.uniform(params["tension_low"], params["tension_high"], n)
        graph, keys = build_tendon_graph(spec, layout, q0)
        sol = solve_map(graph)
        jac = control.extract_jacobian(graph, sol, keys.tip_pose, [keys.tensions]).matrix
        tip0 = sol.values[keys.tip_pose]

        fd_resolve = np.zeros((6, n))
        for j in range(n):
            gp, kp = build_tendon_graph(spec, layout, q0 + h * np.eye(n)[j])
            sp = solve_map(gp, warm_start(sol, gp))
            gm, km = build_tendon_graph(spec, layout, np.maximum(q0 - h * np.eye(n)[j], 0.0))
            sm = solve_map(gm, warm_start(sol, gm))
            fd_resolve[:, j] = (
                se3.log_se3(tip0.inverse().compose(sp.values[kp.tip_pose]))
                - se3.log_se3(tip0.inverse().compose(sm.values[km.tip_pose]))
            ) / (2 * h)

        base = oracle.shoot_tendon_bvp(q0, None, ospec, olayout)
        fd_oracle = np.zeros((6, n))
        for j in range(n):
            plus = oracle.shoot_tendon_bvp(q0 + h * np.eye(n)[j], None, ospec, olayout, warm=base)
            minus = oracle.shoot_tendon_bvp(
                np.maximum(q0 - h * np.eye(n)[j], 0.0), None, ospec, olayout, warm=base
            )
            fd_oracle[:, j] = (
                se3.log_se3(base.curve.tip_pose.inverse().compose(plus.curve.tip_pose))
                - se3.log_se3(base.curve.tip_pose.inverse().compose(minus.curve.tip_pose))
            ) / (2 * h)

        rel_resolve = np.linalg.norm(jac - fd_resolve) / np.linalg.norm(fd_resolve)
        rel_oracle = np.linalg.norm(jac - fd_oracle) / np.linalg.norm(fd_oracle)
        rows.append(
            {
                "config": index,
                **{f"q{j}": q0[j] for j in range(n)},
                "rel_err_resolve_fd": float(rel_resolve),
                "rel_err_oracle_fd": float(rel_oracle),
            }
        )

    metadata = {"seed": cfg["run"]["seed"], "config_hash": config_hash(cfg)}
    write_csv(out_dir / "jacobian_check.csv", rows, metadata)
    worst_resolve = max(r["rel_err_resolve_fd"] for r in rows)
    worst_oracle = max(r["rel_err_oracle_fd"] for r in rows)
    summary = {
        "command": "jacobian-check",
        "seed": cfg["run"]["seed"],
        "config_hash": config_hash(cfg),
        "wall_time_s": time.perf_counter() - t_start,
        "worst_rel_err_resolve_fd": worst_resolve,
        "worst_rel_err_oracle_fd": worst_oracle,
    }
    write_summary(out_dir / "summary.json", summary)

    if check:
        violations = []
        if worst_resolve > 0.02:
            violations.append(f"re-solve FD mismatch {worst_resolve:.3f} above 2%")
        if worst_oracle > 0.05:
            violations.append(f"oracle FD mismatch {worst_oracle:.3f} above 5%")
        if violations:
            print("CHECK FAILED: " + "; ".join(violations), file=sys.stderr)
            return EXIT_CHECK
        print("jacobian-check check passed")
    return EXIT_OK


COMMANDS = {
    "rod-convergence": (cmd_rod_convergence, ROD_CONVERGENCE_DEFAULTS),
    "tendon-track": (cmd_tendon_track, TENDON_TRACK_DEFAULTS),
    "parallel-track": (cmd_parallel_track, PARALLEL_TRACK_DEFAULTS),
    "serial-demo": (cmd_serial_demo, SERIAL_DEMO_DEFAULTS),
    "jacobian-check": (cmd_jacobian_check, JACOBIAN_CHECK_DEFAULTS),
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rodgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=Path, default=None, help="TOML scenario file")
        cmd.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        cmd.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        cmd.add_argument("--check", action="store_true", help="enforce acceptance thresholds")
    args = parser.parse_args(argv)

    runner, defaults = COMMANDS[args.command]
    try:
        cfg = load_scenario(args.config, defaults)
        if args.seed is not None:
            cfg["run"]["seed"] = int(args.seed)
    except (ScenarioError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return runner(cfg, args.out / args.command, args.check)
    except (ScenarioError, ConfigurationError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnderConstrainedGraphError, NumericalFailureError, oracle.OracleError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
