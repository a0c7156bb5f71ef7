import numpy as np
import pytest

from rodgraph import se3
from rodgraph.graph import (
    BATCH_KERNELS,
    FactorGraph,
    Values,
    joint_marginal,
    solve_map,
)
from rodgraph.oracle import shoot_rod_bvp
from rodgraph.rod import (
    BoundaryFactor,
    EulerKinematicsFactor,
    MechanicsFactor,
    MidpointKinematicsFactor,
    RodSpec,
    build_rod_graph,
    default_rod_spec,
    lump_distributed_wrench,
    stiffness_matrix,
    unstressed_poses,
)
from rodgraph.se3 import Pose

from fd_util import assert_jacobians_match

RNG = np.random.default_rng(42)
TIGHT = (1e-6) ** 2 * np.eye(6)


def small_spec(num_nodes=6) -> RodSpec:
    return default_rod_spec(num_nodes=num_nodes)


def random_rod_values(spec, rng, scale=0.3):
    """A generic (non-equilibrium) state for Jacobian checks."""
    g = FactorGraph()
    tk = g.add_pose_variable("Tk")
    tk1 = g.add_pose_variable("Tk1")
    sk = g.add_vector_variable(6, "Sk")
    sk1 = g.add_vector_variable(6, "Sk1")
    f = g.add_vector_variable(6, "F")
    values = Values()
    base = se3.exp_se3(scale * rng.standard_normal(6))
    values[tk] = base
    values[tk1] = base.compose(se3.exp_se3(scale * rng.standard_normal(6)))
    values[sk] = rng.standard_normal(6)
    values[sk1] = rng.standard_normal(6)
    values[f] = rng.standard_normal(6)
    return (tk, tk1, sk, sk1, f), values


class TestKinematicsFactor:
    def test_straight_rod_at_rest_zero(self):
        spec = small_spec()
        keys, values = random_rod_values(spec, RNG)
        tk, tk1, sk, sk1, _ = keys
        values[tk] = Pose.identity()
        values[tk1] = se3.exp_se3(spec.delta_s * spec.interval_strain(0))
        values[sk] = np.zeros(6)
        values[sk1] = np.zeros(6)
        f = MidpointKinematicsFactor(tk, tk1, sk, sk1, spec, 0)
        np.testing.assert_allclose(f.raw_error(values), np.zeros(6), atol=1e-14)

    def test_constant_curvature_arc_zero(self):
        spec = small_spec()
        kappa = 4.0
        sigma = spec.stiffness @ np.array([kappa, 0, 0, 0, 0, 0.0])
        strain = spec.stiffness_inv @ sigma + spec.interval_strain(0)
        keys, values = random_rod_values(spec, RNG)
        tk, tk1, sk, sk1, _ = keys
        values[tk] = se3.exp_se3(0.1 * RNG.standard_normal(6))
        values[tk1] = values[tk].compose(se3.exp_se3(spec.delta_s * strain))
        values[sk] = sigma
        values[sk1] = sigma
        f = MidpointKinematicsFactor(tk, tk1, sk, sk1, spec, 0)
        np.testing.assert_allclose(f.raw_error(values), np.zeros(6), atol=1e-12)

    def test_fd_jacobians(self):
        spec = small_spec()
        for _ in range(20):
            keys, values = random_rod_values(spec, RNG)
            tk, tk1, sk, sk1, _ = keys
            f = MidpointKinematicsFactor(tk, tk1, sk, sk1, spec, 0)
            assert_jacobians_match(f, values)

    def test_euler_fd_jacobians(self):
        spec = small_spec()
        for _ in range(20):
            keys, values = random_rod_values(spec, RNG)
            tk, tk1, sk, _, _ = keys
            f = EulerKinematicsFactor(tk, tk1, sk, spec, 0)
            assert_jacobians_match(f, values)

    def test_euler_deviation_on_varying_stress(self):
        # Arc built with the midpoint rule; the single-node rule misses by
        # ds * Kinv (S_k - S_k1) / 2 exactly.
        spec = small_spec()
        keys, values = random_rod_values(spec, RNG)
        tk, tk1, sk, sk1, _ = keys
        s_k = spec.stiffness @ np.array([3.0, 0, 0, 0, 0, 0.0])
        s_k1 = spec.stiffness @ np.array([1.0, 0.5, 0, 0, 0, 0.0])
        strain = 0.5 * spec.stiffness_inv @ (s_k + s_k1) + spec.interval_strain(0)
        values[tk] = Pose.identity()
        values[tk1] = se3.exp_se3(spec.delta_s * strain)
        values[sk] = s_k
        values[sk1] = s_k1
        mid = MidpointKinematicsFactor(tk, tk1, sk, sk1, spec, 0)
        eul = EulerKinematicsFactor(tk, tk1, sk, spec, 0)
        np.testing.assert_allclose(mid.raw_error(values), np.zeros(6), atol=1e-12)
        expected = 0.5 * spec.delta_s * spec.stiffness_inv @ (s_k - s_k1)
        np.testing.assert_allclose(eul.raw_error(values), expected, atol=1e-12)


class TestMechanicsFactor:
    def test_identity_transport(self):
        spec = small_spec()
        keys, values = random_rod_values(spec, RNG)
        tk, tk1, sk, sk1, f = keys
        pose = values[tk]
        values[tk1] = pose
        values[f] = np.zeros(6)
        factor = MechanicsFactor(tk, tk1, sk, sk1, f, spec)
        np.testing.assert_allclose(
            factor.raw_error(values), values[sk] - values[sk1], atol=1e-12
        )

    def test_world_force_sign(self):
        spec = small_spec()
        keys, values = random_rod_values(spec, RNG)
        tk, tk1, sk, sk1, f = keys
        values[tk] = Pose.identity()
        values[tk1] = Pose.identity()
        values[sk] = np.zeros(6)
        values[sk1] = np.zeros(6)
        values[f] = np.array([0, 0, 0, 0, 0, -1.0])
        factor = MechanicsFactor(tk, tk1, sk, sk1, f, spec)
        np.testing.assert_allclose(
            factor.raw_error(values), [0, 0, 0, 0, 0, 1.0], atol=1e-15
        )

    def test_fd_jacobians_with_and_without_wrench(self):
        spec = small_spec()
        for _ in range(20):
            keys, values = random_rod_values(spec, RNG)
            tk, tk1, sk, sk1, f = keys
            assert_jacobians_match(MechanicsFactor(tk, tk1, sk, sk1, f, spec), values)
            assert_jacobians_match(MechanicsFactor(tk, tk1, sk, sk1, None, spec), values)


class TestBoundaryFactor:
    def test_zeros(self):
        spec = small_spec()
        keys, values = random_rod_values(spec, RNG)
        tk, _, sk, _, f = keys
        values[sk] = np.zeros(6)
        values[f] = np.zeros(6)
        factor = BoundaryFactor(tk, sk, f, spec, sign=+1)
        np.testing.assert_allclose(factor.raw_error(values), np.zeros(6), atol=1e-15)

    def test_tip_consistency(self):
        spec = small_spec()
        keys, values = random_rod_values(spec, RNG)
        tk, _, sk, _, f = keys
        values[tk] = Pose.identity()
        values[f] = np.array([0, 0, 0, 1.0, 0, 0])
        values[sk] = np.array([0, 0, 0, 1.0, 0, 0])
        factor = BoundaryFactor(tk, sk, f, spec, sign=-1)
        np.testing.assert_allclose(factor.raw_error(values), np.zeros(6), atol=1e-15)

    def test_fd_jacobians(self):
        spec = small_spec()
        for _ in range(20):
            keys, values = random_rod_values(spec, RNG)
            tk, _, sk, _, f = keys
            for sign in (+1, -1):
                assert_jacobians_match(BoundaryFactor(tk, sk, f, spec, sign), values)


class TestBatchedKernels:
    def test_batched_linearization_matches_per_factor(self):
        spec = default_rod_spec(num_nodes=8)
        tip = np.array([0.0, 0.004, 0.0, 0.08, 0.0, 0.01])
        graph, keys = build_rod_graph(spec, wrench_priors={spec.K: (tip, TIGHT)})
        # evaluate away from the optimum so nothing is trivially zero
        values = graph.initial_values.copy()
        rng = np.random.default_rng(0)
        for key in keys.poses:
            values[key] = values[key].compose(se3.exp_se3(0.05 * rng.standard_normal(6)))
        for key in keys.stresses:
            values[key] = 0.1 * rng.standard_normal(6)
        batched = graph.linearize(values)
        saved = {
            cls: BATCH_KERNELS.pop(cls)
            for cls in [MidpointKinematicsFactor, EulerKinematicsFactor, MechanicsFactor]
        }
        try:
            plain = graph.linearize(values)
        finally:
            BATCH_KERNELS.update(saved)
        np.testing.assert_allclose(batched.residual, plain.residual, atol=1e-12)
        diff = (batched.jacobian - plain.jacobian).toarray()
        assert np.abs(diff).max() < 1e-9
        assert abs(graph.cost(values) - plain.cost) < 1e-9 * max(1.0, plain.cost)


class TestRodGraph:
    def test_unloaded_map_is_unstressed_curve(self):
        spec = default_rod_spec(num_nodes=11)
        graph, keys = build_rod_graph(spec)
        sol = solve_map(graph)
        assert sol.converged
        assert sol.final_cost < 1e-10
        expected = unstressed_poses(spec, Pose.identity())
        for key, pose in zip(keys.poses, expected):
            np.testing.assert_allclose(key and sol.values[key].translation, pose.translation, atol=1e-9)
        for key in keys.stresses:
            np.testing.assert_allclose(sol.values[key], np.zeros(6), atol=1e-8)

    @pytest.mark.parametrize(
        "num_nodes,rule,tol",
        [(11, "midpoint", 0.01), (31, "midpoint", 0.001)],
    )
    def test_tip_matches_shooting_oracle(self, num_nodes, rule, tol):
        spec = default_rod_spec(num_nodes=num_nodes)
        wrench = np.array([0.0, 0.002, 0.0, 0.1, 0.0, 0.02])
        oracle = shoot_rod_bvp(Pose.identity(), wrench, spec, step=spec.delta_s / 8)
        assert oracle.all_converged
        graph, keys = build_rod_graph(
            spec, wrench_priors={spec.K: (wrench, TIGHT)}, strain_rule=rule
        )
        sol = solve_map(graph)
        assert sol.converged
        err = np.linalg.norm(
            sol.values[keys.poses[-1]].translation - oracle.curve.tip_position
        )
        assert err / spec.length <= tol

    def test_equilibrium_transport_consistency(self):
        # constraint noise driven toward zero: per-node transport must hold
        spec = default_rod_spec(num_nodes=11)
        spec.sigma_S = (1e-8) ** 2 * np.eye(6)
        spec.sigma_B = (1e-8) ** 2 * np.eye(6)
        wrench = np.array([0.0, 0.001, 0.0, 0.05, 0.0, 0.0])
        graph, keys = build_rod_graph(spec, wrench_priors={spec.K: (wrench, TIGHT)})
        sol = solve_map(graph)
        for f in graph.factors:
            if isinstance(f, MechanicsFactor):
                assert np.linalg.norm(f.raw_error(sol.values)) <= 1e-6
            if isinstance(f, BoundaryFactor):
                assert np.linalg.norm(f.raw_error(sol.values)) <= 1e-6

    def test_convergence_order_midpoint_vs_euler(self):
        wrench = np.array([0.0, 0.003, 0.001, 0.15, 0.05, 0.0])
        errors = {"midpoint": [], "euler": []}
        nodes = [6, 11, 21, 41, 81]
        fine = default_rod_spec(num_nodes=81)
        oracle = shoot_rod_bvp(Pose.identity(), wrench, fine, step=fine.delta_s / 8)
        assert oracle.all_converged
        tip = oracle.curve.tip_position
        for n in nodes:
            spec = default_rod_spec(num_nodes=n)
            for rule in errors:
                graph, keys = build_rod_graph(
                    spec, wrench_priors={spec.K: (wrench, TIGHT)}, strain_rule=rule
                )
                sol = solve_map(graph)
                assert sol.converged
                err = np.linalg.norm(sol.values[keys.poses[-1]].translation - tip)
                errors[rule].append(err / spec.length)
        ks = np.array([n - 1 for n in nodes], dtype=float)
        for rule, lo, hi in [("midpoint", 1.5, 3.0), ("euler", 0.6, 1.5)]:
            errs = np.array(errors[rule])
            slope = -np.polyfit(np.log(ks[:4]), np.log(errs[:4]), 1)[0]
            assert lo <= slope <= hi, f"{rule} slope {slope}: {errs}"
        for e_mid, e_eul in zip(errors["midpoint"], errors["euler"]):
            assert e_mid < e_eul

    def test_frame_covariance(self):
        spec = default_rod_spec(num_nodes=11)
        wrench = np.array([0.0, 0.002, 0.0, 0.08, 0.0, 0.01])
        rot = se3.exp_se3(np.array([0.4, -0.3, 0.8, 0.05, -0.02, 0.1]))
        graph_a, keys_a = build_rod_graph(spec, wrench_priors={spec.K: (wrench, TIGHT)})
        sol_a = solve_map(graph_a)
        rotated_wrench = se3.rot_op(rot) @ wrench
        graph_b, keys_b = build_rod_graph(
            spec,
            base_pose_prior=(rot, (1e-6) ** 2 * np.eye(6)),
            wrench_priors={spec.K: (rotated_wrench, TIGHT)},
        )
        sol_b = solve_map(graph_b)
        tip_a = rot.apply(sol_a.values[keys_a.poses[-1]].translation)
        tip_b = sol_b.values[keys_b.poses[-1]].translation
        assert np.linalg.norm(tip_a - tip_b) <= 1e-8

    def test_uncertainty_grows_toward_tip(self):
        spec = default_rod_spec(num_nodes=9)
        graph, keys = build_rod_graph(spec)
        sol = solve_map(graph)
        marg = joint_marginal(graph, sol, keys.poses)
        traces = [np.trace(marg.block(k)) for k in keys.poses]
        for a, b in zip(traces, traces[1:]):
            assert b >= a - 1e-12
        for k in keys.poses:
            assert np.linalg.eigvalsh(marg.block(k)).min() >= -1e-12


class TestSpecValidation:
    def test_bad_stiffness_rejected(self):
        with pytest.raises(Exception):
            RodSpec(0.2, 11, -np.eye(6))

    def test_stiffness_matrix_layout(self):
        k = stiffness_matrix(5e-4, 75e9, 0.3)
        ei = 75e9 * np.pi * (5e-4) ** 4 / 4
        assert k[0, 0] == pytest.approx(ei)
        assert k[1, 1] == pytest.approx(ei)
        ea = 75e9 * np.pi * (5e-4) ** 2
        assert k[5, 5] == pytest.approx(ea)

    def test_lumped_distributed_wrench(self):
        spec = default_rod_spec(num_nodes=5)
        density = lambda s: np.array([0, 0, 0, 0, 0, -2.0])
        lumped = lump_distributed_wrench(spec, density)
        np.testing.assert_allclose(lumped[0], np.zeros(6))
        np.testing.assert_allclose(lumped[-1], 0.5 * spec.delta_s * density(0.0))
        np.testing.assert_allclose(lumped[2], spec.delta_s * density(0.0))
        # total matches the integral minus the mount-carried end
        total = lumped[:, 5].sum()
        assert total == pytest.approx(-2.0 * spec.length + 0.5 * spec.delta_s * 2.0)
