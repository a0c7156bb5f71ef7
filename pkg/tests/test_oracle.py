import numpy as np
import pytest

from rodgraph import se3
from rodgraph.oracle import OracleError, integrate_rod_ivp, shoot_rod_bvp
from rodgraph.rod import default_rod_spec
from rodgraph.se3 import Pose

RNG = np.random.default_rng(5)


class TestIntegrateIvp:
    def test_straight_unloaded(self):
        spec = default_rod_spec(num_nodes=11)
        tip, stress, curve = integrate_rod_ivp(Pose.identity(), np.zeros(6), None, spec)
        np.testing.assert_allclose(tip.translation, [0, 0, spec.length], atol=1e-12)
        np.testing.assert_allclose(stress, np.zeros(6), atol=1e-14)
        np.testing.assert_allclose(curve.arclengths[-1], spec.length)

    def test_pure_bending_matches_analytic_arc(self):
        spec = default_rod_spec(num_nodes=11)
        ei = spec.stiffness[0, 0]
        kappa = 6.0
        base_stress = np.array([ei * kappa, 0, 0, 0, 0, 0.0])
        tip, _, _ = integrate_rod_ivp(
            Pose.identity(), base_stress, None, spec, step=spec.delta_s / 16
        )
        length = spec.length
        analytic = np.array(
            [0.0, -(1 - np.cos(kappa * length)) / kappa, np.sin(kappa * length) / kappa]
        )
        assert np.linalg.norm(tip.translation - analytic) <= 1e-8

    def test_fourth_order_step_halving(self):
        spec = default_rod_spec(num_nodes=11)
        ei = spec.stiffness[0, 0]
        base_stress = np.array([ei * 6.0, 0, 0, 0.05, 0, 0.0])
        tips = {}
        for div in (8, 16, 128):
            tip, _, _ = integrate_rod_ivp(
                Pose.identity(), base_stress, None, spec, step=spec.delta_s / div
            )
            tips[div] = tip.translation
        e1 = np.linalg.norm(tips[8] - tips[128])
        e2 = np.linalg.norm(tips[16] - tips[128])
        assert 10.0 <= e1 / e2 <= 22.0

    def test_step_precondition(self):
        spec = default_rod_spec(num_nodes=11)
        with pytest.raises(OracleError):
            integrate_rod_ivp(Pose.identity(), np.zeros(6), None, spec, step=spec.delta_s)

    def test_batched_matches_loop(self):
        spec = default_rod_spec(num_nodes=6)
        stresses = 0.01 * RNG.standard_normal((4, 6))
        tip, sigma, _ = integrate_rod_ivp(Pose.identity(), stresses, None, spec)
        for i in range(4):
            tip_i, sigma_i, _ = integrate_rod_ivp(Pose.identity(), stresses[i], None, spec)
            np.testing.assert_allclose(tip.translation[i], tip_i.translation, atol=1e-13)
            np.testing.assert_allclose(sigma[i], sigma_i, atol=1e-13)


class TestShooting:
    def test_zero_wrench_nominal_curve(self):
        spec = default_rod_spec(num_nodes=11)
        res = shoot_rod_bvp(Pose.identity(), np.zeros(6), spec)
        assert res.all_converged
        np.testing.assert_allclose(res.base_stress, np.zeros(6), atol=1e-10)
        np.testing.assert_allclose(
            res.curve.tip_position, [0, 0, spec.length], atol=1e-9
        )

    def test_small_force_linear_cantilever(self):
        spec = default_rod_spec(num_nodes=11)
        ei = spec.stiffness[0, 0]
        force = 0.005  # deflection ~1.8% of length: linear regime
        res = shoot_rod_bvp(Pose.identity(), np.array([0, 0, 0, force, 0, 0.0]), spec)
        assert res.all_converged
        deflection = res.curve.tip_position[0]
        beam = force * spec.length**3 / (3 * ei)
        assert abs(deflection - beam) / beam <= 0.02

    def test_global_force_balance_with_interior_wrenches(self):
        spec = default_rod_spec(num_nodes=11)
        wrenches = np.zeros((spec.num_nodes, 6))
        wrenches[4] = [0.0, 0.0005, 0.0, 0.03, 0.0, -0.01]
        wrenches[7] = [0.0002, 0.0, 0.0, -0.01, 0.02, 0.0]
        tip_wrench = np.array([0.0, 0.001, 0.0, 0.05, 0.0, 0.01])
        wrenches[-1] = tip_wrench
        res = shoot_rod_bvp(Pose.identity(), tip_wrench, spec, point_wrenches=wrenches)
        assert res.all_converged
        # transport every applied wrench to the base point in world axes
        base_pos = res.curve.poses[0].translation
        total = np.zeros(6)
        for k in range(1, spec.num_nodes):
            w = wrenches[k]
            pos = res.curve.poses[k].translation
            total[:3] += w[:3] + np.cross(pos - base_pos, w[3:])
            total[3:] += w[3:]
        base_rot = res.curve.poses[0].rotation
        expected = se3.rotate_wrench(base_rot.T, total)
        assert np.linalg.norm(res.base_stress - expected) <= 1e-9

    def test_self_convergence_at_default_step(self):
        spec = default_rod_spec(num_nodes=21)
        wrench = np.array([0.0, 0.002, 0.0, 0.1, 0.0, 0.0])
        a = shoot_rod_bvp(Pose.identity(), wrench, spec, step=spec.delta_s / 8)
        b = shoot_rod_bvp(Pose.identity(), wrench, spec, step=spec.delta_s / 16)
        diff = np.linalg.norm(a.curve.tip_position - b.curve.tip_position)
        assert diff < 1e-9 * spec.length

    def test_batched_matches_single(self):
        spec = default_rod_spec(num_nodes=9)
        wrenches = np.array(
            [
                [0.0, 0.001, 0.0, 0.05, 0.0, 0.0],
                [0.001, 0.0, 0.0, 0.0, -0.08, 0.02],
                [0.0, 0.0, 0.0005, 0.02, 0.02, -0.05],
            ]
        )
        batch = shoot_rod_bvp(Pose.identity(), wrenches, spec)
        assert batch.all_converged
        for i in range(3):
            single = shoot_rod_bvp(Pose.identity(), wrenches[i], spec)
            np.testing.assert_allclose(
                batch.curve.tip_position[i], single.curve.tip_position, atol=1e-9
            )

    def test_nonconvergence_reported_not_raised(self):
        spec = default_rod_spec(num_nodes=9)
        res = shoot_rod_bvp(
            Pose.identity(),
            np.array([0.0, 0.0, 0.0, 5.0, 0.0, 0.0]),
            spec,
            max_iterations=1,
        )
        assert not res.all_converged
        assert res.residual_norm[0] > 0
