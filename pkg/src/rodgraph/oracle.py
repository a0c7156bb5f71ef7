"""Deterministic boundary-value reference solvers.

Fine-grained initial-value integration of the Cosserat statics ODEs with a
geometric 4th-order Runge-Kutta (Munthe-Kaas) scheme, wrapped in Newton
shooting on the unknown base stress.  Used as ground truth for every
open-loop accuracy claim and as the simulator in tracking runs.

This module deliberately re-implements the mechanics (sharing only the Lie
operations) so that agreement with the factor-graph MAP is a genuine
cross-check.  Conventions match the graph: wrenches live in world axes with
moments about their own node, interior node wrenches jump the stress, and the
tip wrench is the terminal boundary condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import se3
from .rod import RodSpec
from .se3 import Pose


class OracleError(RuntimeError):
    pass


@dataclass
class RodCurve:
    """Pose and body-frame stress sampled at the node stations.

    Stress samples follow the graph convention: post-jump at interior nodes,
    pre-jump (boundary) value at the tip.  Arrays may carry a trailing batch
    axis after the node axis.
    """

    arclengths: np.ndarray
    poses: Pose
    stresses: np.ndarray

    @property
    def tip_pose(self) -> Pose:
        return self.poses[-1]

    @property
    def tip_position(self) -> np.ndarray:
        return self.poses.translation[-1]


def _stress_rate(strain: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """ad_eps^T sigma without forming the 6x6 operator."""
    w, v = strain[..., :3], strain[..., 3:]
    m, f = sigma[..., :3], sigma[..., 3:]
    return np.concatenate([np.cross(m, w) + np.cross(f, v), np.cross(f, w)], axis=-1)


def _ad_apply(xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """ad_xi eta = (w x eta_w, v x eta_w + w x eta_v)."""
    w, v = xi[..., :3], xi[..., 3:]
    ew, ev = eta[..., :3], eta[..., 3:]
    return np.concatenate([np.cross(w, ew), np.cross(v, ew) + np.cross(w, ev)], axis=-1)


def _dexpinv_apply(omega: np.ndarray, strain: np.ndarray) -> np.ndarray:
    """Jr_inv(omega) strain truncated at ad^2; exact enough for substep omegas.

    The cubic Bernoulli term vanishes, so the truncation error is
    O(|omega|^4 |strain|), negligible at the per-substep rotation scale.
    """
    a1 = _ad_apply(omega, strain)
    a2 = _ad_apply(omega, a1)
    return strain + 0.5 * a1 + (1.0 / 12.0) * a2


def _rkmk4_interval(pose: Pose, sigma: np.ndarray, spec: RodSpec, k: int, n_sub: int):
    """Integrate one inter-node interval; pose updated multiplicatively.

    The stress ODE closes on itself between stations, so the sequential pass
    only advances sigma while recording the stage strains; the Lie-algebra
    pose increments and their exponentials are then evaluated batched over
    all substeps before a final composition sweep.
    """
    h = spec.delta_s / n_sub
    kinv_t = spec.stiffness_inv.T
    eps_bar = spec.interval_strain(k)
    stage_strains = []

    for _ in range(n_sub):
        e1 = sigma @ kinv_t + eps_bar
        ds1 = _stress_rate(e1, sigma)
        s2 = sigma + (0.5 * h) * ds1
        e2 = s2 @ kinv_t + eps_bar
        ds2 = _stress_rate(e2, s2)
        s3 = sigma + (0.5 * h) * ds2
        e3 = s3 @ kinv_t + eps_bar
        ds3 = _stress_rate(e3, s3)
        s4 = sigma + h * ds3
        e4 = s4 @ kinv_t + eps_bar
        ds4 = _stress_rate(e4, s4)
        sigma = sigma + (h / 6.0) * (ds1 + 2 * ds2 + 2 * ds3 + ds4)
        stage_strains.append((e1, e2, e3, e4))

    # batched Munthe-Kaas increments: stage k_i depends only on within-substep
    # quantities once the stage strains are known
    e1 = np.stack([s[0] for s in stage_strains])
    e2 = np.stack([s[1] for s in stage_strains])
    e3 = np.stack([s[2] for s in stage_strains])
    e4 = np.stack([s[3] for s in stage_strains])
    k1 = e1
    k2 = _dexpinv_apply((0.5 * h) * k1, e2)
    k3 = _dexpinv_apply((0.5 * h) * k2, e3)
    k4 = _dexpinv_apply(h * k3, e4)
    omegas = (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    increments = se3.exp_se3(omegas)

    rot, tr = pose.rotation, pose.translation
    for i in range(n_sub):
        tr = (rot @ increments.translation[i][..., None])[..., 0] + tr
        rot = rot @ increments.rotation[i]
    return Pose(rot, tr), sigma


def integrate_rod_ivp(
    base_pose: Pose,
    base_stress: np.ndarray,
    point_wrenches: np.ndarray | None,
    spec: RodSpec,
    step: float | None = None,
):
    """Integrate pose and body-frame stress from base to tip.

    point_wrenches is (num_nodes, 6) (or batched (..., num_nodes, 6)) in world
    axes; entries at interior nodes 1..K-1 jump the stress.  The node-0 and
    node-K entries do not jump anything here: the base wrench is a mount
    reaction and the tip wrench is boundary data for the shooting solver.

    Returns (tip_pose, tip_stress, RodCurve); everything broadcasts over
    leading batch dimensions of base_stress.
    """
    if step is None:
        step = spec.delta_s / 8.0
    if step > spec.delta_s / 8.0 + 1e-15:
        raise OracleError("oracle step must satisfy step <= delta_s / 8")
    n_sub = int(np.ceil(spec.delta_s / step - 1e-12))

    sigma = np.asarray(base_stress, dtype=float)
    batch = sigma.shape[:-1]
    pose = base_pose
    if batch and pose.batch_shape != batch:
        pose = Pose(
            np.broadcast_to(pose.rotation, batch + (3, 3)).copy(),
            np.broadcast_to(pose.translation, batch + (3,)).copy(),
        )
    node_poses = [pose]
    node_stresses = [sigma]
    for k in range(spec.K):
        pose, sigma = _rkmk4_interval(pose, sigma, spec, k, n_sub)
        if point_wrenches is not None and 0 < k + 1 < spec.K:
            wrench = np.asarray(point_wrenches, dtype=float)[..., k + 1, :]
            rot_t = np.swapaxes(pose.rotation, -1, -2)
            sigma = sigma - se3.rotate_wrench(rot_t, wrench)
        node_poses.append(pose)
        node_stresses.append(sigma)

    curve = RodCurve(
        np.arange(spec.num_nodes) * spec.delta_s,
        Pose.stack(node_poses),
        np.stack(node_stresses),
    )
    return pose, sigma, curve


@dataclass
class ShootingResult:
    curve: RodCurve
    base_stress: np.ndarray
    converged: np.ndarray  # bool, per batch entry
    residual_norm: np.ndarray
    iterations: int

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))


def _tip_residual(base_pose, sigma0, tip_wrench, point_wrenches, spec, step):
    # wild trial states may overflow mid-integration; they surface as
    # non-finite residuals and are rejected by the backtracking line search
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        tip_pose, tip_stress, _ = integrate_rod_ivp(base_pose, sigma0, point_wrenches, spec, step)
        rot_t = np.swapaxes(tip_pose.rotation, -1, -2)
        return tip_stress - se3.rotate_wrench(rot_t, tip_wrench)


def _finite_norm(residual: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(residual, axis=-1)
    return np.where(np.isfinite(norm), norm, np.inf)


def shoot_rod_bvp(
    base_pose: Pose,
    tip_wrench: np.ndarray,
    spec: RodSpec,
    point_wrenches: np.ndarray | None = None,
    step: float | None = None,
    initial_base_stress: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iterations: int = 50,
    fd_step: float = 1e-8,
) -> ShootingResult:
    """Newton shooting on the base stress of one or many rods.

    tip_wrench may be (6,) or (B, 6); all B problems share the spec and are
    integrated together.  Non-converged entries are reported through the
    `converged` mask with their best residual.
    """
    tip_wrench = np.asarray(tip_wrench, dtype=float)
    single = tip_wrench.ndim == 1
    tip_wrench = np.atleast_2d(tip_wrench)
    b = tip_wrench.shape[0]
    sigma = (
        np.zeros((b, 6))
        if initial_base_stress is None
        else np.atleast_2d(np.asarray(initial_base_stress, dtype=float)).copy()
    )
    if point_wrenches is not None:
        point_wrenches = np.asarray(point_wrenches, dtype=float)

    res = _tip_residual(base_pose, sigma, tip_wrench, point_wrenches, spec, step)
    res_norm = _finite_norm(res)
    iterations = 0
    stalled = np.zeros(b, dtype=bool)
    for iterations in range(1, max_iterations + 1):
        active_idx = np.where((res_norm > tol) & ~stalled)[0]
        if active_idx.size == 0:
            break
        a = active_idx.size
        sig_a = sigma[active_idx]
        tw_a = tip_wrench[active_idx]
        pw_a = None
        if point_wrenches is not None:
            pw_a = point_wrenches if point_wrenches.ndim == 2 else point_wrenches[active_idx]

        def eval_active(states, copies=1):
            pw = pw_a
            if pw is not None and pw.ndim == 3 and copies > 1:
                pw = np.tile(pw, (copies, 1, 1))
            tw = np.tile(tw_a, (copies, 1)) if copies > 1 else tw_a
            return _tip_residual(base_pose, states, tw, pw, spec, step)

        # Batched forward-difference Jacobian: base + 6 perturbed copies.
        stacked = np.empty((7, a, 6))
        stacked[0] = sig_a
        for j in range(6):
            stacked[j + 1] = sig_a
            stacked[j + 1, :, j] += fd_step
        wide_res = eval_active(stacked.reshape(7 * a, 6), copies=7).reshape(7, a, 6)
        base_res = wide_res[0]
        if not np.all(np.isfinite(wide_res)):
            wide_res = np.nan_to_num(wide_res, nan=0.0, posinf=0.0, neginf=0.0)
        jac = np.moveaxis((wide_res[1:] - base_res[None]) / fd_step, 0, -1)  # (A, 6, 6)
        try:
            delta = np.linalg.solve(jac, -base_res[..., None])[..., 0]
        except np.linalg.LinAlgError:
            delta = np.stack(
                [np.linalg.lstsq(jac[i], -base_res[i], rcond=None)[0] for i in range(a)]
            )

        # Backtracking: halve steps that fail to reduce the residual.
        t = np.ones(a)
        norm_a = res_norm[active_idx]
        for _ in range(10):
            candidate = sig_a + t[:, None] * delta
            cand_norm = _finite_norm(eval_active(candidate))
            worse = (cand_norm > norm_a) & (t > 2**-10)
            if not np.any(worse):
                break
            t = np.where(worse, 0.5 * t, t)
        improved = cand_norm <= norm_a
        stalled[active_idx[~improved]] = True
        take = active_idx[improved]
        sigma[take] = candidate[improved]
        res_norm[take] = cand_norm[improved]

    converged = res_norm <= tol
    tip_pose, tip_stress, curve = integrate_rod_ivp(base_pose, sigma, point_wrenches, spec, step)
    if single and b == 1:
        curve = RodCurve(curve.arclengths, curve.poses[:, 0], curve.stresses[:, 0])
        return ShootingResult(curve, sigma[0], converged[:1], res_norm[:1], iterations)
    return ShootingResult(curve, sigma, converged, res_norm, iterations)


# -- tendon robot ---------------------------------------------------------------


def _oracle_tendon_loads(node_poses: list[Pose], layout, tensions: np.ndarray):
    """World-axes disc wrenches from the current geometry (own implementation).

    Returns (station_wrenches (num_nodes, 6) covering interior discs, tip
    wrench from the terminal disc).  The first disc has no proximal segment;
    a disc at the clamped base transmits into the mount and is skipped.
    """
    discs = layout.disc_nodes
    num_nodes = len(node_poses)
    stations = np.zeros((num_nodes, 6))
    tip = np.zeros(6)
    for idx, d in enumerate(discs):
        if d == 0:
            continue
        pose_d = node_poses[d]
        holes_d = layout.holes_at(d)
        total = np.zeros(6)
        for j in (discs[idx - 1] if idx > 0 else None, discs[idx + 1] if idx + 1 < len(discs) else None):
            if j is None:
                continue
            pose_j = node_poses[j]
            holes_j = layout.holes_at(j)
            rel = pose_d.inverse().compose(pose_j)
            chord = rel.apply(holes_j) - holes_d
            norms = np.linalg.norm(chord, axis=-1)
            unit = chord / norms[:, None]
            force = tensions[:, None] * unit
            body = np.concatenate([np.cross(holes_d, force), force], axis=-1).sum(axis=0)
            total = total + se3.rotate_wrench(pose_d.rotation, body)
        if d == num_nodes - 1:
            tip = total
        else:
            stations[d] = total
    return stations, tip


@dataclass
class TendonShootingResult:
    curve: RodCurve
    base_stress: np.ndarray
    converged: bool
    iterations: int
    residual_norm: float
    tip_wrench: np.ndarray
    disc_poses: list[Pose] | None = None


def _tendon_loads_batched(disc_poses: dict[int, Pose], layout, tensions, num_nodes, batch):
    """Station wrenches and tip wrench from guessed disc poses, batched."""
    discs = layout.disc_nodes
    stations = np.zeros(batch + (num_nodes, 6))
    tip = np.zeros(batch + (6,))
    for idx, d in enumerate(discs):
        if d == 0:
            continue
        pose_d = disc_poses[d]
        holes_d = layout.holes_at(d)
        total = np.zeros(batch + (6,))
        for j in (discs[idx - 1] if idx > 0 else None,
                  discs[idx + 1] if idx + 1 < len(discs) else None):
            if j is None:
                continue
            pose_j = disc_poses[j]
            holes_j = layout.holes_at(j)
            rel = pose_d.inverse().compose(pose_j)
            # chord per tendon: (..., N, 3)
            p = (rel.rotation[..., None, :, :] @ holes_j[..., None])[..., 0] + rel.translation[..., None, :]
            chord = p - holes_d
            norms = np.linalg.norm(chord, axis=-1)
            unit = chord / norms[..., None]
            force = tensions[..., None] * unit
            moment = np.cross(np.broadcast_to(holes_d, force.shape), force)
            body = np.concatenate([moment, force], axis=-1).sum(axis=-2)
            total = total + se3.rotate_wrench(pose_d.rotation, body)
        if d == num_nodes - 1:
            tip = total
        else:
            stations[..., d, :] = total
    return stations, tip


def shoot_tendon_bvp(
    tensions: np.ndarray,
    external_wrenches: np.ndarray | None,
    spec: RodSpec,
    layout,
    base_pose: Pose | None = None,
    step: float | None = None,
    warm: "TendonShootingResult | None" = None,
    tol: float = 1e-10,
    max_iterations: int = 60,
    fd_step: float = 1e-8,
) -> TendonShootingResult:
    """Tendon robot equilibrium by Newton shooting with self-consistent loads.

    Tendon loads are follower loads: they depend on the deformed geometry.
    Solving with frozen (dead) loads goes unstable once the total tension
    passes the dead-load buckling limit, so the Newton unknowns are the base
    stress jointly with the disc poses that the loads are evaluated at, and
    the residual enforces tip boundary consistency plus agreement between
    guessed and integrated disc poses.
    """
    base_pose = base_pose or Pose.identity()
    tensions = np.asarray(tensions, dtype=float)
    if external_wrenches is None:
        external_wrenches = np.zeros((spec.num_nodes, 6))
    external_wrenches = np.asarray(external_wrenches, dtype=float)
    discs = [d for d in layout.disc_nodes if d > 0]
    n_unknowns = 6 + 6 * len(discs)

    from .rod import unstressed_poses

    if warm is not None and warm.disc_poses is not None:
        ref_poses = {d: p for d, p in zip(discs, warm.disc_poses)}
        sigma0 = warm.base_stress.copy()
    else:
        nominal = unstressed_poses(spec, base_pose)
        ref_poses = {d: nominal[d] for d in discs}
        sigma0 = np.zeros(6)

    def unpack(z):
        batch = z.shape[:-1]
        sigma = z[..., :6]
        guesses = {}
        for i, d in enumerate(discs):
            xi = z[..., 6 + 6 * i : 12 + 6 * i]
            guesses[d] = _broadcast_pose(ref_poses[d], batch).compose(se3.exp_se3(xi))
        return sigma, guesses

    def residual(z):
        batch = z.shape[:-1]
        sigma, guesses = unpack(z)
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            try:
                stations, tendon_tip = _tendon_loads_batched(
                    guesses, layout, tensions, spec.num_nodes, batch
                )
                stations = stations + external_wrenches
                stations[..., -1, :] = 0.0
                tip_wrench = tendon_tip + external_wrenches[-1]
                tip_pose, tip_stress, curve = integrate_rod_ivp(
                    base_pose, sigma, stations, spec, step
                )
                rot_t = np.swapaxes(tip_pose.rotation, -1, -2)
                parts = [tip_stress - se3.rotate_wrench(rot_t, tip_wrench)]
                for d in discs:
                    integrated = curve.poses[d]
                    parts.append(se3.log_se3(guesses[d].inverse().compose(integrated)))
            except se3.BranchCutError:
                # wild trial state: flag it so the line search backs off
                return np.full(batch + (n_unknowns,), np.inf), None, None
        return np.concatenate(parts, axis=-1), curve, tip_wrench

    z = np.zeros(n_unknowns)
    z[:6] = sigma0
    res, curve, tip_wrench = residual(z)
    res_norm = float(_finite_norm(res))
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if res_norm <= tol:
            break
        wide = np.tile(z, (n_unknowns + 1, 1))
        wide[1:] += fd_step * np.eye(n_unknowns)
        wide_res, _, _ = residual(wide)
        wide_res = np.nan_to_num(wide_res, nan=0.0, posinf=0.0, neginf=0.0)
        jac = (wide_res[1:] - wide_res[0]).T / fd_step
        try:
            delta = np.linalg.solve(jac, -wide_res[0])
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -wide_res[0], rcond=None)[0]
        t = 1.0
        for _ in range(10):
            cand = z + t * delta
            cand_res, cand_curve, cand_tip = residual(cand)
            cand_norm = float(_finite_norm(cand_res))
            if cand_norm <= res_norm or t <= 2**-10:
                break
            t *= 0.5
        if cand_norm > res_norm:
            break  # stalled
        z, res, res_norm = cand, cand_res, cand_norm
        curve, tip_wrench = cand_curve, cand_tip

    sigma, guesses = unpack(z)
    return TendonShootingResult(
        curve,
        sigma,
        bool(res_norm <= tol),
        iterations,
        res_norm,
        tip_wrench,
        [guesses[d] for d in discs],
    )


def _broadcast_pose(pose: Pose, batch: tuple) -> Pose:
    if not batch or pose.batch_shape == batch:
        return pose
    return Pose(
        np.broadcast_to(pose.rotation, batch + (3, 3)),
        np.broadcast_to(pose.translation, batch + (3,)),
    )


def coarse_oracle_view(spec: RodSpec, layout, factor: int):
    """Re-grid a tendon problem so oracle nodes sit exactly at the discs.

    Loads exist only at disc nodes, so integrating on a coarser station grid
    whose nodes coincide with the disc arclengths solves the identical
    continuous problem with fewer substeps.  Requires every disc index and K
    to be multiples of `factor` and a constant nominal strain.

    Returns (coarse_spec, coarse_layout, node_map) where node_map[fine] gives
    the coarse node index of representable fine nodes.
    """
    from .tendon import TendonLayout

    if spec.K % factor or any(d % factor for d in layout.disc_nodes):
        raise OracleError("grid coarsening requires disc indices divisible by factor")
    if spec.nominal_strain.ndim != 1:
        raise OracleError("grid coarsening requires a constant nominal strain")
    coarse_spec = spec.with_nodes(spec.K // factor + 1)
    coarse_layout = TendonLayout(
        tuple(d // factor for d in layout.disc_nodes),
        layout.hole_positions.copy(),
        layout.sigma_D.copy(),
        layout.sigma_Q.copy(),
    )
    node_map = {k: k // factor for k in range(0, spec.num_nodes, factor)}
    return coarse_spec, coarse_layout, node_map


def remap_station_wrenches(
    wrenches: np.ndarray | None, node_map: dict[int, int], coarse_nodes: int
) -> np.ndarray | None:
    """Carry per-node wrenches onto the coarse grid; off-grid loads must be zero."""
    if wrenches is None:
        return None
    wrenches = np.asarray(wrenches, dtype=float)
    out = np.zeros((coarse_nodes, 6))
    for k in range(wrenches.shape[0]):
        if k in node_map:
            out[node_map[k]] = wrenches[k]
        elif np.any(wrenches[k] != 0.0):
            raise OracleError(f"wrench at node {k} is not representable on the coarse grid")
    return out


# -- parallel platform robot ----------------------------------------------------


@dataclass
class ParallelShootingResult:
    platform_pose: Pose
    rod_curves: list[RodCurve]
    base_stresses: np.ndarray  # (M, 6)
    base_efforts: np.ndarray  # (M,) vertical force read at each base
    converged: bool
    iterations: int
    residual_norm: float
    state: np.ndarray | None = None  # warm-start vector


def shoot_parallel_bvp(
    insertions: np.ndarray,
    platform_wrench: np.ndarray,
    platform,
    step: float | None = None,
    warm: "ParallelShootingResult | None" = None,
    tol: float = 1e-9,
    max_iterations: int = 60,
    fd_step: float = 1e-8,
) -> ParallelShootingResult:
    """Outer Newton on (platform twist, per-rod base stresses).

    The residual stacks the attachment pose constraints of every rod against
    the guessed platform pose plus the platform wrench balance; each
    evaluation integrates all rods in one batch.
    """
    spec = platform.rod_spec
    m = platform.rod_count
    insertions = np.asarray(insertions, dtype=float)
    platform_wrench = np.asarray(platform_wrench, dtype=float)
    n_unknowns = 6 + 6 * m

    base_rots = np.stack([p.rotation for p in platform.base_poses])
    base_trs = np.stack(
        [p.translation + np.array([0.0, 0.0, q]) for p, q in zip(platform.base_poses, insertions)]
    )
    ref_platform = platform.platform_nominal
    offsets_inv = [o.inverse() for o in platform.tip_offsets]

    def residual(z):
        """z: (..., 6 + 6M) -> (..., 6M + 6)."""
        batch = z.shape[:-1]
        xi_p = z[..., :6]
        sigmas = z[..., 6:].reshape(batch + (m, 6))
        platform_pose = _broadcast_pose(ref_platform, batch).compose(se3.exp_se3(xi_p))
        base_pose = Pose(
            np.broadcast_to(base_rots, batch + (m, 3, 3)),
            np.broadcast_to(base_trs, batch + (m, 3)),
        )
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            try:
                tip_pose, tip_stress, curve = integrate_rod_ivp(base_pose, sigmas, None, spec, step)
                parts = []
                balance = -se3.rotate_wrench(
                    np.swapaxes(platform_pose.rotation, -1, -2), platform_wrench
                )
                for i in range(m):
                    tip_i = Pose(tip_pose.rotation[..., i, :, :], tip_pose.translation[..., i, :])
                    rel = platform_pose.inverse().compose(tip_i)
                    parts.append(se3.log_se3(offsets_inv[i].compose(rel)))
                    rel_bal = tip_i.inverse().compose(platform_pose)
                    balance = balance + np.einsum(
                        "...ji,...j->...i", se3.adjoint(rel_bal), tip_stress[..., i, :]
                    )
                parts.append(balance)
            except se3.BranchCutError:
                return np.full(batch + (n_unknowns,), np.inf), None, None, None
        return np.concatenate(parts, axis=-1), tip_pose, tip_stress, curve

    z = np.zeros(n_unknowns) if warm is None or warm.state is None else warm.state.copy()
    res, *_ = residual(z)
    res_norm = float(_finite_norm(res))
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if res_norm <= tol:
            break
        wide = np.tile(z, (n_unknowns + 1, 1))
        wide[1:] += fd_step * np.eye(n_unknowns)
        wide_res, *_ = residual(wide)
        wide_res = np.nan_to_num(wide_res, nan=0.0, posinf=0.0, neginf=0.0)
        jac = (wide_res[1:] - wide_res[0]).T / fd_step
        try:
            delta = np.linalg.solve(jac, -wide_res[0])
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -wide_res[0], rcond=None)[0]
        t = 1.0
        for _ in range(10):
            cand = z + t * delta
            cand_res, *_ = residual(cand)
            cand_norm = float(_finite_norm(cand_res))
            if cand_norm <= res_norm or t <= 2**-10:
                break
            t *= 0.5
        if cand_norm > res_norm:
            break
        z, res_norm = cand, cand_norm

    final_res, tip_pose, tip_stress, curve = residual(z)
    xi_p = z[:6]
    sigmas = z[6:].reshape(m, 6)
    platform_pose = ref_platform.compose(se3.exp_se3(xi_p))
    rod_curves = []
    efforts = np.zeros(m)
    for i in range(m):
        rod_curves.append(
            RodCurve(curve.arclengths, curve.poses[:, i], curve.stresses[:, i])
        )
        base_force_world = base_rots[i] @ sigmas[i, 3:]
        efforts[i] = -base_force_world[2]
    return ParallelShootingResult(
        platform_pose,
        rod_curves,
        sigmas,
        efforts,
        bool(res_norm <= tol),
        iterations,
        float(res_norm),
        z.copy(),
    )


# -- serial two-tube robot --------------------------------------------------------


@dataclass
class SerialShootingResult:
    segment_curves: list[RodCurve]
    converged: bool
    iterations: int
    residual_norm: float
    state: np.ndarray | None = None

    @property
    def tip_pose(self) -> Pose:
        return self.segment_curves[-1].poses[-1]

    @property
    def tip_position(self) -> np.ndarray:
        return self.tip_pose.translation


def shoot_serial_bvp(
    spec,
    actuation,
    tip_wrench: np.ndarray,
    step: float | None = None,
    warm: "SerialShootingResult | None" = None,
    tol: float = 1e-10,
    max_iterations: int = 60,
    fd_step: float = 1e-8,
) -> SerialShootingResult:
    """Joint Newton on the base stresses of every segment.

    Residuals: stress continuity (rotated by the relative actuation angle)
    at each junction, and the terminal tip boundary condition.  Segments are
    integrated in sequence per evaluation; evaluations are batched over the
    finite-difference columns.
    """
    rotations = np.asarray(actuation.rotations, dtype=float)
    insertions = np.asarray(actuation.insertions, dtype=float)
    tip_wrench = np.asarray(tip_wrench, dtype=float)
    rod_specs = [seg.rod_spec(ins) for seg, ins in zip(spec.segments, insertions)]
    n_seg = len(rod_specs)
    n_unknowns = 6 * n_seg
    base0 = spec.mount_pose.compose(Pose(se3.rotz(rotations[0]), np.zeros(3)))

    def residual(z):
        batch = z.shape[:-1]
        parts = []
        curves = []
        pose = _broadcast_pose(base0, batch)
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for i, rod_spec in enumerate(rod_specs):
                if i > 0:
                    offset = Pose(se3.rotz(rotations[i]), np.zeros(3))
                    pose = pose.compose(_broadcast_pose(offset, batch))
                sigma = z[..., 6 * i : 6 * i + 6]
                tip_pose, tip_stress, curve = integrate_rod_ivp(pose, sigma, None, rod_spec, step)
                curves.append(curve)
                if i + 1 < n_seg:
                    rot = se3.rotz(rotations[i + 1])
                    next_sigma = z[..., 6 * (i + 1) : 6 * (i + 1) + 6]
                    carried = se3.rotate_wrench(rot, next_sigma)
                    parts.append(tip_stress - carried)
                else:
                    rot_t = np.swapaxes(tip_pose.rotation, -1, -2)
                    parts.append(tip_stress - se3.rotate_wrench(rot_t, tip_wrench))
                pose = tip_pose
        return np.concatenate(parts, axis=-1), curves

    z = np.zeros(n_unknowns) if warm is None or warm.state is None else warm.state.copy()
    res, curves = residual(z)
    res_norm = float(_finite_norm(res))
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        if res_norm <= tol:
            break
        wide = np.tile(z, (n_unknowns + 1, 1))
        wide[1:] += fd_step * np.eye(n_unknowns)
        wide_res, _ = residual(wide)
        wide_res = np.nan_to_num(wide_res, nan=0.0, posinf=0.0, neginf=0.0)
        jac = (wide_res[1:] - wide_res[0]).T / fd_step
        try:
            delta = np.linalg.solve(jac, -wide_res[0])
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(jac, -wide_res[0], rcond=None)[0]
        t = 1.0
        for _ in range(10):
            cand = z + t * delta
            cand_res, cand_curves = residual(cand)
            cand_norm = float(_finite_norm(cand_res))
            if cand_norm <= res_norm or t <= 2**-10:
                break
            t *= 0.5
        if cand_norm > res_norm:
            break
        z, res_norm, curves = cand, cand_norm, cand_curves

    return SerialShootingResult(
        curves, bool(res_norm <= tol), iterations, res_norm, z.copy()
    )
