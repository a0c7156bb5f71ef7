"""Exact SO(3)/SE(3) operations in the rotational-first convention.

All 6-vectors stack the rotational block first: twists are (omega, nu),
stresses are (moment, force), wrenches are (moment, force).  Every function
broadcasts over leading batch dimensions, so a stacked chain of poses can be
processed in one call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Below this rotation angle the closed-form exp/log coefficients switch to
# their Taylor series (keeps relative error < 1e-12 in double precision).
SMALL_ANGLE = 1e-6

# Principal log branch: rotations must stay below pi by this margin.
BRANCH_MARGIN = 1e-6


class BranchCutError(ValueError):
    """Rotation angle too close to pi for the principal logarithm."""


def hat3(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that hat3(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def unhat3(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _angle(omega: np.ndarray) -> np.ndarray:
    return np.linalg.norm(omega, axis=-1)


def _exp_coefficients(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A = sin(t)/t, B = (1-cos(t))/t^2, C = (t-sin(t))/t^3 with Taylor fallback."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(t)) / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def so3_exp(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = _angle(omega)
    a, b, _ = _exp_coefficients(theta)
    k = hat3(omega)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def _check_branch(theta: np.ndarray) -> None:
    if np.any(theta >= np.pi - BRANCH_MARGIN):
        raise BranchCutError(
            "rotation angle within %g of pi; principal log undefined" % BRANCH_MARGIN
        )


def so3_log(rotation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=float)
    trace = np.trace(rotation, axis1=-2, axis2=-1)
    cos_theta = np.clip(0.5 * (trace - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    _check_branch(theta)
    half_skew = 0.5 * unhat3(rotation - np.swapaxes(rotation, -1, -2))
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    # theta / sin(theta): well defined away from pi (guarded above).
    scale = np.where(small, 1.0 + t2 / 6.0, t / np.sin(t))
    return scale[..., None] * half_skew


def _v_inv_coefficient(theta: np.ndarray) -> np.ndarray:
    """Coefficient of omega^^2 in V(omega)^-1: 1/t^2 - (1+cos t)/(2 t sin t)."""
    theta = np.asarray(theta, dtype=float)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    exact = 1.0 / (t * t) - (1.0 + np.cos(t)) / (2.0 * t * np.sin(t))
    return np.where(small, 1.0 / 12.0 + t2 / 720.0, exact)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    """J_l(omega) = I + B k + C k^2; equals the exp translation V matrix."""
    omega = np.asarray(omega, dtype=float)
    theta = _angle(omega)
    _, b, c = _exp_coefficients(theta)
    k = hat3(omega)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + b[..., None, None] * k + c[..., None, None] * k2


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = _angle(omega)
    _check_branch(theta)
    k = hat3(omega)
    k2 = k @ k
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye - 0.5 * k + _v_inv_coefficient(theta)[..., None, None] * k2


@dataclass(frozen=True)
class Pose:
    """Rigid transform on SE(3) mapping body to spatial coordinates.

    rotation: (..., 3, 3) orthonormal, det +1; translation: (..., 3) meters.
    Leading dimensions are shared batch dimensions.
    """

    rotation: np.ndarray
    translation: np.ndarray

    @staticmethod
    def identity(batch_shape: tuple[int, ...] = ()) -> "Pose":
        rot = np.broadcast_to(np.eye(3), batch_shape + (3, 3)).copy()
        return Pose(rot, np.zeros(batch_shape + (3,)))

    @staticmethod
    def from_rt(rotation: np.ndarray, translation: np.ndarray) -> "Pose":
        return Pose(np.asarray(rotation, dtype=float), np.asarray(translation, dtype=float))

    @staticmethod
    def stack(poses: list["Pose"]) -> "Pose":
        return Pose(
            np.stack([p.rotation for p in poses]),
            np.stack([p.translation for p in poses]),
        )

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.translation.shape[:-1]

    def __getitem__(self, idx) -> "Pose":
        return Pose(self.rotation[idx], self.translation[idx])

    def compose(self, other: "Pose") -> "Pose":
        rot = self.rotation @ other.rotation
        trans = (self.rotation @ other.translation[..., None])[..., 0] + self.translation
        return Pose(rot, trans)

    def inverse(self) -> "Pose":
        rot_t = np.swapaxes(self.rotation, -1, -2)
        return Pose(rot_t, -(rot_t @ self.translation[..., None])[..., 0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (self.rotation @ points[..., None])[..., 0] + self.translation

    def matrix(self) -> np.ndarray:
        out = np.zeros(self.batch_shape + (4, 4))
        out[..., :3, :3] = self.rotation
        out[..., :3, 3] = self.translation
        out[..., 3, 3] = 1.0
        return out

    def orthonormalized(self) -> "Pose":
        # One Newton step R(3I - R^T R)/2 removes first-order drift.
        r = self.rotation
        r = r @ (1.5 * np.broadcast_to(np.eye(3), r.shape) - 0.5 * (np.swapaxes(r, -1, -2) @ r))
        return Pose(r, self.translation)

    def copy(self) -> "Pose":
        return Pose(self.rotation.copy(), self.translation.copy())


def rotz(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def exp_se3(xi: np.ndarray) -> Pose:
    """Closed-form SE(3) exponential of a rotational-first twist."""
    xi = np.asarray(xi, dtype=float)
    omega, nu = xi[..., :3], xi[..., 3:]
    rotation = so3_exp(omega)
    translation = (so3_left_jacobian(omega) @ nu[..., None])[..., 0]
    return Pose(rotation, translation)


def log_se3(pose: Pose) -> np.ndarray:
    """Principal SE(3) logarithm; raises BranchCutError near angle pi."""
    omega = so3_log(pose.rotation)
    nu = (so3_left_jacobian_inv(omega) @ pose.translation[..., None])[..., 0]
    return np.concatenate([omega, nu], axis=-1)


def adjoint(pose: Pose) -> np.ndarray:
    """Ad(T) = [[R, 0], [t^ R, R]] acting on rotational-first twists."""
    r = pose.rotation
    out = np.zeros(pose.batch_shape + (6, 6))
    out[..., :3, :3] = r
    out[..., 3:, 3:] = r
    out[..., 3:, :3] = hat3(pose.translation) @ r
    return out


def ad_op(xi: np.ndarray) -> np.ndarray:
    """ad_xi = [[w^, 0], [v^, w^]] for xi = (w, v)."""
    xi = np.asarray(xi, dtype=float)
    w = hat3(xi[..., :3])
    v = hat3(xi[..., 3:])
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = w
    out[..., 3:, 3:] = w
    out[..., 3:, :3] = v
    return out


def rot_op(pose: Pose) -> np.ndarray:
    """Block-diagonal rotation used to re-express wrenches between frames."""
    out = np.zeros(pose.batch_shape + (6, 6))
    out[..., :3, :3] = pose.rotation
    out[..., 3:, 3:] = pose.rotation
    return out


def rotate_wrench(rotation: np.ndarray, wrench: np.ndarray) -> np.ndarray:
    """Apply blockdiag(R, R) to a 6-vector without forming the 6x6 matrix."""
    m = (rotation @ wrench[..., :3, None])[..., 0]
    f = (rotation @ wrench[..., 3:, None])[..., 0]
    return np.concatenate([m, f], axis=-1)


def _q_matrix(omega: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    theta = _angle(omega)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    sin_t, cos_t = np.sin(t), np.cos(t)
    c1 = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - sin_t) / t**3)
    c2 = np.where(small, 1.0 / 24.0 - t2 / 720.0, (t2 + 2.0 * cos_t - 2.0) / (2.0 * t**4))
    c3 = np.where(small, 1.0 / 120.0 - t2 / 2520.0, (2.0 * t - 3.0 * sin_t + t * cos_t) / (2.0 * t**5))
    w = hat3(omega)
    v = hat3(nu)
    wv, vw = w @ v, v @ w
    wvw = wv @ w
    return (
        0.5 * v
        + c1[..., None, None] * (wv + vw + wvw)
        + c2[..., None, None] * (w @ wv + vw @ w - 3.0 * wvw)
        + c3[..., None, None] * (wvw @ w + w @ wvw)
    )


def left_jacobian(xi: np.ndarray) -> np.ndarray:
    """SE(3) left Jacobian [[Jl(w), 0], [Q(w, v), Jl(w)]]."""
    xi = np.asarray(xi, dtype=float)
    omega, nu = xi[..., :3], xi[..., 3:]
    jl = so3_left_jacobian(omega)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = jl
    out[..., 3:, 3:] = jl
    out[..., 3:, :3] = _q_matrix(omega, nu)
    return out


def left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    omega, nu = xi[..., :3], xi[..., 3:]
    jli = so3_left_jacobian_inv(omega)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = jli
    out[..., 3:, 3:] = jli
    out[..., 3:, :3] = -jli @ _q_matrix(omega, nu) @ jli
    return out


def right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian: log(exp(xi) exp(d)) ~ xi + Jr_inv(xi) d."""
    return left_jacobian_inv(-np.asarray(xi, dtype=float))


def right_jacobian(xi: np.ndarray) -> np.ndarray:
    return left_jacobian(-np.asarray(xi, dtype=float))
