"""Camera geometry: poses, projection, and reprojection Jacobians.

Conventions used everywhere in this package:

* Poses map world points into the camera frame: ``X_cam = R @ X_world + t``.
* Rotations are stored as unit quaternions in scalar-last order
  ``[qx, qy, qz, qw]``.
* Pose updates are left multiplicative: a tangent step ``delta`` applied to
  pose ``T`` yields ``exp(delta) @ T``, with ``delta = [rho, phi]`` stacking
  the translational part first.
* Pixel coordinates are continuous, ``u`` along image width, ``v`` along
  height, origin at the top-left corner.
* Camera-frame depths at or below ``Z_MIN`` are treated as behind the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidDepthError

Z_MIN = 1e-6


# ---------------------------------------------------------------------------
# Quaternion helpers (scalar-last)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    """Return q scaled to unit norm.

    Parameters
    ----------
    q : array_like, shape (4,)
        Quaternion in [qx, qy, qz, qw] order.
    """
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_multiply(a, b):
    """Hamilton product a * b for scalar-last quaternions."""
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conjugate(q):
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_from_rotvec(phi):
    """Unit quaternion for a rotation vector (axis times angle).

    Uses a series expansion of sin(theta/2)/theta below 1e-8 radians so the
    map stays smooth through zero.
    """
    phi = np.asarray(phi, dtype=np.float64)
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    if theta < 1e-8:
        # sin(t/2)/t = 1/2 - t^2/48 + O(t^4)
        s = 0.5 - theta2 / 48.0
        w = 1.0 - theta2 / 8.0
    else:
        s = np.sin(0.5 * theta) / theta
        w = np.cos(0.5 * theta)
    return quat_normalize(np.array([phi[0] * s, phi[1] * s, phi[2] * s, w]))


def quat_to_matrix(q):
    """3x3 rotation matrix for a scalar-last unit quaternion."""
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def quat_rotation_angle(q):
    """Rotation angle in radians encoded by a unit quaternion."""
    v = np.linalg.norm(q[:3])
    return 2.0 * np.arctan2(v, abs(q[3]))


def quat_from_matrix(m):
    """Scalar-last unit quaternion for a rotation matrix.

    Uses the largest-pivot branch selection so the square root argument
    stays well away from zero for every input.
    """
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0.0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array([
            (m[2, 1] - m[1, 2]) / s,
            (m[0, 2] - m[2, 0]) / s,
            (m[1, 0] - m[0, 1]) / s,
            0.25 * s,
        ])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array([
            0.25 * s,
            (m[0, 1] + m[1, 0]) / s,
            (m[0, 2] + m[2, 0]) / s,
            (m[2, 1] - m[1, 2]) / s,
        ])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array([
            (m[0, 1] + m[1, 0]) / s,
            0.25 * s,
            (m[1, 2] + m[2, 1]) / s,
            (m[0, 2] - m[2, 0]) / s,
        ])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array([
            (m[0, 2] + m[2, 0]) / s,
            (m[1, 2] + m[2, 1]) / s,
            0.25 * s,
            (m[1, 0] - m[0, 1]) / s,
        ])
    return quat_normalize(q)


def skew(v):
    """Cross-product matrix such that skew(a) @ b == np.cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def skew_batch(v):
    """Stack of cross-product matrices for an (N, 3) array."""
    n = v.shape[0]
    out = np.zeros((n, 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


# ---------------------------------------------------------------------------
# Pose and camera types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform mapping world coordinates into the camera frame.

    Attributes
    ----------
    q : np.ndarray, shape (4,)
        Unit quaternion, scalar last. Normalized on construction.
    t : np.ndarray, shape (3,)
        Translation, applied after the rotation.
    """

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = quat_normalize(np.asarray(self.q, dtype=np.float64))
        t = np.array(self.t, dtype=np.float64).reshape(3)
        q.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def rotation_matrix(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        """Homogeneous 4x4 form."""
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix()
        m[:3, 3] = self.t
        return m

    def compose(self, other):
        """self after other: returns the transform X -> self(other(X))."""
        q = quat_multiply(self.q, other.q)
        t = self.rotation_matrix() @ other.t + self.t
        return Se3Pose(q, t)

    def inverse(self):
        qi = quat_conjugate(self.q)
        r_inv = quat_to_matrix(qi)
        return Se3Pose(qi, -(r_inv @ self.t))

    def apply(self, point):
        """Map a world point (3,) into the camera frame."""
        return self.rotation_matrix() @ np.asarray(point, dtype=np.float64) + self.t


def se3_exp(delta):
    """Exponential map from a 6-vector [rho, phi] to an Se3Pose.

    The rotation is exp(phi) and the translation is V(phi) @ rho with the
    usual left Jacobian V, so exp(delta) composed with exp(-delta) is the
    identity exactly.
    """
    delta = np.asarray(delta, dtype=np.float64).reshape(6)
    rho, phi = delta[:3], delta[3:]
    theta2 = float(phi @ phi)
    theta = np.sqrt(theta2)
    K = skew(phi)
    if theta < 1e-6:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    V = np.eye(3) + a * K + b * (K @ K)
    return Se3Pose(quat_from_rotvec(phi), V @ rho)


def se3_retract(pose, delta):
    """Left-multiplicative update exp(delta) o pose."""
    return se3_exp(delta).compose(pose)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics plus image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def contains(self, u, v):
        return 0.0 <= u < self.width and 0.0 <= v < self.height


@dataclass(frozen=True)
class Pixel:
    u: float
    v: float

    def as_array(self):
        return np.array([self.u, self.v], dtype=np.float64)


# ---------------------------------------------------------------------------
# Projection operators
# ---------------------------------------------------------------------------

def backproject(intr, px, inv_depth):
    """Lift a pixel and inverse depth to a camera-frame 3D point.

    Raises
    ------
    InvalidDepthError
        If inv_depth is not strictly positive and finite.
    """
    d = float(inv_depth)
    if not np.isfinite(d) or d <= 0.0:
        raise InvalidDepthError(f"inverse depth must be positive, got {d}")
    x = (px.u - intr.cx) / intr.fx
    y = (px.v - intr.cy) / intr.fy
    return np.array([x, y, 1.0]) / d


def project(intr, point):
    """Project a camera-frame point to a pixel.

    Raises
    ------
    BehindCameraError
        If the point depth is at or below Z_MIN.
    """
    x, y, z = point
    if z <= Z_MIN:
        raise BehindCameraError(f"point depth {z} is behind the camera")
    return Pixel(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def reproject(pose_i, pose_j, intr, px, inv_depth):
    """Map a pixel observed in frame i into frame j.

    The pixel is lifted with its inverse depth in frame i, moved through
    pose_j o pose_i^-1, and projected into frame j.
    """
    rel = pose_j.compose(pose_i.inverse())
    p_i = backproject(intr, px, inv_depth)
    return project(intr, rel.apply(p_i))


def reproject_jacobians(pose_i, pose_j, intr, px, inv_depth):
    """Predicted pixel in frame j and its analytic Jacobians.

    Returns
    -------
    pred : Pixel
        Projection of the lifted pixel into frame j.
    j_pose_i : np.ndarray, shape (2, 6)
        Derivative of the prediction with respect to a left-multiplicative
        perturbation of pose_i.
    j_pose_j : np.ndarray, shape (2, 6)
        Same for pose_j.
    j_depth : np.ndarray, shape (2,)
        Derivative with respect to the inverse depth.
    """
    rel = pose_j.compose(pose_i.inverse())
    r_ji = rel.rotation_matrix()
    p_i = backproject(intr, px, inv_depth)
    x = r_ji @ p_i + rel.t
    if x[2] <= Z_MIN:
        raise BehindCameraError(f"target depth {x[2]} is behind the camera")
    pred = project(intr, x)

    z_inv = 1.0 / x[2]
    j_proj = np.array([
        [intr.fx * z_inv, 0.0, -intr.fx * x[0] * z_inv * z_inv],
        [0.0, intr.fy * z_inv, -intr.fy * x[1] * z_inv * z_inv],
    ])
    # Left perturbation of pose_j moves X by [I | -skew(X)].
    j_pose_j = np.hstack([j_proj, -j_proj @ skew(x)])
    # Left perturbation of pose_i enters through rel = pose_j o pose_i^-1,
    # which perturbs the lifted point by R_ji @ [-I | skew(P_i)].
    ja = j_proj @ r_ji
    j_pose_i = np.hstack([-ja, ja @ skew(p_i)])
    j_depth = -(j_proj @ (x - rel.t)) / float(inv_depth)
    return pred, j_pose_i, j_pose_j, j_depth


# ---------------------------------------------------------------------------
# Vectorized forms used by the optimizer
# ---------------------------------------------------------------------------

def backproject_batch(intr, centers, inv_depths):
    """Lift (N, 2) pixel centers with (N,) inverse depths to (N, 3) points."""
    x = (centers[:, 0] - intr.cx) / intr.fx
    y = (centers[:, 1] - intr.cy) / intr.fy
    pn = np.stack([x, y, np.ones_like(x)], axis=1)
    return pn / inv_depths[:, None]


def linearize_reprojection_batch(r_ji, t_ji, p_i, inv_depths, intr):
    """Vectorized predictions and Jacobians for a set of observations.

    Parameters
    ----------
    r_ji : (N, 3, 3) relative rotations pose_j o pose_i^-1.
    t_ji : (N, 3) relative translations.
    p_i : (N, 3) lifted points in their host camera frame.
    inv_depths : (N,) inverse depths used for the lift.
    intr : CameraIntrinsics.

    Returns
    -------
    pred : (N, 2) predicted pixels (NaN where invalid).
    valid : (N,) bool, False where the transformed point is behind the camera.
    j_pose_i, j_pose_j : (N, 2, 6) Jacobians, zero rows where invalid.
    j_depth : (N, 2) Jacobians, zero where invalid.

    The scalar reproject_jacobians above computes the same quantities one
    observation at a time; the two paths are held together by tests.
    """
    x = np.einsum("nab,nb->na", r_ji, p_i) + t_ji
    valid = x[:, 2] > Z_MIN
    z = np.where(valid, x[:, 2], 1.0)
    z_inv = 1.0 / z

    pred = np.empty((x.shape[0], 2))
    pred[:, 0] = intr.fx * x[:, 0] * z_inv + intr.cx
    pred[:, 1] = intr.fy * x[:, 1] * z_inv + intr.cy
    pred[~valid] = np.nan

    j_proj = np.zeros((x.shape[0], 2, 3))
    j_proj[:, 0, 0] = intr.fx * z_inv
    j_proj[:, 0, 2] = -intr.fx * x[:, 0] * z_inv * z_inv
    j_proj[:, 1, 1] = intr.fy * z_inv
    j_proj[:, 1, 2] = -intr.fy * x[:, 1] * z_inv * z_inv
    j_proj[~valid] = 0.0

    j_pose_j = np.concatenate(
        [j_proj, -np.einsum("nab,nbc->nac", j_proj, skew_batch(x))], axis=2
    )
    ja = np.einsum("nab,nbc->nac", j_proj, r_ji)
    j_pose_i = np.concatenate(
        [-ja, np.einsum("nab,nbc->nac", ja, skew_batch(p_i))], axis=2
    )
    j_depth = -np.einsum("nab,nb->na", j_proj, x - t_ji) / inv_depths[:, None]
    return pred, valid, j_pose_i, j_pose_j, j_depth
