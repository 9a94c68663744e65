"""Core geometry: quaternions, Gaussian covariance, projection and lifting.

Quaternions use (w, x, y, z) order.  The 3D covariance of a Gaussian is
Sigma = R(q) diag(s)^2 R(q)^T, so det(Sigma) = (s1 s2 s3)^2 and Sigma is
symmetric positive definite for positive scales.

Projection follows the pinhole model of `scene.Camera`:

    t = R_wc x + t_wc          (camera frame, depth = t_z)
    u = fx t_x / t_z + cx
    v = fy t_y / t_z + cy

and lifting is the exact inverse given a depth, so
lift(project(x)) == x up to round-off.
"""
from __future__ import annotations

import numpy as np

from .errors import BehindCameraError, InvalidArgumentError
from .scene import Camera

QUAT_TOL = 1e-3  # how far from unit a caller-supplied quaternion may drift


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0 or not np.isfinite(n):
        raise InvalidArgumentError("cannot normalize a zero or non-finite quaternion")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product a * b, both (w, x, y, z)."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    bw, bx, by, bz = np.asarray(b, dtype=np.float64)
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix of a quaternion; normalizes the input first."""
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rots(q: np.ndarray) -> np.ndarray:
    """Batch (N, 4) -> (N, 3, 3); normalizes each row."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=1, keepdims=True)
    if q.size and n.min() == 0.0:
        raise InvalidArgumentError("zero quaternion in batch")
    w, x, y, z = (q / n).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rot_to_quat(R) -> np.ndarray:
    """Quaternion (w, x, y, z) of a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise InvalidArgumentError("rotation matrix must be 3x3")
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s,
                      (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s,
                      0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def axis_angle_rot(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        raise InvalidArgumentError("rotation axis must be nonzero")
    ux, uy, uz = axis / n
    c, s = np.cos(angle), np.sin(angle)
    C = 1.0 - c
    return np.array([
        [c + ux * ux * C, ux * uy * C - uz * s, ux * uz * C + uy * s],
        [uy * ux * C + uz * s, c + uy * uy * C, uy * uz * C - ux * s],
        [uz * ux * C - uy * s, uz * uy * C + ux * s, c + uz * uz * C],
    ])


def covariance_3d(scale, q) -> np.ndarray:
    """World covariance R diag(s)^2 R^T of one Gaussian.

    Raises for non-positive scales or a quaternion further than QUAT_TOL
    from unit length.
    """
    s = np.asarray(scale, dtype=np.float64)
    if s.shape != (3,):
        raise InvalidArgumentError(f"scale must be (3,), got {s.shape}")
    if not np.all(np.isfinite(s)) or s.min() <= 0:
        raise InvalidArgumentError("scales must be positive and finite")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise InvalidArgumentError(f"quaternion must be (4,), got {q.shape}")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise InvalidArgumentError(
            f"quaternion norm {np.linalg.norm(q):.6f} too far from 1"
        )
    R = quat_to_rot(q)
    return (R * s**2) @ R.T


def covariances_3d(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """Batch (N, 3) x (N, 4) -> (N, 3, 3), no per-row validation."""
    R = quats_to_rots(quats)
    s2 = np.asarray(scales, dtype=np.float64) ** 2
    return np.einsum("nij,nj,nkj->nik", R, s2, R)


def project_point(camera: Camera, x):
    """Project a world point; returns (u, v, depth).

    Raises BehindCameraError when the camera-frame depth is <= 0; points
    beyond the depth range still project (range culling is the rasterizer's
    business, not this function's).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,):
        raise InvalidArgumentError(f"point must be (3,), got {x.shape}")
    t = camera.R @ x + camera.t
    if t[2] <= 0.0:
        raise BehindCameraError(f"point has camera depth {t[2]:.6g}")
    u = camera.fx * t[0] / t[2] + camera.cx
    v = camera.fy * t[1] / t[2] + camera.cy
    return float(u), float(v), float(t[2])


def lift_pixel(camera: Camera, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse of project_point for a given positive depth; world point."""
    if not np.isfinite(depth) or depth <= 0.0:
        raise InvalidArgumentError(f"depth must be positive and finite, got {depth}")
    cam = np.array([
        depth * (u - camera.cx) / camera.fx,
        depth * (v - camera.cy) / camera.fy,
        depth,
    ])
    return camera.R.T @ (cam - camera.t)


def lift_pixels(camera: Camera, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
    """Batch lift: (M, 2) pixel coordinates and (M,) depths -> (M, 3) world."""
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if depth.size and (not np.all(np.isfinite(depth)) or depth.min() <= 0):
        raise InvalidArgumentError("depths must be positive and finite")
    cam = np.empty((uv.shape[0], 3))
    cam[:, 0] = depth * (uv[:, 0] - camera.cx) / camera.fx
    cam[:, 1] = depth * (uv[:, 1] - camera.cy) / camera.fy
    cam[:, 2] = depth
    return (cam - camera.t) @ camera.R


def slerp(q0, q1, t: float) -> np.ndarray:
    """Spherical interpolation between unit quaternions, shortest arc."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1, dot = -q1, -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(q0 + t * (q1 - q0))
    theta = np.arccos(min(dot, 1.0))
    sin_theta = np.sin(theta)
    return (np.sin((1 - t) * theta) * q0 + np.sin(t * theta) * q1) / sin_theta


def interpolate_camera(cam0: Camera, cam1: Camera, t: float) -> Camera:
    """Pose interpolation: slerp on rotation, lerp on translation.

    Both cameras must share intrinsics, image size, and depth range.
    """
    for name in ("fx", "fy", "cx", "cy", "width", "height", "z_near", "z_far"):
        if getattr(cam0, name) != getattr(cam1, name):
            raise InvalidArgumentError(f"cameras differ in {name}; cannot interpolate")
    if not 0.0 <= t <= 1.0:
        raise InvalidArgumentError(f"interpolation parameter must be in [0, 1], got {t}")
    q = slerp(rot_to_quat(cam0.R), rot_to_quat(cam1.R), t)
    trans = (1.0 - t) * cam0.t + t * cam1.t
    T = np.eye(4)
    T[:3, :3] = quat_to_rot(q)
    T[:3, 3] = trans
    return cam0.with_T(T)


def orbit_camera(camera: Camera, yaw: float, pivot) -> Camera:
    """Rotate the camera about the vertical axis through a world pivot.

    Vertical means the camera's own up direction (-y row of R), so the pivot
    stays on the principal ray when it started there.  yaw is in radians,
    positive toward the camera's right.
    """
    pivot = np.asarray(pivot, dtype=np.float64)
    if pivot.shape != (3,):
        raise InvalidArgumentError("pivot must be a world point (3,)")
    up = -camera.R[1]
    S = axis_angle_rot(up, yaw)
    center = pivot + S @ (camera.center - pivot)
    R = camera.R @ S.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ center
    return camera.with_T(T)


def look_at_camera(center, target, up, *, fx, fy, cx, cy, width, height,
                   z_near=0.5, z_far=10.0) -> Camera:
    """Build a camera at `center` looking toward `target`."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - center
    n = np.linalg.norm(fwd)
    if n == 0:
        raise InvalidArgumentError("camera center and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise InvalidArgumentError("up vector is parallel to the view direction")
    right /= nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = -R @ center
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  T=T, z_near=z_near, z_far=z_far)
