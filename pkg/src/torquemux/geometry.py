"""Rotation and pose helpers shared by kinematics, controllers and plants."""

from __future__ import annotations

import numpy as np

from ._kernels import segment_closest_points


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    k = skew(axis)
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rpy_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw: Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return rz @ ry @ rx


def rotation_vector(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (angle in [0, pi])."""
    trace = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < 1e-12:
        # first-order: R ~ I + skew(w)
        return 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if np.pi - angle < 1e-6:
        # near pi the skew part vanishes; recover the axis from the diagonal
        axis = np.sqrt(np.maximum(np.diag(R) - np.cos(angle), 0.0) / (1.0 - np.cos(angle)))
        # fix signs from the off-diagonal sums
        if R[0, 1] + R[1, 0] < 0:
            axis[1] = -axis[1]
        if R[0, 2] + R[2, 0] < 0:
            axis[2] = -axis[2]
        if R[2, 1] - R[1, 2] < 0:
            axis = -axis
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            axis = np.array([1.0, 0.0, 0.0])
            norm = 1.0
        return angle * axis / norm
    vee = 0.5 / np.sin(angle) * np.array(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return angle * vee


def orientation_error(R_current: np.ndarray, R_desired: np.ndarray) -> np.ndarray:
    """Rotation error 'current minus desired' as an axis-angle vector in the
    base frame.  Zero iff the frames coincide; paired with a negative gain it
    drives the current frame onto the desired one.

    Identical matrices short-circuit to an exact zero: R R^T rounds away
    from the identity in floats, and a controller sitting at its fixed
    point must output an exact zero wrench, not a 1e-16 one."""
    if R_current is R_desired or np.array_equal(R_current, R_desired):
        return np.zeros(3)
    return rotation_vector(R_current @ R_desired.T)


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(1.0 + R[i, i] - R[j, j] - R[k, k], 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def segment_distance(a0: np.ndarray, a1: np.ndarray, b0: np.ndarray, b1: np.ndarray):
    """Closest points between segments a0-a1 and b0-b1.

    Returns (distance, point_on_a, point_on_b).  Distance is zero for
    intersecting or coincident segments; callers needing a separation
    direction must handle that case themselves.
    """
    d, pa, pb = segment_closest_points(
        np.ascontiguousarray(a0, dtype=np.float64),
        np.ascontiguousarray(a1, dtype=np.float64),
        np.ascontiguousarray(b0, dtype=np.float64),
        np.ascontiguousarray(b1, dtype=np.float64))
    return d, pa, pb
