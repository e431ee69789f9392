"""Rigid-chain kinematics: quaternion algebra, forward kinematics, Jacobians."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidStateError
from .model import QUAT_NORM_TOL, SmsModel, SmsState


def skew(r: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix of r, so that skew(r) @ v == cross(r, v)."""
    r0, r1, r2 = r
    return np.array([
        [0.0, -r2, r1],
        [r2, 0.0, -r0],
        [-r1, r0, 0.0],
    ])


def quat_to_rotation(eps: np.ndarray) -> np.ndarray:
    """Rotation matrix (body -> inertial) of a vector-first unit quaternion."""
    x, y, z, w = eps
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array([
        [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
        [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
        [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
    ])


def quat_multiply(p: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Quaternion product with R(p @ r) == R(p) @ R(r), vector-first storage."""
    pv, p4 = p[:3], p[3]
    rv, r4 = r[:3], r[3]
    return np.concatenate([p4 * rv + r4 * pv + np.cross(pv, rv), [p4 * r4 - pv @ rv]])


def quat_kinematic_matrix(eps: np.ndarray) -> np.ndarray:
    """4x3 matrix G with eps_dot = 0.5 * G(eps) @ w_body."""
    e1, e2, e3, e4 = eps
    return np.array([
        [e4, -e3, e2],
        [e3, e4, -e1],
        [-e2, e1, e4],
        [-e1, -e2, -e3],
    ])


def quat_rate(eps: np.ndarray, w_body: np.ndarray) -> np.ndarray:
    """Quaternion derivative under angular velocity resolved in the base frame.

    The flow is norm-preserving: eps . quat_rate(eps, w) == 0.
    """
    nrm_err = abs(float(eps @ eps) - 1.0)
    if nrm_err > QUAT_NORM_TOL:
        raise InvalidStateError(f"quaternion norm off by {nrm_err:.3e}, beyond tolerance")
    return 0.5 * quat_kinematic_matrix(eps) @ w_body


@dataclass
class KinematicsCache:
    """Inertial-frame poses of everything downstream of the base.

    p: (n,3) joint positions; r: (n,3) link COM positions; r_e: (3,)
    end-effector position; r_b: base COM; R_b: base rotation; R: (n,3,3)
    link rotations; axes: (n,3) joint axes in the inertial frame.
    """

    p: np.ndarray
    r: np.ndarray
    r_e: np.ndarray
    r_b: np.ndarray
    R_b: np.ndarray
    R: np.ndarray
    axes: np.ndarray


def _axis_rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis."""
    c, s = np.cos(angle), np.sin(angle)
    K = skew(axis)
    return c * np.eye(3) + s * K + (1.0 - c) * np.outer(axis, axis)


def forward_kinematics(model: SmsModel, state: SmsState) -> KinematicsCache:
    """Compose the rigid chain from base pose and joint angles."""
    n = model.n
    R_b = quat_to_rotation(state.eps)
    p = np.empty((n, 3))
    r = np.empty((n, 3))
    R = np.empty((n, 3, 3))
    axes = np.empty((n, 3))

    R_parent = R_b
    p_joint = state.r_b + R_b @ model.mount_offset
    for i in range(n):
        axes[i] = R_parent @ model.joint_axes[i]
        R_i = R_parent @ _axis_rotation(model.joint_axes[i], state.q[i])
        p[i] = p_joint
        R[i] = R_i
        r[i] = p_joint + R_i @ model.link_com_offset[i]
        p_joint = p_joint + R_i @ model.link_tip_offset[i]
        R_parent = R_i
    return KinematicsCache(p=p, r=r, r_e=p_joint, r_b=state.r_b.copy(), R_b=R_b, R=R, axes=axes)


@dataclass
class Jacobians:
    """Point Jacobians of the chain with respect to (v_b, w_b, qd).

    J_te/J_re: end-effector translational/rotational 3xn blocks.
    J_ti/J_ri: per-link COM Jacobians, columns beyond the link index zero.
    J_b: 6x6 base-to-end-effector map; J_m: 6xn manipulator map.
    """

    J_te: np.ndarray
    J_re: np.ndarray
    J_ti: np.ndarray
    J_ri: np.ndarray
    J_b: np.ndarray
    J_m: np.ndarray


def link_jacobians(model: SmsModel, cache: KinematicsCache) -> Jacobians:
    n = model.n
    axes = cache.axes
    J_te = np.cross(axes, cache.r_e - cache.p).T
    J_re = axes.T

    J_ti = np.zeros((n, 3, n))
    J_ri = np.zeros((n, 3, n))
    for i in range(n):
        rel = cache.r[i] - cache.p[: i + 1]
        J_ti[i, :, : i + 1] = np.cross(axes[: i + 1], rel).T
        J_ri[i, :, : i + 1] = axes[: i + 1].T

    J_b = np.eye(6)
    J_b[:3, 3:] = skew(cache.r_e - cache.r_b).T
    return Jacobians(J_te=J_te, J_re=J_re, J_ti=J_ti, J_ri=J_ri, J_b=J_b, J_m=np.vstack([J_te, J_re]))
